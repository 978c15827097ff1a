"""Dense tensors on a reverse-mode gradient tape.

The engine is deliberately small: numpy holds the buffers, a ``Tape``
records one forward pass, and ``Tape.backward`` runs a single reverse
sweep.  Nodes are appended in construction order, which is already a
topological order (every operand of an op is recorded before the op
itself), so the sweep visits each node exactly once.

Every forward op validates its output for NaN/Inf and raises
``NonFiniteError`` instead of letting bad values propagate.  The default
compute dtype is float32; gradient-check runs build a ``Tape`` with
``dtype=np.float64`` which switches the whole graph to double precision.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateSlotError, NonFiniteError

DEGENERATE_EPS = 1e-12

Axis = int | tuple[int, ...] | None


class Tape:
    """Append-only op record for one training step or gradient check.

    A tape is single-owner: built and consumed by one execution context,
    then discarded.  ``gradients`` maps node id -> gradient array and is
    populated by :meth:`backward`.
    """

    def __init__(self, dtype: np.dtype | type | str = np.float32):
        self.dtype = np.dtype(dtype)
        self._inputs: list[tuple[int, ...]] = []
        self._backwards: list[Callable[[np.ndarray], Sequence[np.ndarray | None]] | None] = []
        self.gradients: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._inputs)

    def leaf(self, data: np.ndarray | float | Sequence) -> "Tensor":
        """Register ``data`` as a tracked leaf (typically a trainable parameter)."""
        arr = np.array(data, dtype=self.dtype)
        nid = self._record((), None)
        return Tensor(arr, self, nid)

    def _record(self, input_ids: tuple[int, ...], backward) -> int:
        nid = len(self._inputs)
        self._inputs.append(input_ids)
        self._backwards.append(backward)
        return nid

    def backward(self, loss: "Tensor") -> None:
        """Propagate d(loss)/d(node) to every node reachable from ``loss``.

        ``loss`` must be a scalar on this tape.  Fan-out accumulates by
        summation; nodes that do not influence the loss receive no entry.
        """
        if loss.tape is not self:
            raise ValueError("loss tensor does not belong to this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._inputs)
        grads[loss.node] = np.ones_like(loss.data)
        for nid in range(loss.node, -1, -1):
            gout = grads[nid]
            if gout is None:
                continue
            bwd = self._backwards[nid]
            if bwd is None:  # leaf
                continue
            for iid, gin in zip(self._inputs[nid], bwd(gout)):
                if iid < 0 or gin is None:
                    continue
                if grads[iid] is None:
                    grads[iid] = gin
                else:
                    grads[iid] = grads[iid] + gin
        self.gradients = {i: g for i, g in enumerate(grads) if g is not None}

    def grad(self, t: "Tensor") -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. ``t`` (zeros if unused)."""
        if t.tape is not self:
            raise ValueError("tensor does not belong to this tape")
        g = self.gradients.get(t.node)
        if g is None:
            return np.zeros_like(t.data)
        return g


class Tensor:
    """An n-d float array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data: np.ndarray, tape: Tape | None = None, node: int = -1):
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no tape attachment (constant from here on)."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: tuple[int, ...] | None = None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis: Axis = None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False):
        return tmean(self, axis, keepdims)


# ---------------------------------------------------------------------------
# op plumbing


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"op '{op}' produced NaN/Inf")


def _tape_of(operands: Iterable) -> Tape | None:
    tape = None
    for x in operands:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _data(x, dtype: np.dtype | None) -> np.ndarray:
    if isinstance(x, Tensor):
        arr = x.data
    else:
        arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def _result(op: str, out: np.ndarray, operands: Sequence, backward) -> Tensor:
    """Wrap ``out``; record a node when any operand is tracked.

    ``backward(gout)`` must return one gradient per operand, aligned with
    ``operands`` order, already reduced to the operand shapes.
    """
    _check_finite(op, out)
    tape = _tape_of(operands)
    if tape is None:
        return Tensor(out)
    ids = tuple(
        x.node if isinstance(x, Tensor) and x.tape is tape else -1 for x in operands
    )
    nid = tape._record(ids, backward)
    return Tensor(out, tape, nid)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out dims that numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _op_dtype(operands: Sequence) -> np.dtype | None:
    tape = _tape_of(operands)
    if tape is not None:
        return tape.dtype
    for x in operands:
        if isinstance(x, Tensor):
            return x.data.dtype
        if isinstance(x, np.ndarray) and x.dtype.kind == "f":
            return x.dtype
    return None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    dt = _op_dtype((a, b))
    da, db = _data(a, dt), _data(b, dt)
    out = da + db

    def backward(g):
        return _unbroadcast(g, da.shape), _unbroadcast(g, db.shape)

    return _result("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    dt = _op_dtype((a, b))
    da, db = _data(a, dt), _data(b, dt)
    out = da - db

    def backward(g):
        return _unbroadcast(g, da.shape), _unbroadcast(-g, db.shape)

    return _result("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    dt = _op_dtype((a, b))
    da, db = _data(a, dt), _data(b, dt)
    out = da * db

    def backward(g):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return _result("mul", out, (a, b), backward)


def div(a, b) -> Tensor:
    dt = _op_dtype((a, b))
    da, db = _data(a, dt), _data(b, dt)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = da / db

    def backward(g):
        ga = _unbroadcast(g / db, da.shape)
        gb = _unbroadcast(-g * da / (db * db), db.shape)
        return ga, gb

    return _result("div", out, (a, b), backward)


def neg(a) -> Tensor:
    da = _data(a, _op_dtype((a,)))
    return _result("neg", -da, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """2-D matrix product with the standard gradient rule."""
    dt = _op_dtype((a, b))
    da, db = _data(a, dt), _data(b, dt)
    if da.ndim != 2 or db.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {da.shape} @ {db.shape}")
    if da.shape[1] != db.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {da.shape} @ {db.shape}")
    out = da @ db

    def backward(g):
        return g @ db.T, da.T @ g

    return _result("matmul", out, (a, b), backward)


def relu(a) -> Tensor:
    da = _data(a, _op_dtype((a,)))
    out = np.maximum(da, 0)

    def backward(g):
        return (g * (da > 0),)

    return _result("relu", out, (a,), backward)


def sigmoid(a) -> Tensor:
    da = _data(a, _op_dtype((a,)))
    out = 1.0 / (1.0 + np.exp(-da))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result("sigmoid", out, (a,), backward)


def tanh(a) -> Tensor:
    da = _data(a, _op_dtype((a,)))
    out = np.tanh(da)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _result("tanh", out, (a,), backward)


def exp(a) -> Tensor:
    da = _data(a, _op_dtype((a,)))
    with np.errstate(over="ignore"):
        out = np.exp(da)

    def backward(g):
        return (g * out,)

    return _result("exp", out, (a,), backward)


def log(a) -> Tensor:
    da = _data(a, _op_dtype((a,)))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(da)

    def backward(g):
        return (g / da,)

    return _result("log", out, (a,), backward)


def sqrt(a) -> Tensor:
    da = _data(a, _op_dtype((a,)))
    with np.errstate(invalid="ignore"):
        out = np.sqrt(da)

    def backward(g):
        return (g / (2.0 * out),)

    return _result("sqrt", out, (a,), backward)


def tsum(a, axis: Axis = None, keepdims: bool = False) -> Tensor:
    da = _data(a, _op_dtype((a,)))
    out = da.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, da.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, da.shape).copy(),)

    return _result("sum", np.asarray(out), (a,), backward)


def tmean(a, axis: Axis = None, keepdims: bool = False) -> Tensor:
    da = _data(a, _op_dtype((a,)))
    out = da.mean(axis=axis, keepdims=keepdims)
    count = da.size if axis is None else np.prod(
        [da.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, da.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, da.shape).copy(),)

    return _result("mean", np.asarray(out), (a,), backward)


def reshape(a, shape) -> Tensor:
    da = _data(a, _op_dtype((a,)))
    out = da.reshape(shape)

    def backward(g):
        return (g.reshape(da.shape),)

    return _result("reshape", out, (a,), backward)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    da = _data(a, _op_dtype((a,)))
    out = np.transpose(da, axes)
    if axes is None:
        inv: tuple[int, ...] | None = None
    else:
        inv = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _result("transpose", out, (a,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    dt = _op_dtype(tuple(parts))
    datas = [_data(p, dt) for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(datas)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return grads

    return _result("concat", out, tuple(parts), backward)


def getitem(a, idx) -> Tensor:
    """Basic slicing/integer indexing; gradient scatters into zeros."""
    da = _data(a, _op_dtype((a,)))
    out = da[idx]

    def backward(g):
        full = np.zeros_like(da)
        full[idx] = g
        return (full,)

    return _result("getitem", np.ascontiguousarray(out), (a,), backward)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    da = _data(a, _op_dtype((a,)))
    out = np.broadcast_to(da, shape).copy()

    def backward(g):
        return (_unbroadcast(g, da.shape),)

    return _result("broadcast_to", out, (a,), backward)


# ---------------------------------------------------------------------------
# composite helpers (differentiable through the primitives above)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b); ``w`` is stored input-major: shape (in, out)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Stable softmax: the max shift is a detached constant, which leaves
    both the value and the gradient of the exact softmax unchanged."""
    shift = np.max(_data(x, None), axis=axis, keepdims=True)
    e = exp(sub(x, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise affine."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def l2_norm(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return sqrt(tsum(mul(x, x), axis=axis, keepdims=keepdims))


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Rows scaled to unit norm; raises if any row is degenerate."""
    norms = l2_norm(x, axis=axis, keepdims=True)
    if np.min(norms.data) < DEGENERATE_EPS:
        raise DegenerateSlotError(
            f"vector norm {float(np.min(norms.data)):.3e} below {DEGENERATE_EPS:.0e}"
        )
    return div(x, norms)


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two vectors, in [-1, 1].

    Raises ``DegenerateSlotError`` when either norm falls below 1e-12.
    """
    na = l2_norm(a)
    nb = l2_norm(b)
    if na.item() < DEGENERATE_EPS or nb.item() < DEGENERATE_EPS:
        raise DegenerateSlotError("cosine of a (near-)zero vector is undefined")
    return div(tsum(mul(a, b)), mul(na, nb))


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap an array-like as an untracked constant Tensor."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)
