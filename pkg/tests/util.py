"""Shared test oracles, independent of the implementation paths they check."""

from __future__ import annotations

import numpy as np

from slotforge.tensor import Tape


def numeric_gradients(fn, arrays, h=1e-5):
    """Central finite differences of a scalar function of numpy arrays.

    ``fn(list_of_arrays) -> float`` is evaluated in double precision.
    Returns one gradient array per input.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(arrays)
            flat[i] = orig - h
            down = fn(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def tape_gradients(build, arrays):
    """Analytic gradients of ``build(tape, leaves) -> scalar Tensor``."""
    tape = Tape(dtype=np.float64)
    leaves = [tape.leaf(a) for a in arrays]
    loss = build(tape, leaves)
    tape.backward(loss)
    return [tape.grad(leaf) for leaf in leaves]


def max_rel_err(analytic, numeric):
    """max |a - n| / max(1, |a|, |n|), elementwise, over all inputs."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradcheck(build, arrays, tol=1e-4, h=1e-5):
    """Compare tape gradients against central differences.

    ``build(tape_or_none, tensors_or_arrays) -> scalar`` must work both on
    tape Tensors and on raw float64 arrays (the numeric path wraps arrays
    as constants through the same code).
    """
    analytic = tape_gradients(build, arrays)

    def scalar_fn(arrs):
        tape = Tape(dtype=np.float64)
        leaves = [tape.leaf(a) for a in arrs]
        return build(tape, leaves).item()

    numeric = numeric_gradients(scalar_fn, arrays, h=h)
    err = max_rel_err(analytic, numeric)
    assert err <= tol, f"gradcheck failed: max rel err {err:.3e} > {tol:.0e}"
    return err
