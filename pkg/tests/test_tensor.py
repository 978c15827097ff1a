import numpy as np
import pytest

from slotforge.errors import DegenerateSlotError, NonFiniteError
from slotforge.tensor import (
    Tape,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    cosine_sim,
    exp,
    l2_norm,
    l2_normalize,
    layer_norm,
    linear,
    log,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    tanh,
    tmean,
    transpose,
    tsum,
)

from util import gradcheck


RNG = np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity():
    eye = as_tensor(np.eye(2))
    m = as_tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.allclose(matmul(eye, m).data, m.data)


def test_matmul_projection():
    p = as_tensor([[1.0, 0.0], [0.0, 0.0]])
    v = as_tensor([[5.0], [7.0]])
    assert np.allclose(matmul(p, v).data, [[5.0], [0.0]])


def test_matmul_matches_triple_loop():
    a = RNG.standard_normal((3, 4))
    b = RNG.standard_normal((4, 2))
    out = matmul(as_tensor(a), as_tensor(b)).data
    oracle = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                oracle[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(out - oracle)) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(as_tensor(np.ones((2, 3))), as_tensor(np.ones((2, 3))))


def test_softmax_uniform():
    out = softmax(as_tensor([0.0, 0.0, 0.0]), axis=0).data
    assert np.allclose(out, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_no_overflow():
    out = softmax(as_tensor([1000.0, 0.0]), axis=0).data
    assert np.all(np.isfinite(out))
    assert out[0] > 0.999999 and out[1] < 1e-6


def test_softmax_matches_exp_normalize():
    x = np.array([1.0, 2.0, 3.0])
    out = softmax(as_tensor(x), axis=0).data
    oracle = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(out - oracle)) < 1e-12


def test_softmax_sums_to_one_random():
    for _ in range(20):
        x = RNG.standard_normal((4, 7)) * RNG.uniform(0.1, 50)
        out = softmax(as_tensor(x), axis=1).data
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-9
        assert np.all(out >= 0)


def test_cosine_trivial_cases():
    assert cosine_sim(as_tensor([1.0, 0.0]), as_tensor([1.0, 0.0])).item() == pytest.approx(1.0)
    assert cosine_sim(as_tensor([1.0, 0.0]), as_tensor([0.0, 1.0])).item() == pytest.approx(0.0)
    assert cosine_sim(as_tensor([1.0, 0.0]), as_tensor([-1.0, 0.0])).item() == pytest.approx(-1.0)


def test_cosine_self_and_scale_invariance():
    for _ in range(20):
        a = RNG.standard_normal(6)
        b = RNG.standard_normal(6)
        alpha, beta = RNG.uniform(0.1, 10, size=2)
        c_ab = cosine_sim(as_tensor(a), as_tensor(b)).item()
        c_scaled = cosine_sim(as_tensor(alpha * a), as_tensor(beta * b)).item()
        c_ba = cosine_sim(as_tensor(b), as_tensor(a)).item()
        assert abs(cosine_sim(as_tensor(a), as_tensor(a)).item() - 1.0) < 1e-9
        assert abs(c_ab - c_scaled) < 1e-9
        assert abs(c_ab - c_ba) < 1e-9
        assert -1.0 - 1e-12 <= c_ab <= 1.0 + 1e-12


def test_cosine_degenerate_raises():
    with pytest.raises(DegenerateSlotError):
        cosine_sim(as_tensor([0.0, 0.0]), as_tensor([1.0, 0.0]))


def test_nonfinite_surfaced():
    with pytest.raises(NonFiniteError):
        log(as_tensor([0.0]))
    with pytest.raises(NonFiniteError):
        exp(as_tensor([1e5]))
    with pytest.raises(NonFiniteError):
        as_tensor([1.0]) / as_tensor([0.0])


# ---------------------------------------------------------------------------
# backward basics


def test_backward_sum_of_vector():
    tape = Tape(np.float64)
    w = tape.leaf([1.0, 2.0, 3.0])
    tape.backward(tsum(w))
    assert np.allclose(tape.grad(w), [1.0, 1.0, 1.0])


def test_backward_squared_norm():
    tape = Tape(np.float64)
    w = tape.leaf([1.0, 2.0])
    tape.backward(tsum(w * w))
    assert np.allclose(tape.grad(w), [2.0, 4.0])


def test_backward_fanout_accumulates():
    # y = x * x uses x twice; gradient must sum both path contributions.
    tape = Tape(np.float64)
    x = tape.leaf([3.0])
    y = x * x
    tape.backward(tsum(y))
    assert np.allclose(tape.grad(x), [6.0])


def test_backward_requires_scalar():
    tape = Tape(np.float64)
    w = tape.leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        tape.backward(w * w)


def test_unused_leaf_gets_zero_grad():
    tape = Tape(np.float64)
    a = tape.leaf([1.0, 2.0])
    b = tape.leaf([5.0])
    tape.backward(tsum(a))
    assert np.allclose(tape.grad(b), [0.0])


def test_tape_dtype_switch():
    t32 = Tape()
    assert t32.leaf([1.0]).dtype == np.float32
    t64 = Tape(np.float64)
    assert t64.leaf([1.0]).dtype == np.float64


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a, b = t1.leaf([1.0]), t2.leaf([1.0])
    with pytest.raises(ValueError):
        a + b


# ---------------------------------------------------------------------------
# finite-difference gradcheck for every differentiable op (20 random inputs
# across the suite; max relative error <= 1e-4 per the engine contract)


def _rand(shape):
    return RNG.standard_normal(shape)


@pytest.mark.parametrize("seed", range(4))
def test_gradcheck_elementwise_binary(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4)) + 3.0  # keep divisor away from 0

    gradcheck(lambda tape, xs: tsum(xs[0] + xs[1]), [a, b])
    gradcheck(lambda tape, xs: tsum(xs[0] - xs[1]), [a, b])
    gradcheck(lambda tape, xs: tsum(xs[0] * xs[1]), [a, b])
    gradcheck(lambda tape, xs: tsum(xs[0] / xs[1]), [a, b])


def test_gradcheck_broadcast_binary():
    a = _rand((3, 4))
    b = _rand((1, 4))
    gradcheck(lambda tape, xs: tsum(xs[0] * xs[1]), [a, b])
    gradcheck(lambda tape, xs: tsum(xs[0] + xs[1]), [a, b])
    row = _rand((4,))
    gradcheck(lambda tape, xs: tsum(xs[0] / (xs[1] * xs[1] + 2.0)), [a, row])


def test_gradcheck_matmul():
    a = _rand((3, 4))
    b = _rand((4, 2))
    gradcheck(lambda tape, xs: tsum(matmul(xs[0], xs[1])), [a, b])
    gradcheck(lambda tape, xs: tsum(matmul(xs[0], xs[1]) * matmul(xs[0], xs[1])), [a, b])


def test_gradcheck_scalar_ops():
    a = _rand((5,))
    gradcheck(lambda tape, xs: tsum(xs[0] * 2.5 + 1.0), [a])
    gradcheck(lambda tape, xs: tsum(3.0 - xs[0]), [a])
    gradcheck(lambda tape, xs: tsum(2.0 / (xs[0] * xs[0] + 1.0)), [a])
    gradcheck(lambda tape, xs: tsum(-xs[0]), [a])


def test_gradcheck_activations():
    a = _rand((4, 3)) + 0.05  # keep relu kinks off the fd stencil
    gradcheck(lambda tape, xs: tsum(relu(xs[0])), [a])
    gradcheck(lambda tape, xs: tsum(sigmoid(xs[0])), [a])
    gradcheck(lambda tape, xs: tsum(tanh(xs[0])), [a])
    gradcheck(lambda tape, xs: tsum(exp(xs[0])), [a])
    gradcheck(lambda tape, xs: tsum(log(xs[0] * xs[0] + 1.5)), [a])
    gradcheck(lambda tape, xs: tsum(sqrt(xs[0] * xs[0] + 1.0)), [a])


def test_gradcheck_reductions():
    a = _rand((3, 4, 2))
    gradcheck(lambda tape, xs: tsum(xs[0]), [a])
    gradcheck(lambda tape, xs: tsum(tsum(xs[0], axis=1) * 2.0), [a])
    gradcheck(lambda tape, xs: tsum(tmean(xs[0], axis=(0, 2)) * 3.0), [a])
    gradcheck(lambda tape, xs: tsum(tmean(xs[0], axis=1, keepdims=True) * xs[0]), [a])


def test_gradcheck_shape_ops():
    a = _rand((3, 4))
    gradcheck(lambda tape, xs: tsum(reshape(xs[0], (2, 6)) * 1.5), [a])
    gradcheck(lambda tape, xs: tsum(transpose(xs[0]) * transpose(xs[0])), [a])
    gradcheck(
        lambda tape, xs: tsum(transpose(reshape(xs[0], (2, 3, 2)), (1, 0, 2))),
        [a],
    )
    gradcheck(lambda tape, xs: tsum(xs[0][1:, :2] * 3.0), [a])
    gradcheck(lambda tape, xs: tsum(broadcast_to(xs[0][0:1, :], (5, 4)) * 2.0), [a])


def test_gradcheck_concat():
    a, b = _rand((2, 3)), _rand((4, 3))
    gradcheck(lambda tape, xs: tsum(concat([xs[0], xs[1]], axis=0) * 2.0), [a, b])
    c, d = _rand((2, 3)), _rand((2, 5))
    gradcheck(lambda tape, xs: tsum(concat([xs[0], xs[1]], axis=1) * concat([xs[0], xs[1]], axis=1)), [c, d])


def test_gradcheck_softmax_layernorm_cosine():
    x = _rand((3, 5))
    gradcheck(lambda tape, xs: tsum(softmax(xs[0], axis=1) * _rand_fixed), [x])
    g, b = np.ones(5), np.zeros(5)
    gradcheck(
        lambda tape, xs: tsum(layer_norm(xs[0], xs[1], xs[2]) * _rand_fixed),
        [x, g, b],
    )
    u, v = _rand((6,)), _rand((6,))
    gradcheck(lambda tape, xs: cosine_sim(xs[0], xs[1]), [u, v])
    gradcheck(lambda tape, xs: tsum(l2_normalize(xs[0], axis=1) * _rand_fixed), [x])
    gradcheck(lambda tape, xs: l2_norm(xs[0]), [u])


_rand_fixed = np.random.default_rng(7).standard_normal((3, 5))


def test_gradcheck_linear_chain():
    x = _rand((4, 3))
    w1 = _rand((3, 6))
    b1 = _rand((6,))
    w2 = _rand((6, 2))

    def build(tape, xs):
        h = relu(linear(xs[0], xs[1], xs[2]))
        return tsum(matmul(h, xs[3]) * matmul(h, xs[3]))

    gradcheck(build, [x, w1, b1, w2])


def test_grad_before_backward_raises():
    tape = Tape(np.float64)
    w = tape.leaf([1.0])
    with pytest.raises(ValueError):
        Tape().grad(w)
