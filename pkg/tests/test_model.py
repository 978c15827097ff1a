import numpy as np
import pytest

from slotforge.errors import DegenerateSlotError, FormatError
from slotforge.model import (
    ATTN_EPS,
    ModelConfig,
    ModelWeights,
    decode,
    encode,
    flop_count,
    forward_video,
    masks_from_alphas,
    matmul_flops,
    param_count,
    patchify,
    per_slot_decode,
    predict_next,
    slot_attention,
    student_config,
    teacher_config,
    weight_spec,
)
from slotforge.tensor import Tape, Tensor, as_tensor


def tiny_config(**kw):
    base = dict(frame_size=16, patch_size=8, feature_dim=8, slot_dim=8,
                num_slots=2, decoder_hidden=8, decoder_layers=2)
    base.update(kw)
    return ModelConfig(**base)


def f64_params(weights):
    return {n: Tensor(a.astype(np.float64)) for n, a in weights.arrays.items()}


# ---------------------------------------------------------------------------
# encode


def test_encode_row_count():
    cfg = ModelConfig()
    w = ModelWeights.initialize(cfg, seed=0)
    frame = np.random.default_rng(0).uniform(size=(64, 64, 3)).astype(np.float32)
    feats = encode(w.tensors(), frame, cfg)
    assert feats.shape == (64, cfg.feature_dim)


def test_encode_zero_frame_rows_identical():
    cfg = ModelConfig()
    w = ModelWeights.initialize(cfg, seed=0)
    feats = encode(w.tensors(), np.zeros((64, 64, 3), dtype=np.float32), cfg).data
    assert np.allclose(feats, feats[0], atol=1e-6)


def test_encode_deterministic():
    cfg = ModelConfig()
    w = ModelWeights.initialize(cfg, seed=0)
    frame = np.random.default_rng(1).uniform(size=(64, 64, 3)).astype(np.float32)
    a = encode(w.tensors(), frame, cfg).data
    b = encode(w.tensors(), frame, cfg).data
    assert np.array_equal(a, b)


def test_encode_indivisible_raises():
    cfg = ModelConfig()
    w = ModelWeights.initialize(cfg, seed=0)
    with pytest.raises(ValueError):
        encode(w.tensors(), np.zeros((60, 64, 3), dtype=np.float32), cfg)


def test_patchify_layout():
    frame = np.arange(16 * 16 * 3, dtype=np.float32).reshape(1, 16, 16, 3)
    rows = patchify(frame, 8)
    assert rows.shape == (4, 192)
    assert np.array_equal(rows[0].reshape(8, 8, 3), frame[0, :8, :8])
    assert np.array_equal(rows[1].reshape(8, 8, 3), frame[0, :8, 8:])


# ---------------------------------------------------------------------------
# slot attention


def _scripted_slot_attention(w, slots, feats, cfg):
    """Step-by-step plain-numpy oracle of the published update rule."""

    def ln(x, g, b, eps=1e-5):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * g + b

    def sigmoid(x):
        return 1.0 / (1.0 + np.exp(-x))

    d = cfg.slot_dim
    f = ln(feats, w["sa.ln_in.g"], w["sa.ln_in.b"])
    k = f @ w["sa.k.w"]
    v = f @ w["sa.v.w"]
    for _ in range(cfg.sa_iterations):
        prev = slots
        q = ln(slots, w["sa.ln_slots.g"], w["sa.ln_slots.b"]) @ w["sa.q.w"]
        logits = q @ k.T / np.sqrt(d)
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        attn = e / e.sum(axis=0, keepdims=True)
        wgt = attn + ATTN_EPS
        wgt = wgt / wgt.sum(axis=1, keepdims=True)
        upd = wgt @ v
        gx = upd @ w["sa.gru.wi"] + w["sa.gru.bi"]
        gh = prev @ w["sa.gru.wh"] + w["sa.gru.bh"]
        r = sigmoid(gx[:, :d] + gh[:, :d])
        z = sigmoid(gx[:, d:2 * d] + gh[:, d:2 * d])
        n = np.tanh(gx[:, 2 * d:] + r * gh[:, 2 * d:])
        slots = (1 - z) * n + z * prev
        h = ln(slots, w["sa.ln_ff.g"], w["sa.ln_ff.b"])
        slots = slots + np.maximum(h @ w["sa.mlp1.w"] + w["sa.mlp1.b"], 0) @ w["sa.mlp2.w"] + w["sa.mlp2.b"]
    return slots, attn.T


def test_slot_attention_matches_scripted_oracle():
    cfg = tiny_config(slot_dim=4, feature_dim=4, num_slots=2)
    weights = ModelWeights.initialize(cfg, seed=3)
    w64 = {n: a.astype(np.float64) for n, a in weights.arrays.items()}
    rng = np.random.default_rng(5)
    slots0 = rng.standard_normal((2, 4))
    feats = rng.standard_normal((4, 4))
    params = {n: Tensor(a) for n, a in w64.items()}
    ours, attn = slot_attention(params, as_tensor(slots0), as_tensor(feats), cfg)
    oracle_slots, oracle_attn = _scripted_slot_attention(w64, slots0.copy(), feats, cfg)
    assert np.max(np.abs(ours.data - oracle_slots)) < 1e-10
    assert np.max(np.abs(attn.data - oracle_attn)) < 1e-10


def test_slot_attention_single_slot_attention_is_one():
    cfg = tiny_config()
    weights = ModelWeights.initialize(cfg, seed=0)
    params = f64_params(weights)
    slots = as_tensor(np.random.default_rng(0).standard_normal((1, 8)))
    feats = as_tensor(np.random.default_rng(1).standard_normal((4, 8)))
    _, attn = slot_attention(params, slots, feats, cfg)
    assert np.allclose(attn.data, 1.0)


def test_slot_attention_permutation_equivariance():
    cfg = ModelConfig(frame_size=32, feature_dim=16, slot_dim=16, num_slots=4,
                      decoder_hidden=16)
    weights = ModelWeights.initialize(cfg, seed=2)
    params = f64_params(weights)
    rng = np.random.default_rng(0)
    for _ in range(10):
        slots = rng.standard_normal((4, 16))
        feats = rng.standard_normal((16, 16))
        perm = rng.permutation(4)
        base, attn = slot_attention(params, as_tensor(slots), as_tensor(feats), cfg)
        permuted, attn_p = slot_attention(params, as_tensor(slots[perm]), as_tensor(feats), cfg)
        assert np.max(np.abs(permuted.data - base.data[perm])) < 1e-6
        assert np.max(np.abs(attn_p.data - attn.data[:, perm])) < 1e-6


def test_slot_attention_rejects_zero_features():
    cfg = tiny_config()
    weights = ModelWeights.initialize(cfg, seed=0)
    with pytest.raises(DegenerateSlotError):
        slot_attention(weights.tensors(), as_tensor(np.ones((2, 8))),
                       as_tensor(np.zeros((4, 8))), cfg)


# ---------------------------------------------------------------------------
# predictor


def test_predictor_zero_output_projections_is_identity():
    cfg = tiny_config()
    weights = ModelWeights.initialize(cfg, seed=4)
    weights.arrays["pred0.o.w"][:] = 0
    weights.arrays["pred0.o.b"][:] = 0
    weights.arrays["pred0.ff2.w"][:] = 0
    weights.arrays["pred0.ff2.b"][:] = 0
    slots = np.random.default_rng(0).standard_normal((2, 8))
    out = predict_next(f64_params(weights), as_tensor(slots), cfg)
    assert np.max(np.abs(out.data - slots)) < 1e-12


def test_predictor_permutation_equivariance():
    cfg = tiny_config(num_slots=4)
    weights = ModelWeights.initialize(cfg, seed=4)
    params = f64_params(weights)
    rng = np.random.default_rng(1)
    slots = rng.standard_normal((4, 8))
    perm = rng.permutation(4)
    base = predict_next(params, as_tensor(slots), cfg)
    permuted = predict_next(params, as_tensor(slots[perm]), cfg)
    assert np.max(np.abs(permuted.data - base.data[perm])) < 1e-10


def _scripted_predictor(w, slots, cfg):
    def ln(x, g, b, eps=1e-5):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * g + b

    d = cfg.slot_dim
    dh = d // cfg.predictor_heads
    x = slots
    a = ln(x, w["pred0.ln1.g"], w["pred0.ln1.b"])
    q = a @ w["pred0.q.w"] + w["pred0.q.b"]
    k = a @ w["pred0.k.w"] + w["pred0.k.b"]
    v = a @ w["pred0.v.w"] + w["pred0.v.b"]
    outs = []
    for hi in range(cfg.predictor_heads):
        sl = slice(hi * dh, (hi + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        att = e / e.sum(axis=1, keepdims=True)
        outs.append(att @ v[:, sl])
    o = np.concatenate(outs, axis=1)
    x = x + o @ w["pred0.o.w"] + w["pred0.o.b"]
    h = ln(x, w["pred0.ln2.g"], w["pred0.ln2.b"])
    return x + np.maximum(h @ w["pred0.ff1.w"] + w["pred0.ff1.b"], 0) @ w["pred0.ff2.w"] + w["pred0.ff2.b"]


def test_predictor_matches_scripted_oracle():
    cfg = tiny_config(slot_dim=4, feature_dim=4)
    weights = ModelWeights.initialize(cfg, seed=6)
    w64 = {n: a.astype(np.float64) for n, a in weights.arrays.items()}
    slots = np.random.default_rng(2).standard_normal((2, 4))
    ours = predict_next({n: Tensor(a) for n, a in w64.items()}, as_tensor(slots), cfg)
    oracle = _scripted_predictor(w64, slots, cfg)
    assert np.max(np.abs(ours.data - oracle)) < 1e-10


# ---------------------------------------------------------------------------
# decoder


def test_decode_alphas_sum_to_one():
    cfg = tiny_config(num_slots=3)
    weights = ModelWeights.initialize(cfg, seed=7)
    slots = as_tensor(np.random.default_rng(0).standard_normal((3, 8)))
    _, alphas = decode(f64_params(weights), slots, cfg)
    assert alphas.shape == (cfg.num_patches, 3)
    assert np.max(np.abs(alphas.data.sum(axis=1) - 1.0)) < 1e-9
    assert np.all(alphas.data >= 0)


def test_decode_single_slot_alpha_is_one():
    cfg = tiny_config()
    weights = ModelWeights.initialize(cfg, seed=7)
    slots = as_tensor(np.random.default_rng(0).standard_normal((1, 8)))
    _, alphas = decode(f64_params(weights), slots, cfg)
    assert np.allclose(alphas.data, 1.0)


def test_decode_identical_slots_split_alphas():
    cfg = tiny_config()
    weights = ModelWeights.initialize(cfg, seed=8)
    s = np.random.default_rng(3).standard_normal((1, 8))
    slots = as_tensor(np.vstack([s, s]))
    recon, alphas = decode(f64_params(weights), slots, cfg)
    assert np.allclose(alphas.data, 0.5)
    one, _ = decode(f64_params(weights), as_tensor(s), cfg)
    # identical slots decode to identical per-slot features; mix == single
    assert np.max(np.abs(recon.data - one.data)) < 1e-10


def test_per_slot_decode_shape():
    cfg = tiny_config()
    weights = ModelWeights.initialize(cfg, seed=7)
    out = per_slot_decode(f64_params(weights),
                          as_tensor(np.random.default_rng(0).standard_normal(8)), cfg)
    assert out.shape == (cfg.num_patches, cfg.feature_dim + 1)


# ---------------------------------------------------------------------------
# masks


def test_masks_one_hot_exact():
    alphas = np.zeros((4, 3))
    alphas[[0, 1, 2, 3], [0, 2, 1, 0]] = 1.0
    labels = masks_from_alphas(alphas, 16, 16)
    assert labels.shape == (16, 16)
    assert np.all(labels[:8, :8] == 0)
    assert np.all(labels[:8, 8:] == 2)
    assert np.all(labels[8:, :8] == 1)
    assert np.all(labels[8:, 8:] == 0)


def test_masks_uniform_tie_break_to_zero():
    alphas = np.full((4, 3), 1 / 3)
    assert np.all(masks_from_alphas(alphas, 16, 16) == 0)


def test_masks_checkerboard_blocks():
    alphas = np.zeros((4, 2))
    alphas[[0, 3], 0] = 1.0
    alphas[[1, 2], 1] = 1.0
    labels = masks_from_alphas(alphas, 16, 16)
    oracle = np.kron(np.array([[0, 1], [1, 0]]), np.ones((8, 8), dtype=int))
    assert np.array_equal(labels, oracle)


def test_masks_bad_tiling_raises():
    with pytest.raises(ValueError):
        masks_from_alphas(np.ones((5, 2)), 16, 16)


# ---------------------------------------------------------------------------
# forward_video


def test_forward_video_t1_uses_initial_slots_only():
    cfg = tiny_config()
    weights = ModelWeights.initialize(cfg, seed=9)
    video = np.random.default_rng(0).uniform(size=(1, 16, 16, 3)).astype(np.float32)
    res = forward_video(weights, video, cfg, rng=np.random.default_rng(1))
    assert len(res) == 1
    assert res[0].pre_slots.kind == "initial"
    assert res[0].slots.kind == "corrected"


def test_forward_video_deterministic_given_noise_seed():
    cfg = tiny_config()
    weights = ModelWeights.initialize(cfg, seed=9)
    video = np.random.default_rng(0).uniform(size=(3, 16, 16, 3)).astype(np.float32)
    a = forward_video(weights, video, cfg, rng=np.random.default_rng(11))
    b = forward_video(weights, video, cfg, rng=np.random.default_rng(11))
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.slots.slots.data, fb.slots.slots.data)
        assert np.array_equal(fa.recon.data, fb.recon.data)
    assert a[1].pre_slots.kind == "predicted"


def test_forward_video_on_tape_has_gradients():
    cfg = tiny_config()
    weights = ModelWeights.initialize(cfg, seed=9)
    video = np.random.default_rng(0).uniform(size=(2, 16, 16, 3)).astype(np.float32)
    tape = Tape(np.float64)
    params = weights.tensors(tape)
    res = forward_video(params, video, cfg, rng=np.random.default_rng(1))
    loss = sum(
        ((fr.recon - fr.features.detach()) * (fr.recon - fr.features.detach())).sum()
        for fr in res
    )
    tape.backward(loss)
    for name in weights.trainable_names():
        g = tape.grad(params[name])
        assert g.shape == weights.arrays[name].shape
        assert np.any(g != 0), f"no gradient reached {name}"
    # frozen tensors are constants: they never enter the tape
    for name in weights.frozen:
        assert params[name].tape is None


# ---------------------------------------------------------------------------
# accounting


def analytic_param_counts(cfg):
    """Independent closed-form parameter count (oracle for enumeration)."""
    lin = lambda i, o: i * o + o  # noqa: E731
    m, d, n, e, p = (cfg.feature_dim, cfg.slot_dim, cfg.num_slots,
                     cfg.encoder_hidden, cfg.num_patches)
    frozen = lin(cfg.patch_input, m) + lin(m, e) + lin(e, m)
    proj = 2 * lin(m, m) + 2 * m
    sa = (2 * m + d * d + 2 * m * d + 2 * d + 2 * (3 * d * d) + 2 * (3 * d)
          + 2 * d + lin(d, cfg.sa_hidden) + lin(cfg.sa_hidden, d))
    pred = cfg.predictor_layers * (
        2 * d + 4 * lin(d, d) + 2 * d + lin(d, cfg.predictor_ff) + lin(cfg.predictor_ff, d)
    )
    dims = [2 * d] + [cfg.decoder_hidden] * (cfg.decoder_layers - 1) + [m + 1]
    dec = p * d + sum(lin(dims[i], dims[i + 1]) for i in range(cfg.decoder_layers))
    trainable = proj + sa + n * d + pred + dec
    return trainable, frozen


def test_param_count_matches_analytic_formula():
    for cfg in (teacher_config(), student_config(), tiny_config()):
        w = ModelWeights.initialize(cfg, seed=0)
        counts = param_count(w)
        trainable, frozen = analytic_param_counts(cfg)
        assert counts["trainable"] == trainable
        assert counts["frozen"] == frozen


def test_default_param_ratio_in_band():
    t = param_count(ModelWeights.initialize(teacher_config(), 0))["total"]
    s = param_count(ModelWeights.initialize(student_config(), 0))["total"]
    assert 3.0 <= t / s <= 4.5


def test_single_linear_layer_param_formula():
    # one k x n linear layer with bias carries k*n + n parameters
    cfg = tiny_config()
    spec = {name: shape for name, shape, *_ in weight_spec(cfg)}
    k, n = spec["dec.fc0.w"]
    assert k * n + np.prod(spec["dec.fc0.b"]) == k * n + n


def test_doubling_m_scales_projection_params():
    lo = tiny_config(feature_dim=8)
    hi = tiny_config(feature_dim=16)
    proj = lambda cfg: sum(  # noqa: E731
        np.prod(shape) for name, shape, *_ in weight_spec(cfg) if name.startswith("proj.fc")
    )
    m1, m2 = 8, 16
    assert proj(lo) == 2 * (m1 * m1 + m1)
    assert proj(hi) == 2 * (m2 * m2 + m2)


def test_matmul_flop_convention():
    assert matmul_flops(1, 5, 7) == 2 * 5 * 7


def test_flop_count_teacher_above_student():
    t = flop_count(teacher_config(), 64, 64, 4)
    s = flop_count(student_config(), 64, 64, 4)
    assert t > s > 0


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config()
    w = ModelWeights.initialize(cfg, seed=13)
    p = tmp_path / "model.sltw"
    w.save(p)
    loaded = ModelWeights.load(p, cfg)
    assert set(loaded.arrays) == set(w.arrays)
    for name in w.arrays:
        assert np.array_equal(loaded.arrays[name], w.arrays[name])
    assert loaded.frozen == w.frozen
    assert loaded.state_hash() == w.state_hash()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "junk.sltw"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError):
        ModelWeights.load(p, tiny_config())


def test_checkpoint_config_mismatch(tmp_path):
    w = ModelWeights.initialize(tiny_config(), seed=0)
    p = tmp_path / "model.sltw"
    w.save(p)
    with pytest.raises(FormatError):
        ModelWeights.load(p, tiny_config(feature_dim=16))


def test_checkpoint_truncated(tmp_path):
    w = ModelWeights.initialize(tiny_config(), seed=0)
    p = tmp_path / "model.sltw"
    w.save(p)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) - 10])
    with pytest.raises(FormatError):
        ModelWeights.load(p, tiny_config())
