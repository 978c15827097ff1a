"""The encoder -> slot-attention -> predictor -> decoder stack.

Teacher and student share this architecture and differ only in widths:
the frozen encoder (linear patchify + 2-layer ReLU MLP, hidden = 8x the
feature dim) is wide for the teacher and narrow for the student, standing
in for the pretrained-backbone capacity gap.  A shallow trainable
projection MLP maps frozen features into the model's feature space; slot
attention with a GRU update compresses them into N slots; a one-block
pre-LN transformer predicts the next frame's slots; and a spatial
broadcast MLP decoder reconstructs features plus per-slot alpha logits.

All forward functions take a ``params`` mapping of name -> Tensor (see
``ModelWeights.tensors``).  With tape-attached tensors they build the
training graph; with plain constants they run inference in numpy.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal

import numpy as np

from . import tensor as tz
from .errors import DegenerateSlotError, FormatError
from .tensor import Tensor

ENCODER_HIDDEN_MULT = 8
SLOT_NOISE_STD = 0.1
ATTN_EPS = 1e-8
CKPT_MAGIC = b"SLTW"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs shared by teacher and student (widths differ)."""

    frame_size: int = 64
    patch_size: int = 8
    feature_dim: int = 32
    slot_dim: int = 32
    num_slots: int = 5
    sa_iterations: int = 2
    predictor_layers: int = 1
    predictor_heads: int = 4
    decoder_hidden: int = 64
    decoder_layers: int = 3

    def validate(self) -> None:
        if self.frame_size % self.patch_size != 0:
            raise ValueError("frame_size must be divisible by patch_size")
        if self.slot_dim % self.predictor_heads != 0:
            raise ValueError("slot_dim must be divisible by predictor_heads")
        if self.sa_iterations < 1:
            raise ValueError("sa_iterations must be >= 1")
        if self.num_slots < 2:
            raise ValueError("num_slots must be >= 2")
        if self.predictor_layers < 1:
            raise ValueError("predictor_layers must be >= 1")
        if self.decoder_layers < 2:
            raise ValueError("decoder_layers must be >= 2")

    @property
    def num_patches(self) -> int:
        return (self.frame_size // self.patch_size) ** 2

    @property
    def encoder_hidden(self) -> int:
        return ENCODER_HIDDEN_MULT * self.feature_dim

    @property
    def patch_input(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def sa_hidden(self) -> int:
        return 2 * self.slot_dim

    @property
    def predictor_ff(self) -> int:
        return 4 * self.slot_dim


def teacher_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(feature_dim=96), **overrides)


def student_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(feature_dim=32), **overrides)


SlotKind = Literal["initial", "predicted", "corrected"]


@dataclass
class SlotSet:
    """The N x d slot matrix for one frame."""

    slots: Tensor
    kind: SlotKind


@dataclass
class FrameResult:
    """Everything the losses need from one frame of one video."""

    pre_slots: SlotSet      # initial (t=0) or predicted (t>0)
    slots: SlotSet          # corrected, after slot attention
    features: Tensor        # (P, m)
    recon: Tensor           # (P, m)
    alphas: Tensor          # (P, N) decoder mixing weights
    attn: Tensor            # (P, N) final slot-attention map


# ---------------------------------------------------------------------------
# weights


def weight_spec(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], bool, str]]:
    """(name, shape, frozen, init_kind) for every tensor, in init order."""
    cfg.validate()
    m, d, n = cfg.feature_dim, cfg.slot_dim, cfg.num_slots
    e, p = cfg.encoder_hidden, cfg.num_patches
    spec: list[tuple[str, tuple[int, ...], bool, str]] = [
        ("enc.patch.w", (cfg.patch_input, m), True, "linear"),
        ("enc.patch.b", (m,), True, "zeros"),
        ("enc.mlp1.w", (m, e), True, "linear"),
        ("enc.mlp1.b", (e,), True, "zeros"),
        ("enc.mlp2.w", (e, m), True, "linear"),
        ("enc.mlp2.b", (m,), True, "zeros"),
        ("proj.fc1.w", (m, m), False, "linear"),
        ("proj.fc1.b", (m,), False, "zeros"),
        ("proj.fc2.w", (m, m), False, "linear"),
        ("proj.fc2.b", (m,), False, "zeros"),
        ("proj.ln.g", (m,), False, "ones"),
        ("proj.ln.b", (m,), False, "zeros"),
        ("sa.ln_in.g", (m,), False, "ones"),
        ("sa.ln_in.b", (m,), False, "zeros"),
        ("sa.q.w", (d, d), False, "linear"),
        ("sa.k.w", (m, d), False, "linear"),
        ("sa.v.w", (m, d), False, "linear"),
        ("sa.ln_slots.g", (d,), False, "ones"),
        ("sa.ln_slots.b", (d,), False, "zeros"),
        ("sa.gru.wi", (d, 3 * d), False, "linear"),
        ("sa.gru.wh", (d, 3 * d), False, "linear"),
        ("sa.gru.bi", (3 * d,), False, "zeros"),
        ("sa.gru.bh", (3 * d,), False, "zeros"),
        ("sa.ln_ff.g", (d,), False, "ones"),
        ("sa.ln_ff.b", (d,), False, "zeros"),
        ("sa.mlp1.w", (d, cfg.sa_hidden), False, "linear"),
        ("sa.mlp1.b", (cfg.sa_hidden,), False, "zeros"),
        ("sa.mlp2.w", (cfg.sa_hidden, d), False, "linear"),
        ("sa.mlp2.b", (d,), False, "zeros"),
        ("slots.init", (n, d), False, "normal"),
    ]
    for i in range(cfg.predictor_layers):
        pre = f"pred{i}"
        spec += [
            (f"{pre}.ln1.g", (d,), False, "ones"),
            (f"{pre}.ln1.b", (d,), False, "zeros"),
            (f"{pre}.q.w", (d, d), False, "linear"),
            (f"{pre}.q.b", (d,), False, "zeros"),
            (f"{pre}.k.w", (d, d), False, "linear"),
            (f"{pre}.k.b", (d,), False, "zeros"),
            (f"{pre}.v.w", (d, d), False, "linear"),
            (f"{pre}.v.b", (d,), False, "zeros"),
            (f"{pre}.o.w", (d, d), False, "linear"),
            (f"{pre}.o.b", (d,), False, "zeros"),
            (f"{pre}.ln2.g", (d,), False, "ones"),
            (f"{pre}.ln2.b", (d,), False, "zeros"),
            (f"{pre}.ff1.w", (d, cfg.predictor_ff), False, "linear"),
            (f"{pre}.ff1.b", (cfg.predictor_ff,), False, "zeros"),
            (f"{pre}.ff2.w", (cfg.predictor_ff, d), False, "linear"),
            (f"{pre}.ff2.b", (d,), False, "zeros"),
        ]
    spec.append(("dec.pos", (p, d), False, "normal"))
    dims = [2 * d] + [cfg.decoder_hidden] * (cfg.decoder_layers - 1) + [m + 1]
    for i in range(cfg.decoder_layers):
        spec += [
            (f"dec.fc{i}.w", (dims[i], dims[i + 1]), False, "linear"),
            (f"dec.fc{i}.b", (dims[i + 1],), False, "zeros"),
        ]
    return spec


def _init_array(rng: np.random.Generator, shape, kind: str) -> np.ndarray:
    if kind == "linear":
        fan_in, fan_out = shape[0], shape[1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape).astype(np.float32)
    if kind == "zeros":
        return np.zeros(shape, dtype=np.float32)
    if kind == "ones":
        return np.ones(shape, dtype=np.float32)
    if kind == "normal":
        return (0.5 * rng.standard_normal(shape)).astype(np.float32)
    raise ValueError(f"unknown init kind {kind!r}")


class ModelWeights:
    """Named parameter collection; the frozen subset never changes."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray],
                 frozen: frozenset[str]):
        self.config = config
        self.arrays = arrays
        self.frozen = frozen

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ModelWeights":
        rng = np.random.default_rng(seed)
        arrays: dict[str, np.ndarray] = {}
        frozen = set()
        for name, shape, is_frozen, kind in weight_spec(config):
            arrays[name] = _init_array(rng, shape, kind)
            if is_frozen:
                frozen.add(name)
        return cls(config, arrays, frozenset(frozen))

    def tensors(self, tape=None) -> dict[str, Tensor]:
        """Trainable arrays become tape leaves (when a tape is given);
        frozen arrays are always constants."""
        out = {}
        for name, arr in self.arrays.items():
            if tape is not None and name not in self.frozen:
                out[name] = tape.leaf(arr)
            else:
                out[name] = Tensor(arr)
        return out

    def trainable_names(self) -> list[str]:
        return [n for n in self.arrays if n not in self.frozen]

    def astype(self, dtype) -> "ModelWeights":
        arrays = {n: a.astype(dtype) for n, a in self.arrays.items()}
        return ModelWeights(self.config, arrays, self.frozen)

    def clone(self) -> "ModelWeights":
        return ModelWeights(self.config, {n: a.copy() for n, a in self.arrays.items()},
                            self.frozen)

    def state_hash(self, names=None) -> str:
        digest = hashlib.sha256()
        for name in sorted(names if names is not None else self.arrays):
            digest.update(name.encode())
            digest.update(self.arrays[name].tobytes())
        return digest.hexdigest()

    def frozen_hash(self) -> str:
        return self.state_hash(self.frozen)

    # checkpoint format: magic "SLTW", version u32 LE, count u32 LE, then per
    # tensor (sorted by name): name len u16 + utf-8 name, rank u8, dims u32
    # LE each, f32 LE payload.

    def save(self, path: str | Path) -> None:
        payload = bytearray()
        payload += CKPT_MAGIC
        payload += struct.pack("<2I", CKPT_VERSION, len(self.arrays))
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f4")
            raw_name = name.encode("utf-8")
            payload += struct.pack("<H", len(raw_name)) + raw_name
            payload += struct.pack("<B", arr.ndim)
            payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
            payload += arr.tobytes()
        Path(path).write_bytes(bytes(payload))

    @classmethod
    def load(cls, path: str | Path, config: ModelConfig) -> "ModelWeights":
        raw = Path(path).read_bytes()
        if len(raw) < 12 or raw[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: not a SLTW checkpoint")
        version, count = struct.unpack("<2I", raw[4:12])
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        offset = 12
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            try:
                (name_len,) = struct.unpack_from("<H", raw, offset)
                offset += 2
                name = raw[offset : offset + name_len].decode("utf-8")
                offset += name_len
                (rank,) = struct.unpack_from("<B", raw, offset)
                offset += 1
                dims = struct.unpack_from(f"<{rank}I", raw, offset)
                offset += 4 * rank
                n_items = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(raw, dtype="<f4", count=n_items, offset=offset)
                offset += 4 * n_items
            except (struct.error, ValueError) as err:
                raise FormatError(f"{path}: truncated checkpoint ({err})") from err
            arrays[name] = arr.reshape(dims).copy()
        if offset != len(raw):
            raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
        expected = weight_spec(config)
        exp_names = {name for name, *_ in expected}
        if set(arrays) != exp_names:
            missing = sorted(exp_names - set(arrays))
            extra = sorted(set(arrays) - exp_names)
            raise FormatError(f"{path}: name mismatch (missing={missing}, extra={extra})")
        frozen = set()
        for name, shape, is_frozen, _ in expected:
            if arrays[name].shape != shape:
                raise FormatError(
                    f"{path}: tensor {name} has shape {arrays[name].shape}, expected {shape}"
                )
            if is_frozen:
                frozen.add(name)
        return cls(config, arrays, frozenset(frozen))


# ---------------------------------------------------------------------------
# forward pieces


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(T,H,W,3) -> (T*P, 3*patch^2) rows in row-major patch order."""
    if frames.ndim == 3:
        frames = frames[None]
    t, h, w, c = frames.shape
    if h % patch or w % patch:
        raise ValueError(f"frame {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = frames.reshape(t, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(t * gh * gw, patch * patch * c)


def encode_frames(params: dict[str, Tensor], frames: np.ndarray,
                  cfg: ModelConfig) -> Tensor:
    """Frozen patchify+MLP, trainable projection, layer-norm: (T*P, m)."""
    x = tz.as_tensor(patchify(frames, cfg.patch_size))
    x = tz.linear(x, params["enc.patch.w"], params["enc.patch.b"])
    x = tz.linear(tz.relu(tz.linear(x, params["enc.mlp1.w"], params["enc.mlp1.b"])),
                  params["enc.mlp2.w"], params["enc.mlp2.b"])
    x = tz.linear(tz.relu(tz.linear(x, params["proj.fc1.w"], params["proj.fc1.b"])),
                  params["proj.fc2.w"], params["proj.fc2.b"])
    return tz.layer_norm(x, params["proj.ln.g"], params["proj.ln.b"])


def encode(params: dict[str, Tensor], frame: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Single frame (H,W,3) -> features (P, m)."""
    return encode_frames(params, np.asarray(frame)[None], cfg)


def _gru_cell(params: dict[str, Tensor], x: Tensor, h: Tensor, d: int) -> Tensor:
    gx = tz.linear(x, params["sa.gru.wi"], params["sa.gru.bi"])
    gh = tz.linear(h, params["sa.gru.wh"], params["sa.gru.bh"])
    r = tz.sigmoid(gx[:, :d] + gh[:, :d])
    z = tz.sigmoid(gx[:, d : 2 * d] + gh[:, d : 2 * d])
    n = tz.tanh(gx[:, 2 * d :] + r * gh[:, 2 * d :])
    return (1.0 - z) * n + z * h


def slot_attention(params: dict[str, Tensor], slots: Tensor, features: Tensor,
                   cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Iterative slot refinement; returns (corrected (N,d), attention (P,N)).

    Each round: softmax over the slot axis of q k^T / sqrt(d), attention
    weights renormalized over positions (+1e-8, the canonical weighted-mean
    form), GRU update, then a residual 2-layer MLP on layer-normed slots.
    """
    if not np.any(features.data):
        raise DegenerateSlotError("slot attention received all-zero features")
    d = cfg.slot_dim
    f = tz.layer_norm(features, params["sa.ln_in.g"], params["sa.ln_in.b"])
    k = tz.matmul(f, params["sa.k.w"])
    v = tz.matmul(f, params["sa.v.w"])
    scale = d ** -0.5
    attn = None
    for _ in range(cfg.sa_iterations):
        prev = slots
        q = tz.matmul(
            tz.layer_norm(slots, params["sa.ln_slots.g"], params["sa.ln_slots.b"]),
            params["sa.q.w"],
        )
        logits = tz.matmul(q, k.T) * scale          # (N, P)
        attn = tz.softmax(logits, axis=0)           # compete over slots
        w = attn + ATTN_EPS
        w = w / tz.tsum(w, axis=1, keepdims=True)   # weighted mean over positions
        updates = tz.matmul(w, v)
        slots = _gru_cell(params, updates, prev, d)
        ff = tz.layer_norm(slots, params["sa.ln_ff.g"], params["sa.ln_ff.b"])
        slots = slots + tz.linear(
            tz.relu(tz.linear(ff, params["sa.mlp1.w"], params["sa.mlp1.b"])),
            params["sa.mlp2.w"], params["sa.mlp2.b"],
        )
    norms = np.sqrt((slots.data ** 2).sum(axis=1))
    if norms.min() < 1e-12:
        raise DegenerateSlotError(f"corrected slot norm {norms.min():.3e} below 1e-12")
    return slots, attn.T


def predict_next(params: dict[str, Tensor], slots: Tensor, cfg: ModelConfig) -> Tensor:
    """One pre-LN transformer block per predictor layer over the N slots."""
    d = cfg.slot_dim
    heads = cfg.predictor_heads
    dh = d // heads
    x = slots
    for i in range(cfg.predictor_layers):
        pre = f"pred{i}"
        a = tz.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        q = tz.linear(a, params[f"{pre}.q.w"], params[f"{pre}.q.b"])
        k = tz.linear(a, params[f"{pre}.k.w"], params[f"{pre}.k.b"])
        v = tz.linear(a, params[f"{pre}.v.w"], params[f"{pre}.v.b"])
        head_outs = []
        for hi in range(heads):
            sl = slice(hi * dh, (hi + 1) * dh)
            att = tz.softmax(tz.matmul(q[:, sl], k[:, sl].T) * (dh ** -0.5), axis=1)
            head_outs.append(tz.matmul(att, v[:, sl]))
        o = tz.concat(head_outs, axis=1)
        x = x + tz.linear(o, params[f"{pre}.o.w"], params[f"{pre}.o.b"])
        ffin = tz.layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        x = x + tz.linear(
            tz.relu(tz.linear(ffin, params[f"{pre}.ff1.w"], params[f"{pre}.ff1.b"])),
            params[f"{pre}.ff2.w"], params[f"{pre}.ff2.b"],
        )
    return x


def _decoder_mlp(params: dict[str, Tensor], z: Tensor, cfg: ModelConfig) -> Tensor:
    h = z
    for i in range(cfg.decoder_layers - 1):
        h = tz.relu(tz.linear(h, params[f"dec.fc{i}.w"], params[f"dec.fc{i}.b"]))
    last = cfg.decoder_layers - 1
    return tz.linear(h, params[f"dec.fc{last}.w"], params[f"dec.fc{last}.b"])


def decode(params: dict[str, Tensor], slots: Tensor, cfg: ModelConfig
           ) -> tuple[Tensor, Tensor]:
    """Spatial broadcast decode: (recon (P,m), alphas (P,N)).

    Each slot is tiled to all P positions, concatenated with the learned
    positional embedding, and run through the decoder MLP; channel m is the
    alpha logit, softmaxed over slots per position.
    """
    n = slots.shape[0]
    p, m = cfg.num_patches, cfg.feature_dim
    pos = params["dec.pos"]
    blocks = [tz.concat([tz.broadcast_to(slots[i : i + 1, :], (p, cfg.slot_dim)), pos],
                        axis=1) for i in range(n)]
    out = _decoder_mlp(params, tz.concat(blocks, axis=0), cfg)  # (N*P, m+1)
    out = out.reshape((n, p, m + 1))
    feats = out[:, :, :m]
    alphas = tz.softmax(out[:, :, m], axis=0)                   # (N, P), over slots
    recon = tz.tsum(alphas.reshape((n, p, 1)) * feats, axis=0)  # (P, m)
    return recon, alphas.T


def per_slot_decode(params: dict[str, Tensor], slot: Tensor, cfg: ModelConfig) -> Tensor:
    """Decode a single slot at every position: (P, m+1), no alpha softmax."""
    p = cfg.num_patches
    z = tz.concat([tz.broadcast_to(slot.reshape((1, cfg.slot_dim)), (p, cfg.slot_dim)),
                   params["dec.pos"]], axis=1)
    return _decoder_mlp(params, z, cfg)


def decoder_matrices(weights: ModelWeights) -> list[np.ndarray]:
    """The decoder's linear-layer weights, input to Lipschitz estimation."""
    return [weights.arrays[f"dec.fc{i}.w"] for i in range(weights.config.decoder_layers)]


def masks_from_alphas(alphas: np.ndarray | Tensor, height: int, width: int) -> np.ndarray:
    """Per-pixel labels from a (P, N) map: argmax over slots (ties -> lowest
    index), nearest-neighbor upsampled to (height, width)."""
    a = alphas.data if isinstance(alphas, Tensor) else np.asarray(alphas)
    p = a.shape[0]
    patch = int(round(math.sqrt(height * width / p)))
    if patch < 1 or height % patch or width % patch or (height // patch) * (width // patch) != p:
        raise ValueError(f"{p} patches do not tile {height}x{width}")
    labels = np.argmax(a, axis=1).reshape(height // patch, width // patch)
    return np.kron(labels, np.ones((patch, patch), dtype=np.int64))


def forward_video(params_or_weights, video: np.ndarray, cfg: ModelConfig,
                  rng: np.random.Generator | None = None,
                  noise: np.ndarray | None = None) -> list[FrameResult]:
    """Run the full per-frame loop over a (T,H,W,3) video.

    Frame 0 starts from the learned init embeddings plus seeded Gaussian
    noise (sigma 0.1); frame t>0 starts from the predictor applied to the
    previous corrected slots, so slot identity is carried across time.
    """
    params = (params_or_weights.tensors() if isinstance(params_or_weights, ModelWeights)
              else params_or_weights)
    video = np.asarray(video)
    if video.ndim != 4:
        raise ValueError(f"video must be (T,H,W,3), got {video.shape}")
    t_frames = video.shape[0]
    p = cfg.num_patches
    if noise is None:
        if rng is None:
            raise ValueError("forward_video needs an rng or an explicit noise array")
        noise = SLOT_NOISE_STD * rng.standard_normal((cfg.num_slots, cfg.slot_dim))
    init = params["slots.init"] + noise.astype(params["slots.init"].dtype)
    features = encode_frames(params, video, cfg)
    results: list[FrameResult] = []
    pre = SlotSet(init, "initial")
    for t in range(t_frames):
        f_t = features[t * p : (t + 1) * p, :]
        corrected, attn = slot_attention(params, pre.slots, f_t, cfg)
        recon, alphas = decode(params, corrected, cfg)
        results.append(FrameResult(
            pre_slots=pre,
            slots=SlotSet(corrected, "corrected"),
            features=f_t,
            recon=recon,
            alphas=alphas,
            attn=attn,
        ))
        if t < t_frames - 1:
            pre = SlotSet(predict_next(params, corrected, cfg), "predicted")
    return results


# ---------------------------------------------------------------------------
# accounting


def param_count(weights: ModelWeights) -> dict[str, int]:
    """Exact parameter counts by enumerating the weight map."""
    trainable = sum(a.size for n, a in weights.arrays.items() if n not in weights.frozen)
    frozen = sum(a.size for n, a in weights.arrays.items() if n in weights.frozen)
    return {"trainable": int(trainable), "frozen": int(frozen),
            "total": int(trainable + frozen)}


def matmul_flops(rows: int, inner: int, cols: int) -> int:
    """FLOPs of one matmul under the 2-FLOPs-per-madd convention."""
    return 2 * rows * inner * cols


def flop_count(cfg: ModelConfig, height: int, width: int, t_frames: int) -> int:
    """Analytic FLOPs of one video forward (every matmul, 2x madds)."""
    cfg.validate()
    if height % cfg.patch_size or width % cfg.patch_size:
        raise ValueError("frame size not divisible by patch size")
    p = (height // cfg.patch_size) * (width // cfg.patch_size)
    m, d, n = cfg.feature_dim, cfg.slot_dim, cfg.num_slots
    e = cfg.encoder_hidden
    total = 0
    # encoder + projection, all frames at once
    total += matmul_flops(t_frames * p, cfg.patch_input, m)
    total += matmul_flops(t_frames * p, m, e) + matmul_flops(t_frames * p, e, m)
    total += 2 * matmul_flops(t_frames * p, m, m)
    # slot attention per frame
    per_frame = 2 * matmul_flops(p, m, d)  # k, v
    per_iter = (
        matmul_flops(n, d, d)        # q
        + matmul_flops(n, d, p)      # logits
        + matmul_flops(n, p, d)      # updates
        + 2 * matmul_flops(n, d, 3 * d)  # GRU gates
        + matmul_flops(n, d, cfg.sa_hidden) + matmul_flops(n, cfg.sa_hidden, d)
    )
    total += t_frames * (per_frame + cfg.sa_iterations * per_iter)
    # predictor for frames 1..T-1
    per_pred = (
        4 * matmul_flops(n, d, d)    # q,k,v,o
        + 2 * matmul_flops(n, n, d)  # scores + mix across all heads
        + matmul_flops(n, d, cfg.predictor_ff) + matmul_flops(n, cfg.predictor_ff, d)
    ) * cfg.predictor_layers
    total += max(0, t_frames - 1) * per_pred
    # decoder per frame
    dims = [2 * d] + [cfg.decoder_hidden] * (cfg.decoder_layers - 1) + [m + 1]
    per_dec = sum(matmul_flops(n * p, dims[i], dims[i + 1])
                  for i in range(cfg.decoder_layers))
    total += t_frames * per_dec
    return total
