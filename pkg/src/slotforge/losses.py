"""Training objectives: reconstruction, slot-slot contrastive, cosine slot
distillation, and the baseline/ablation distillation variants.

Teacher-side inputs are plain arrays (or detached tensors) everywhere, so
no gradient ever reaches the teacher: distillation only moves the student.
Slot correspondence defaults to index identity; Hungarian matching is the
ablation alternative and solves the assignment exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as tz
from .errors import DegenerateSlotError
from .tensor import Tape, Tensor

BETA_SWEEP_GRID = (0.1, 0.2, 0.3, 0.5, 0.8)

KD_VARIANTS = (
    "none",
    "slot_cosine",
    "slot_mse",
    "slot_predicted",
    "feature",
    "reconstruction",
    "slot_cosine+reconstruction",
)

MATCH_STRATEGIES = ("index", "hungarian")


@dataclass(frozen=True)
class LossWeights:
    """Eq.-style weights: total = rec + alpha * contrast + beta * kd."""

    alpha: float = 0.5
    beta: float = 0.2
    tau: float = 0.1

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


def _as_const(x) -> np.ndarray:
    """Teacher-side detachment: whatever comes in, only values leave."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def rec_loss(recon: Tensor, target) -> Tensor:
    """(1/(B*T)) sum_bt ||recon_bt - target_bt||^2 over (B,T,P,m) stacks.

    The norm is the plain sum of squared entries of each P x m block; only
    the video/frame axes are averaged.
    """
    target = target if isinstance(target, Tensor) else tz.as_tensor(target)
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {target.shape}")
    if recon.ndim != 4:
        raise ValueError(f"expected (B,T,P,m), got {recon.shape}")
    b, t = recon.shape[0], recon.shape[1]
    diff = recon - target
    return tz.tsum(diff * diff) * (1.0 / (b * t))


def slot_contrast_loss(slots: Tensor, tau: float) -> Tensor:
    """Temporal InfoNCE over slots, Alg.-style normalization.

    Anchors are all slots at frames t <= T-1; the positive is the same slot
    index at t+1; the denominator ranges over every other slot of the
    mini-batch (positive included, anchor itself excluded).  The outer
    average divides by B*T*N even though anchors stop at T-1, exactly as
    the printed algorithm does.  Similarity is cosine.
    """
    if slots.ndim != 4:
        raise ValueError(f"expected (B,T,N,d), got {slots.shape}")
    b, t, n, d = slots.shape
    if t < 2:
        raise ValueError("slot_contrast_loss needs at least two frames")
    v = b * t * n
    flat = tz.l2_normalize(slots.reshape((v, d)), axis=1)
    logits = tz.matmul(flat, flat.T) * (1.0 / tau)      # (V, V) cosine / tau

    anchor_ids, pos_ids = [], []
    for bi in range(b):
        for ti in range(t - 1):
            base = (bi * t + ti) * n
            for ni in range(n):
                anchor_ids.append(base + ni)
                pos_ids.append(base + n + ni)
    a = len(anchor_ids)
    sel = np.zeros((a, v), dtype=logits.dtype)
    sel[np.arange(a), anchor_ids] = 1.0
    rows = tz.matmul(tz.as_tensor(sel), logits)          # (A, V) anchor rows

    pos_mask = np.zeros((a, v), dtype=logits.dtype)
    pos_mask[np.arange(a), pos_ids] = 1.0
    pos = tz.tsum(rows * pos_mask, axis=1)               # (A,)

    denom_mask = np.ones((a, v), dtype=logits.dtype)
    denom_mask[np.arange(a), anchor_ids] = 0.0
    shifted = rows - _row_max(rows.data, denom_mask)     # detached stability shift
    lse = tz.log(tz.tsum(tz.exp(shifted) * denom_mask, axis=1, keepdims=True))
    lse = lse.reshape((a,)) + tz.as_tensor(_row_max(rows.data, denom_mask).reshape(-1))
    return tz.tsum(lse - pos) * (1.0 / v)


def _row_max(rows: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked = np.where(mask > 0, rows, -np.inf)
    return masked.max(axis=1, keepdims=True)


def match_slots(student, teacher, strategy: str = "index") -> np.ndarray:
    """Permutation pi of teacher indices pairing student slot n with
    teacher slot pi[n].

    ``index`` returns the identity; ``hungarian`` minimizes
    sum_n (1 - cos(student_n, teacher_pi(n))) exactly.
    """
    if strategy not in MATCH_STRATEGIES:
        raise ValueError(f"unknown match strategy {strategy!r}")
    s = _as_const(student)
    t = _as_const(teacher)
    if s.shape != t.shape or s.ndim != 2:
        raise ValueError(f"slot sets must share (N,d): {s.shape} vs {t.shape}")
    n = s.shape[0]
    if strategy == "index":
        return np.arange(n)
    row, col = linear_sum_assignment(_cosine_cost(s, t))
    perm = np.empty(n, dtype=np.int64)
    perm[row] = col
    return perm


def _cosine_cost(s: np.ndarray, t: np.ndarray) -> np.ndarray:
    sn = np.linalg.norm(s, axis=1)
    tn = np.linalg.norm(t, axis=1)
    if sn.min() < tz.DEGENERATE_EPS or tn.min() < tz.DEGENERATE_EPS:
        raise DegenerateSlotError("cannot match slot sets containing a zero slot")
    cos = (s / sn[:, None]) @ (t / tn[:, None]).T
    return 1.0 - cos


def assignment_cost(student, teacher, perm: np.ndarray) -> float:
    """sum_n (1 - cos(student_n, teacher_perm[n])) for a given pairing."""
    cost = _cosine_cost(_as_const(student), _as_const(teacher))
    return float(cost[np.arange(len(perm)), perm].sum())


def _permuted_teacher(student: Tensor, teacher, strategy: str) -> np.ndarray:
    """Teacher slots rearranged per-(video,frame) by the match strategy."""
    t = _as_const(teacher)
    s = student.data
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {t.shape}")
    if s.ndim != 4:
        raise ValueError(f"expected (B,T,N,d), got {s.shape}")
    if strategy == "index":
        return t
    out = np.empty_like(t)
    for bi in range(s.shape[0]):
        for ti in range(s.shape[1]):
            perm = match_slots(s[bi, ti], t[bi, ti], strategy)
            out[bi, ti] = t[bi, ti][perm]
    return out


def slot_kd_loss(student: Tensor, teacher, strategy: str = "index") -> Tensor:
    """Cosine slot distillation: mean over (b,t,n) of 1 - cos(s^S, s^T_pi).

    Teacher slots are treated as constants (gradient-detached).
    """
    t = _permuted_teacher(student, teacher, strategy)
    b, tt, n, d = student.shape
    flat_s = tz.l2_normalize(student.reshape((b * tt * n, d)), axis=1)
    t_flat = t.reshape(b * tt * n, d)
    t_norms = np.linalg.norm(t_flat, axis=1)
    if t_norms.min() < tz.DEGENERATE_EPS:
        raise DegenerateSlotError("teacher slot with (near-)zero norm")
    t_hat = t_flat / t_norms[:, None]
    cos = tz.tsum(flat_s * tz.as_tensor(t_hat), axis=1)
    return tz.tmean(1.0 - cos)


def slot_kd_mse(student: Tensor, teacher, strategy: str = "index") -> Tensor:
    """MSE ablation: mean over (b,t,n) of ||s^S - s^T_pi||^2."""
    t = _permuted_teacher(student, teacher, strategy)
    b, tt, n, d = student.shape
    diff = student - tz.as_tensor(t)
    per_slot = tz.tsum((diff * diff).reshape((b * tt * n, d)), axis=1)
    return tz.tmean(per_slot)


class AdapterMLP:
    """Trainable two-layer ReLU MLP mapping teacher widths to student widths
    (used only by the feature / reconstruction KD baselines)."""

    def __init__(self, in_dim: int, out_dim: int, seed: int):
        rng = np.random.default_rng(seed)
        hidden = out_dim
        limit1 = np.sqrt(6.0 / (in_dim + hidden))
        limit2 = np.sqrt(6.0 / (hidden + out_dim))
        self.arrays = {
            "adapter.fc1.w": rng.uniform(-limit1, limit1, size=(in_dim, hidden)).astype(np.float32),
            "adapter.fc1.b": np.zeros(hidden, dtype=np.float32),
            "adapter.fc2.w": rng.uniform(-limit2, limit2, size=(hidden, out_dim)).astype(np.float32),
            "adapter.fc2.b": np.zeros(out_dim, dtype=np.float32),
        }

    def tensors(self, tape: Tape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {n: Tensor(a) for n, a in self.arrays.items()}
        return {n: tape.leaf(a) for n, a in self.arrays.items()}

    def apply(self, params: dict[str, Tensor], x) -> Tensor:
        x = x if isinstance(x, Tensor) else tz.as_tensor(x)
        h = tz.relu(tz.linear(x, params["adapter.fc1.w"], params["adapter.fc1.b"]))
        return tz.linear(h, params["adapter.fc2.w"], params["adapter.fc2.b"])


def feature_kd_loss(student_features: Tensor, teacher_features,
                    adapter: AdapterMLP, adapter_params: dict[str, Tensor]) -> Tensor:
    """MSE between student features and adapted (detached) teacher features."""
    t = _as_const(teacher_features)
    if student_features.ndim != 4 or t.ndim != 4:
        raise ValueError("expected (B,T,P,m) feature stacks")
    if student_features.shape[:3] != t.shape[:3]:
        raise ValueError(f"shape mismatch: {student_features.shape} vs {t.shape}")
    b, tt, p, ms = student_features.shape
    mapped = adapter.apply(adapter_params, t.reshape(b * tt * p, t.shape[3]))
    diff = student_features.reshape((b * tt * p, ms)) - mapped
    return tz.tmean(diff * diff)


def reconstruction_kd_loss(student_recon: Tensor, teacher_recon,
                           adapter: AdapterMLP, adapter_params: dict[str, Tensor]) -> Tensor:
    """Same contract as feature_kd_loss, applied to decoder outputs."""
    return feature_kd_loss(student_recon, teacher_recon, adapter, adapter_params)


def total_loss(rec, contrast, kd, weights: LossWeights):
    """rec + alpha * contrast + beta * kd (terms may be Tensors or floats)."""
    weights.validate()
    out = rec
    if contrast is not None:
        out = out + weights.alpha * contrast
    if kd is not None:
        out = out + weights.beta * kd
    return out
