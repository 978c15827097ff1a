"""Empirical verification that the cosine slot-distillation loss bounds the
teacher-student reconstruction discrepancy through a Lipschitz decoder.

For equal-norm slots (||s_T|| = ||s_S|| = r) and a K_f-Lipschitz per-slot
decoder f, a distillation value c = 1 - cos(s_T, s_S) implies
||f(s_T) - f(s_S)||^2 <= 2 * K_f^2 * r^2 * c.  K_f is upper-bounded by the
product of per-layer spectral norms (ReLU is 1-Lipschitz, biases drop out),
each inflated by 1e-6 so early-stopped power iteration can never understate
the bound.

The per-slot decode path is the spatial-broadcast stack evaluated at every
position and scaled by 1/sqrt(P): the slot-to-broadcast map repeats the slot
P times (a sqrt(P)-Lipschitz map), so the scaling makes the positional
concatenation exactly 1-Lipschitz in the slot argument and keeps the
product-of-spectral-norms bound sound for the stacked output.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateSlotError
from .model import ModelConfig, ModelWeights, decoder_matrices, per_slot_decode
from .tensor import DEGENERATE_EPS, Tensor

SAFETY_INFLATION = 1e-6


def spectral_norm(w: np.ndarray, iters: int = 1000, tol: float = 1e-10) -> float:
    """Largest singular value by power iteration on W^T W.

    Runs until the relative change drops below ``tol`` (or ``iters``), then
    inflates the estimate by (1 + 1e-6) so the result stays an upper bound
    for the converged value despite early stopping.  A zero matrix returns
    0 without iterating.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"spectral_norm expects a matrix, got shape {w.shape}")
    if not np.any(w):
        return 0.0
    v = np.ones(w.shape[1]) / np.sqrt(w.shape[1])
    sigma = 0.0
    for _ in range(iters):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            # v is in the null space; restart from a deterministic direction
            v = np.random.default_rng(0).standard_normal(w.shape[1])
            v /= np.linalg.norm(v)
            continue
        v_next = w.T @ u
        nv = np.linalg.norm(v_next)
        if nv == 0.0:
            break
        v = v_next / nv
        prev, sigma = sigma, nu
        if sigma > 0 and abs(sigma - prev) / sigma < tol:
            break
    sigma = float(np.linalg.norm(w @ v))
    return sigma * (1.0 + SAFETY_INFLATION)


@dataclass
class LipschitzEstimate:
    """Per-layer spectral norms and their product bound."""

    layer_norms: list[float]
    product: float

    @property
    def k_f(self) -> float:
        return self.product


def lipschitz_upper_bound(matrices: list[np.ndarray], iters: int = 1000,
                          tol: float = 1e-10) -> LipschitzEstimate:
    """K_f = prod of layer spectral norms for a linear+ReLU stack.

    ReLU contributes a factor of exactly 1 and biases contribute 0, so the
    product is a true upper bound on the operator Lipschitz constant.
    """
    norms = [spectral_norm(w, iters=iters, tol=tol) for w in matrices]
    return LipschitzEstimate(layer_norms=norms, product=float(np.prod(norms)))


class MlpSlotDecoder:
    """A bare linear/ReLU stack as the theorem's f (tests and toy checks)."""

    def __init__(self, matrices: list[np.ndarray], biases: list[np.ndarray] | None = None):
        self.mats = [np.asarray(m, dtype=np.float64) for m in matrices]
        self.biases = ([np.zeros(m.shape[1]) for m in self.mats]
                       if biases is None else [np.asarray(b, np.float64) for b in biases])

    def matrices(self) -> list[np.ndarray]:
        return self.mats

    def apply(self, slot: np.ndarray) -> np.ndarray:
        x = np.asarray(slot, dtype=np.float64)
        for i, (w, b) in enumerate(zip(self.mats, self.biases)):
            x = x @ w + b
            if i < len(self.mats) - 1:
                x = np.maximum(x, 0.0)
        return x.reshape(-1)


class BroadcastSlotDecoder:
    """The model's per-slot broadcast-decode path as the theorem's f.

    ``apply`` returns the (P, m+1) stack flattened and scaled by 1/sqrt(P)
    (see the module docstring for why the scaling keeps K_f sound).
    """

    def __init__(self, weights: ModelWeights):
        self.weights = weights.astype(np.float64)
        self.config: ModelConfig = weights.config
        self._params = self.weights.tensors()

    def matrices(self) -> list[np.ndarray]:
        return decoder_matrices(self.weights)

    def apply(self, slot: np.ndarray) -> np.ndarray:
        out = per_slot_decode(self._params, Tensor(np.asarray(slot, np.float64)),
                              self.config)
        return out.data.reshape(-1) / np.sqrt(self.config.num_patches)


@dataclass
class BoundRow:
    pair_id: int
    c: float
    lhs: float
    r: float
    bound: float
    slack: float
    norm_gap: float


@dataclass
class BoundReport:
    """Per-pair bound checks plus the violation summary."""

    mode: str
    k_f: float
    rows: list[BoundRow] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(1 for r in self.rows if r.slack < 0)

    @property
    def min_slack(self) -> float:
        return min((r.slack for r in self.rows), default=0.0)

    def mean_c(self) -> float:
        return float(np.mean([r.c for r in self.rows])) if self.rows else 0.0

    def mean_lhs(self) -> float:
        return float(np.mean([r.lhs for r in self.rows])) if self.rows else 0.0

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair_id", "c", "lhs", "r", "k_f", "bound", "slack", "norm_gap"])
            for r in self.rows:
                writer.writerow([r.pair_id, repr(r.c), repr(r.lhs), repr(r.r),
                                 repr(self.k_f), repr(r.bound), repr(r.slack),
                                 repr(r.norm_gap)])
            writer.writerow(["summary", f"violations={self.violations}",
                             f"min_slack={self.min_slack!r}",
                             f"mean_c={self.mean_c()!r}",
                             f"mean_lhs={self.mean_lhs()!r}", "", "", ""])


def verify_theorem(teacher_slots, student_slots, decoder,
                   mode: str = "equalized") -> BoundReport:
    """Check lhs = ||f(s_T) - f(s_S)||^2 <= 2 K_f^2 r^2 c on every pair.

    ``mode='equalized'`` rescales each pair to the geometric mean of its
    norms (the theorem's equal-norm hypothesis; cosine and therefore c are
    unchanged) and the bound must then hold for every pair.  ``mode='raw'``
    skips rescaling and reports |  ||s_T|| - ||s_S||  | as norm_gap; no
    bound guarantee is claimed there.
    """
    if mode not in ("equalized", "raw"):
        raise ValueError(f"unknown mode {mode!r}")
    t_slots = np.asarray(teacher_slots, dtype=np.float64)
    s_slots = np.asarray(student_slots, dtype=np.float64)
    if t_slots.shape != s_slots.shape or t_slots.ndim != 2:
        raise ValueError(f"slot stacks must share (K,d): {t_slots.shape} vs {s_slots.shape}")
    k_f = lipschitz_upper_bound(decoder.matrices()).k_f
    report = BoundReport(mode=mode, k_f=k_f)
    for i, (st, ss) in enumerate(zip(t_slots, s_slots)):
        nt = float(np.linalg.norm(st))
        ns = float(np.linalg.norm(ss))
        if nt < DEGENERATE_EPS or ns < DEGENERATE_EPS:
            raise DegenerateSlotError(f"pair {i} contains a (near-)zero slot")
        r = float(np.sqrt(nt * ns))
        ut, us = st / nt, ss / ns
        if mode == "equalized":
            a, b = r * ut, r * us
            # ||u_t - u_s||^2 / 2 equals 1 - cos and is stable near cos=1
            c = float(np.sum((ut - us) ** 2) / 2.0)
            norm_gap = 0.0
        else:
            a, b = st, ss
            c = float(1.0 - np.dot(ut, us))
            norm_gap = abs(nt - ns)
        lhs = float(np.sum((decoder.apply(a) - decoder.apply(b)) ** 2))
        bound = 2.0 * k_f * k_f * r * r * c
        report.rows.append(BoundRow(
            pair_id=i, c=c, lhs=lhs, r=r, bound=bound,
            slack=bound - lhs, norm_gap=norm_gap,
        ))
    return report


def bound_stats(teacher_slots, student_slots, decoder) -> tuple[float, float]:
    """(mean c, mean lhs) in equalized mode; used for bound tracking."""
    report = verify_theorem(teacher_slots, student_slots, decoder, mode="equalized")
    return report.mean_c(), report.mean_lhs()


def scatter_svg(report: BoundReport, path: str | Path) -> None:
    """lhs-vs-bound scatter with the y=x reference line, as standalone SVG."""
    from .report import svg_scatter  # local import to keep theory dependency-light

    points = [(r.lhs, r.bound) for r in report.rows]
    svg_scatter(
        path,
        points,
        x_label="lhs = ||f(sT) - f(sS)||^2",
        y_label="bound = 2 K_f^2 r^2 c",
        title=f"Theorem bound check ({report.mode}, violations={report.violations})",
        diagonal=True,
    )
