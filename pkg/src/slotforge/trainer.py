"""Teacher pretraining and slot-level distillation of the student.

Both entry points share one loop: sample a mini-batch, run the student
forward on a fresh tape, assemble rec + alpha*contrast + beta*kd, backprop,
clip the global gradient norm, and take an Adam step (linear warmup).  The
teacher participates only through detached forward passes, so its bytes are
untouched by construction; distillation variants select which KD term feeds
the combined objective.

Per-run RNG streams are split by purpose (data order, student slot noise,
teacher slot noise, init, adapter init, bound-tracking probes) so runs that
differ only in the loss weights stay trajectory-comparable, and a beta=0
distillation is bitwise identical to training the student with no teacher.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import theory
from .errors import ConfigError, DivergenceError, NonFiniteError
from .losses import (
    KD_VARIANTS,
    MATCH_STRATEGIES,
    AdapterMLP,
    LossWeights,
    feature_kd_loss,
    rec_loss,
    reconstruction_kd_loss,
    slot_contrast_loss,
    slot_kd_loss,
    slot_kd_mse,
)
from .model import SLOT_NOISE_STD, ModelConfig, ModelWeights, forward_video
from .tensor import Tape, Tensor, concat

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 2
    lr: float = 4e-4
    grad_clip: float = 0.05
    warmup: int = 100
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    kd_variant: str = "none"
    match: str = "index"
    checkpoint_every: int = 100
    log_every: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kd_variant not in KD_VARIANTS:
            raise ValueError(f"unknown kd_variant {self.kd_variant!r}")
        if self.match not in MATCH_STRATEGIES:
            raise ValueError(f"unknown match strategy {self.match!r}")
        self.loss_weights.validate()


@dataclass
class StepRow:
    step: int
    rec: float
    contrast: float
    kd: float
    total: float
    grad_norm: float
    ms: float


@dataclass
class RunRecord:
    """Append-only per-step scalars plus run identity and bound tracking."""

    seed: int
    config_hash: str = ""
    dataset_hash: str = ""
    kd_variant: str = "none"
    beta: float = 0.0
    match: str = "index"
    rows: list[StepRow] = field(default_factory=list)
    bound_track: list[tuple[int, float, float]] = field(default_factory=list)
    eval_rows: dict[str, float] = field(default_factory=dict)
    aborted_at: int | None = None

    def save_csv(self, path: str | Path) -> None:
        lines = [
            "# slotforge-run v1",
            f"# seed={self.seed}",
            f"# config_hash={self.config_hash}",
            f"# dataset_hash={self.dataset_hash}",
            f"# kd_variant={self.kd_variant}",
            f"# beta={self.beta!r}",
            f"# match={self.match}",
            "step,rec,contrast,kd,total,grad_norm,ms",
        ]
        for r in self.rows:
            lines.append(
                f"{r.step},{r.rec!r},{r.contrast!r},{r.kd!r},{r.total!r},"
                f"{r.grad_norm!r},{r.ms:.3f}"
            )
        for step, mean_c, mean_lhs in self.bound_track:
            lines.append(f"# bound,step={step},mean_c={mean_c!r},mean_lhs={mean_lhs!r}")
        for key, val in self.eval_rows.items():
            lines.append(f"# eval,{key}={val!r}")
        status = f"aborted_at={self.aborted_at}" if self.aborted_at is not None else "completed"
        final = self.rows[-1].total if self.rows else float("nan")
        lines.append(f"# summary,steps={len(self.rows)},final_total={final!r},{status}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_csv(cls, path: str | Path) -> "RunRecord":
        rec = cls(seed=0)
        for line in Path(path).read_text().splitlines():
            if line.startswith("# seed="):
                rec.seed = int(line.split("=", 1)[1])
            elif line.startswith("# config_hash="):
                rec.config_hash = line.split("=", 1)[1]
            elif line.startswith("# dataset_hash="):
                rec.dataset_hash = line.split("=", 1)[1]
            elif line.startswith("# kd_variant="):
                rec.kd_variant = line.split("=", 1)[1]
            elif line.startswith("# beta="):
                rec.beta = float(line.split("=", 1)[1])
            elif line.startswith("# match="):
                rec.match = line.split("=", 1)[1]
            elif line.startswith("# bound,"):
                parts = dict(p.split("=") for p in line[8:].split(","))
                rec.bound_track.append(
                    (int(parts["step"]), float(parts["mean_c"]), float(parts["mean_lhs"]))
                )
            elif line.startswith("# eval,"):
                key, val = line[7:].split("=", 1)
                rec.eval_rows[key] = float(val)
            elif line.startswith("# summary,"):
                if "aborted_at=" in line and "aborted_at=None" not in line:
                    rec.aborted_at = int(line.rsplit("aborted_at=", 1)[1])
            elif line and not line.startswith("#") and not line.startswith("step,"):
                f = line.split(",")
                rec.rows.append(StepRow(int(f[0]), float(f[1]), float(f[2]),
                                        float(f[3]), float(f[4]), float(f[5]),
                                        float(f[6])))
        return rec


def config_fingerprint(*objs) -> str:
    digest = hashlib.sha256()
    for obj in objs:
        digest.update(repr(obj).encode())
    return digest.hexdigest()[:16]


# ---------------------------------------------------------------------------
# optimizer


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float
                   ) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds
    max_norm; returns (grads, pre-clip global norm)."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {n: (g * scale).astype(g.dtype) for n, g in grads.items()}
    return grads, norm


class Adam:
    """Plain Adam (beta1=0.9, beta2=0.999, eps=1e-8) with external clipping."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = ADAM_BETA1 * self.m[name] + (1 - ADAM_BETA1) * g
            self.v[name] = ADAM_BETA2 * self.v[name] + (1 - ADAM_BETA2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            arrays[name] = arrays[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def optimizer_step(adam: Adam, arrays: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray], lr: float,
                   max_norm: float) -> float:
    """Clip-then-Adam; returns the pre-clip global gradient norm."""
    clipped, norm = clip_gradients(grads, max_norm)
    adam.step(arrays, clipped, lr)
    return norm


# ---------------------------------------------------------------------------
# training core


def _stack(frame_tensors: list[list[Tensor]], shape_tail: tuple[int, ...]) -> Tensor:
    """[B][T] tensors -> a (B,T,*tail) tensor on the same tape."""
    parts = [t.reshape((1, 1) + shape_tail) for video in frame_tensors for t in video]
    b, t = len(frame_tensors), len(frame_tensors[0])
    return concat(parts, axis=0).reshape((b, t) + shape_tail)


def _np_stack(frame_tensors: list[list[Tensor]]) -> np.ndarray:
    return np.stack([np.stack([t.data for t in video]) for video in frame_tensors])


class _Run:
    """State for one training run (weights, optimizer, rng streams)."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 videos: np.ndarray, teacher: ModelWeights | None,
                 config_hash: str, dataset_hash: str):
        model_cfg.validate()
        train_cfg.validate()
        if videos.ndim != 5 or videos.shape[0] < 1:
            raise ValueError(f"videos must be (M,T,H,W,3), got {videos.shape}")
        if videos.shape[2] != model_cfg.frame_size or videos.shape[3] != model_cfg.frame_size:
            raise ConfigError(
                f"data frames are {videos.shape[2]}x{videos.shape[3]} but the model "
                f"expects {model_cfg.frame_size}"
            )
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.videos = videos
        self.teacher = teacher
        ss = np.random.SeedSequence(train_cfg.seed)
        (data_ss, noise_ss, init_ss, adapter_ss, self.probe_ss) = ss.spawn(5)
        self.data_rng = np.random.default_rng(data_ss)
        # one slot-noise stream; teacher and student share each per-video
        # draw, so identical weights yield identical slots (and kd = 0)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.weights = ModelWeights.initialize(model_cfg, int(init_ss.generate_state(1)[0]))
        self.adam = Adam()
        self.record = RunRecord(
            seed=train_cfg.seed,
            config_hash=config_hash,
            dataset_hash=dataset_hash,
            kd_variant=train_cfg.kd_variant,
            beta=train_cfg.loss_weights.beta,
            match=train_cfg.match,
        )
        self.kd_active = (
            teacher is not None
            and train_cfg.kd_variant != "none"
            and train_cfg.loss_weights.beta != 0.0
        )
        self.adapter: AdapterMLP | None = None
        if self.kd_active and train_cfg.kd_variant in (
            "feature", "reconstruction", "slot_cosine+reconstruction"
        ):
            self.adapter = AdapterMLP(
                teacher.config.feature_dim, model_cfg.feature_dim,
                seed=int(adapter_ss.generate_state(1)[0]),
            )
        if self.kd_active and train_cfg.kd_variant == "slot_predicted" and videos.shape[1] < 2:
            raise ConfigError("slot_predicted distillation needs videos with T >= 2")

    def _noise(self, rng: np.random.Generator, cfg: ModelConfig) -> np.ndarray:
        return SLOT_NOISE_STD * rng.standard_normal((cfg.num_slots, cfg.slot_dim))

    def _kd_term(self, frames_s, batch, noises) -> Tensor | None:
        """Build the selected distillation term; teacher side is detached."""
        if not self.kd_active:
            return None
        cfg_t = self.teacher.config
        t_params = self.teacher.tensors()
        frames_t = [
            forward_video(t_params, video, cfg_t, noise=noise)
            for video, noise in zip(batch, noises)
        ]
        variant = self.train_cfg.kd_variant
        match = self.train_cfg.match
        n, d = self.model_cfg.num_slots, self.model_cfg.slot_dim
        p, m = self.model_cfg.num_patches, self.model_cfg.feature_dim
        if variant in ("slot_cosine", "slot_mse"):
            student = _stack([[fr.slots.slots for fr in v] for v in frames_s], (n, d))
            teacher = _np_stack([[fr.slots.slots for fr in v] for v in frames_t])
            fn = slot_kd_loss if variant == "slot_cosine" else slot_kd_mse
            return fn(student, teacher, match)
        if variant == "slot_predicted":
            student = _stack([[fr.pre_slots.slots for fr in v[1:]] for v in frames_s], (n, d))
            teacher = _np_stack([[fr.pre_slots.slots for fr in v[1:]] for v in frames_t])
            return slot_kd_loss(student, teacher, match)
        if variant == "feature":
            student = _stack([[fr.features for fr in v] for v in frames_s], (p, m))
            teacher = _np_stack([[fr.features for fr in v] for v in frames_t])
            return feature_kd_loss(student, teacher, self.adapter, self._adapter_params)
        if variant == "reconstruction":
            student = _stack([[fr.recon for fr in v] for v in frames_s], (p, m))
            teacher = _np_stack([[fr.recon for fr in v] for v in frames_t])
            return reconstruction_kd_loss(student, teacher, self.adapter, self._adapter_params)
        if variant == "slot_cosine+reconstruction":
            student = _stack([[fr.slots.slots for fr in v] for v in frames_s], (n, d))
            teacher = _np_stack([[fr.slots.slots for fr in v] for v in frames_t])
            term = slot_kd_loss(student, teacher, match)
            student_r = _stack([[fr.recon for fr in v] for v in frames_s], (p, m))
            teacher_r = _np_stack([[fr.recon for fr in v] for v in frames_t])
            return term + reconstruction_kd_loss(student_r, teacher_r, self.adapter,
                                                 self._adapter_params)
        raise ValueError(f"unhandled kd variant {variant!r}")

    def step(self, step_idx: int) -> StepRow:
        cfg = self.model_cfg
        tcfg = self.train_cfg
        t0 = time.perf_counter()
        idx = self.data_rng.integers(0, self.videos.shape[0], size=tcfg.batch_size)
        batch = [self.videos[i] for i in idx]
        noises = [self._noise(self.noise_rng, cfg) for _ in batch]

        tape = Tape(np.float32)
        params = self.weights.tensors(tape)
        self._adapter_params = (self.adapter.tensors(tape)
                                if self.adapter is not None and self.kd_active else {})
        frames_s = [forward_video(params, video, cfg, noise=noise)
                    for video, noise in zip(batch, noises)]

        p, m = cfg.num_patches, cfg.feature_dim
        recon = _stack([[fr.recon for fr in v] for v in frames_s], (p, m))
        target = _np_stack([[fr.features for fr in v] for v in frames_s])  # detached
        rec = rec_loss(recon, target)

        contrast = None
        if tcfg.loss_weights.alpha != 0.0:
            slots = _stack([[fr.slots.slots for fr in v] for v in frames_s],
                           (cfg.num_slots, cfg.slot_dim))
            contrast = slot_contrast_loss(slots, tcfg.loss_weights.tau)

        kd = self._kd_term(frames_s, batch, noises)

        total = rec
        if contrast is not None:
            total = total + tcfg.loss_weights.alpha * contrast
        if kd is not None:
            total = total + tcfg.loss_weights.beta * kd

        tape.backward(total)
        grads = {name: tape.grad(params[name]) for name in self.weights.trainable_names()}
        for name, tensor in self._adapter_params.items():
            grads[name] = tape.grad(tensor)
        lr_t = tcfg.lr * min(1.0, (step_idx + 1) / max(1, tcfg.warmup))
        clipped, gnorm = clip_gradients(grads, tcfg.grad_clip)
        if self._adapter_params:
            merged = {**self.weights.arrays, **self.adapter.arrays}
            self.adam.step(merged, clipped, lr_t)
            for name in self.weights.arrays:
                self.weights.arrays[name] = merged[name]
            for name in self.adapter.arrays:
                self.adapter.arrays[name] = merged[name]
        else:
            self.adam.step(self.weights.arrays, clipped, lr_t)

        ms = (time.perf_counter() - t0) * 1e3
        return StepRow(
            step=step_idx,
            rec=float(rec.item()),
            contrast=float(contrast.item()) if contrast is not None else 0.0,
            kd=float(kd.item()) if kd is not None else 0.0,
            total=float(total.item()),
            grad_norm=gnorm,
            ms=ms,
        )

    def track_bound(self, step_idx: int) -> None:
        """Record (mean c, mean lhs) over probe videos through the current
        student decoder (equalized mode)."""
        if self.teacher is None:
            return
        probe = self.videos[: min(4, self.videos.shape[0])]
        (probe_child,) = self.probe_ss.spawn(1)
        rng = np.random.default_rng(probe_child)
        t_params = self.teacher.tensors()
        s_params = self.weights.tensors()
        t_slots, s_slots = [], []
        for video in probe:
            noise = self._noise(rng, self.model_cfg)
            ft = forward_video(t_params, video, self.teacher.config, noise=noise)
            fs = forward_video(s_params, video, self.model_cfg, noise=noise)
            for frt, frs in zip(ft, fs):
                t_slots.append(frt.slots.slots.data)
                s_slots.append(frs.slots.slots.data)
        t_stack = np.concatenate(t_slots, axis=0)
        s_stack = np.concatenate(s_slots, axis=0)
        decoder = theory.BroadcastSlotDecoder(self.weights)
        mean_c, mean_lhs = theory.bound_stats(t_stack, s_stack, decoder)
        self.record.bound_track.append((step_idx, mean_c, mean_lhs))

    def train(self) -> tuple[ModelWeights, RunRecord]:
        tcfg = self.train_cfg
        for step_idx in range(tcfg.steps):
            try:
                row = self.step(step_idx)
            except NonFiniteError as err:
                self.record.aborted_at = step_idx
                raise DivergenceError(
                    f"non-finite value at step {step_idx}: {err}", record=self.record
                ) from err
            self.record.rows.append(row)
            if tcfg.log_every and (step_idx % tcfg.log_every == 0 or step_idx == tcfg.steps - 1):
                print(f"step {step_idx:5d}  rec {row.rec:.4f}  contrast {row.contrast:.4f}"
                      f"  kd {row.kd:.4f}  total {row.total:.4f}")
            if self.teacher is not None and (
                (step_idx + 1) % tcfg.checkpoint_every == 0 or step_idx == tcfg.steps - 1
            ):
                self.track_bound(step_idx + 1)
        return self.weights, self.record


def train_teacher(model_cfg: ModelConfig, train_cfg: TrainConfig,
                  videos: np.ndarray, config_hash: str = "",
                  dataset_hash: str = "") -> tuple[ModelWeights, RunRecord]:
    """Pretrain with the contrastive+reconstruction objective (beta = 0)."""
    cfg = replace(train_cfg,
                  kd_variant="none",
                  loss_weights=replace(train_cfg.loss_weights, beta=0.0))
    run = _Run(model_cfg, cfg, videos, teacher=None,
               config_hash=config_hash or config_fingerprint(model_cfg, cfg),
               dataset_hash=dataset_hash)
    return run.train()


def distill(teacher: ModelWeights, student_cfg: ModelConfig, train_cfg: TrainConfig,
            videos: np.ndarray, config_hash: str = "",
            dataset_hash: str = "") -> tuple[ModelWeights, RunRecord]:
    """Run the per-mini-batch distillation loop against a frozen teacher.

    Refuses teachers whose slot count or slot dimension disagree with the
    student config (the slot-space losses need a shared N x d geometry).
    """
    if teacher.config.num_slots != student_cfg.num_slots:
        raise ConfigError(
            f"teacher has {teacher.config.num_slots} slots, student config "
            f"wants {student_cfg.num_slots}"
        )
    if teacher.config.slot_dim != student_cfg.slot_dim:
        raise ConfigError(
            f"teacher slot_dim {teacher.config.slot_dim} != student "
            f"slot_dim {student_cfg.slot_dim}"
        )
    run = _Run(student_cfg, train_cfg, videos, teacher=teacher,
               config_hash=config_hash or config_fingerprint(student_cfg, train_cfg),
               dataset_hash=dataset_hash)
    return run.train()
