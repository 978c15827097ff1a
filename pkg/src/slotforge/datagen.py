"""Synthetic moving-shape videos with exact instance masks.

Scenes contain 0..K flat-colored shapes (disc, square, triangle) drifting
linearly over a constant background and reflecting off the frame borders.
Rendering is hard-edged so the ground-truth masks are unambiguous, and
every pixel value lies on the u8/255 grid so the binary format round-trips
losslessly.  Later-indexed objects occlude earlier ones.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SLTV"
VERSION = 1

SHAPES = ("disc", "square", "triangle")

# Saturated, well-separated object colors; snapped to the u8 grid.
PALETTE = np.array(
    [
        [230, 25, 25],
        [25, 205, 40],
        [40, 50, 230],
        [240, 215, 25],
        [215, 25, 205],
        [25, 215, 215],
        [240, 130, 15],
        [130, 25, 230],
    ],
    dtype=np.float32,
) / 255.0


@dataclass
class GenConfig:
    """Knobs for :func:`generate`; sizes default to the desk-scale setup."""

    num_videos: int = 1
    frames: int = 4
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 4
    min_radius: float = 6.0
    max_radius: float = 11.0
    max_speed: float = 1.0

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError("frame size must be at least 16x16")
        if self.frames < 1:
            raise ValueError("need at least one frame")
        if self.num_videos < 1:
            raise ValueError("need at least one video")
        if not (0 <= self.min_objects <= self.max_objects):
            raise ValueError("invalid object-count range")
        if self.min_radius <= 1 or self.max_radius < self.min_radius:
            raise ValueError("invalid radius range")
        if self.max_speed < 0:
            raise ValueError("max_speed must be non-negative")


@dataclass
class SceneSpec:
    """One scene: per-object shape/color/motion plus a background color.

    Positions and velocities are stored as (row, col) in pixels and pixels
    per frame.  Velocities stay small enough that objects remain at least
    partially visible (centers reflect inside the frame).
    """

    num_objects: int
    shapes: list[str]
    colors: np.ndarray       # (K, 3) in [0, 1], on the u8/255 grid
    positions: np.ndarray    # (K, 2) float
    velocities: np.ndarray   # (K, 2) float, px/frame
    radii: np.ndarray        # (K,) float
    background: np.ndarray   # (3,) in [0, 1], on the u8/255 grid

    def validate(self) -> None:
        k = self.num_objects
        if k < 0:
            raise ValueError("num_objects must be non-negative")
        if not (len(self.shapes) == len(self.colors) == len(self.positions)
                == len(self.velocities) == len(self.radii) == k):
            raise ValueError("per-object fields disagree with num_objects")
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")


@dataclass
class VideoBatch:
    """frames: (B,T,H,W,3) float32 in [0,1]; gt_masks: (B,T,H,W) int labels.

    Label 0 is background; labels 1..K are instance ids kept stable across
    all T frames of a video.
    """

    frames: np.ndarray
    gt_masks: np.ndarray
    specs: list[SceneSpec] = field(default_factory=list)

    def validate(self) -> None:
        if self.frames.ndim != 5 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (B,T,H,W,3), got {self.frames.shape}")
        if self.gt_masks.shape != self.frames.shape[:4]:
            raise ValueError("gt_masks shape does not match frames")
        if self.gt_masks.min() < 0 or self.gt_masks.max() > 0xFFFF:
            raise ValueError("mask labels out of u16 range")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape[:4]


def _reflect(value: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fold positions into [lo, hi] as if bouncing off both walls."""
    span = hi - lo
    if span <= 0:
        return np.full_like(value, lo)
    d = np.mod(value - lo, 2 * span)
    return lo + np.where(d > span, 2 * span - d, d)


def _shape_mask(shape: str, cy: float, cx: float, r: float,
                yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if shape == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "square":
        h = 0.9 * r
        return (np.abs(yy - cy) <= h) & (np.abs(xx - cx) <= h)
    # upward-pointing triangle via three half-plane tests
    ay, ax = cy - r, cx
    by, bx = cy + r, cx - r
    gy, gx = cy + r, cx + r
    d1 = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
    d2 = (gx - bx) * (yy - by) - (gy - by) * (xx - bx)
    d3 = (ax - gx) * (yy - gy) - (ay - gy) * (xx - gx)
    neg = (d1 < 0) & (d2 < 0) & (d3 < 0)
    pos = (d1 > 0) & (d2 > 0) & (d3 > 0)
    return neg | pos


def render_scene(spec: SceneSpec, frames: int, height: int, width: int
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize one scene; returns (T,H,W,3) float32 frames and (T,H,W) masks."""
    spec.validate()
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    video = np.empty((frames, height, width, 3), dtype=np.float32)
    masks = np.zeros((frames, height, width), dtype=np.int32)
    for t in range(frames):
        frame = np.broadcast_to(spec.background, (height, width, 3)).copy()
        label = np.zeros((height, width), dtype=np.int32)
        for k in range(spec.num_objects):
            cy = _reflect(spec.positions[k, 0] + t * spec.velocities[k, 0], 0.0, height - 1.0)
            cx = _reflect(spec.positions[k, 1] + t * spec.velocities[k, 1], 0.0, width - 1.0)
            m = _shape_mask(spec.shapes[k], float(cy), float(cx), float(spec.radii[k]), yy, xx)
            frame[m] = spec.colors[k]
            label[m] = k + 1  # later objects occlude earlier ones
        video[t] = frame
        masks[t] = label
    return video, masks


def random_scene(rng: np.random.Generator, cfg: GenConfig) -> SceneSpec:
    """Draw a scene spec: distinct palette colors, safe initial placement."""
    k = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    shapes = [SHAPES[int(i)] for i in rng.integers(0, len(SHAPES), size=k)]
    color_idx = rng.permutation(len(PALETTE))[:k]
    colors = PALETTE[color_idx].copy()
    radii = rng.uniform(cfg.min_radius, cfg.max_radius, size=k)
    margin_y = np.minimum(radii + 1, cfg.height / 2 - 1)
    margin_x = np.minimum(radii + 1, cfg.width / 2 - 1)
    positions = np.stack(
        [
            rng.uniform(margin_y, cfg.height - 1 - margin_y),
            rng.uniform(margin_x, cfg.width - 1 - margin_x),
        ],
        axis=1,
    )
    velocities = rng.uniform(-cfg.max_speed, cfg.max_speed, size=(k, 2))
    background = np.round(rng.uniform(30, 80, size=3)).astype(np.float32) / 255.0
    return SceneSpec(
        num_objects=k,
        shapes=shapes,
        colors=colors,
        positions=positions,
        velocities=velocities,
        radii=radii,
        background=background,
    )


def generate(seed: int, cfg: GenConfig | None = None) -> VideoBatch:
    """Deterministic batch: same (seed, cfg) yields bit-identical output."""
    cfg = cfg or GenConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    frames = np.empty((cfg.num_videos, cfg.frames, cfg.height, cfg.width, 3), dtype=np.float32)
    masks = np.empty((cfg.num_videos, cfg.frames, cfg.height, cfg.width), dtype=np.int32)
    specs = []
    for b in range(cfg.num_videos):
        spec = random_scene(rng, cfg)
        frames[b], masks[b] = render_scene(spec, cfg.frames, cfg.height, cfg.width)
        specs.append(spec)
    batch = VideoBatch(frames=frames, gt_masks=masks, specs=specs)
    batch.validate()
    return batch


# ---------------------------------------------------------------------------
# binary dataset format: magic "SLTV", version u32 LE, B,T,H,W u32 LE,
# frames as u8 (round(255*f)), masks as u16 LE.


def save(batch: VideoBatch, path: str | Path) -> None:
    batch.validate()
    b, t, h, w = batch.shape
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<5I", VERSION, b, t, h, w)
    payload += np.rint(batch.frames * 255.0).astype(np.uint8).tobytes()
    payload += batch.gt_masks.astype("<u2").tobytes()
    Path(path).write_bytes(bytes(payload))


def load(path: str | Path) -> VideoBatch:
    raw = Path(path).read_bytes()
    header = 4 + 5 * 4
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, b, t, h, w = struct.unpack("<5I", raw[4:header])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n_px = b * t * h * w
    expected = header + n_px * 3 + n_px * 2
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    frames_u8 = np.frombuffer(raw, dtype=np.uint8, count=n_px * 3, offset=header)
    masks_u16 = np.frombuffer(raw, dtype="<u2", count=n_px, offset=header + n_px * 3)
    frames = (frames_u8.astype(np.float32) / 255.0).reshape(b, t, h, w, 3)
    masks = masks_u16.astype(np.int32).reshape(b, t, h, w)
    batch = VideoBatch(frames=frames, gt_masks=masks)
    batch.validate()
    return batch


def save_dataset(batch: VideoBatch, out_dir: str | Path) -> list[Path]:
    """One file per video, named video_0000.sltv, video_0001.sltv, ..."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(batch.shape[0]):
        p = out / f"video_{i:04d}.sltv"
        save(
            VideoBatch(frames=batch.frames[i : i + 1], gt_masks=batch.gt_masks[i : i + 1]),
            p,
        )
        paths.append(p)
    return paths


def load_dataset(path: str | Path) -> tuple[VideoBatch, str]:
    """Load a directory of .sltv files (or a single file); returns (batch, hash).

    The hash is a sha256 over the raw file bytes in sorted-name order and
    identifies the dataset for run-record compatibility checks.
    """
    p = Path(path)
    files = sorted(p.glob("*.sltv")) if p.is_dir() else [p]
    if not files:
        raise FormatError(f"{path}: no .sltv files found")
    digest = hashlib.sha256()
    parts = []
    for f in files:
        digest.update(f.read_bytes())
        parts.append(load(f))
    frames = np.concatenate([x.frames for x in parts], axis=0)
    masks = np.concatenate([x.gt_masks for x in parts], axis=0)
    shapes = {x.frames.shape[1:] for x in parts}
    if len(shapes) != 1:
        raise FormatError(f"{path}: mixed video shapes {shapes}")
    return VideoBatch(frames=frames, gt_masks=masks), digest.hexdigest()
