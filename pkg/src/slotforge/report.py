"""CSV aggregation and dependency-free SVG charts for run comparisons."""

from __future__ import annotations

import csv
import math
from pathlib import Path

from .errors import ConfigError
from .trainer import RunRecord

SVG_W, SVG_H = 640, 420
MARGIN = 56


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _axis_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not math.isfinite(lo) or not math.isfinite(hi) or hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


class _Canvas:
    """Collects SVG elements for one plot with linear data-to-pixel mapping."""

    def __init__(self, x_range, y_range, title, x_label, y_label):
        self.parts: list[str] = []
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0
        self.parts.append(
            f'<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>'
        )
        self.parts.append(
            f'<text x="{SVG_W / 2}" y="20" text-anchor="middle" font-size="14">'
            f"{title}</text>"
        )
        self.parts.append(
            f'<text x="{SVG_W / 2}" y="{SVG_H - 8}" text-anchor="middle" '
            f'font-size="11">{x_label}</text>'
        )
        self.parts.append(
            f'<text x="14" y="{SVG_H / 2}" text-anchor="middle" font-size="11" '
            f'transform="rotate(-90 14 {SVG_H / 2})">{y_label}</text>'
        )
        self.parts.append(
            f'<rect x="{MARGIN}" y="{MARGIN / 2}" width="{SVG_W - 2 * MARGIN}" '
            f'height="{SVG_H - MARGIN - MARGIN / 2 - 14}" fill="none" stroke="#888"/>'
        )
        for tx in _axis_ticks(self.x0, self.x1):
            px, _ = self.to_px(tx, self.y0)
            self.parts.append(
                f'<text x="{px:.1f}" y="{SVG_H - MARGIN + 14}" text-anchor="middle" '
                f'font-size="10">{_fmt(tx)}</text>'
            )
        for ty in _axis_ticks(self.y0, self.y1):
            _, py = self.to_px(self.x0, ty)
            self.parts.append(
                f'<text x="{MARGIN - 6}" y="{py:.1f}" text-anchor="end" '
                f'font-size="10">{_fmt(ty)}</text>'
            )

    def to_px(self, x: float, y: float) -> tuple[float, float]:
        plot_w = SVG_W - 2 * MARGIN
        plot_h = SVG_H - MARGIN - MARGIN / 2 - 14
        px = MARGIN + (x - self.x0) / (self.x1 - self.x0) * plot_w
        py = (MARGIN / 2 + plot_h) - (y - self.y0) / (self.y1 - self.y0) * plot_h
        return px, py

    def circle(self, x, y, r=4.0, color="#1f77b4", opacity=0.8):
        px, py = self.to_px(x, y)
        self.parts.append(
            f'<circle cx="{px:.1f}" cy="{py:.1f}" r="{r:.1f}" fill="{color}" '
            f'fill-opacity="{opacity}"/>'
        )

    def polyline(self, points, color="#1f77b4", label=None):
        px = " ".join(f"{x:.1f},{y:.1f}" for x, y in (self.to_px(*pt) for pt in points))
        self.parts.append(
            f'<polyline points="{px}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        if label and points:
            lx, ly = self.to_px(*points[-1])
            self.parts.append(
                f'<text x="{min(lx + 4, SVG_W - 40):.1f}" y="{ly:.1f}" '
                f'font-size="10" fill="{color}">{label}</text>'
            )

    def line(self, a, b, color="#999", dash="4,3"):
        x1, y1 = self.to_px(*a)
        x2, y2 = self.to_px(*b)
        self.parts.append(
            f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" '
            f'stroke="{color}" stroke-dasharray="{dash}"/>'
        )

    def write(self, path: str | Path) -> None:
        body = "\n".join(self.parts)
        Path(path).write_text(
            '<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
            f'width="{SVG_W}" height="{SVG_H}">\n{body}\n</svg>\n'
        )


def svg_scatter(path, points, x_label="x", y_label="y", title="",
                sizes=None, diagonal=False) -> None:
    """Scatter plot; optional per-point radii and a y=x reference line."""
    pts = [(float(x), float(y)) for x, y in points]
    if not pts:
        pts = [(0.0, 0.0)]
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    lo = min(min(xs), min(ys)) if diagonal else min(xs)
    hi = max(max(xs), max(ys)) if diagonal else max(xs)
    x_range = (lo, hi) if diagonal else (min(xs), max(xs))
    y_range = (lo, hi) if diagonal else (min(ys), max(ys))
    canvas = _Canvas(x_range, y_range, title, x_label, y_label)
    if diagonal:
        canvas.line((canvas.x0, canvas.x0), (canvas.x1, canvas.x1))
    for i, (x, y) in enumerate(pts):
        r = 4.0 if sizes is None else sizes[i]
        canvas.circle(x, y, r=r)
    canvas.write(path)


def svg_curves(path, series, x_label="step", y_label="loss", title="") -> None:
    """Multi-series line chart; ``series`` maps label -> [(x, y), ...]."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    all_pts = [pt for pts in series.values() for pt in pts] or [(0.0, 0.0)]
    xs = [p[0] for p in all_pts]
    ys = [p[1] for p in all_pts]
    canvas = _Canvas((min(xs), max(xs)), (min(ys), max(ys)), title, x_label, y_label)
    for i, (label, pts) in enumerate(series.items()):
        if pts:
            canvas.polyline(pts, color=colors[i % len(colors)], label=label)
    canvas.write(path)


# ---------------------------------------------------------------------------
# run aggregation


def collect_runs(runs_dir: str | Path) -> list[tuple[Path, RunRecord]]:
    runs_dir = Path(runs_dir)
    paths = sorted(runs_dir.glob("**/run*.csv"))
    if not paths:
        raise ConfigError(f"{runs_dir}: no run CSVs found")
    return [(p, RunRecord.load_csv(p)) for p in paths]


def write_comparison(runs_dir: str | Path, out_dir: str | Path) -> Path:
    """Aggregate run records into a comparison table plus loss-curve and
    quality/speed scatter SVGs.  Refuses to mix runs over different data."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = collect_runs(runs_dir)
    hashes = {rec.dataset_hash for _, rec in runs if rec.dataset_hash}
    if len(hashes) > 1:
        raise ConfigError(f"refusing to aggregate runs over different datasets: {hashes}")
    runs.sort(key=lambda pr: (pr[1].beta, pr[0].name))

    table = out_dir / "comparison.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "run", "kd_variant", "beta", "match", "seed", "steps",
            "final_rec", "final_contrast", "final_kd", "final_total",
            "mean_step_ms", "video_mbo", "video_fg_ari",
        ])
        for path, rec in runs:
            last = rec.rows[-1] if rec.rows else None
            mean_ms = (sum(r.ms for r in rec.rows) / len(rec.rows)) if rec.rows else ""
            writer.writerow([
                path.stem, rec.kd_variant, repr(rec.beta), rec.match, rec.seed,
                len(rec.rows),
                repr(last.rec) if last else "",
                repr(last.contrast) if last else "",
                repr(last.kd) if last else "",
                repr(last.total) if last else "",
                f"{mean_ms:.3f}" if mean_ms != "" else "",
                repr(rec.eval_rows["video_mbo"]) if "video_mbo" in rec.eval_rows else "",
                repr(rec.eval_rows["video_fg_ari"]) if "video_fg_ari" in rec.eval_rows else "",
            ])

    curves = {}
    for path, rec in runs:
        curves[f"{path.stem}:total"] = [(r.step, r.total) for r in rec.rows]
    svg_curves(out_dir / "curves.svg", curves, title="training loss")

    scatter_pts, sizes = [], []
    for path, rec in runs:
        if "video_mbo" in rec.eval_rows and rec.rows:
            mean_ms = sum(r.ms for r in rec.rows) / len(rec.rows)
            scatter_pts.append((mean_ms, rec.eval_rows["video_mbo"]))
            sizes.append(4.0 + 6.0 * rec.eval_rows.get("params_m", 0.5))
    if scatter_pts:
        svg_scatter(out_dir / "scatter.svg", scatter_pts, x_label="ms per step",
                    y_label="video mBO", title="quality vs speed", sizes=sizes)
    return table
