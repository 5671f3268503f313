"""Run outputs: CSV tables, SVG charts, the saved log and the manifest.

Everything here is derived from a :class:`~hyperlearn.loop.RunLog`, so
re-emitting from a saved ``runlog.json`` reproduces the original files.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import platform
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .loop import RunLog

log = logging.getLogger(__name__)

STEP_COLUMNS = ["epoch", "t", "train_loss", "meta_loss_F", "batch_size_B",
                "mixed_sample_s", "candidate_B", "lr_eta"]
EPOCH_COLUMNS = ["epoch", "val_loss", "val_acc", "next_B"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_csv(run_log: RunLog, directory) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    steps_path, epochs_path = directory / "steps.csv", directory / "epochs.csv"
    with open(steps_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(STEP_COLUMNS)
        for r in run_log.steps:
            w.writerow([_fmt(v) for v in (r.epoch, r.t, r.train_loss, r.meta_loss, r.batch_size,
                                          r.mixed_sample, r.candidate_B, r.lr)])
    with open(epochs_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EPOCH_COLUMNS)
        for r in run_log.epochs:
            w.writerow([_fmt(v) for v in (r.epoch, r.val_loss, r.val_acc, r.next_B)])
    return steps_path, epochs_path


def save_log(run_log: RunLog, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(run_log.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def load_log(path) -> RunLog:
    return RunLog.from_dict(json.loads(Path(path).read_text()))


def write_manifest(directory, config: dict, extra: dict | None = None) -> Path:
    manifest = {
        "hyperlearn_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "seed": config.get("seed"),
        "config": config,
    }
    manifest.update(extra or {})
    path = Path(directory) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --- SVG -----------------------------------------------------------------

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    """Round tick positions covering [lo, hi]."""
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(count, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    first = math.floor(lo / step + 1e-9)
    last = math.ceil(hi / step - 1e-9)
    return [round(k * step, 12) for k in range(first, last + 1)]


def _tick_label(v: float) -> str:
    return f"{v:g}"


class LineChart:
    """Minimal SVG line chart with linear axes and a legend."""

    def __init__(self, title, xlabel, ylabel, width=720, height=400):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.width, self.height = width, height
        self.margin = dict(left=70, right=150, top=40, bottom=55)
        self.series: list[tuple[str, list[tuple[float, float]], dict]] = []

    def add(self, label, points, dashed=False):
        pts = [(float(x), float(y)) for x, y in points if y is not None and math.isfinite(y)]
        if pts:
            self.series.append((label, pts, {"dashed": dashed}))

    def render(self) -> str:
        xs = [x for _, pts, _ in self.series for x, _ in pts] or [0.0, 1.0]
        ys = [y for _, pts, _ in self.series for _, y in pts] or [0.0, 1.0]
        xt = nice_ticks(min(xs), max(xs))
        y_lo, y_hi = min(ys), max(ys)
        if y_hi - y_lo < 1e-12:
            pad = abs(y_hi) * 0.1 or 1.0
            y_lo, y_hi = y_lo - pad, y_hi + pad
        yt = nice_ticks(y_lo, y_hi)
        x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]
        m = self.margin
        pw = self.width - m["left"] - m["right"]
        ph = self.height - m["top"] - m["bottom"]

        def sx(x):
            return m["left"] + (x - x0) / (x1 - x0) * pw

        def sy(y):
            return m["top"] + ph - (y - y0) / (y1 - y0) * ph

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif" font-size="12">',
            f'<rect width="{self.width}" height="{self.height}" fill="white"/>',
            f'<text x="{m["left"] + pw / 2:.1f}" y="22" text-anchor="middle" font-size="15">'
            f'{escape(self.title)}</text>',
        ]
        for x in xt:
            out.append(f'<line x1="{sx(x):.2f}" y1="{m["top"]}" x2="{sx(x):.2f}" '
                       f'y2="{m["top"] + ph}" stroke="#e6e6e6"/>')
            out.append(f'<text x="{sx(x):.2f}" y="{m["top"] + ph + 18}" '
                       f'text-anchor="middle">{_tick_label(x)}</text>')
        for y in yt:
            out.append(f'<line x1="{m["left"]}" y1="{sy(y):.2f}" x2="{m["left"] + pw}" '
                       f'y2="{sy(y):.2f}" stroke="#e6e6e6"/>')
            out.append(f'<text x="{m["left"] - 8}" y="{sy(y) + 4:.2f}" '
                       f'text-anchor="end">{_tick_label(y)}</text>')
        out.append(f'<rect x="{m["left"]}" y="{m["top"]}" width="{pw}" height="{ph}" '
                   f'fill="none" stroke="black"/>')
        out.append(f'<text x="{m["left"] + pw / 2:.1f}" y="{self.height - 12}" '
                   f'text-anchor="middle">{escape(self.xlabel)}</text>')
        cy = m["top"] + ph / 2
        out.append(f'<text x="18" y="{cy:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 18 {cy:.1f})">{escape(self.ylabel)}</text>')
        for i, (label, pts, style) in enumerate(self.series):
            color = PALETTE[i % len(PALETTE)]
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
            dash = ' stroke-dasharray="6,4"' if style["dashed"] else ""
            out.append(f'<polyline class="series" data-label="{escape(label)}" points="{coords}" '
                       f'fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
            ly = m["top"] + 14 + 18 * i
            lx = m["left"] + pw + 12
            out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" '
                       f'stroke="{color}" stroke-width="2"{dash}/>')
            out.append(f'<text x="{lx + 28}" y="{ly}">{escape(label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def step_points(values_per_epoch: list[int]) -> list[tuple[float, float]]:
    """Corner points of a step plot; runs of equal values become one segment."""
    pts: list[tuple[float, float]] = []
    for e, v in enumerate(values_per_epoch):
        if pts and pts[-1][1] == v:
            continue
        if pts:
            pts.append((e, pts[-1][1]))
        pts.append((e, v))
    if values_per_epoch:
        pts.append((len(values_per_epoch), values_per_epoch[-1]))
    return pts


def _fractional_epochs(run_log: RunLog) -> list[float]:
    per_epoch: dict[int, int] = {}
    for r in run_log.steps:
        per_epoch[r.epoch] = per_epoch.get(r.epoch, 0) + 1
    return [r.epoch + (r.t + 1) / per_epoch[r.epoch] for r in run_log.steps]


def emit_svg(run_log: RunLog, directory) -> list[Path]:
    """Write ``loss.svg`` and ``batch_size.svg``; nothing for an empty log."""
    if not run_log.steps:
        log.warning("empty run log; no charts written")
        return []
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    xs = _fractional_epochs(run_log)

    chart = LineChart("Loss curves", "epoch", "loss")
    chart.add("train loss L", zip(xs, [r.train_loss for r in run_log.steps]))
    if any(r.meta_loss is not None for r in run_log.steps):
        chart.add("meta loss F", zip(xs, [r.meta_loss for r in run_log.steps]))
    chart.add("val loss", [(r.epoch + 1, r.val_loss) for r in run_log.epochs])
    loss_path = directory / "loss.svg"
    loss_path.write_text(chart.render())

    bs = LineChart("Batch size schedule", "epoch", "batch size B")
    bs.add("B", step_points(run_log.batch_trace()))
    bs_path = directory / "batch_size.svg"
    bs_path.write_text(bs.render())
    return [loss_path, bs_path]
