"""Post-hoc analysis: metric curves from sweep records, patch colour statistics, figures."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import rgb_to_hsv

from errors import IoFailure, ValidationError
from sweeps import Heatmap, SweepRecord
from transforms import check_image

log = logging.getLogger(__name__)

HUE_BINS = 360
LEVELS = 256
FIGURE_FORMATS = (".png", ".svg")


class MixedSpecs(ValidationError):
    pass


@dataclass
class CurveSeries:
    label: str
    points: list[tuple[float, float]]
    y_metric: str = "map"
    std: list[float] = field(default_factory=list)
    patched: bool = False
    metric_key: str = "map"


def _x_of(value, order: dict) -> float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    return float(order[tuple(value)])


def curves_from_records(records: Sequence[SweepRecord], by_position: bool = False) -> list[CurveSeries]:
    """Mean and sample standard deviation per swept value, one series per variant and metric.

    Failed records are left out. by_position splits position-crossed sweeps
    into one series per patch centre. Grouping and summation do not depend
    on record order.
    """
    if not records:
        return []
    specs = {r.spec_id for r in records}
    if len(specs) > 1:
        raise MixedSpecs(f"records come from {len(specs)} sweep specs: {sorted(specs)}")

    # non-scalar values (position grids) are ranked so x stays numeric
    tuples = sorted({tuple(r.value) for r in records if isinstance(r.value, (list, tuple))})
    order = {v: i for i, v in enumerate(tuples)}

    groups: dict[tuple, dict[float, list[float]]] = {}
    for r in records:
        if r.failed or r.map is None:
            continue
        x = _x_of(r.value, order)
        pos = tuple(r.position) if by_position and r.position is not None else None
        metrics = [("map", "map", r.map)]
        metrics += [(f"confidence:{k}", "confidence", v) for k, v in r.per_object_confidence.items()]
        for key, kind, y in metrics:
            groups.setdefault((r.patched, key, kind, pos), {}).setdefault(x, []).append(float(y))

    series = []
    for (patched, key, kind, pos) in sorted(groups, key=lambda g: (g[0], g[1], g[3] or ())):
        xs = sorted(groups[(patched, key, kind, pos)])
        pts, std = [], []
        for x in xs:
            ys = sorted(groups[(patched, key, kind, pos)][x])
            mean = math.fsum(ys) / len(ys)
            var = math.fsum((y - mean) ** 2 for y in ys) / (len(ys) - 1) if len(ys) > 1 else 0.0
            pts.append((x, mean))
            std.append(math.sqrt(var))
        label = f"{'patch' if patched else 'clean'} {key.replace('confidence:', '')}"
        if pos is not None:
            label += f" @({pos[0]:.2f}, {pos[1]:.2f})"
        series.append(CurveSeries(label, pts, kind, std, patched, key))
    return series


@dataclass
class ColorStats:
    hsv_histograms: tuple[np.ndarray, np.ndarray, np.ndarray]
    rgb_histograms: tuple[np.ndarray, np.ndarray, np.ndarray]
    distinct_color_count: int
    pixel_count: int
    mean_hue: float          # circular mean in degrees, NaN for an achromatic image
    mean_saturation: float
    mean_value: float


def patch_color_stats(image: np.ndarray) -> ColorStats:
    """Exact HSV (360/256/256 bins) and RGB (3 x 256 bins) histograms of an image."""
    image = check_image(image)
    flat = image.reshape(-1, 3)
    hsv = rgb_to_hsv(flat)
    hue_bin = np.floor(hsv[:, 0] * HUE_BINS + 1e-9).astype(int) % HUE_BINS
    levels = np.rint(hsv[:, 1:] * (LEVELS - 1)).astype(int)
    rgb8 = np.rint(flat * (LEVELS - 1)).astype(int)

    hsv_h = (np.bincount(hue_bin, minlength=HUE_BINS),
             np.bincount(levels[:, 0], minlength=LEVELS),
             np.bincount(levels[:, 1], minlength=LEVELS))
    rgb_h = tuple(np.bincount(rgb8[:, c], minlength=LEVELS) for c in range(3))
    distinct = len(np.unique(rgb8, axis=0))

    chroma = hsv[:, 1] > 0
    if chroma.any():
        ang = hsv[chroma, 0] * 2 * np.pi
        mean_hue = float(np.degrees(np.arctan2(np.sin(ang).mean(), np.cos(ang).mean())) % 360.0)
    else:
        mean_hue = float("nan")
    return ColorStats(hsv_h, rgb_h, distinct, len(flat), mean_hue,
                      float(hsv[:, 1].mean()), float(hsv[:, 2].mean()))


def compare_color_stats(original: ColorStats, observed: ColorStats) -> dict:
    """How the observed copy of a patch differs from the original."""
    hue = observed.mean_hue - original.mean_hue
    if not math.isnan(hue):
        hue = (hue + 180.0) % 360.0 - 180.0
    return {
        "hue_shift": hue,
        "saturation_shift": observed.mean_saturation - original.mean_saturation,
        "value_shift": observed.mean_value - original.mean_value,
        "distinct_ratio": observed.distinct_color_count / max(original.distinct_color_count, 1),
    }


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _save(fig, out_path: str) -> None:
    ext = os.path.splitext(out_path)[1].lower()
    if ext == ".svg":
        with plt.rc_context({"svg.hashsalt": "patchbench"}):
            fig.savefig(out_path, format="svg", metadata={"Date": None})
    else:
        fig.savefig(out_path, format="png", metadata={"Software": None})


def render_figure(data: Union[Sequence[CurveSeries], Heatmap], out_path: str,
                  style: Optional[dict] = None) -> dict:
    """Write a PNG or SVG figure with its data as CSV next to it.

    Returns what was drawn: paths, axis labels and, for heatmaps, the grid
    extents.
    """
    style = dict(style or {})
    ext = os.path.splitext(out_path)[1].lower()
    if ext not in FIGURE_FORMATS:
        raise ValidationError(f"figure format {ext!r} is not one of {FIGURE_FORMATS}")
    is_heatmap = isinstance(data, Heatmap)
    if (is_heatmap and data.confidence.size == 0) or (not is_heatmap and not data):
        raise ValidationError("nothing to plot")

    csv_path = os.path.splitext(out_path)[0] + ".csv"
    fig, ax = plt.subplots(figsize=style.get("figsize", (6.4, 4.8)), dpi=style.get("dpi", 100))
    info = {"path": out_path, "csv": csv_path}
    try:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        if is_heatmap:
            rows, cols = data.confidence.shape
            im = ax.imshow(data.confidence, cmap=style.get("cmap", "viridis"), vmin=0.0, vmax=1.0,
                           extent=(0, cols * data.step, rows * data.step, 0), interpolation="nearest")
            fig.colorbar(im, ax=ax, label="target confidence")
            xlabel = style.get("xlabel", f"patch centre x [px], {cols} cells")
            ylabel = style.get("ylabel", f"patch centre y [px], {rows} cells")
            title = style.get("title", f"{data.target} confidence, {rows}x{cols} grid")
            info["grid"] = (rows, cols)
            _write_csv(csv_path, ["row", "col", "confidence"],
                       [[i, j, repr(float(data.confidence[i, j]))] for i in range(rows) for j in range(cols)])
        else:
            for s in data:
                xs = [p[0] for p in s.points]
                ys = [p[1] for p in s.points]
                ax.errorbar(xs, ys, yerr=s.std or None, label=s.label, marker="o", capsize=3,
                            linestyle="--" if not s.patched else "-")
            ax.set_ylim(-0.02, 1.02)
            ax.legend(loc="best", fontsize="small")
            xlabel = style.get("xlabel", "parameter value")
            ylabel = style.get("ylabel", "mAP" if data[0].y_metric == "map" else "confidence")
            title = style.get("title", "")
            _write_csv(csv_path, ["series", "metric", "x", "y", "std"],
                       [[s.label, s.metric_key, repr(x), repr(y), repr(sd)]
                        for s in data for (x, y), sd in zip(s.points, s.std or [0.0] * len(s.points))])
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, out_path)
    except OSError as e:
        raise IoFailure(f"cannot write figure {out_path}: {e}") from e
    finally:
        plt.close(fig)
    info.update(xlabel=xlabel, ylabel=ylabel, title=title)
    log.info("wrote %s", out_path)
    return info
