"""Parameter sweeps over one TransformParams dimension, plus position heatmaps."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import queue
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Optional

import numpy as np
from tqdm import tqdm

import scenes
import storage
from detectors.base import DetectorAdapter, detect
from errors import PatchbenchError, ValidationError
from metrics import Box, DEFAULT_LUX_SCALE, evaluate, image_illuminance, target_confidence
from scenes import SceneFixture
from transforms import (
    InvalidParams,
    Patch,
    TransformParams,
    apply_patch,
    clipped_fraction,
    footprint_of,
    scene_tensor,
    scene_transform,
    simulate_print,
)

log = logging.getLogger(__name__)

# dimension -> TransformParams field it drives
DIMENSIONS = {
    "position_grid": "position",
    "rotation_x":    "rotation",
    "rotation_y":    "rotation",
    "rotation_z":    "rotation",
    "scale":         "scale",
    "brightness":    "brightness_factor",
    "hue":           "hue_shift",
    "lowpass":       "lowpass_size",
    "color_count":   "color_count",
}
PATCH_VARIANTS = ("digital", "physical")

PRESETS = {
    "rotation_x":  [float(v) for v in range(-80, 81, 10)],
    "rotation_y":  [float(v) for v in range(-80, 81, 10)],
    "rotation_z":  [float(v) for v in range(-90, 91, 10)],
    "scale":       [0.10, 0.15, 0.20, 0.25, 0.30],
    "hue":         [float(v) for v in range(-180, 181, 10)],
    "lowpass":     [0, 1, 3, 5, 9, 15, 25, 51, 101, 201, 301, 501],
    "color_count": [2, 4, 8, 16, 32, 64, 128, 256, 600],
}
LUX_BAND = (68.0, 243.0)
LUX_POINTS = 12
# a failing point is recorded, never allowed to end the sweep
POINT_ERRORS = (PatchbenchError, RuntimeError, ValueError)


class SweepSpecError(ValidationError):
    pass


def with_value(fixed: TransformParams, dimension: str, value) -> TransformParams:
    """fixed with the swept field replaced by value."""
    if dimension == "position_grid":
        return replace(fixed, position=tuple(value))
    if dimension.startswith("rotation_"):
        rot = list(fixed.rotation)
        rot["xyz".index(dimension[-1])] = float(value)
        return replace(fixed, rotation=tuple(rot))
    return replace(fixed, **{DIMENSIONS[dimension]: value})


@dataclass
class SweepSpec:
    dimension: str
    values: Optional[list] = None
    scene_ref: str = "desk"
    patch_ref: str = ""
    fixed: TransformParams = field(default_factory=TransformParams)
    repeats: int = 1
    seed: int = 0
    spec_id: str = ""
    clip: bool = True
    positions: Optional[list[tuple[float, float]]] = None
    jitter: float = 0.0
    patch_variant: str = "digital"

    def __post_init__(self):
        if self.dimension not in DIMENSIONS:
            raise SweepSpecError(f"sweep.dimension: {self.dimension!r} is not one of {sorted(DIMENSIONS)}")
        if self.values is None and self.dimension in PRESETS:
            self.values = list(PRESETS[self.dimension])
        if self.values is not None:
            if len(self.values) == 0:
                raise SweepSpecError("sweep.values: empty value list")
            for v in self.values:
                try:
                    with_value(self.fixed, self.dimension, v)
                except (InvalidParams, TypeError) as e:
                    raise SweepSpecError(f"sweep.values: {v!r} is not a legal {self.dimension} value ({e})") from e
        elif self.dimension != "brightness":
            raise SweepSpecError(f"sweep.values: required for {self.dimension}")
        if self.repeats < 1:
            raise SweepSpecError("sweep.repeats: must be >= 1")
        if self.jitter < 0:
            raise SweepSpecError("sweep.jitter: must be >= 0")
        if self.patch_variant not in PATCH_VARIANTS:
            raise SweepSpecError(f"sweep.patch_variant: {self.patch_variant!r} is not one of {PATCH_VARIANTS}")
        if self.positions is not None:
            if not self.positions:
                raise SweepSpecError("sweep.positions: empty position list")
            self.positions = [tuple(float(c) for c in p) for p in self.positions]
            for p in self.positions:
                try:
                    replace(self.fixed, position=p)
                except InvalidParams as e:
                    raise SweepSpecError(f"sweep.positions: {e}") from e
        if not self.spec_id:
            self.spec_id = self.digest()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed"] = self.fixed.to_dict()
        if self.positions is not None:
            d["positions"] = [list(p) for p in self.positions]
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("spec_id")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict, seed: Optional[int] = None) -> "SweepSpec":
        d = dict(d)
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise SweepSpecError(f"sweep.{unknown[0]}: unknown field")
        if "dimension" not in d:
            raise SweepSpecError("sweep.dimension: missing")
        if isinstance(d.get("fixed"), dict):
            try:
                d["fixed"] = TransformParams.from_dict(d["fixed"])
            except InvalidParams as e:
                raise SweepSpecError(f"sweep.fixed.{e.field}: {e}") from e
        if seed is not None:
            d.setdefault("seed", seed)
        return cls(**d)


@dataclass
class SweepRecord:
    spec_id: str
    dimension: str
    value: Any
    repeat_index: int
    patched: bool
    map: Optional[float]
    per_object_confidence: dict = field(default_factory=dict)
    position: Optional[tuple[float, float]] = None
    failed: bool = False
    error: Optional[str] = None
    clipped_fraction: float = 0.0
    wall_time: float = 0.0

    def to_dict(self, include_wall_time: bool = False) -> dict:
        d = asdict(self)
        if d["position"] is not None:
            d["position"] = list(d["position"])
        if isinstance(d["value"], tuple):
            d["value"] = list(d["value"])
        if not include_wall_time:
            d.pop("wall_time")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepRecord":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if d.get("position") is not None:
            d["position"] = tuple(d["position"])
        return cls(**d)


def brightness_grid(image: np.ndarray, lo: float = LUX_BAND[0], hi: float = LUX_BAND[1],
                    n: int = LUX_POINTS, lux_scale: float = DEFAULT_LUX_SCALE) -> list[float]:
    """Brightness factors whose pre-clip illuminance spans [lo, hi] lux-equivalent in n steps."""
    if n < 1 or lo <= 0 or hi < lo:
        raise SweepSpecError(f"brightness band [{lo}, {hi}] x {n} is not usable")
    base = image_illuminance(image, lux_scale)
    if base <= 0:
        raise SweepSpecError("scene is black; no brightness factor reaches the lux band")
    return [float(v) for v in np.linspace(lo, hi, n) / base]


def _load_scene(spec: SweepSpec, adapter: DetectorAdapter, conf_thresh: float, iou_thresh: float) -> SceneFixture:
    if spec.scene_ref == "desk":
        ds = scenes.load_desk_dataset(adapter.class_names)
        return scenes.build_fixture(ds.samples[0], adapter, conf_thresh, iou_thresh, relabel=True)
    ds = scenes.load_dataset(spec.scene_ref, class_names=adapter.class_names)
    return scenes.build_fixture(ds.samples[0], adapter, conf_thresh, iou_thresh)


def _job_params(spec: SweepSpec, value, position, repeat: int, vi: int, pi: int) -> TransformParams:
    params = with_value(spec.fixed, spec.dimension, value)
    if position is not None:
        params = replace(params, position=position)
    if spec.jitter > 0:
        rng = np.random.default_rng([spec.seed, vi, pi, repeat])
        dx, dy = rng.uniform(-spec.jitter, spec.jitter, size=2)
        cx, cy = params.position
        params = replace(params, position=(min(max(cx + dx, 0.0), 1.0), min(max(cy + dy, 0.0), 1.0)))
    return params


def run_sweep(spec: SweepSpec, adapter: DetectorAdapter, scene: Optional[SceneFixture] = None,
              patch: Optional[Patch] = None, conf_thresh: float = 0.25, iou_thresh: float = 0.5,
              workers: int = 1, progress: bool = False, lux_scale: float = DEFAULT_LUX_SCALE) -> list[SweepRecord]:
    """Evaluate clean and patched scenes at every (value, position, repeat) point.

    Both variants go through the same scene-level transform. Records come
    back ordered by (value, position, repeat, clean before patched) however
    the workers finish. A point that raises is recorded with failed=True.
    """
    if scene is None:
        scene = _load_scene(spec, adapter, conf_thresh, iou_thresh)
    if patch is None:
        patch = storage.load_patch(spec.patch_ref)
    if spec.patch_variant == "physical":
        patch = simulate_print(patch)
    values = spec.values if spec.values is not None else brightness_grid(scene.image, lux_scale=lux_scale)
    positions = spec.positions or [None]

    jobs = [(vi, v, pi, p, r)
            for vi, v in enumerate(values)
            for pi, p in enumerate(positions)
            for r in range(spec.repeats)]

    sessions: queue.Queue = queue.Queue()
    n_workers = max(1, workers) if adapter.clonable else 1
    if workers > 1 and not adapter.clonable:
        log.warning("%s sessions are not clonable; running the sweep on one worker", adapter.detector_id)
    sessions.put(adapter)
    for _ in range(n_workers - 1):
        sessions.put(adapter.clone())

    def evaluate_point(job) -> list[SweepRecord]:
        vi, value, pi, position, repeat = job
        session = sessions.get()
        try:
            out = []
            for patched in (False, True):
                t0 = time.perf_counter()
                rec = SweepRecord(spec.spec_id, spec.dimension, value, repeat, patched, None,
                                  position=position)
                try:
                    params = _job_params(spec, value, position, repeat, vi, pi)
                    if position is not None or spec.jitter:
                        rec.position = params.position
                    image = apply_patch(scene.image, patch, params) if patched else scene.image
                    rec.clipped_fraction = clipped_fraction(image, params.brightness_factor)
                    shown = scene_tensor(image, params, clip=spec.clip)
                    ev = evaluate(detect(session, shown, conf_thresh), scene.annotations,
                                  iou_thresh, scene.object_ids)
                    rec.map, rec.per_object_confidence = ev.map, ev.per_object_confidence
                except POINT_ERRORS as e:
                    rec.failed, rec.error = True, str(e)
                    log.warning("sweep %s: %s=%r repeat %d (%s) failed: %s", spec.spec_id, spec.dimension,
                                value, repeat, "patched" if patched else "clean", e)
                rec.wall_time = time.perf_counter() - t0
                out.append(rec)
            return out
        finally:
            sessions.put(session)

    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        results = list(tqdm(pool.map(evaluate_point, jobs), total=len(jobs),
                            desc=f"sweep {spec.dimension}", disable=not progress))
    records = [r for pair in results for r in pair]
    failed = sum(r.failed for r in records)
    log.info("sweep %s: %d records, %d failed", spec.spec_id, len(records), failed)
    return records


@dataclass(eq=False)
class Heatmap:
    confidence: np.ndarray                  # (rows, cols), NaN where the point failed
    step: int
    footprints: list[list[Optional[tuple[float, float, float, float]]]]
    baseline: float
    target: str = ""
    frame: tuple[int, int] = (0, 0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.confidence.shape


def position_heatmap(scene: SceneFixture, patch: Patch, adapter: DetectorAdapter, grid_step: int,
                     target: Optional[str] = None, params: Optional[TransformParams] = None,
                     conf_thresh: float = 0.25, iou_thresh: float = 0.5,
                     progress: bool = False) -> Heatmap:
    """Target confidence with the patch centred on each cell of a grid_step-pixel grid."""
    if grid_step < 1:
        raise ValidationError(f"grid_step {grid_step} must be >= 1")
    h, w = scene.image.shape[:2]
    name = target or next(iter(scene.object_ids), "")
    ann = scene.target(name) if name else scene.annotations[0]
    params = params or TransformParams()
    rows, cols = math.ceil(h / grid_step), math.ceil(w / grid_step)

    def conf(image) -> float:
        return target_confidence(detect(adapter, image, conf_thresh), ann.class_id, ann.box, iou_thresh)

    baseline = conf(scene_transform(scene.image, params))
    grid = np.full((rows, cols), np.nan)
    footprints: list[list] = [[None] * cols for _ in range(rows)]
    for i in tqdm(range(rows), desc="heatmap", disable=not progress):
        for j in range(cols):
            cx = min((j + 0.5) * grid_step / w, 1.0)
            cy = min((i + 0.5) * grid_step / h, 1.0)
            p = replace(params, position=(cx, cy))
            try:
                quad = footprint_of(patch.side, p, (h, w))
                footprints[i][j] = (float(quad[:, 0].min()), float(quad[:, 1].min()),
                                    float(quad[:, 0].max()), float(quad[:, 1].max()))
                grid[i, j] = conf(scene_transform(apply_patch(scene.image, patch, p), p))
            except POINT_ERRORS as e:
                log.warning("heatmap cell (%d, %d) failed: %s", i, j, e)
    return Heatmap(grid, grid_step, footprints, baseline, name, (h, w))


def signed_distance(a: tuple[float, float, float, float], b: Box) -> float:
    """Gap between two rectangles' edges; negative penetration depth when they overlap."""
    ox = min(a[2], b.x2) - max(a[0], b.x1)
    oy = min(a[3], b.y2) - max(a[1], b.y1)
    if ox > 0 and oy > 0:
        return -min(ox, oy)
    dx = max(0.0, -ox)
    dy = max(0.0, -oy)
    return math.hypot(dx, dy)


def distance_curve(heatmap: Heatmap, target_box: Box) -> list[tuple[float, float]]:
    pts = []
    rows, cols = heatmap.confidence.shape if heatmap.confidence.size else (0, 0)
    for i in range(rows):
        for j in range(cols):
            fp = heatmap.footprints[i][j]
            c = heatmap.confidence[i, j]
            if fp is None or np.isnan(c):
                continue
            pts.append((signed_distance(fp, target_box), float(c)))
    return sorted(pts, key=lambda p: p[0])
