"""Detection metrics: IoU matching, AP/mAP, targeted confidence, illuminance."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from errors import ValidationError
from transforms import LUMA, check_image

DEFAULT_IOU_THRESH  = 0.5
DEFAULT_CONF_FLOOR  = 0.25
DEFAULT_LUX_SCALE   = 255.0


class InvalidBox(ValidationError):
    pass


class EmptyGroundTruth(ValidationError):
    """A class has no annotations, so its AP is undefined."""


class NoAnnotations(ValidationError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBox(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class Annotation:
    box: Box
    class_id: int
    name: str = ""


@dataclass
class EvalResult:
    per_class_ap: dict[int, float]
    map: float
    per_object_confidence: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "per_object_confidence": dict(sorted(self.per_object_confidence.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(
            per_class_ap={int(k): float(v) for k, v in d["per_class_ap"].items()},
            map=float(d["map"]),
            per_object_confidence={k: float(v) for k, v in d.get("per_object_confidence", {}).items()},
        )


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _check_thresh(iou_thresh: float) -> None:
    if not 0.0 < iou_thresh < 1.0:
        raise ValidationError(f"iou threshold {iou_thresh} must lie in (0, 1)")


def _match(dets: Sequence[Detection], gts: Sequence[Annotation], iou_thresh: float) -> list[tuple[float, bool]]:
    """Greedy matching in descending confidence (stable). Returns (confidence, is_tp) in rank order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    taken: set[int] = set()
    out = []
    for i in order:
        best, best_iou = -1, -1.0
        for j, gt in enumerate(gts):
            if j in taken:
                continue
            o = iou(dets[i].box, gt.box)
            if o >= iou_thresh and o > best_iou:
                best, best_iou = j, o
        if best >= 0:
            taken.add(best)
        out.append((dets[i].confidence, best >= 0))
    return out


def _area_under_pr(flags: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=float))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def average_precision(dets: Sequence[Detection], gts: Sequence[Annotation],
                      iou_thresh: float = DEFAULT_IOU_THRESH) -> float:
    """AP for a single class. Raises EmptyGroundTruth when gts is empty."""
    _check_thresh(iou_thresh)
    if not gts:
        raise EmptyGroundTruth("no ground truth for this class")
    ranked = _match(dets, gts, iou_thresh)
    return _area_under_pr([tp for _, tp in ranked], len(gts))


def mean_average_precision(per_image: Iterable[tuple[Sequence[Detection], Sequence[Annotation]]],
                           iou_thresh: float = DEFAULT_IOU_THRESH) -> EvalResult:
    """Pool matches per class across images, then average AP over annotated classes."""
    _check_thresh(iou_thresh)
    pooled: dict[int, list[tuple[float, bool]]] = {}
    n_gt: dict[int, int] = {}
    for dets, gts in per_image:
        classes = {d.class_id for d in dets} | {g.class_id for g in gts}
        for c in sorted(classes):
            cd = [d for d in dets if d.class_id == c]
            cg = [g for g in gts if g.class_id == c]
            n_gt[c] = n_gt.get(c, 0) + len(cg)
            pooled.setdefault(c, []).extend(_match(cd, cg, iou_thresh))
    if not any(n_gt.values()):
        raise NoAnnotations("no ground-truth annotations in any image")

    per_class = {}
    for c, ranked in pooled.items():
        if n_gt[c] == 0:
            continue  # EmptyGroundTruth: undefined class, left out of the mean
        ranked = sorted(ranked, key=lambda r: -r[0])
        per_class[c] = _area_under_pr([tp for _, tp in ranked], n_gt[c])
    return EvalResult(per_class_ap=per_class, map=float(np.mean(list(per_class.values()))))


def target_confidence(dets: Sequence[Detection], target_class: int, target_box: Box,
                      iou_thresh: float = DEFAULT_IOU_THRESH) -> float:
    best = 0.0
    for d in dets:
        if d.class_id == target_class and iou(d.box, target_box) >= iou_thresh:
            best = max(best, d.confidence)
    return best


def evaluate(dets: Sequence[Detection], annotations: Sequence[Annotation],
             iou_thresh: float = DEFAULT_IOU_THRESH,
             object_ids: Optional[dict[str, int]] = None) -> EvalResult:
    """Single-scene evaluation: mAP plus the confidence of every named object."""
    result = mean_average_precision([(dets, annotations)], iou_thresh)
    for name, idx in (object_ids or {}).items():
        ann = annotations[idx]
        result.per_object_confidence[name] = target_confidence(dets, ann.class_id, ann.box, iou_thresh)
    return result


def confident(dets: Iterable[Detection], floor: float = DEFAULT_CONF_FLOOR) -> list[Detection]:
    return [d for d in dets if d.confidence >= floor]


def image_illuminance(image: np.ndarray, scale: float = DEFAULT_LUX_SCALE) -> float:
    """Mean relative luminance on the lux-equivalent axis (linear scale factor)."""
    image = check_image(image)
    lum = image[..., 0] * LUMA[0] + image[..., 1] * LUMA[1] + image[..., 2] * LUMA[2]
    return float(lum.mean()) * scale
