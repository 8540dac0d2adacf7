"""Adapter boundary shared by every detector backend.

A backend subclasses DetectorAdapter and implements two hooks:

  candidates(image)              -> (boxes (N, 4), scores (N,), labels (N,))
                                    in original image pixels, differentiable
                                    in the image when gradients are enabled
  training_loss(image, anns)     -> the backend's own training loss (scalar)

Letterboxing, normalisation and any other model-specific preprocessing stay
inside the backend. detect() and attack_loss() below are the only entry
points the rest of patchbench uses.
"""
from __future__ import annotations

import abc
import copy
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torchvision.ops import batched_nms, box_iou

from errors import PatchbenchError, ValidationError
from metrics import Annotation, Box, Detection
from transforms import check_image, to_tensor

log = logging.getLogger(__name__)

NMS_IOU = 0.45
ATTACK_KINDS = ("global_suppress", "local_hide")

COCO_CLASSES = (
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat",
    "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack",
    "umbrella", "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball",
    "kite", "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket",
    "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair",
    "couch", "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse",
    "remote", "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
    "refrigerator", "book", "clock", "vase", "scissors", "teddy bear", "hair drier",
    "toothbrush",
)


class ModelLoadFailure(PatchbenchError):
    pass


class InputShapeMismatch(ValidationError):
    pass


class InferenceFailure(PatchbenchError):
    """The backend itself raised while scoring an image."""


class GradientsUnavailable(PatchbenchError):
    pass


@dataclass(frozen=True)
class AttackKind:
    kind: str = "global_suppress"
    target_class: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValidationError(f"attack kind {self.kind!r} is not one of {ATTACK_KINDS}")
        if self.kind == "local_hide" and self.target_class is None:
            raise ValidationError("local_hide needs a target_class")

    @property
    def patch_kind(self) -> str:
        return "global" if self.kind == "global_suppress" else "local"


class DetectorAdapter(abc.ABC):
    detector_id: str = ""
    class_names: list[str] = []
    input_size: tuple[int, int] = (0, 0)
    capabilities: frozenset = frozenset({"inference"})
    clonable: bool = True
    dtype: torch.dtype = torch.float32

    def __init__(self):
        if not self.class_names:
            raise ModelLoadFailure(f"{self.detector_id}: empty class vocabulary")

    @abc.abstractmethod
    def candidates(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        ...

    def training_loss(self, image: torch.Tensor, annotations: Sequence[Annotation]) -> torch.Tensor:
        raise GradientsUnavailable(f"{self.detector_id} exposes no training loss")

    def clone(self) -> "DetectorAdapter":
        if not self.clonable:
            raise PatchbenchError(f"{self.detector_id} sessions cannot be cloned")
        return copy.deepcopy(self)

    def class_id(self, name: str) -> int:
        return self.class_names.index(name)

    def as_tensor(self, image: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
        if isinstance(image, torch.Tensor):
            t = image
        else:
            try:
                t = to_tensor(check_image(image))
            except ValidationError as e:
                raise InputShapeMismatch(str(e)) from e
        if t.dim() != 3 or t.shape[0] != 3:
            raise InputShapeMismatch(f"expected a (3, H, W) image tensor, got {tuple(t.shape)}")
        return t.to(self.dtype)


def detect(adapter: DetectorAdapter, image, conf_thresh: float = 0.25) -> list[Detection]:
    """NMS-filtered detections scoring above conf_thresh, in image pixels."""
    if "inference" not in adapter.capabilities:
        raise PatchbenchError(f"{adapter.detector_id} does not support inference")
    t = adapter.as_tensor(image)
    h, w = t.shape[-2:]
    with torch.no_grad():
        try:
            boxes, scores, labels = adapter.candidates(t)
        except (RuntimeError, ValueError, IndexError) as e:
            raise InferenceFailure(f"{adapter.detector_id}: {e}") from e
        keep = scores > conf_thresh
        boxes, scores, labels = boxes[keep], scores[keep], labels[keep]
        if len(scores) == 0:
            return []
        boxes = boxes.clone()
        boxes[:, 0::2] = boxes[:, 0::2].clamp(0, w)
        boxes[:, 1::2] = boxes[:, 1::2].clamp(0, h)
        order = batched_nms(boxes.double(), scores.double(), labels, NMS_IOU)

    out = []
    for i in order.tolist():
        x1, y1, x2, y2 = (float(v) for v in boxes[i])
        if x2 <= x1 or y2 <= y1:
            continue
        conf = min(max(float(scores[i]), 0.0), 1.0)
        out.append(Detection(Box(x1, y1, x2, y2), int(labels[i]), conf))
    return out


def attack_loss(adapter: DetectorAdapter, image, annotations: Sequence[Annotation],
                attack: AttackKind) -> torch.Tensor:
    """Scalar objective for patch optimisation, differentiable in the image.

    global_suppress: the backend's training loss against the annotations (to
    be maximised). local_hide: summed target-class confidence of candidates
    overlapping the target annotations (to be minimised).
    """
    if "gradients" not in adapter.capabilities:
        raise GradientsUnavailable(f"{adapter.detector_id} cannot provide gradients")
    t = adapter.as_tensor(image)
    if attack.kind == "global_suppress":
        return adapter.training_loss(t, annotations)

    targets = [a.box.as_list() for a in annotations if a.class_id == attack.target_class]
    boxes, scores, labels = adapter.candidates(t)
    if not targets or len(scores) == 0:
        return scores.sum() * 0.0
    target_t = torch.tensor(targets, dtype=boxes.dtype)
    overlaps = box_iou(boxes.detach(), target_t).amax(dim=1) > 0
    mask = (labels == attack.target_class) & overlaps
    return (scores * mask.to(scores.dtype)).sum()
