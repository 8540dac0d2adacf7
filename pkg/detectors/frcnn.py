"""torchvision Faster R-CNN (MobileNetV3-Large 320 FPN), COCO-pretrained.

The model does its own resizing and normalisation. Its training loss is the
sum of the RPN and ROI-head terms torchvision reports: objectness, RPN box
regression, classifier and box regression, all with weight 1.
"""
from __future__ import annotations

import logging
import pickle
from typing import Optional, Sequence

import torch
from torch import nn
from torchvision.models.detection import (
    FasterRCNN_MobileNet_V3_Large_320_FPN_Weights,
    fasterrcnn_mobilenet_v3_large_320_fpn,
)

from detectors.base import DetectorAdapter, ModelLoadFailure
from metrics import Annotation

log = logging.getLogger(__name__)

DETECTOR_ID = "frcnn-mobilenet"
INPUT_SIZE  = 320
CATEGORIES  = FasterRCNN_MobileNet_V3_Large_320_FPN_Weights.COCO_V1.meta["categories"]


class FasterRCNNAdapter(DetectorAdapter):
    detector_id = DETECTOR_ID
    capabilities = frozenset({"inference", "gradients"})
    clonable = True
    dtype = torch.float32

    def __init__(self, model: nn.Module, seed: int = 0, device: str = "cpu"):
        self.class_names = list(CATEGORIES)
        self.input_size = (INPUT_SIZE, INPUT_SIZE)
        super().__init__()
        self.device = torch.device(device)
        self.seed = seed
        self.model = model.to(self.device).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def candidates(self, image: torch.Tensor):
        self.model.eval()
        out = self.model([image.to(self.device, self.dtype)])[0]
        return out["boxes"].cpu(), out["scores"].cpu(), out["labels"].cpu()

    def training_loss(self, image: torch.Tensor, annotations: Sequence[Annotation]) -> torch.Tensor:
        boxes = torch.tensor([a.box.as_list() for a in annotations], dtype=self.dtype).reshape(-1, 4)
        labels = torch.tensor([a.class_id for a in annotations], dtype=torch.int64)
        target = {"boxes": boxes.to(self.device), "labels": labels.to(self.device)}
        # train mode for the loss heads, frozen batch statistics
        self.model.train()
        for m in self.model.modules():
            if isinstance(m, nn.modules.batchnorm._BatchNorm):
                m.eval()
        try:
            # proposal sampling draws from the global generator
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(self.seed)
                losses = self.model([image.to(self.device, self.dtype)], [target])
        finally:
            self.model.eval()
        return sum(losses.values()).cpu()


def load(weights: Optional[str] = None, seed: int = 0, device: str = "cpu", **_) -> FasterRCNNAdapter:
    if not weights:
        raise ModelLoadFailure(f"{DETECTOR_ID} needs pretrained weights (set paths.weights)")
    model = fasterrcnn_mobilenet_v3_large_320_fpn(weights=None, weights_backbone=None,
                                                  num_classes=len(CATEGORIES))
    try:
        state = torch.load(weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except (OSError, RuntimeError, KeyError, EOFError, pickle.UnpicklingError) as e:
        raise ModelLoadFailure(f"{DETECTOR_ID}: cannot load weights from {weights}: {e}") from e
    log.info("loaded %s weights from %s", DETECTOR_ID, weights)
    return FasterRCNNAdapter(model, seed=seed, device=device)
