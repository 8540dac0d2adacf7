"""A small single-scale YOLO-style detector.

Built for desk-scale experiments and for the gradient checks: no batch norm
and no pooling, so it is smooth in its input and runs in float64. Without a
weights file it starts from a seeded random initialisation, which is enough
for everything except the trend checks that need a trained model.

Head layout per grid cell and anchor: (tx, ty, tw, th, objectness, classes...),
decoded the YOLOv5 way:

  xy = (2*sigmoid(txy) - 0.5 + cell) * stride
  wh = (2*sigmoid(twh))**2 * anchor

Training loss term weights: box 0.05, objectness 1.0, class 0.5.
"""
from __future__ import annotations

import logging
import pickle
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from detectors.base import COCO_CLASSES, DetectorAdapter, ModelLoadFailure
from metrics import Annotation

log = logging.getLogger(__name__)

DETECTOR_ID = "tinyyolo"
INPUT_SIZE  = 128
STRIDE      = 8
ANCHORS     = ((12.0, 16.0), (32.0, 40.0), (72.0, 80.0))
PAD_VALUE   = 0.5

BOX_GAIN = 0.05
OBJ_GAIN = 1.0
CLS_GAIN = 0.5


class TinyYoloNet(nn.Module):
    def __init__(self, num_classes: int, num_anchors: int = len(ANCHORS), width: int = 16):
        super().__init__()
        w = width
        self.num_classes = num_classes
        self.num_anchors = num_anchors
        self.body = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(4 * w, 4 * w, 3, stride=1, padding=1), nn.SiLU(),
        )
        self.head = nn.Conv2d(4 * w, num_anchors * (5 + num_classes), 1)
        nn.init.normal_(self.head.weight, std=0.01)
        with torch.no_grad():
            bias = self.head.bias.view(num_anchors, 5 + num_classes)
            bias.zero_()
            bias[:, 4] = -4.0     # quiet start: objectness ~ 0.018

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) -> raw head output (B, A, gh, gw, 5 + C)."""
        out = self.head(self.body(x))
        b, _, gh, gw = out.shape
        return out.view(b, self.num_anchors, 5 + self.num_classes, gh, gw).permute(0, 1, 3, 4, 2)


def letterbox(image: torch.Tensor, size: int = INPUT_SIZE):
    """Resize (3, H, W) to fit size x size keeping aspect, pad with mid-gray.

    Returns (tensor (3, size, size), ratio, (pad_x, pad_y)).
    """
    h, w = image.shape[-2:]
    r = min(size / h, size / w)
    nh, nw = max(1, round(h * r)), max(1, round(w * r))
    resized = F.interpolate(image.unsqueeze(0), size=(nh, nw), mode="bilinear",
                            align_corners=False)[0]
    px, py = (size - nw) // 2, (size - nh) // 2
    padded = F.pad(resized, (px, size - nw - px, py, size - nh - py), value=PAD_VALUE)
    return padded, r, (px, py)


def _grid(gh: int, gw: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    ys, xs = torch.meshgrid(torch.arange(gh, dtype=dtype), torch.arange(gw, dtype=dtype), indexing="ij")
    return xs, ys


def decode(raw: torch.Tensor) -> torch.Tensor:
    """Raw head output (A, gh, gw, 5 + C) -> boxes (A, gh, gw, 4) as x1y1x2y2 in input pixels."""
    _, gh, gw, _ = raw.shape
    xs, ys = _grid(gh, gw, raw.dtype)
    anchors = torch.tensor(ANCHORS, dtype=raw.dtype).view(-1, 1, 1, 2)
    sig = raw[..., :4].sigmoid()
    cx = (sig[..., 0] * 2 - 0.5 + xs) * STRIDE
    cy = (sig[..., 1] * 2 - 0.5 + ys) * STRIDE
    wh = (sig[..., 2:4] * 2) ** 2 * anchors
    return torch.stack([cx - wh[..., 0] / 2, cy - wh[..., 1] / 2,
                        cx + wh[..., 0] / 2, cy + wh[..., 1] / 2], dim=-1)


def _best_anchor(w: float, h: float) -> int:
    def fit(a):
        return min(w / a[0], a[0] / w) * min(h / a[1], a[1] / h)
    return max(range(len(ANCHORS)), key=lambda i: fit(ANCHORS[i]))


class TinyYoloAdapter(DetectorAdapter):
    detector_id = DETECTOR_ID
    capabilities = frozenset({"inference", "gradients"})
    clonable = True

    def __init__(self, net: TinyYoloNet, class_names: Sequence[str],
                 input_size: int = INPUT_SIZE, dtype: torch.dtype = torch.float32):
        self.class_names = list(class_names)
        self.input_size = (input_size, input_size)
        self.dtype = dtype
        super().__init__()
        if net.num_classes != len(self.class_names):
            raise ModelLoadFailure(
                f"{DETECTOR_ID}: head predicts {net.num_classes} classes, vocabulary has {len(self.class_names)}")
        self.net = net.to(dtype).eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def _forward(self, image: torch.Tensor):
        x, r, pad = letterbox(image.to(self.dtype), self.input_size[0])
        return self.net(x.unsqueeze(0))[0], r, pad

    def candidates(self, image: torch.Tensor):
        raw, r, (px, py) = self._forward(image)
        boxes = decode(raw).reshape(-1, 4)
        obj = raw[..., 4].sigmoid().reshape(-1, 1)
        cls = raw[..., 5:].sigmoid().reshape(-1, len(self.class_names))
        cls_conf, labels = cls.max(dim=1)
        scores = obj[:, 0] * cls_conf
        offset = torch.tensor([px, py, px, py], dtype=boxes.dtype)
        return (boxes - offset) / r, scores, labels

    def training_loss(self, image: torch.Tensor, annotations: Sequence[Annotation]) -> torch.Tensor:
        raw, r, (px, py) = self._forward(image)
        n_a, gh, gw, _ = raw.shape
        size = float(self.input_size[0])
        pred_boxes = decode(raw)

        obj_target = torch.zeros(n_a, gh, gw, dtype=raw.dtype)
        box_terms, cls_terms = [], []
        for ann in annotations:
            x1, y1, x2, y2 = (v * r for v in ann.box.as_list())
            x1, x2 = x1 + px, x2 + px
            y1, y2 = y1 + py, y2 + py
            gx = min(max(int((x1 + x2) / 2 // STRIDE), 0), gw - 1)
            gy = min(max(int((y1 + y2) / 2 // STRIDE), 0), gh - 1)
            a = _best_anchor(x2 - x1, y2 - y1)
            obj_target[a, gy, gx] = 1.0
            target = torch.tensor([x1, y1, x2, y2], dtype=raw.dtype) / size
            box_terms.append(F.mse_loss(pred_boxes[a, gy, gx] / size, target, reduction="sum"))
            onehot = torch.zeros(len(self.class_names), dtype=raw.dtype)
            onehot[ann.class_id] = 1.0
            cls_terms.append(F.binary_cross_entropy_with_logits(raw[a, gy, gx, 5:], onehot))

        obj_loss = F.binary_cross_entropy_with_logits(raw[..., 4], obj_target)
        loss = OBJ_GAIN * obj_loss
        if box_terms:
            loss = loss + BOX_GAIN * torch.stack(box_terms).mean() + CLS_GAIN * torch.stack(cls_terms).mean()
        return loss


def load(weights: Optional[str] = None, seed: int = 0, input_size: int = INPUT_SIZE,
         dtype: torch.dtype = torch.float32, device: str = "cpu",
         class_names: Sequence[str] = COCO_CLASSES) -> TinyYoloAdapter:
    if device != "cpu":
        log.warning("%s runs on cpu; ignoring device %r", DETECTOR_ID, device)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = TinyYoloNet(num_classes=len(class_names))
    if weights:
        try:
            state = torch.load(weights, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        except (OSError, RuntimeError, KeyError, EOFError, pickle.UnpicklingError) as e:
            raise ModelLoadFailure(f"{DETECTOR_ID}: cannot load weights from {weights}: {e}") from e
        log.info("loaded %s weights from %s", DETECTOR_ID, weights)
    else:
        log.info("%s: no weights given, seeded random init (seed=%d)", DETECTOR_ID, seed)
    return TinyYoloAdapter(net, class_names, input_size=input_size, dtype=dtype)
