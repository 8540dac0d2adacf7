"""Calibrator: predicts the ColorParams that turn a baseline scene into an observed one.

Two conv/ReLU/max-pool stages, a fully connected ReLU layer with dropout,
then two heads: three sigmoid outputs for brightness, contrast and hue, and
one softplus output for saturation. Trained on pixel MSE between the
digitally recoloured baseline and the target, so no ground-truth parameters
are needed.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from errors import IoFailure, PatchbenchError, ValidationError
from transforms import (
    ColorParams,
    DimensionMismatch,
    InvalidParams,
    apply_color_params,
    apply_color_params_tensor,
    check_image,
    to_tensor,
)

log = logging.getLogger(__name__)

INPUT_SIDE = 256
CHECKPOINT_VERSION = 1

# uniform sampling ranges for synthetic targets; saturation has no upper bound so one is picked
SYNTHETIC_RANGES = {
    "brightness_factor": (0.0, 2.0),
    "contrast_factor": (0.0, 2.0),
    "hue_shift": (-180.0, 180.0),
    "saturation_factor": (0.0, 2.0),
}


class InsufficientData(ValidationError):
    pass


class CheckpointVersionError(PatchbenchError):
    pass


class CalibratorNet(nn.Module):
    def __init__(self, channels: tuple[int, int] = (16, 32), hidden: int = 128,
                 dropout: float = 0.5, pooled: int = 16):
        super().__init__()
        c1, c2 = channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d(pooled),
        )
        self.fc = nn.Sequential(nn.Flatten(), nn.Linear(c2 * pooled * pooled, hidden), nn.ReLU(),
                                nn.Dropout(dropout))
        self.bounded = nn.Linear(hidden, 3)
        self.positive = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, 256, 256) standardised input -> (B, 4) brightness, contrast, hue, saturation."""
        z = self.fc(self.features(x))
        s = torch.sigmoid(self.bounded(z))
        sat = F.softplus(self.positive(z))
        return torch.cat([2 * s[:, :1], 2 * s[:, 1:2], (s[:, 2:3] - 0.5) * 360.0, sat], dim=1)


@dataclass
class CalibratorTrainConfig:
    epochs: int = 500
    batch_size: int = 4
    learning_rate: float = 1e-4
    dropout: float = 0.5
    val_fraction: float = 0.2
    seed: int = 0


@dataclass(eq=False)
class CalibratorModel:
    net: CalibratorNet
    norm_stats: dict
    architecture: dict
    history: list[dict] = field(default_factory=list)

    @property
    def best_val_loss(self) -> Optional[float]:
        vals = [h["val_loss"] for h in self.history]
        return min(vals) if vals else None


def _resize(image: np.ndarray) -> torch.Tensor:
    t = to_tensor(check_image(image), dtype=torch.float32).unsqueeze(0)
    if t.shape[-2:] != (INPUT_SIDE, INPUT_SIDE):
        t = F.interpolate(t, size=(INPUT_SIDE, INPUT_SIDE), mode="bilinear",
                          align_corners=False, antialias=True)
    return t[0].clamp(0, 1)


def _standardise(x: torch.Tensor, stats: dict) -> torch.Tensor:
    mean = torch.tensor(stats["mean"], dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(stats["std"], dtype=x.dtype).view(3, 1, 1)
    return (x - mean) / std


def _norm_stats(stack: torch.Tensor) -> dict:
    mean = stack.mean(dim=(0, 2, 3))
    std = stack.std(dim=(0, 2, 3)).clamp_min(1e-6)
    return {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}


def _open_upper(v: float, hi: float = 2.0) -> float:
    # a saturated float sigmoid reaches exactly 1.0
    return min(v, float(np.nextafter(hi, 0.0)))


def _to_color_params(row: Sequence[float]) -> ColorParams:
    b, c, h, s = (float(v) for v in row)
    return ColorParams(brightness_factor=max(_open_upper(b), 1e-12), contrast_factor=max(_open_upper(c), 1e-12),
                       hue_shift=h, saturation_factor=s)


def new_model(dropout: float = 0.5, seed: int = 0, norm_stats: Optional[dict] = None) -> CalibratorModel:
    """Untrained calibrator, seeded initialisation."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = CalibratorNet(dropout=dropout)
    arch = {"input": [INPUT_SIDE, INPUT_SIDE, 3], "channels": [16, 32], "kernel": 3, "pool": 2,
            "pooled": 16, "hidden": 128, "dropout": dropout, "heads": ["sigmoid:3", "softplus:1"]}
    stats = norm_stats or {"mean": [0.5, 0.5, 0.5], "std": [0.25, 0.25, 0.25]}
    return CalibratorModel(net=net.eval(), norm_stats=stats, architecture=arch)


def predict_color_params(model: CalibratorModel, target: np.ndarray) -> ColorParams:
    x = _standardise(_resize(target), model.norm_stats).unsqueeze(0)
    model.net.eval()
    with torch.no_grad():
        out = model.net(x)[0].double()
    return _to_color_params(out.tolist())


def train_calibrator(baseline: np.ndarray, targets: Sequence[np.ndarray],
                     cfg: Optional[CalibratorTrainConfig] = None, progress: bool = False) -> CalibratorModel:
    """Fit on targets (chronological split) and return the best-validation weights."""
    cfg = cfg or CalibratorTrainConfig()
    if len(targets) < 2:
        raise InsufficientData(f"need at least 2 targets for a train/validation split, got {len(targets)}")
    baseline = check_image(baseline)
    for i, t in enumerate(targets):
        if np.shape(t) != baseline.shape:
            raise DimensionMismatch(f"target {i} is {np.shape(t)}, baseline is {baseline.shape}")

    stack = torch.stack([_resize(t) for t in targets])
    stats = _norm_stats(stack)
    inputs = _standardise(stack, stats)
    base = _resize(baseline)

    n_val = min(max(1, round(len(targets) * cfg.val_fraction)), len(targets) - 1)
    n_train = len(targets) - n_val
    log.info("calibrator: %d train / %d validation targets, %d epochs", n_train, n_val, cfg.epochs)

    model = new_model(cfg.dropout, cfg.seed, stats)
    net = model.net
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)

    def loss_on(idx: torch.Tensor) -> torch.Tensor:
        params = net(inputs[idx])
        recoloured = apply_color_params_tensor(base.expand(len(idx), -1, -1, -1), params)
        return F.mse_loss(recoloured, stack[idx])

    best_state, best_val = copy.deepcopy(net.state_dict()), float("inf")
    val_idx = torch.arange(n_train, len(targets))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in tqdm(range(cfg.epochs), desc="calibrate", disable=not progress):
            net.train()
            order = torch.randperm(n_train, generator=gen)
            running = 0.0
            for start in range(0, n_train, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                loss = loss_on(idx)
                opt.zero_grad()
                loss.backward()
                opt.step()
                running += float(loss) * len(idx)
            net.eval()
            with torch.no_grad():
                val = float(loss_on(val_idx))
            if val < best_val:
                best_val, best_state = val, copy.deepcopy(net.state_dict())
            model.history.append({"epoch": epoch, "train_loss": running / n_train,
                                  "val_loss": val, "best_val_loss": best_val})
    net.load_state_dict(best_state)
    net.eval()
    log.info("calibrator best validation MSE %.6f", best_val)
    return model


def make_synthetic_targets(baseline: np.ndarray, n: int, seed: int,
                           ranges: Optional[dict] = None) -> list[tuple[np.ndarray, ColorParams]]:
    """n recoloured copies of baseline with the parameters that produced them."""
    if n < 1:
        raise ValidationError(f"synthetic target count {n} must be >= 1")
    baseline = check_image(baseline)
    ranges = dict(SYNTHETIC_RANGES, **(ranges or {}))
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        draw = {k: float(rng.uniform(*ranges[k])) for k in SYNTHETIC_RANGES}
        try:
            cp = ColorParams(**draw)
        except InvalidParams:
            continue      # a draw landed on an open bound
        out.append((apply_color_params(baseline, cp), cp))
    return out


def replication_error(model: CalibratorModel, baseline: np.ndarray, target: np.ndarray) -> dict:
    """Pixel MSE of the recoloured baseline against target, next to the do-nothing MSE."""
    baseline, target = check_image(baseline), check_image(target)
    if baseline.shape != target.shape:
        raise DimensionMismatch(f"baseline {baseline.shape} vs target {target.shape}")
    cp = predict_color_params(model, target)
    replica = apply_color_params(baseline, cp)
    return {
        "mse": float(np.mean((replica - target) ** 2)),
        "identity_mse": float(np.mean((baseline - target) ** 2)),
        "params": cp.to_dict(),
    }


def save_calibrator(model: CalibratorModel, path: str) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "architecture": model.architecture,
        "norm_stats": model.norm_stats,
        "history": model.history,
        "state_dict": model.net.state_dict(),
    }
    try:
        torch.save(payload, path)
    except OSError as e:
        raise IoFailure(f"cannot write calibrator checkpoint {path}: {e}") from e


def load_calibrator(path: str) -> CalibratorModel:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as e:
        raise IoFailure(f"cannot read calibrator checkpoint {path}: {e}") from e
    version = payload.get("version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    arch = payload["architecture"]
    model = new_model(dropout=arch.get("dropout", 0.5), norm_stats=payload["norm_stats"])
    model.net.load_state_dict(payload["state_dict"])
    model.net.eval()
    model.architecture = arch
    model.history = list(payload.get("history", []))
    return model


def config_from_section(section) -> CalibratorTrainConfig:
    """CalibratorTrainConfig from a config.CalibrateSection (or any object with the same fields)."""
    fields_ = asdict(CalibratorTrainConfig())
    values = {k: getattr(section, k) for k in fields_ if getattr(section, k, None) is not None}
    return CalibratorTrainConfig(**values)
