"""Patch synthesis by signed-gradient steps over randomly transformed scenes.

Each iteration samples a batch of (scene, annotations) pairs and one set of
transform parameters per item, pastes the current patch with
apply_patch_tensor, applies the sampled brightness to the whole composite and
steps on the mean attack objective. Global patches ascend the detector's
training loss; local patches descend the target's confidence. The patch is
projected back onto [0, 1] after every step.
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch
from tqdm import tqdm

import storage
from detectors.base import AttackKind, DetectorAdapter, GradientsUnavailable, attack_loss, detect
from errors import ValidationError
from metrics import Annotation, target_confidence
from scenes import Dataset, EmptyDataset, Sample
from transforms import (
    MAX_ROTATION,
    MAX_SCALE,
    MIN_PATCH_SIDE,
    Patch,
    TransformParams,
    apply_patch,
    apply_patch_tensor,
    scene_transform,
    to_tensor,
)

log = logging.getLogger(__name__)

STEP_RULES = ("sign", "normalized")
VALIDITY_MARGIN = 0.3
VALIDATION_CONF_FLOOR = 0.01


@dataclass
class TransformRanges:
    """Closed sampling intervals for the augmentation parameters."""
    rotation_x: tuple[float, float] = (0.0, 0.0)
    rotation_y: tuple[float, float] = (0.0, 0.0)
    rotation_z: tuple[float, float] = (-20.0, 20.0)
    scale: tuple[float, float] = (0.15, 0.3)
    position_x: tuple[float, float] = (0.2, 0.8)
    position_y: tuple[float, float] = (0.2, 0.8)
    brightness: tuple[float, float] = (0.8, 1.2)

    def validate(self) -> None:
        # x/y rotations stop short of edge-on; scale and brightness exclude 0
        legal = {
            "rotation_x": lambda lo, hi: -MAX_ROTATION < lo and hi < MAX_ROTATION,
            "rotation_y": lambda lo, hi: -MAX_ROTATION < lo and hi < MAX_ROTATION,
            "rotation_z": lambda lo, hi: -MAX_ROTATION <= lo and hi <= MAX_ROTATION,
            "scale":      lambda lo, hi: 0.0 < lo and hi <= MAX_SCALE,
            "position_x": lambda lo, hi: 0.0 <= lo and hi <= 1.0,
            "position_y": lambda lo, hi: 0.0 <= lo and hi <= 1.0,
            "brightness": lambda lo, hi: 0.0 < lo,
        }
        for name, ok in legal.items():
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"transform_ranges.{name}: lower bound {lo} exceeds {hi}")
            if not ok(lo, hi):
                raise ValidationError(f"transform_ranges.{name}: [{lo}, {hi}] leaves the legal range")

    def sample(self, rng: np.random.Generator, position: Optional[tuple[float, float]] = None) -> TransformParams:
        u = lambda r: float(rng.uniform(r[0], r[1]))
        rot = (u(self.rotation_x), u(self.rotation_y), u(self.rotation_z))
        scale = u(self.scale)
        pos = (u(self.position_x), u(self.position_y))
        bright = u(self.brightness)
        return TransformParams(position=position or pos, scale=scale, rotation=rot,
                               brightness_factor=bright)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformRanges":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValidationError(f"transform_ranges.{unknown[0]}: unknown field")
        return cls(**{k: tuple(float(x) for x in v) for k, v in d.items()})


@dataclass
class PatchTrainConfig:
    iterations: int = 500
    step_size: float = 1.0 / 255.0
    batch_size: int = 4
    patch_side: int = 64
    transform_ranges: TransformRanges = field(default_factory=TransformRanges)
    seed: int = 0
    attack_kind: str = "global_suppress"
    target_class: Optional[int] = None
    target_object: Optional[str] = None
    step_rule: str = "sign"
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    log_samples: int = 64
    local_jitter: float = 0.25

    @property
    def attack(self) -> AttackKind:
        return AttackKind(self.attack_kind, self.target_class)

    def validate(self) -> "PatchTrainConfig":
        if self.iterations < 0:
            raise ValidationError("train.iterations: must be >= 0")
        if self.step_size <= 0:
            raise ValidationError("train.step_size: must be > 0")
        if self.batch_size < 1:
            raise ValidationError("train.batch_size: must be >= 1")
        if self.patch_side < MIN_PATCH_SIDE:
            raise ValidationError(f"train.patch_side: must be >= {MIN_PATCH_SIDE}")
        if self.step_rule not in STEP_RULES:
            raise ValidationError(f"train.step_rule: {self.step_rule!r} is not one of {STEP_RULES}")
        if self.checkpoint_every < 0:
            raise ValidationError("train.checkpoint_every: must be >= 0")
        if not 0.0 <= self.local_jitter <= 1.0:
            raise ValidationError("train.local_jitter: must lie in [0, 1]")
        if self.attack_kind == "local_hide" and self.target_class is None and self.target_object is None:
            raise ValidationError("train.attack: local_hide needs target_class or target_object")
        if self.attack_kind not in ("global_suppress", "local_hide"):
            raise ValidationError(f"train.attack.kind: unknown kind {self.attack_kind!r}")
        self.transform_ranges.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transform_ranges"] = {k: list(v) for k, v in d["transform_ranges"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict, seed: Optional[int] = None) -> "PatchTrainConfig":
        d = dict(d)
        attack = d.pop("attack", None) or {}
        if isinstance(attack, str):
            attack = {"kind": attack}
        unknown_attack = sorted(set(attack) - {"kind", "target_class", "target_object"})
        if unknown_attack:
            raise ValidationError(f"train.attack.{unknown_attack[0]}: unknown field")
        d.setdefault("attack_kind", attack.get("kind", "global_suppress"))
        d.setdefault("target_class", attack.get("target_class"))
        d.setdefault("target_object", attack.get("target_object"))
        if "transform_ranges" in d:
            d["transform_ranges"] = TransformRanges.from_dict(d["transform_ranges"] or {})
        if seed is not None:
            d.setdefault("seed", seed)
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValidationError(f"train.{unknown[0]}: unknown field")
        return cls(**d).validate()


def _target_annotation(sample: Sample, cfg: PatchTrainConfig) -> Optional[Annotation]:
    if cfg.target_object and cfg.target_object in sample.object_ids:
        return sample.annotations[sample.object_ids[cfg.target_object]]
    for a in sample.annotations:
        if a.class_id == cfg.target_class:
            return a
    return None


def local_position(box_ann: Annotation, frame: tuple[int, int], jitter: float,
                   rng: np.random.Generator) -> tuple[float, float]:
    """Centre inside the target box, offset by up to jitter * box size."""
    h, w = frame
    bx, by = box_ann.box.center
    bw, bh = box_ann.box.x2 - box_ann.box.x1, box_ann.box.y2 - box_ann.box.y1
    dx, dy = rng.uniform(-jitter, jitter, size=2)
    cx = min(max((bx + dx * bw) / w, 0.0), 1.0)
    cy = min(max((by + dy * bh) / h, 0.0), 1.0)
    return cx, cy


def _resolve_target(data: Dataset, cfg: PatchTrainConfig) -> PatchTrainConfig:
    if cfg.attack_kind != "local_hide" or cfg.target_class is not None:
        return cfg
    for s in data.samples:
        if cfg.target_object in s.object_ids:
            return replace(cfg, target_class=s.annotations[s.object_ids[cfg.target_object]].class_id)
    raise ValidationError(f"train.attack.target_object: {cfg.target_object!r} not in {data.source_id}")


def _step(grad: torch.Tensor, rule: str) -> torch.Tensor:
    if rule == "sign":
        return grad.sign()
    peak = grad.abs().max()
    return grad / peak if peak > 0 else torch.zeros_like(grad)


def optimize_patch(adapter: DetectorAdapter, data: Dataset, cfg: PatchTrainConfig,
                   progress: bool = False) -> Patch:
    if "gradients" not in adapter.capabilities:
        raise GradientsUnavailable(f"{adapter.detector_id} cannot provide gradients")
    if not data.samples:
        raise EmptyDataset(f"{data.source_id}: no samples to train on")
    cfg = _resolve_target(data, cfg.validate())
    attack = cfg.attack

    rng = np.random.default_rng(cfg.seed)
    scenes = [to_tensor(s.image, dtype=adapter.dtype) for s in data.samples]
    targets = [_target_annotation(s, cfg) if attack.kind == "local_hide" else None for s in data.samples]
    patch = torch.full((3, cfg.patch_side, cfg.patch_side), 0.5, dtype=adapter.dtype)
    sign = 1.0 if attack.kind == "global_suppress" else -1.0

    trace: list[float] = []
    sampled: list[dict] = []
    for it in tqdm(range(cfg.iterations), desc="patch", disable=not progress):
        patch.requires_grad_(True)
        objective = torch.zeros((), dtype=adapter.dtype)
        for idx in rng.integers(len(scenes), size=cfg.batch_size):
            image = scenes[idx]
            pos = None
            if targets[idx] is not None:
                pos = local_position(targets[idx], tuple(image.shape[-2:]), cfg.local_jitter, rng)
            params = cfg.transform_ranges.sample(rng, position=pos)
            if len(sampled) < cfg.log_samples:
                sampled.append(params.to_dict())
            composite = apply_patch_tensor(image, patch, params)
            composite = (composite * params.brightness_factor).clamp(0, 1)
            objective = objective + attack_loss(adapter, composite, data.samples[idx].annotations, attack)
        objective = objective / cfg.batch_size
        (grad,) = torch.autograd.grad(objective, patch)
        with torch.no_grad():
            patch = (patch + sign * cfg.step_size * _step(grad, cfg.step_rule)).clamp(0, 1)
        trace.append(float(objective))
        log.debug("iter %d objective %.6f", it, trace[-1])

        if cfg.checkpoint_every and cfg.checkpoint_dir and (it + 1) % cfg.checkpoint_every == 0:
            ckpt = _as_patch(patch, adapter, cfg, data, trace, sampled)
            storage.save_patch(os.path.join(cfg.checkpoint_dir, f"patch_{it + 1:06d}.png"), ckpt)
            storage.write_loss_trace(os.path.join(cfg.checkpoint_dir, "loss_trace.csv"), trace)

    if trace:
        log.info("trained %s patch for %d iterations: objective %.4f -> %.4f",
                 attack.patch_kind, cfg.iterations, trace[0], trace[-1])
    return _as_patch(patch, adapter, cfg, data, trace, sampled)


def _as_patch(patch: torch.Tensor, adapter: DetectorAdapter, cfg: PatchTrainConfig,
              data: Dataset, trace: list[float], sampled: list[dict]) -> Patch:
    pixels = patch.detach().to(torch.float64).numpy().transpose(1, 2, 0).copy()
    meta = {
        "config": cfg.to_dict(),
        "iterations": len(trace),
        "seed": cfg.seed,
        "dataset": data.source_id,
        "loss_trace": list(trace),
        "sampled_params": list(sampled),
    }
    return Patch(pixels=np.clip(pixels, 0.0, 1.0), kind=cfg.attack.patch_kind,
                 detector_id=adapter.detector_id, training_meta=meta)


def make_control_patch(side: int, seed: int) -> Patch:
    """Uniform noise with no adversarial structure, for separating occlusion from attack."""
    if side < MIN_PATCH_SIDE:
        raise ValidationError(f"control patch side {side} is below {MIN_PATCH_SIDE}")
    rng = np.random.default_rng(seed)
    return Patch(pixels=rng.random((side, side, 3)), kind="control",
                 training_meta={"seed": seed, "source": "uniform noise"})


@dataclass(frozen=True)
class LocalAttackVerdict:
    valid: bool
    control_confidence: float
    adversarial_confidence: float
    margin: float = VALIDITY_MARGIN

    @property
    def gap(self) -> float:
        return self.control_confidence - self.adversarial_confidence

    def to_dict(self) -> dict:
        return dict(asdict(self), gap=self.gap)


def local_attack_verdict(control_conf: float, adv_conf: float, margin: float = VALIDITY_MARGIN) -> bool:
    return control_conf - adv_conf >= margin - 1e-12


def validate_local_attack(adapter: DetectorAdapter, scene: tuple[np.ndarray, list[Annotation]],
                          patch: Patch, control: Patch, params: TransformParams, target_index: int = 0,
                          conf_floor: float = VALIDATION_CONF_FLOOR, iou_thresh: float = 0.5,
                          margin: float = VALIDITY_MARGIN) -> LocalAttackVerdict:
    """Compare target confidence under the adversarial patch and a control patch at the same placement."""
    if patch.kind != "local":
        raise ValidationError(f"validate_local_attack needs a local patch, got {patch.kind!r}")
    if control.kind != "control":
        raise ValidationError(f"control patch has kind {control.kind!r}")
    image, annotations = scene
    target = annotations[target_index]

    def conf(p: Patch) -> float:
        shown = scene_transform(apply_patch(image, p, params), params)
        dets = detect(adapter, shown, conf_floor)
        return target_confidence(dets, target.class_id, target.box, iou_thresh)

    c_conf, a_conf = conf(control), conf(patch)
    verdict = LocalAttackVerdict(local_attack_verdict(c_conf, a_conf, margin), c_conf, a_conf, margin)
    log.info("local attack on %s: control %.3f adversarial %.3f -> %s",
             target.name or target.class_id, c_conf, a_conf, "valid" if verdict.valid else "invalid")
    return verdict
