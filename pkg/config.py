"""Run configuration: YAML file, then PATCHBENCH_* environment overrides.

    detector_id: frcnn-mobilenet
    seed: 0
    paths:
      output: out/desk
      patch: out/desk/patch.png
    train:
      iterations: 500
      attack: {kind: local_hide, target_object: cup}
    sweep:
      dimension: scale
      values: [0.1, 0.15, 0.2, 0.25, 0.3]

PATCHBENCH_SEED=3 overrides a top-level field; PATCHBENCH_PATHS__OUTPUT=/tmp/x
a nested one. Override values are parsed as YAML scalars.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional

import yaml

from errors import ConfigError

log = logging.getLogger(__name__)

ENV_PREFIX = "PATCHBENCH_"
CONFIG_VERSION = 1


@dataclass
class Paths:
    weights: Optional[str] = None
    scene: Optional[str] = None
    scene_format: str = "coco_json"
    image_root: Optional[str] = None
    patch: Optional[str] = None
    control: Optional[str] = None
    output: str = "out"
    calibrator: Optional[str] = None
    baseline: Optional[str] = None
    targets: Optional[str] = None


@dataclass
class CalibrateSection:
    epochs: int = 500
    batch_size: int = 4
    learning_rate: float = 1e-4
    dropout: float = 0.5
    val_fraction: float = 0.2
    synthetic: int = 0
    seed: Optional[int] = None


@dataclass
class RunConfig:
    detector_id: str = "frcnn-mobilenet"
    seed: int = 0
    conf_thresh: float = 0.25
    iou_thresh: float = 0.5
    lux_scale: float = 255.0
    device: str = "cpu"
    target_object: Optional[str] = None
    paths: Paths = field(default_factory=Paths)
    calibrate: CalibrateSection = field(default_factory=CalibrateSection)
    train: Optional[dict] = None
    sweep: Optional[dict] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = CONFIG_VERSION
        return d

    def require(self, *names: str) -> None:
        """Referenced input paths must exist for the command that needs them."""
        for name in names:
            value = getattr(self.paths, name)
            if not value:
                raise ConfigError(f"paths.{name}", "not set")
            if not os.path.exists(value):
                raise ConfigError(f"paths.{name}", f"{value} does not exist")


_SECTIONS = {"paths": Paths, "calibrate": CalibrateSection}
_FREE_SECTIONS = ("train", "sweep")


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip("."), "expected a mapping")
    unknown = sorted(set(data) - _field_names(cls))
    if unknown:
        raise ConfigError(prefix + unknown[0], "unknown field")
    return cls(**data)


def _apply_env(raw: dict, environ) -> dict:
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        value = yaml.safe_load(environ[key]) if environ[key] != "" else None
        if len(parts) == 1:
            raw[parts[0]] = value
        elif len(parts) == 2:
            section = raw.get(parts[0]) or {}
            if not isinstance(section, dict):
                raise ConfigError(parts[0], f"cannot override inside a non-mapping ({key})")
            section[parts[1]] = value
            raw[parts[0]] = section
        else:
            raise ConfigError(key, "overrides nest at most one section deep")
        log.debug("env override %s", key)
    return raw


def _validate(cfg: RunConfig) -> None:
    from detectors import BACKENDS
    from patchgen import PatchTrainConfig
    from sweeps import SweepSpec

    if cfg.detector_id not in BACKENDS:
        raise ConfigError("detector_id", f"{cfg.detector_id!r} is not one of {sorted(BACKENDS)}")
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed", "must be an integer")
    if not 0.0 <= cfg.conf_thresh <= 1.0:
        raise ConfigError("conf_thresh", "must lie in [0, 1]")
    if not 0.0 < cfg.iou_thresh < 1.0:
        raise ConfigError("iou_thresh", "must lie in (0, 1)")
    if cfg.lux_scale <= 0:
        raise ConfigError("lux_scale", "must be > 0")
    c = cfg.calibrate
    if c.epochs < 1 or c.batch_size < 1 or c.learning_rate <= 0:
        raise ConfigError("calibrate", "epochs, batch_size and learning_rate must be positive")
    if not 0.0 <= c.dropout < 1.0:
        raise ConfigError("calibrate.dropout", "must lie in [0, 1)")
    if not 0.0 < c.val_fraction < 1.0:
        raise ConfigError("calibrate.val_fraction", "must lie in (0, 1)")
    if cfg.train is not None:
        PatchTrainConfig.from_dict(cfg.train, seed=cfg.seed)
    if cfg.sweep is not None:
        SweepSpec.from_dict(cfg.sweep, seed=cfg.seed)


def load_config(path: Optional[str] = None, environ=None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the YAML file, then environment, then explicit overrides."""
    raw: dict[str, Any] = {}
    if path:
        try:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError("config", f"{path} is not valid YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config", f"{path} must hold a mapping")
    raw = _apply_env(raw, os.environ if environ is None else environ)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v

    top = _field_names(RunConfig)
    unknown = sorted(set(raw) - top - {"version"})
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    raw.pop("version", None)
    for name, cls in _SECTIONS.items():
        raw[name] = _build(cls, raw.get(name) or {}, f"{name}.")
    for name in _FREE_SECTIONS:
        if raw.get(name) is not None and not isinstance(raw[name], dict):
            raise ConfigError(name, "expected a mapping")
    try:
        cfg = RunConfig(**raw)
    except TypeError as e:
        raise ConfigError("config", str(e)) from e
    _validate(cfg)
    return cfg


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def save_config(cfg: RunConfig, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
