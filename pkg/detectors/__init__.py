"""Detector backends, selected by detector_id."""
import json
import os
from typing import Optional

from detectors import frcnn, tinyyolo, weights
from detectors.base import (
    AttackKind,
    DetectorAdapter,
    GradientsUnavailable,
    InferenceFailure,
    InputShapeMismatch,
    ModelLoadFailure,
    attack_loss,
    detect,
)

BACKENDS = {
    tinyyolo.DETECTOR_ID: tinyyolo.load,
    frcnn.DETECTOR_ID:    frcnn.load,
}


def load_adapter(detector_id: str, weights_path: Optional[str] = None, seed: int = 0,
                 device: str = "cpu", download: bool = True, **kwargs) -> DetectorAdapter:
    if detector_id not in BACKENDS:
        raise ModelLoadFailure(f"unknown detector_id {detector_id!r}; known: {sorted(BACKENDS)}")
    path = weights.resolve(detector_id, weights_path, download=download)
    return BACKENDS[detector_id](weights=path, seed=seed, device=device, **kwargs)


def export_vocabulary(adapter: DetectorAdapter, path: str) -> None:
    """Write the adapter's class vocabulary as {"detector_id", "class_names"} JSON."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump({"detector_id": adapter.detector_id, "class_names": list(adapter.class_names)}, f, indent=2)
