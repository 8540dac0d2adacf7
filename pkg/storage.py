"""On-disk formats: PNG images, patch sidecars, JSONL results, manifests."""
import csv
import json
import logging
import os
import platform
import time
from typing import Iterable, Optional

import numpy as np
from PIL import Image as PILImage

from errors import IoFailure
from metrics import EvalResult
from transforms import Patch, check_image

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CODE_VERSION   = "0.1.0"
MANIFEST_FILE  = "manifest.json"
RESULTS_FILE   = "results.jsonl"


def _ensure_parent(path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)


def read_image(path: str) -> np.ndarray:
    """8-bit PNG/JPEG -> float64 (H, W, 3) in [0, 1]."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise IoFailure(f"cannot read image {path}: {e}") from e
    return arr


def write_image(path: str, image: np.ndarray) -> None:
    image = check_image(image)
    data = np.round(image * 255.0).astype(np.uint8)
    try:
        _ensure_parent(path)
        PILImage.fromarray(data).save(path, format="PNG")
    except OSError as e:
        raise IoFailure(f"cannot write image {path}: {e}") from e


def sidecar_path(png_path: str) -> str:
    return os.path.splitext(png_path)[0] + ".json"


def save_patch(path: str, patch: Patch) -> None:
    """PNG pixels plus a JSON sidecar with kind, detector_id and training_meta."""
    write_image(path, patch.pixels)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "kind": patch.kind,
        "detector_id": patch.detector_id,
        "side": patch.side,
        "training_meta": patch.training_meta,
    }
    write_json(sidecar_path(path), meta)


def load_patch(path: str) -> Patch:
    pixels = read_image(path)
    side = sidecar_path(path)
    meta = read_json(side) if os.path.exists(side) else {}
    if not meta:
        log.warning("patch %s has no sidecar; assuming kind=global", path)
    return Patch(pixels=pixels, kind=meta.get("kind", "global"),
                 detector_id=meta.get("detector_id", ""),
                 training_meta=meta.get("training_meta", {}))


def read_json(path: str):
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def write_json(path: str, data) -> None:
    try:
        _ensure_parent(path)
        with open(path, "w") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def save_eval(path: str, result: EvalResult) -> None:
    write_json(path, dict(result.to_dict(), schema_version=SCHEMA_VERSION))


def load_eval(path: str) -> EvalResult:
    return EvalResult.from_dict(read_json(path))


def write_records(path: str, records: Iterable[dict], append: bool = False) -> int:
    """One JSON object per line, keys sorted, schema_version on every line."""
    n = 0
    try:
        _ensure_parent(path)
        with open(path, "a" if append else "w") as f:
            for rec in records:
                f.write(json.dumps(dict(rec, schema_version=SCHEMA_VERSION), sort_keys=True) + "\n")
                n += 1
    except OSError as e:
        raise IoFailure(f"cannot write records to {path}: {e}") from e
    return n


def read_records(path: str) -> list[dict]:
    out = []
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise IoFailure(f"{path}:{lineno}: {e.msg}") from e
                if rec.pop("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
                    raise IoFailure(f"{path}:{lineno}: unsupported schema version")
                out.append(rec)
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    return out


def write_manifest(out_dir: str, command: str, config_hash: str, seed: int,
                   detector_id: str, extra: Optional[dict] = None) -> str:
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "detector_id": detector_id,
        "code_version": CODE_VERSION,
        "schema_versions": {"records": SCHEMA_VERSION, "patch_sidecar": SCHEMA_VERSION},
        "python": platform.python_version(),
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest.update(extra or {})
    path = os.path.join(out_dir, MANIFEST_FILE)
    write_json(path, manifest)
    return path


def write_loss_trace(path: str, trace: list[float]) -> None:
    try:
        _ensure_parent(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "loss"])
            for i, v in enumerate(trace):
                w.writerow([i, repr(float(v))])
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
