"""Locate detector weights: explicit path, local cache, or download from the registry."""
import json
import logging
import os
from typing import Optional

import requests
from tqdm import tqdm

from detectors.base import ModelLoadFailure

log = logging.getLogger(__name__)

_DIR = os.path.dirname(__file__)
REGISTRY_FILE = os.path.join(_DIR, "registry.json")
CACHE_DIR     = os.path.join(_DIR, "..", "data", "weights")

HEADERS = {"User-Agent": "patchbench/0.1"}
CHUNK   = 1 << 16


def _load_registry() -> dict:
    with open(REGISTRY_FILE) as f:
        return json.load(f)


def _download(url: str, dest: str, quiet: bool = False) -> None:
    os.makedirs(os.path.dirname(dest), exist_ok=True)
    tmp = dest + ".part"
    try:
        with requests.get(url, timeout=30, headers=HEADERS, stream=True) as resp:
            resp.raise_for_status()
            total = int(resp.headers.get("content-length") or 0)
            with open(tmp, "wb") as f, tqdm(total=total, unit="B", unit_scale=True,
                                             desc=os.path.basename(dest), disable=quiet) as bar:
                for chunk in resp.iter_content(CHUNK):
                    f.write(chunk)
                    bar.update(len(chunk))
        os.replace(tmp, dest)
    except (requests.RequestException, OSError) as e:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise ModelLoadFailure(f"download of {url} failed: {e}") from e


def resolve(detector_id: str, path: Optional[str] = None, cache_dir: str = CACHE_DIR,
            download: bool = True, quiet: bool = False) -> Optional[str]:
    """Path to usable weights for detector_id, or None when the backend has no registry entry.

    An explicit path wins and must exist. Otherwise the registry URL is
    looked up and fetched into cache_dir on first use.
    """
    if path:
        if not os.path.isfile(path):
            raise ModelLoadFailure(f"weights file {path} does not exist")
        return path

    entry = _load_registry().get(detector_id)
    if not entry or not entry.get("url"):
        return None
    dest = os.path.join(cache_dir, entry["filename"])
    if os.path.exists(dest):
        return dest
    if not download:
        raise ModelLoadFailure(f"{detector_id} weights not cached at {dest} and download disabled")
    log.info("fetching %s weights from %s", detector_id, entry["url"])
    _download(entry["url"], dest, quiet=quiet)
    return dest
