import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from detectors.base import DetectorAdapter  # noqa: E402
from errors import PatchbenchError  # noqa: E402
from metrics import Annotation, Box  # noqa: E402
from scenes import Sample  # noqa: E402

WEIGHTS_ENV = "FRCNN_WEIGHTS"
SLOW_ENV = "RUN_SLOW"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running trend checks (RUN_SLOW=1)")
    config.addinivalue_line("markers", "weights: needs pretrained detector weights (FRCNN_WEIGHTS=path)")


def pytest_collection_modifyitems(config, items):
    skip_slow = pytest.mark.skip(reason=f"set {SLOW_ENV}=1 to run")
    skip_weights = pytest.mark.skip(reason=f"set {WEIGHTS_ENV} to a weights file to run")
    for item in items:
        if "slow" in item.keywords and os.environ.get(SLOW_ENV) != "1":
            item.add_marker(skip_slow)
        if "weights" in item.keywords and not os.environ.get(WEIGHTS_ENV):
            item.add_marker(skip_weights)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for key in list(os.environ):
        if key.startswith("PATCHBENCH_"):
            monkeypatch.delenv(key)


class ScriptedAdapter(DetectorAdapter):
    """Scores each fixed box by the mean pixel value inside it.

    Bright objects are detected, a dark patch over them lowers the score,
    and nothing needs weights. fail_when(image_tensor) -> True raises
    fail_with("scripted failure"), a PatchbenchError unless told otherwise.
    """
    detector_id = "scripted"
    capabilities = frozenset({"inference"})
    clonable = True

    def __init__(self, boxes, class_names=("cup", "bottle"), fail_when=None, fail_with=PatchbenchError):
        self.class_names = list(class_names)
        self.input_size = (0, 0)
        self.dtype = torch.float64
        super().__init__()
        self.boxes = [tuple(b) for b in boxes]
        self.fail_when = fail_when
        self.fail_with = fail_with
        self.calls = []

    def candidates(self, image):
        self.calls.append(1)
        if self.fail_when is not None and self.fail_when(image):
            raise self.fail_with("scripted failure")
        scores = []
        for x1, y1, x2, y2, _ in self.boxes:
            scores.append(image[:, int(y1):int(y2), int(x1):int(x2)].mean())
        boxes = torch.tensor([b[:4] for b in self.boxes], dtype=torch.float64)
        labels = torch.tensor([b[4] for b in self.boxes], dtype=torch.int64)
        return boxes, torch.stack(scores).to(torch.float64), labels

    def clone(self):
        return ScriptedAdapter(self.boxes, self.class_names, self.fail_when, self.fail_with)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def white_scene():
    """80x60 white image with one 'cup' box and one 'bottle' box."""
    image = np.ones((60, 80, 3))
    anns = [Annotation(Box(30, 20, 50, 40), 0, "cup"), Annotation(Box(2, 2, 14, 20), 1, "bottle")]
    return image, anns


@pytest.fixture
def scripted(white_scene):
    _, anns = white_scene
    return ScriptedAdapter([(*a.box.as_list(), a.class_id) for a in anns])


@pytest.fixture
def white_sample(white_scene):
    image, anns = white_scene
    return Sample(image_path="", annotations=anns, sample_id="white",
                  object_ids={"cup": 0, "bottle": 1}, _image=image)


@pytest.fixture(scope="session")
def yolo64():
    from detectors import tinyyolo
    return tinyyolo.load(seed=0, input_size=32, dtype=torch.float64)


@pytest.fixture(scope="session")
def frcnn():
    from detectors import load_adapter
    return load_adapter("frcnn-mobilenet", os.environ[WEIGHTS_ENV])


@pytest.fixture(scope="session")
def desk(frcnn):
    """(dataset, fixture) for the desk scene, relabelled by the pretrained detector."""
    from scenes import build_fixture, load_desk_dataset
    data = load_desk_dataset(frcnn.class_names)
    return data, build_fixture(data.samples[0], frcnn, relabel=True)


@pytest.fixture(scope="session")
def desk_global_patch(frcnn, desk):
    from patchgen import PatchTrainConfig, optimize_patch
    return optimize_patch(frcnn, desk[0], PatchTrainConfig(iterations=2000, seed=0))
