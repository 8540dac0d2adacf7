import json
import os

import numpy as np
import pytest
import requests
import torch

import detectors
from conftest import WEIGHTS_ENV, ScriptedAdapter
from detectors import tinyyolo, weights
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
from errors import ValidationError
from metrics import Annotation, Box


class FixedAdapter(DetectorAdapter):
    detector_id = "fixed"
    class_names = ["a", "b"]

    def __init__(self, boxes, scores, labels):
        super().__init__()
        self.out = (torch.tensor(boxes, dtype=torch.float64), torch.tensor(scores, dtype=torch.float64),
                    torch.tensor(labels))

    def candidates(self, image):
        return self.out


def test_detect_clips_boxes_to_the_frame():
    adapter = FixedAdapter([[-5.0, -5.0, 6.0, 30.0]], [0.9], [0])
    (d,) = detect(adapter, np.zeros((20, 10, 3)))
    assert d.box.as_list() == [0.0, 0.0, 6.0, 20.0]


def test_detect_suppresses_overlaps_within_a_class_only():
    boxes = [[0, 0, 10, 10], [1, 0, 11, 10], [0, 0, 10, 10]]
    adapter = FixedAdapter(boxes, [0.8, 0.9, 0.7], [0, 0, 1])
    dets = detect(adapter, np.zeros((20, 20, 3)))
    assert sorted((d.class_id, d.confidence) for d in dets) == [(0, 0.9), (1, 0.7)]


def test_detect_threshold_is_strict():
    adapter = FixedAdapter([[0, 0, 5, 5]], [0.5], [0])
    assert detect(adapter, np.zeros((8, 8, 3)), conf_thresh=0.5) == []
    assert len(detect(adapter, np.zeros((8, 8, 3)), conf_thresh=0.49)) == 1


def test_detect_drops_boxes_clipped_to_nothing():
    adapter = FixedAdapter([[30, 30, 40, 40]], [0.9], [0])
    assert detect(adapter, np.zeros((20, 20, 3))) == []


def test_empty_vocabulary_fails_to_load():
    class Empty(FixedAdapter):
        class_names = []
    with pytest.raises(ModelLoadFailure):
        Empty([[0, 0, 1, 1]], [0.1], [0])


def test_wrong_image_shapes():
    adapter = FixedAdapter([[0, 0, 5, 5]], [0.9], [0])
    with pytest.raises(InputShapeMismatch):
        detect(adapter, np.zeros((8, 8)))
    with pytest.raises(InputShapeMismatch):
        detect(adapter, torch.zeros(1, 8, 8))


@pytest.mark.parametrize("error", [RuntimeError, ValueError])
def test_backend_errors_become_inference_failures(white_scene, error):
    image, _ = white_scene
    adapter = ScriptedAdapter([(0, 0, 4, 4, 0)], fail_when=lambda t: True, fail_with=error)
    with pytest.raises(InferenceFailure) as e:
        detect(adapter, image)
    assert isinstance(e.value.__cause__, error)
    assert e.value.args[0].startswith("scripted:")


def test_inference_only_backend_has_no_gradients(scripted, white_scene):
    image, anns = white_scene
    with pytest.raises(GradientsUnavailable):
        attack_loss(scripted, image, anns, AttackKind())


def test_attack_kind_validation():
    with pytest.raises(ValidationError):
        AttackKind("local_hide")
    with pytest.raises(ValidationError):
        AttackKind("make_it_a_toaster", 3)
    assert AttackKind("local_hide", 41).patch_kind == "local"
    assert AttackKind().patch_kind == "global"


def test_blank_image_yields_no_detections(yolo64):
    assert detect(yolo64, np.zeros((32, 32, 3))) == []
    assert detect(yolo64, np.full((24, 40, 3), 0.5)) == []


def test_threshold_one_yields_no_detections(yolo64, rng):
    assert detect(yolo64, rng.random((32, 32, 3)), conf_thresh=1.0) == []


def test_candidates_are_in_original_pixels(yolo64, rng):
    boxes, scores, labels = yolo64.candidates(yolo64.as_tensor(rng.random((48, 96, 3))))
    assert boxes.shape == (len(tinyyolo.ANCHORS) * 4 * 4, 4)
    assert scores.shape == labels.shape == (boxes.shape[0],)
    centres_x = (boxes[:, 0] + boxes[:, 2]) / 2
    assert centres_x.min() > -96 and centres_x.max() < 2 * 96


def test_same_seed_same_network(rng):
    image = rng.random((32, 32, 3))
    a = tinyyolo.load(seed=3, input_size=32, dtype=torch.float64)
    b = tinyyolo.load(seed=3, input_size=32, dtype=torch.float64)
    c = tinyyolo.load(seed=4, input_size=32, dtype=torch.float64)
    sa = a.candidates(a.as_tensor(image))[1]
    assert torch.equal(sa, b.candidates(b.as_tensor(image))[1])
    assert not torch.equal(sa, c.candidates(c.as_tensor(image))[1])


def test_clone_behaves_identically(yolo64, rng):
    image = yolo64.as_tensor(rng.random((32, 32, 3)))
    twin = yolo64.clone()
    assert twin is not yolo64
    assert torch.equal(twin.candidates(image)[1], yolo64.candidates(image)[1])


def test_loading_incompatible_weights(tmp_path):
    path = tmp_path / "bad.pt"
    torch.save({"head.weight": torch.zeros(1)}, path)
    with pytest.raises(ModelLoadFailure):
        tinyyolo.load(weights=str(path))


def test_weights_round_trip(tmp_path, rng):
    net = tinyyolo.TinyYoloNet(num_classes=2)
    path = tmp_path / "w.pt"
    torch.save(net.state_dict(), path)
    a = tinyyolo.load(weights=str(path), class_names=["a", "b"], input_size=32, dtype=torch.float64)
    b = tinyyolo.load(weights=str(path), seed=99, class_names=["a", "b"], input_size=32, dtype=torch.float64)
    image = a.as_tensor(rng.random((32, 32, 3)))
    assert torch.equal(a.candidates(image)[1], b.candidates(image)[1])


def _loss_fn(adapter, annotations, attack):
    def f(x):
        return attack_loss(adapter, x, annotations, attack)
    return f


def test_global_objective_gradient_matches_finite_differences(yolo64):
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.random((3, 24, 32)))
    anns = [Annotation(Box(4, 4, 20, 18), 41, "cup")]
    f = _loss_fn(yolo64, anns, AttackKind())
    xg = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(xg), xg)

    eps = 1e-6
    flat = rng.choice(x.numel(), size=100, replace=False)
    for idx in flat:
        c, i, j = np.unravel_index(idx, x.shape)
        hi, lo = x.clone(), x.clone()
        hi[c, i, j] += eps
        lo[c, i, j] -= eps
        numeric = (float(f(hi)) - float(f(lo))) / (2 * eps)
        analytic = float(grad[c, i, j])
        assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-9


def test_local_objective_is_zero_without_target_annotations(yolo64, rng):
    anns = [Annotation(Box(4, 4, 20, 18), 0, "person")]
    loss = attack_loss(yolo64, rng.random((32, 32, 3)), anns, AttackKind("local_hide", 41))
    assert float(loss) == 0.0


def test_objectives_are_finite_and_non_negative(yolo64, rng):
    image = rng.random((32, 32, 3))
    anns = [Annotation(Box(4, 4, 20, 18), 41, "cup")]
    for attack in (AttackKind(), AttackKind("local_hide", 41)):
        v = float(attack_loss(yolo64, image, anns, attack))
        assert np.isfinite(v) and v >= 0.0


def test_training_loss_without_annotations_is_objectness_only(yolo64, rng):
    assert float(yolo64.training_loss(yolo64.as_tensor(rng.random((32, 32, 3))), [])) > 0.0


def test_explicit_missing_weights_path():
    with pytest.raises(ModelLoadFailure):
        weights.resolve("tinyyolo", "/nonexistent/w.pt")


def test_backend_without_registry_url_needs_no_file():
    assert weights.resolve("tinyyolo") is None


def test_uncached_weights_with_download_disabled(tmp_path):
    with pytest.raises(ModelLoadFailure):
        weights.resolve("frcnn-mobilenet", cache_dir=str(tmp_path), download=False)


def test_failed_download_leaves_no_partial_file(tmp_path, monkeypatch):
    def refuse(*args, **kwargs):
        raise requests.ConnectionError("offline")
    monkeypatch.setattr(requests, "get", refuse)
    with pytest.raises(ModelLoadFailure):
        weights.resolve("frcnn-mobilenet", cache_dir=str(tmp_path), quiet=True)
    assert os.listdir(tmp_path) == []


def test_unknown_detector_id():
    with pytest.raises(ModelLoadFailure):
        detectors.load_adapter("yolov99")


def test_export_vocabulary(yolo64, tmp_path):
    path = tmp_path / "classes.json"
    detectors.export_vocabulary(yolo64, str(path))
    doc = json.loads(path.read_text())
    assert doc["detector_id"] == "tinyyolo"
    assert doc["class_names"][41] == "cup"


@pytest.mark.weights
def test_pretrained_frcnn_detects_and_differentiates(rng):
    adapter = detectors.load_adapter("frcnn-mobilenet", os.environ[WEIGHTS_ENV])
    assert "cup" in adapter.class_names
    image = rng.random((120, 160, 3))
    assert all(0.0 <= d.confidence <= 1.0 for d in detect(adapter, image, 0.01))
    x = torch.from_numpy(image.transpose(2, 0, 1).copy()).float().requires_grad_(True)
    anns = [Annotation(Box(40, 30, 100, 90), adapter.class_id("cup"), "cup")]
    loss = attack_loss(adapter, x, anns, AttackKind())
    (grad,) = torch.autograd.grad(loss, x)
    assert torch.isfinite(grad).all()
