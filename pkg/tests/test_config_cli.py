import json
import os

import numpy as np
import pytest
import yaml

import cli
import scenes
import storage
from config import RunConfig, config_hash, load_config, save_config
from conftest import WEIGHTS_ENV, ScriptedAdapter
from detectors.base import COCO_CLASSES
from errors import ConfigError, ValidationError


def _write_yaml(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_defaults():
    cfg = load_config(environ={})
    assert cfg.detector_id == "frcnn-mobilenet"
    assert cfg.conf_thresh == 0.25 and cfg.iou_thresh == 0.5
    assert cfg.paths.output == "out"
    assert cfg.calibrate.epochs == 500


def test_precedence_file_env_overrides(tmp_path):
    path = _write_yaml(tmp_path / "c.yaml", {"seed": 3, "paths": {"output": "from-file"}})
    assert load_config(path, environ={}).seed == 3
    cfg = load_config(path, environ={"PATCHBENCH_SEED": "5", "PATCHBENCH_PATHS__OUTPUT": "/tmp/x"})
    assert cfg.seed == 5 and cfg.paths.output == "/tmp/x"
    assert load_config(path, environ={"PATCHBENCH_SEED": "5"}, overrides={"seed": 7}).seed == 7
    assert load_config(path, environ={}, overrides={"seed": None}).seed == 3


def test_env_values_are_yaml_scalars():
    cfg = load_config(environ={"PATCHBENCH_CONF_THRESH": "0.4", "PATCHBENCH_CALIBRATE__EPOCHS": "12"})
    assert cfg.conf_thresh == 0.4
    assert cfg.calibrate.epochs == 12


@pytest.mark.parametrize("doc,field", [
    ({"colour": "red"}, "colour"),
    ({"paths": {"wieghts": "x"}}, "paths.wieghts"),
    ({"conf_thresh": 1.5}, "conf_thresh"),
    ({"detector_id": "yolov99"}, "detector_id"),
    ({"calibrate": {"val_fraction": 1.0}}, "calibrate.val_fraction"),
])
def test_invalid_fields_are_named(tmp_path, doc, field):
    with pytest.raises(ConfigError) as e:
        load_config(_write_yaml(tmp_path / "c.yaml", doc), environ={})
    assert e.value.field == field


def test_nested_sections_are_validated(tmp_path):
    with pytest.raises(ValidationError):
        load_config(_write_yaml(tmp_path / "c.yaml", {"train": {"iterations": -3}}), environ={})
    with pytest.raises(ValidationError):
        load_config(_write_yaml(tmp_path / "c.yaml", {"sweep": {"dimension": "scale", "values": []}}), environ={})


def test_env_overrides_nest_one_level():
    with pytest.raises(ConfigError):
        load_config(environ={"PATCHBENCH_PATHS__X__Y": "1"})


def test_hash_and_round_trip(tmp_path):
    cfg = load_config(environ={}, overrides={"seed": 4})
    assert config_hash(cfg) == config_hash(load_config(environ={}, overrides={"seed": 4}))
    assert config_hash(cfg) != config_hash(load_config(environ={}))
    save_config(cfg, str(tmp_path / "saved.yaml"))
    assert load_config(str(tmp_path / "saved.yaml"), environ={}).to_dict() == cfg.to_dict()


def test_require_names_the_missing_path(tmp_path):
    cfg = RunConfig()
    with pytest.raises(ConfigError) as e:
        cfg.require("patch")
    assert e.value.field == "paths.patch"
    cfg.paths.patch = str(tmp_path / "missing.png")
    with pytest.raises(ConfigError):
        cfg.require("patch")


@pytest.fixture
def desk_dir(tmp_path, monkeypatch):
    d = tmp_path / "desk"
    monkeypatch.setattr(scenes, "DESK_IMAGE_DIR", str(d))
    return d


@pytest.fixture
def control_png(tmp_path, desk_dir):
    out = tmp_path / "ctl"
    assert cli.main(["generate", "--control", "--side", "16", "--out", str(out), "-q"]) == 0
    return out / "control.png"


def test_usage_errors_exit_2():
    assert cli.main(["frobnicate"]) == 2
    assert cli.main([]) == 2


def test_invalid_config_exits_2(tmp_path):
    path = _write_yaml(tmp_path / "c.yaml", {"conf_thresh": 2})
    assert cli.main(["eval", "--config", path, "--out", str(tmp_path / "o"), "-q"]) == 2


def test_runtime_failure_exits_1(tmp_path):
    path = _write_yaml(tmp_path / "c.yaml", {"detector_id": "frcnn-mobilenet",
                                             "paths": {"weights": str(tmp_path / "absent.pth")}})
    assert cli.main(["eval", "--config", path, "--out", str(tmp_path / "o"), "-q"]) == 1


def test_generate_control(control_png):
    patch = storage.load_patch(str(control_png))
    assert patch.kind == "control" and patch.side == 16
    manifest = json.loads((control_png.parent / "manifest.json").read_text())
    assert manifest["command"] == "generate"
    assert (control_png.parent / "config.yaml").exists()


def test_stats(tmp_path, capsys):
    png = tmp_path / "img.png"
    storage.write_image(str(png), np.full((8, 8, 3), 0.5))
    assert cli.main(["stats", "--image", str(png), "--out", str(tmp_path), "-q"]) == 0
    doc = json.loads((tmp_path / "color_stats.json").read_text())
    assert doc["distinct_color_count"] == 1 and doc["pixel_count"] == 64
    assert "1 colours" in capsys.readouterr().out


def test_apply_reads_the_patch_from_the_environment(tmp_path, control_png, monkeypatch):
    png = tmp_path / "img.png"
    storage.write_image(str(png), np.ones((40, 40, 3)))
    monkeypatch.setenv("PATCHBENCH_PATHS__PATCH", str(control_png))
    out = tmp_path / "applied"
    assert cli.main(["apply", "--image", str(png), "--params", '{"scale": 0.4}', "--out", str(out), "-q"]) == 0
    applied = storage.read_image(str(out / "applied.png"))
    assert applied.shape == (40, 40, 3)
    assert not np.allclose(applied[16:24, 16:24], 1.0)
    assert np.all(applied[:4, :4] == 1.0)
    assert cli.main(["apply", "--image", str(png), "--params", "{oops", "--out", str(out), "-q"]) == 2


def test_eval_on_the_desk_scene(tmp_path, desk_dir, monkeypatch, capsys):
    sample = scenes.load_desk_dataset(COCO_CLASSES).samples[0]
    adapter = ScriptedAdapter([(*a.box.as_list(), a.class_id) for a in sample.annotations],
                              class_names=COCO_CLASSES)
    monkeypatch.setattr(cli, "_adapter", lambda cfg, **kw: adapter)
    out = tmp_path / "eval"
    assert cli.main(["eval", "--out", str(out), "-q"]) == 0
    assert "baseline mAP 1.0000" in capsys.readouterr().out
    assert storage.load_eval(str(out / "eval.json")).map == 1.0
    assert json.loads((out / "classes.json").read_text())["class_names"] == list(COCO_CLASSES)


@pytest.mark.weights
def test_eval_with_the_default_detector(tmp_path, desk_dir, monkeypatch, capsys):
    monkeypatch.setenv("PATCHBENCH_PATHS__WEIGHTS", os.environ[WEIGHTS_ENV])
    out = tmp_path / "eval"
    assert cli.main(["eval", "--out", str(out), "-q"]) == 0
    assert "baseline mAP 1.0000" in capsys.readouterr().out
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["detector_id"] == "frcnn-mobilenet"


def test_sweep_then_plot(tmp_path, control_png):
    path = _write_yaml(tmp_path / "c.yaml", {
        "detector_id": "tinyyolo",
        "paths": {"patch": str(control_png)},
        "sweep": {"dimension": "scale", "values": [0.1, 0.2, 0.3]},
    })
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", path, "--out", str(out), "-q"]) == 0
    records = storage.read_records(str(out / "results.jsonl"))
    assert len(records) == 6
    assert [r["patched"] for r in records] == [False, True] * 3
    assert all("wall_time" not in r for r in records)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["records"] == 6 and "wall_time" in manifest

    assert cli.main(["plot", "--config", path, "--out", str(out), "--format", "svg", "-q"]) == 0
    assert (out / "scale_map.svg").exists()
    assert cli.main(["plot", "--config", path, "--out", str(out), "--metric", "teapot", "-q"]) == 2


def test_sweep_without_a_sweep_section(tmp_path, control_png, monkeypatch):
    monkeypatch.setenv("PATCHBENCH_PATHS__PATCH", str(control_png))
    monkeypatch.setattr(cli, "_adapter", lambda cfg, **kw: pytest.fail("loaded a detector"))
    assert cli.main(["sweep", "--out", str(tmp_path / "o"), "-q"]) == 2


def test_calibrate_on_synthetic_targets(tmp_path, desk_dir):
    out = tmp_path / "cal"
    assert cli.main(["calibrate", "--synthetic", "3", "--epochs", "1", "--out", str(out), "-q"]) == 0
    report = json.loads((out / "replication.json").read_text())
    assert len(report["targets"]) == 3
    assert set(report["targets"][0]) == {"mse", "identity_mse", "params", "true_params"}
    assert (out / "calibrator.pt").exists()
