"""Command-line entry point: python cli.py <command> [options].

Commands: generate, apply, sweep, eval, calibrate, plot, stats. Every command
reads the run config (--config plus PATCHBENCH_* overrides), honours --seed
and writes under --out. Exit status: 0 ok, 2 invalid input, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from typing import Optional

import analysis
import calibration
import scenes
import storage
import sweeps
from config import RunConfig, config_hash, load_config, save_config
from detectors import DetectorAdapter, detect, export_vocabulary, load_adapter
from errors import ConfigError, PatchbenchError, ValidationError
from metrics import evaluate
from patchgen import PatchTrainConfig, make_control_patch, optimize_patch, validate_local_attack
from transforms import TransformParams, apply_patch, scene_transform

log = logging.getLogger("patchbench")


def _setup_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _progress(args) -> bool:
    return not args.quiet and sys.stderr.isatty()


def _adapter(cfg: RunConfig, **kwargs) -> DetectorAdapter:
    return load_adapter(cfg.detector_id, cfg.paths.weights, seed=cfg.seed, device=cfg.device, **kwargs)


def _scene_sample(cfg: RunConfig, adapter: DetectorAdapter) -> tuple[scenes.Sample, bool]:
    """First sample of paths.scene, or the bundled desk scene (relabelled)."""
    if cfg.paths.scene:
        cfg.require("scene")
        ds = scenes.load_dataset(cfg.paths.scene, cfg.paths.scene_format, adapter.class_names,
                                 cfg.paths.image_root)
        return ds.samples[0], False
    return scenes.load_desk_dataset(adapter.class_names).samples[0], True


def _fixture(cfg: RunConfig, adapter: DetectorAdapter) -> scenes.SceneFixture:
    sample, relabel = _scene_sample(cfg, adapter)
    return scenes.build_fixture(sample, adapter, cfg.conf_thresh, cfg.iou_thresh, relabel=relabel)


def _params(args) -> TransformParams:
    try:
        d = json.loads(args.params) if args.params else {}
    except json.JSONDecodeError as e:
        raise ConfigError("--params", f"not valid JSON: {e.msg}") from e
    for flag, key in (("position", "position"), ("scale", "scale"), ("rotation", "rotation"),
                      ("brightness", "brightness_factor"), ("contrast", "contrast_factor"),
                      ("hue", "hue_shift"), ("saturation", "saturation_factor"),
                      ("lowpass", "lowpass_size"), ("colors", "color_count")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    return TransformParams.from_dict(d)


def _manifest(cfg: RunConfig, args, extra: Optional[dict] = None) -> None:
    storage.write_manifest(args.out, args.command, config_hash(cfg), cfg.seed, cfg.detector_id, extra)
    save_config(cfg, os.path.join(args.out, "config.yaml"))


def cmd_generate(cfg: RunConfig, args) -> None:
    if args.control:
        patch = make_control_patch(args.side or 64, cfg.seed)
        path = os.path.join(args.out, "control.png")
        storage.save_patch(path, patch)
        _manifest(cfg, args, {"patch": path})
        print(f"control patch -> {path}")
        return

    train = PatchTrainConfig.from_dict(cfg.train or {}, seed=cfg.seed)
    if args.iterations is not None:
        train.iterations = args.iterations
    if args.side:
        train.patch_side = args.side
    if train.checkpoint_every and not train.checkpoint_dir:
        train.checkpoint_dir = os.path.join(args.out, "checkpoints")
    if train.attack_kind == "local_hide" and train.target_object is None and cfg.target_object:
        train.target_object = cfg.target_object
    train.validate()

    adapter = _adapter(cfg)
    if cfg.paths.scene:
        cfg.require("scene")
        data = scenes.load_dataset(cfg.paths.scene, cfg.paths.scene_format, adapter.class_names,
                                   cfg.paths.image_root)
    else:
        data = scenes.load_desk_dataset(adapter.class_names)
    patch = optimize_patch(adapter, data, train, progress=_progress(args))

    path = os.path.join(args.out, "patch.png")
    storage.save_patch(path, patch)
    storage.write_loss_trace(os.path.join(args.out, "loss_trace.csv"), patch.training_meta["loss_trace"])
    _manifest(cfg, args, {"patch": path, "train": train.to_dict()})
    trace = patch.training_meta["loss_trace"]
    print(f"{patch.kind} patch ({train.iterations} iterations) -> {path}")
    if trace:
        print(f"objective {trace[0]:.4f} -> {trace[-1]:.4f}")


def cmd_apply(cfg: RunConfig, args) -> None:
    cfg.require("patch")
    patch = storage.load_patch(cfg.paths.patch)
    if args.image:
        image = storage.read_image(args.image)
    else:
        adapter = _adapter(cfg)
        image = _scene_sample(cfg, adapter)[0].image
    params = _params(args)
    out = scene_transform(apply_patch(image, patch, params), params)
    path = os.path.join(args.out, "applied.png")
    storage.write_image(path, out)
    _manifest(cfg, args, {"params": params.to_dict()})
    print(f"applied {patch.kind} patch -> {path}")


def cmd_eval(cfg: RunConfig, args) -> None:
    adapter = _adapter(cfg)
    fixture = _fixture(cfg, adapter)
    result = fixture.baseline_eval
    extra = {"baseline": result.to_dict()}
    print(f"baseline mAP {result.map:.4f}")

    if cfg.paths.patch:
        cfg.require("patch")
        patch = storage.load_patch(cfg.paths.patch)
        params = _params(args)
        shown = scene_transform(apply_patch(fixture.image, patch, params), params)
        result = evaluate(detect(adapter, shown, cfg.conf_thresh), fixture.annotations,
                          cfg.iou_thresh, fixture.object_ids)
        extra["patched"] = result.to_dict()
        print(f"patched mAP {result.map:.4f}")

        if patch.kind == "local" and cfg.paths.control:
            cfg.require("control")
            target = cfg.target_object or next(iter(fixture.object_ids))
            if target not in fixture.object_ids:
                raise ConfigError("target_object", f"{target!r} is not one of {sorted(fixture.object_ids)}")
            verdict = validate_local_attack(adapter, (fixture.image, fixture.annotations), patch,
                                            storage.load_patch(cfg.paths.control), params,
                                            target_index=fixture.object_ids[target],
                                            iou_thresh=cfg.iou_thresh)
            extra["local_attack"] = verdict.to_dict()
            print(f"local attack on {target}: control {verdict.control_confidence:.3f} "
                  f"adversarial {verdict.adversarial_confidence:.3f} -> "
                  f"{'valid' if verdict.valid else 'invalid'}")

    for name, conf in sorted(result.per_object_confidence.items()):
        print(f"  {name:<16} {conf:.3f}")
    storage.save_eval(os.path.join(args.out, "eval.json"), result)
    export_vocabulary(adapter, os.path.join(args.out, "classes.json"))
    _manifest(cfg, args, extra)


def cmd_sweep(cfg: RunConfig, args) -> None:
    if not args.heatmap and cfg.sweep is None:
        raise ConfigError("sweep", "no sweep section in the config")
    adapter = _adapter(cfg)
    fixture = _fixture(cfg, adapter)
    patch_path = cfg.paths.patch
    if args.heatmap:
        cfg.require("patch")
        patch = storage.load_patch(patch_path)
        target = args.target or cfg.target_object
        heat = sweeps.position_heatmap(fixture, patch, adapter, args.heatmap, target, _params(args),
                                       cfg.conf_thresh, cfg.iou_thresh, progress=_progress(args))
        info = analysis.render_figure(heat, os.path.join(args.out, "heatmap.png"))
        curve = sweeps.distance_curve(heat, fixture.target(heat.target).box)
        storage.write_json(os.path.join(args.out, "distance_curve.json"),
                           {"target": heat.target, "baseline": heat.baseline,
                            "points": [list(p) for p in curve]})
        _manifest(cfg, args, {"heatmap": info})
        print(f"heatmap {info['grid'][0]}x{info['grid'][1]} -> {info['path']}")
        return

    spec = sweeps.SweepSpec.from_dict(cfg.sweep, seed=cfg.seed)
    patch_path = spec.patch_ref or patch_path
    if not patch_path or not os.path.exists(patch_path):
        raise ConfigError("paths.patch", f"patch {patch_path!r} not found")
    patch = storage.load_patch(patch_path)

    t0 = time.perf_counter()
    records = sweeps.run_sweep(spec, adapter, fixture, patch, cfg.conf_thresh, cfg.iou_thresh,
                               workers=args.workers, progress=_progress(args), lux_scale=cfg.lux_scale)
    n = storage.write_records(os.path.join(args.out, storage.RESULTS_FILE), (r.to_dict() for r in records))
    _manifest(cfg, args, {
        "spec": spec.to_dict(),
        "patch": patch_path,
        "patch_meta": {"kind": patch.kind, "detector_id": patch.detector_id},
        "records": n,
        "failed": sum(r.failed for r in records),
        "wall_time": time.perf_counter() - t0,
        "point_wall_time": sum(r.wall_time for r in records),
    })
    print(f"{n} records -> {os.path.join(args.out, storage.RESULTS_FILE)}")


def cmd_calibrate(cfg: RunConfig, args) -> None:
    section = cfg.calibrate
    if cfg.paths.baseline:
        cfg.require("baseline")
        baseline = storage.read_image(cfg.paths.baseline)
    else:
        baseline = scenes.load_desk_dataset().samples[0].image
    synthetic = args.synthetic if args.synthetic is not None else section.synthetic
    seed = section.seed if section.seed is not None else cfg.seed

    truth = []
    if synthetic:
        pairs = calibration.make_synthetic_targets(baseline, synthetic, seed)
        targets, truth = [t for t, _ in pairs], [cp for _, cp in pairs]
    else:
        cfg.require("targets")
        names = sorted(f for f in os.listdir(cfg.paths.targets) if f.lower().endswith(scenes.IMAGE_EXTS))
        targets = [storage.read_image(os.path.join(cfg.paths.targets, f)) for f in names]

    train_cfg = calibration.config_from_section(section)
    train_cfg.seed = seed
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    model = calibration.train_calibrator(baseline, targets, train_cfg, progress=_progress(args))
    path = os.path.join(args.out, "calibrator.pt")
    os.makedirs(args.out, exist_ok=True)
    calibration.save_calibrator(model, path)

    report = []
    for i, target in enumerate(targets):
        row = calibration.replication_error(model, baseline, target)
        if truth:
            row["true_params"] = truth[i].to_dict()
        report.append(row)
    storage.write_json(os.path.join(args.out, "replication.json"),
                       {"best_val_loss": model.best_val_loss, "targets": report})
    _manifest(cfg, args, {"calibrator": path, "targets": len(targets)})
    mean_mse = sum(r["mse"] for r in report) / len(report)
    mean_id = sum(r["identity_mse"] for r in report) / len(report)
    print(f"calibrator -> {path}")
    print(f"replication MSE {mean_mse:.6f} (identity {mean_id:.6f})")


def cmd_plot(cfg: RunConfig, args) -> None:
    results = args.results or os.path.join(args.out, storage.RESULTS_FILE)
    if not os.path.exists(results):
        raise ConfigError("results", f"{results} does not exist")
    records = [sweeps.SweepRecord.from_dict(d) for d in storage.read_records(results)]
    series = analysis.curves_from_records(records, by_position=args.by_position)
    if args.metric == "map":
        series = [s for s in series if s.y_metric == "map"]
    else:
        series = [s for s in series if s.metric_key == f"confidence:{args.metric}"]
    if not series:
        raise ValidationError(f"no {args.metric} data in {results}")
    style = {"xlabel": records[0].dimension}
    out = os.path.join(args.out, f"{records[0].dimension}_{args.metric}.{args.format}")
    info = analysis.render_figure(series, out, style)
    print(f"{len(series)} series -> {info['path']}")


def cmd_stats(cfg: RunConfig, args) -> None:
    path = args.image or cfg.paths.patch
    if not path:
        raise ConfigError("paths.patch", "no image given")
    stats = analysis.patch_color_stats(storage.read_image(path))
    summary = {
        "image": path,
        "pixel_count": stats.pixel_count,
        "distinct_color_count": stats.distinct_color_count,
        "mean_hue": stats.mean_hue,
        "mean_saturation": stats.mean_saturation,
        "mean_value": stats.mean_value,
        "hsv_histograms": [h.tolist() for h in stats.hsv_histograms],
        "rgb_histograms": [h.tolist() for h in stats.rgb_histograms],
    }
    print(f"{path}: {stats.distinct_color_count} colours, mean saturation {stats.mean_saturation:.3f}, "
          f"mean value {stats.mean_value:.3f}")
    if args.compare:
        other = analysis.patch_color_stats(storage.read_image(args.compare))
        summary["comparison"] = dict(analysis.compare_color_stats(stats, other), image=args.compare)
        c = summary["comparison"]
        print(f"vs {args.compare}: hue {c['hue_shift']:+.1f} deg, saturation {c['saturation_shift']:+.3f}, "
              f"value {c['value_shift']:+.3f}, colours x{c['distinct_ratio']:.2f}")
    storage.write_json(os.path.join(args.out, "color_stats.json"), summary)


COMMANDS = {
    "generate": cmd_generate,
    "apply": cmd_apply,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "calibrate": cmd_calibrate,
    "plot": cmd_plot,
    "stats": cmd_stats,
}


def _add_params(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("patch placement")
    g.add_argument("--params", help="TransformParams as JSON")
    g.add_argument("--position", type=float, nargs=2, metavar=("CX", "CY"))
    g.add_argument("--scale", type=float)
    g.add_argument("--rotation", type=float, nargs=3, metavar=("RX", "RY", "RZ"))
    g.add_argument("--brightness", type=float)
    g.add_argument("--contrast", type=float)
    g.add_argument("--hue", type=float)
    g.add_argument("--saturation", type=float)
    g.add_argument("--lowpass", type=int)
    g.add_argument("--colors", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default: paths.output)")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--quiet", "-q", action="store_true")

    parser = argparse.ArgumentParser(prog="patchbench", description="Adversarial patch generation and robustness sweeps.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("generate", parents=[common], help="train an adversarial patch")
    p.add_argument("--iterations", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--control", action="store_true", help="write a random-noise control patch instead")

    p = sub.add_parser("apply", parents=[common], help="paste a patch into an image")
    p.add_argument("--image", help="input image (default: the configured scene)")
    _add_params(p)

    p = sub.add_parser("sweep", parents=[common], help="run the configured parameter sweep")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--heatmap", type=int, metavar="STEP", help="position heatmap with this grid step instead")
    p.add_argument("--target", help="fixture object for the heatmap")
    _add_params(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate the scene, optionally patched")
    _add_params(p)

    p = sub.add_parser("calibrate", parents=[common], help="train the colour calibrator")
    p.add_argument("--synthetic", type=int, metavar="N", help="train on N synthetic targets")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("plot", parents=[common], help="plot curves from a results file")
    p.add_argument("--results", help="results.jsonl (default: <out>/results.jsonl)")
    p.add_argument("--metric", default="map", help="'map' or a fixture object name")
    p.add_argument("--format", choices=("png", "svg"), default="png")
    p.add_argument("--by-position", action="store_true")

    p = sub.add_parser("stats", parents=[common], help="colour statistics of a patch image")
    p.add_argument("--image")
    p.add_argument("--compare", help="second image, e.g. a photo of the printed patch")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _setup_logging(args.verbose, args.quiet)
    try:
        cfg = load_config(args.config, overrides={"seed": args.seed})
        args.out = args.out or cfg.paths.output
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PatchbenchError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
