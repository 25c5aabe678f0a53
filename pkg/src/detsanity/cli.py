"""Command-line front end.

Subcommands: ``generate``, ``train``, ``explain``, ``model-sanity``,
``data-sanity``. Every option can also come from a ``key = value`` config
file (``--config``); explicit flags win over the file, the file wins over
built-in defaults. Each run writes a ``manifest.txt`` with the fully
resolved configuration, so outputs are reproducible bit-for-bit from the
manifest alone.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 completed with warnings (no detections to explain, mAP threshold not
met, images skipped).
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, manifest, metrics, sanity, saliency, synthdata
from . import detector as det

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_WARNINGS = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


# 8-stop perceptual (viridis-like) colormap, linearly interpolated.
_CMAP_STOPS = np.array(
    [
        [0.267, 0.005, 0.329],
        [0.283, 0.141, 0.458],
        [0.254, 0.265, 0.530],
        [0.207, 0.372, 0.553],
        [0.164, 0.471, 0.558],
        [0.128, 0.567, 0.551],
        [0.135, 0.659, 0.518],
        [0.267, 0.749, 0.441],
        [0.478, 0.821, 0.318],
        [0.741, 0.873, 0.150],
        [0.993, 0.906, 0.144],
    ]
)


def _colormap(norm: np.ndarray) -> np.ndarray:
    x = np.clip(norm, 0.0, 1.0) * (len(_CMAP_STOPS) - 1)
    i = np.minimum(x.astype(int), len(_CMAP_STOPS) - 2)
    t = (x - i)[..., None]
    return (1 - t) * _CMAP_STOPS[i] + t * _CMAP_STOPS[i + 1]


def save_overlay(smap: saliency.SaliencyMap, image: np.ndarray, path) -> str:
    """Report-time view: min-max normalized map, colormapped, over the image."""
    norm = metrics.minmax_normalize(smap)
    colored = _colormap(norm)
    alpha = 0.6
    blend = (1 - alpha) * image + alpha * colored
    arr8 = np.clip(np.round(blend * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr8, "RGB").save(path)
    return str(path)


def _load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


# --------------------------------------------------------------------------
# option handling: one table per subcommand so config-file values are
# coerced exactly like flags
# --------------------------------------------------------------------------


def _comma_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v != "")


def _comma_strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in {"1", "true", "yes", "on"}


# (name, type, default, help)
_COMMON_SALIENCY = [
    ("ig_steps", int, 16, "integration steps for IG/SIG"),
    ("sg_samples", int, 8, "SmoothGrad samples"),
    ("sg_noise", float, 0.15, "SmoothGrad noise as fraction of dynamic range"),
    ("seed", int, 0, "saliency / randomization seed"),
    ("class_target", str, "logit", "class decision target: logit or score"),
    ("reduction", str, "sum_abs", "channel reduction: sum_abs, max_abs, mean_abs"),
]
_DETECT_OPTS = [
    ("score_threshold", float, 0.25, "detection score threshold"),
    ("nms_iou", float, 0.45, "NMS IoU threshold"),
]

OPTIONS: dict[str, list[tuple]] = {
    "generate": [
        ("count", int, 48, "number of scenes"),
        ("seed", int, 0, "dataset seed"),
        ("image_size", int, 96, "square image side in pixels"),
        ("out", str, None, "output directory"),
    ],
    "train": [
        ("dataset", str, None, "dataset directory from `generate`"),
        ("out", str, None, "output directory"),
        ("epochs", int, 200, "epoch budget"),
        ("lr", float, 0.015, "SGD learning rate"),
        ("seed", int, 0, "training shuffle seed"),
        ("model_seed", int, 0, "parameter init seed"),
        ("activation", str, "relu", "backbone activation: relu or smooth"),
        ("target_map50", float, 0.9, "early-stop train mAP@0.5 (0 disables)"),
        ("eval_every", int, 10, "epochs between early-stop evaluations"),
        ("random_labels", _bool, False, "train the data-randomization arm"),
        ("box_noise", float, -1.0, "box noise stddev px (-1 = 10% of mean side)"),
        ("rand_seed", int, 7, "label/box randomization seed"),
    ]
    + _DETECT_OPTS,
    "explain": [
        ("checkpoint", str, None, "trained checkpoint"),
        ("image", str, None, "scene PNG to explain"),
        ("method", str, "gbp", "gradients, gbp, ig, sgbp, or sig"),
        ("decision", str, "class", "class, x_min, y_min, x_max, y_max, or all"),
        ("out", str, None, "output directory"),
    ]
    + _DETECT_OPTS
    + _COMMON_SALIENCY,
    "model-sanity": [
        ("checkpoint", str, None, "trained checkpoint"),
        ("dataset", str, None, "test dataset directory"),
        ("out", str, None, "output directory"),
        ("levels", _comma_floats, sanity.DEFAULT_LEVELS, "randomization fractions"),
        ("n_images", int, 15, "images to explain"),
        ("methods", _comma_strs, ("gbp", "ig", "sgbp", "sig"), "saliency methods"),
        (
            "decisions",
            _comma_strs,
            ("class", "x_min", "y_min", "x_max", "y_max"),
            "decisions to explain",
        ),
        ("save_maps", _bool, True, "write per-cell 16-bit map PNGs"),
    ]
    + _DETECT_OPTS
    + _COMMON_SALIENCY,
    "data-sanity": [
        ("dataset", str, None, "training dataset directory"),
        ("test_dataset", str, None, "held-out dataset directory"),
        ("out", str, None, "output directory"),
        ("true_checkpoint", str, None, "skip training: checkpoint for the true arm"),
        ("random_checkpoint", str, None, "skip training: checkpoint for the random arm"),
        ("epochs", int, 400, "epoch budget per arm"),
        ("lr", float, 0.015, "SGD learning rate"),
        ("train_seed", int, 0, "training shuffle seed"),
        ("model_seed", int, 0, "parameter init seed"),
        ("target_map50", float, 0.8, "train mAP@0.5 stopping threshold"),
        ("eval_every", int, 25, "epochs between early-stop evaluations"),
        ("rand_seed", int, 7, "label/box randomization seed"),
        ("box_noise", float, -1.0, "box noise stddev px (-1 = 10% of mean side)"),
        ("methods", _comma_strs, ("gbp", "ig", "sgbp", "sig"), "saliency methods"),
        ("decisions", _comma_strs, ("class",), "decisions to explain"),
        ("save_maps", _bool, True, "write paired 16-bit map PNGs"),
    ]
    + _DETECT_OPTS
    + _COMMON_SALIENCY,
}

REQUIRED = {
    "generate": ("out",),
    "train": ("dataset", "out"),
    "explain": ("checkpoint", "image", "out"),
    "model-sanity": ("checkpoint", "dataset", "out"),
    "data-sanity": ("dataset", "out"),
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="detsanity", description=__doc__)
    parser.add_argument("--version", action="version", version=f"detsanity {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, help=f"{cmd} subcommand")
        p.add_argument("--config", default=None, help="key = value config file")
        for name, typ, _default, help_text in opts:
            flag = "--" + name.replace("_", "-")
            if typ is _bool:
                p.add_argument(flag, nargs="?", const="true", default=None, help=help_text)
            else:
                p.add_argument(flag, default=None, help=help_text)
    return parser


def _resolve(cmd: str, args: argparse.Namespace) -> dict:
    table = OPTIONS[cmd]
    resolved = {name: default for name, _t, default, _h in table}
    if args.config:
        file_entries = manifest.read_manifest(args.config)
        known = {name for name, *_ in table}
        for key, value in file_entries.items():
            if key not in known:
                raise UsageError(f"config file: unknown key {key!r} for {cmd}")
        for name, typ, _d, _h in table:
            if name in file_entries:
                resolved[name] = typ(file_entries[name])
    for name, typ, _d, _h in table:
        value = getattr(args, name)
        if value is not None:
            resolved[name] = typ(value)
    for name in REQUIRED[cmd]:
        if resolved.get(name) in (None, ""):
            raise UsageError(f"{cmd}: --{name.replace('_', '-')} is required")
    return resolved


def _write_run_manifest(out_dir: Path, cmd: str, resolved: dict, extra: dict | None = None):
    entries = {f"config.{k}": v for k, v in resolved.items() if v is not None}
    entries["command"] = cmd
    entries["version"] = __version__
    if extra:
        entries.update(extra)
    return manifest.write_manifest(out_dir / "manifest.txt", entries)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _cmd_generate(resolved: dict) -> int:
    if resolved["count"] < 1:
        raise UsageError("generate: --count must be >= 1")
    out = Path(resolved["out"])
    scenes = synthdata.generate(
        resolved["count"], image_size=resolved["image_size"], seed=resolved["seed"]
    )
    synthdata.export_dataset(scenes, out)
    _write_run_manifest(
        out,
        "generate",
        resolved,
        {"scenes": len(scenes), "objects": sum(len(s.annotations) for s in scenes)},
    )
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def _train_config(resolved: dict) -> det.DetectorConfig:
    return det.DetectorConfig(activation=resolved["activation"], seed=resolved["model_seed"])


def _cmd_train(resolved: dict) -> int:
    scenes = synthdata.load_dataset(resolved["dataset"])
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    config = _train_config(resolved)
    arm = "random" if resolved["random_labels"] else "true"
    if resolved["random_labels"]:
        noise = resolved["box_noise"]
        if noise < 0:
            noise = synthdata.default_box_noise(scenes)
        spec = synthdata.RandomizationSpec(
            permute_labels=True, box_noise_stddev=noise, seed=resolved["rand_seed"]
        )
        scenes = synthdata.randomize(scenes, spec)
    target = resolved["target_map50"] if resolved["target_map50"] > 0 else None
    try:
        result = det.train(
            det.build(config),
            scenes,
            config,
            epochs=resolved["epochs"],
            learning_rate=resolved["lr"],
            seed=resolved["seed"],
            target_map50=target,
            eval_every=resolved["eval_every"],
            score_threshold=resolved["score_threshold"],
            nms_iou=resolved["nms_iou"],
        )
    except det.TrainingDiverged as err:
        (out / "loss_trace.csv").write_text("epoch,loss\n")
        _write_run_manifest(out, "train", resolved, {"error": str(err)})
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    ckpt = out / "detector.ckpt"
    det.save_checkpoint(
        ckpt,
        result.model,
        config,
        {"arm": arm, "train_map50": result.final_map50, "epochs_run": result.epochs_run},
    )
    trace = "\n".join(f"{i},{v:.8f}" for i, v in enumerate(result.loss_trace))
    (out / "loss_trace.csv").write_text("epoch,loss\n" + trace + "\n")
    threshold_met = target is None or result.final_map50 >= target
    _write_run_manifest(
        out,
        "train",
        resolved,
        {
            "arm": arm,
            "checkpoint": ckpt.name,
            "epochs_run": result.epochs_run,
            "train_map50": f"{result.final_map50:.6f}",
            "stopped_early": bool(result.reached_target),
            "threshold_met": threshold_met,
        },
    )
    print(
        f"trained {arm} arm: mAP@0.5={result.final_map50:.3f} after "
        f"{result.epochs_run} epochs -> {ckpt}"
    )
    return EXIT_OK if threshold_met else EXIT_WARNINGS


def _cmd_explain(resolved: dict) -> int:
    model, config, _extra = det.load_checkpoint(resolved["checkpoint"])
    image = _load_image(resolved["image"])
    if image.shape[0] != config.input_size or image.shape[1] != config.input_size:
        raise UsageError(
            f"image is {image.shape[1]}x{image.shape[0]}, checkpoint expects "
            f"{config.input_size}x{config.input_size}"
        )
    method = resolved["method"]
    if method not in saliency.METHODS:
        raise UsageError(f"unknown method {method!r}")
    decisions = saliency.DECISIONS if resolved["decision"] == "all" else (resolved["decision"],)
    for d in decisions:
        if d not in saliency.DECISIONS:
            raise UsageError(f"unknown decision {d!r}")
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    detections = det.detect(
        model,
        image,
        config,
        score_threshold=resolved["score_threshold"],
        nms_iou=resolved["nms_iou"],
    )
    _write_run_manifest(
        out, "explain", resolved, {"detections": len(detections), "fingerprint": model.fingerprint()}
    )
    if not detections:
        print("no detections above the score threshold; nothing to explain")
        return EXIT_WARNINGS
    kwargs = {
        "ig_steps": resolved["ig_steps"],
        "sg_samples": resolved["sg_samples"],
        "sg_noise": resolved["sg_noise"],
        "seed": resolved["seed"],
        "reduction": resolved["reduction"],
        "class_target": resolved["class_target"],
    }
    for i, detection in enumerate(detections):
        for decision in decisions:
            target = saliency.target_from_detection(detection, decision)
            smap = saliency.compute_saliency(method, model, image, target, config, **kwargs)
            base = out / f"det{i}_{method}_{decision}"
            saliency.save_map(smap, base)
            save_overlay(smap, image, base.with_name(base.name + "_overlay.png"))
    print(f"explained {len(detections)} detection(s) x {len(decisions)} decision(s) -> {out}")
    return EXIT_OK


def _cmd_model_sanity(resolved: dict) -> int:
    model, config, _extra = det.load_checkpoint(resolved["checkpoint"])
    scenes = synthdata.load_dataset(resolved["dataset"])
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    run_config = sanity.SanityRunConfig(
        levels=tuple(resolved["levels"]),
        n_images=resolved["n_images"],
        methods=tuple(resolved["methods"]),
        decisions=tuple(resolved["decisions"]),
        seed=resolved["seed"],
        ig_steps=resolved["ig_steps"],
        sg_samples=resolved["sg_samples"],
        sg_noise=resolved["sg_noise"],
        score_threshold=resolved["score_threshold"],
        nms_iou=resolved["nms_iou"],
        class_target=resolved["class_target"],
        reduction=resolved["reduction"],
    )
    result = sanity.model_randomization_test(model, scenes, config, run_config)
    (out / "ssim_curves.csv").write_text(metrics.ssim_curve_csv(result.curves))
    (out / "scores.json").write_text(
        metrics.scores_json(
            result.scores,
            result.observations,
            run_config.thresholds,
            extra={"skipped_scenes": result.skipped},
        )
    )
    (out / "scores.md").write_text(metrics.scores_markdown(result.scores, result.observations))
    if resolved["save_maps"]:
        for (i, method, decision, level), smap in result.maps.items():
            saliency.save_map(smap, out / "maps" / f"scene{i:03d}_{method}_{decision}_p{level:g}")
    _write_run_manifest(
        out,
        "model-sanity",
        resolved,
        {
            "fingerprint": model.fingerprint(),
            "explained": len(result.explained),
            "skipped": len(result.skipped),
        },
    )
    print(
        f"model randomization test: {len(result.explained)} detections, "
        f"{len(result.skipped)} skipped -> {out}"
    )
    return EXIT_WARNINGS if result.skipped else EXIT_OK


def _cmd_data_sanity(resolved: dict) -> int:
    train_scenes = synthdata.load_dataset(resolved["dataset"])
    test_scenes = (
        synthdata.load_dataset(resolved["test_dataset"]) if resolved["test_dataset"] else None
    )
    if test_scenes is None:
        raise UsageError("data-sanity: --test-dataset is required")
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    config = det.DetectorConfig(seed=resolved["model_seed"])
    true_model = random_model = None
    if resolved["true_checkpoint"]:
        true_model, config, _x = det.load_checkpoint(resolved["true_checkpoint"])
    if resolved["random_checkpoint"]:
        random_model, rc_config, _x = det.load_checkpoint(resolved["random_checkpoint"])
        if rc_config.to_dict() != config.to_dict():
            raise UsageError("data-sanity: the two checkpoints have different configs")
    run_config = sanity.DataRandConfig(
        rand_seed=resolved["rand_seed"],
        box_noise_stddev=None if resolved["box_noise"] < 0 else resolved["box_noise"],
        epochs=resolved["epochs"],
        learning_rate=resolved["lr"],
        train_seed=resolved["train_seed"],
        target_map50=resolved["target_map50"],
        eval_every=resolved["eval_every"],
        methods=tuple(resolved["methods"]),
        decisions=tuple(resolved["decisions"]),
        ig_steps=resolved["ig_steps"],
        sg_samples=resolved["sg_samples"],
        sg_noise=resolved["sg_noise"],
        seed=resolved["seed"],
        score_threshold=resolved["score_threshold"],
        nms_iou=resolved["nms_iou"],
        class_target=resolved["class_target"],
        reduction=resolved["reduction"],
    )
    result = sanity.data_randomization_test(
        config,
        run_config,
        train_scenes=train_scenes,
        test_scenes=test_scenes,
        true_model=true_model,
        random_model=random_model,
    )
    report = sanity.data_report_dict(result)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    lines = ["| Method | Pairs | Fraction different | Verdict |", "|---|---|---|---|"]
    for method in sorted(result.per_method):
        s = result.per_method[method]
        lines.append(
            f"| {method} | {s['n_pairs']} | {s['fraction_different']:.3f} | {s['verdict']} |"
        )
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    if resolved["save_maps"]:
        for k, pair in enumerate(result.pairs):
            stem = f"pair{k:03d}_{pair.method}_{pair.decision}"
            saliency.save_map(pair.true_map, out / "maps" / f"{stem}_true")
            saliency.save_map(pair.rand_map, out / "maps" / f"{stem}_random")
    warn = not (result.true_arm.threshold_met and result.random_arm.threshold_met)
    _write_run_manifest(
        out,
        "data-sanity",
        resolved,
        {
            "pairs": len(result.pairs),
            "true_map50": f"{result.true_arm.final_map50:.6f}",
            "random_map50": f"{result.random_arm.final_map50:.6f}",
            "threshold_met": not warn,
        },
    )
    print(f"data randomization test: {len(result.pairs)} pairs -> {out}")
    return EXIT_WARNINGS if warn else EXIT_OK


_HANDLERS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "explain": _cmd_explain,
    "model-sanity": _cmd_model_sanity,
    "data-sanity": _cmd_data_sanity,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        resolved = _resolve(args.command, args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _HANDLERS[args.command](resolved)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
