"""Command-line surface for the whole toolkit.

One binary, six subcommands: analyze, build-manifest, synth-data, train,
eval, explain. Every subcommand is a thin delegator to a library call
and prints exactly what the library formats. Exit codes: 0 success, 1
domain error, 2 usage error.

Each subcommand accepts --config pointing at a JSON file whose keys are
the long flag names; explicit flags win over config values, which win
over built-in defaults.
"""

import argparse
import json
import os
import sys
from types import SimpleNamespace

import numpy as np

from .checkpoint import load_weights, save_weights
from .complexity import analyze_architecture, compare_architectures, \
    format_table, report_json
from .data.imaging import AugmentationConfig, apply_body_mask, load_image, \
    save_color_png
from .data.manifest import build_manifest, parse_class, patient_level_split, \
    read_manifest, split_records, write_manifest
from .data.synthetic import generate_synthetic_dataset
from .errors import ConfigError, DataError, ToolkitError
from .explain import critical_factors, make_network_scorer, \
    outside_body_fraction, render_overlay
from .metrics import check_operational_constraints, metrics_from_confusion
from .training import TrainConfig, evaluate, train
from .zoo import BUNDLED_CONFIGS, list_architectures, resolve_architecture


class UsageError(Exception):
    """A missing or malformed flag; maps to exit code 2."""


# Built-in defaults per subcommand. Every argparse option defaults to
# None so a config file can fill in anything the command line left out.
DEFAULTS = {
    "analyze": {"arch": "covidnet-ct", "baseline": None, "resolution": None,
                "as_json": False, "out": None},
    "build-manifest": {"metadata": None, "data_root": None, "out": None,
                       "seed": 0, "fractions": "0.6,0.2,0.2"},
    "synth-data": {"out": None, "patients": 20, "slices": 4,
                   "resolution": 64, "seed": 0, "table_artifact": False},
    "train": {"arch": "covidnet-ct-mini", "manifest": None, "data_root": None,
              "out": None, "seed": 0, "deterministic": True, "workers": 1,
              "epochs": 17, "lr": 5e-3, "momentum": 0.9, "batch_size": 8,
              "augment": True, "body_mask": True, "initial_checkpoint": None,
              "batches_per_epoch": None},
    "eval": {"arch": "covidnet-ct-mini", "manifest": None, "data_root": None,
             "checkpoint": None, "split": "test", "body_mask": False,
             "workers": 1, "out": None},
    "explain": {"arch": "covidnet-ct-mini", "checkpoint": None, "image": None,
                "target_class": None, "grid": "16", "threshold": 0.5,
                "budget": None, "body_mask": False, "out": None,
                "mask_out": None},
}


def merge_options(args, command):
    """Apply precedence: flags > config file > built-in defaults."""
    merged = dict(DEFAULTS[command])
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                values = json.load(f)
        except OSError as e:
            raise DataError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        for key, value in values.items():
            dest = str(key).replace("-", "_")
            if dest == "class":
                dest = "target_class"
            if dest == "json":
                dest = "as_json"
            if dest not in merged:
                raise ConfigError(
                    f"config {path}: unknown key {key!r} for {command}")
            merged[dest] = value
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return SimpleNamespace(**merged)


def require(options, name, flag):
    value = getattr(options, name)
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def display_name(arch):
    if isinstance(arch, dict):
        return "network"
    name = str(arch)
    if name in BUNDLED_CONFIGS:
        return name
    return os.path.splitext(os.path.basename(name))[0]


def parse_grid(text):
    parts = str(text).lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"--grid must be N or NxM, got {text!r}") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 1:
        raise UsageError(f"--grid must be N or NxM, got {text!r}")
    return tuple(dims)


def parse_fractions(text):
    try:
        parts = tuple(float(p) for p in str(text).split(","))
    except ValueError:
        raise UsageError(
            f"--fractions must be three comma-separated numbers, got "
            f"{text!r}") from None
    if len(parts) != 3:
        raise UsageError(f"--fractions must have three parts, got {text!r}")
    return parts


def emit(text, out_path=None):
    """Print a report, and mirror it to a file when --out asks for one."""
    if not text.endswith("\n"):
        text += "\n"
    sys.stdout.write(text)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_analyze(args):
    opt = merge_options(args, "analyze")
    resolution = None
    if opt.resolution is not None:
        resolution = (int(opt.resolution), int(opt.resolution))
    subject = analyze_architecture(resolve_architecture(opt.arch),
                                   name=display_name(opt.arch),
                                   resolution=resolution)
    reports = [subject]
    comparison = None
    if opt.baseline:
        base = analyze_architecture(resolve_architecture(opt.baseline),
                                    name=display_name(opt.baseline),
                                    resolution=resolution)
        reports = [base, subject]
        comparison = compare_architectures(subject, base)
    text = report_json(reports, comparison) if opt.as_json \
        else format_table(reports, comparison)
    emit(text, opt.out)
    return 0


def cmd_build_manifest(args):
    opt = merge_options(args, "build-manifest")
    metadata = require(opt, "metadata", "--metadata")
    out = require(opt, "out", "--out")
    data_root = opt.data_root or os.path.dirname(os.path.abspath(metadata))
    fractions = parse_fractions(opt.fractions)

    records, report = build_manifest(metadata, data_root)
    records = patient_level_split(records, fractions=fractions,
                                  seed=int(opt.seed))
    write_manifest(out, records)

    counts = {s: 0 for s in ("train", "val", "test")}
    for rec in records:
        counts[rec.split] += 1
    lines = [report.summary(), ""]
    lines += [f"{name} split: {counts[name]} images"
              for name in ("train", "val", "test")]
    lines.append(f"manifest written to {out}")
    emit("\n".join(lines))
    return 0


def cmd_synth_data(args):
    opt = merge_options(args, "synth-data")
    out = require(opt, "out", "--out")
    metadata = generate_synthetic_dataset(
        out, patients_per_class=int(opt.patients),
        slices_per_patient=int(opt.slices), resolution=int(opt.resolution),
        seed=int(opt.seed), table_artifact=bool(opt.table_artifact))
    total = 3 * int(opt.patients) * int(opt.slices)
    emit(f"wrote {total} synthetic slices "
         f"({opt.patients} patients per class, {opt.slices} slices each)\n"
         f"metadata written to {metadata}")
    return 0


def _train_config(opt):
    if opt.augment:
        augmentation = AugmentationConfig(body_mask=bool(opt.body_mask))
    else:
        augmentation = AugmentationConfig.disabled()
    workers = 1 if opt.deterministic else int(opt.workers)
    return TrainConfig(
        learning_rate=float(opt.lr), momentum=float(opt.momentum),
        epochs=int(opt.epochs), batch_size=int(opt.batch_size),
        seed=int(opt.seed), deterministic=bool(opt.deterministic),
        augmentation=augmentation,
        initial_checkpoint=opt.initial_checkpoint,
        batches_per_epoch=None if opt.batches_per_epoch is None
        else int(opt.batches_per_epoch),
        workers=workers)


def cmd_train(args):
    opt = merge_options(args, "train")
    manifest = require(opt, "manifest", "--manifest")
    out = require(opt, "out", "--out")
    graph = resolve_architecture(opt.arch)
    records = read_manifest(manifest)
    config = _train_config(opt)

    os.makedirs(out, exist_ok=True)
    result = train(graph, records, config, root=opt.data_root,
                   on_epoch=lambda log: print(log.format_line()))

    log_path = os.path.join(out, "train.log")
    with open(log_path, "w", encoding="utf-8") as f:
        if result.logs:
            f.write(result.log_text + "\n")
    ckpt_path = os.path.join(out, "checkpoint.bin")
    save_weights(ckpt_path, graph, result.weights, step=result.step)

    if result.aborted:
        print(f"error: {result.abort_reason}; best checkpoint so far kept at "
              f"{ckpt_path}", file=sys.stderr)
        return 1
    print(f"best epoch {result.best_epoch} "
          f"val_acc {result.best_val_accuracy:.2f}")
    print(f"checkpoint written to {ckpt_path}")
    print(f"log written to {log_path}")
    return 0


def cmd_eval(args):
    opt = merge_options(args, "eval")
    manifest = require(opt, "manifest", "--manifest")
    checkpoint = require(opt, "checkpoint", "--checkpoint")
    graph = resolve_architecture(opt.arch)
    if opt.split not in ("train", "val", "test"):
        raise UsageError(f"--split must be train, val, or test, got "
                         f"{opt.split!r}")
    records = split_records(read_manifest(manifest))[opt.split]
    if not records:
        raise DataError(f"manifest has no records in the {opt.split!r} split")
    weights, _ = load_weights(checkpoint, graph)
    result = evaluate(graph, weights, records, root=opt.data_root,
                      body_mask=bool(opt.body_mask),
                      workers=int(opt.workers))

    report = metrics_from_confusion(result.confusion)
    gate = check_operational_constraints(report)
    lines = [f"evaluated {result.total} images from the {opt.split} split"]
    if result.skipped:
        lines.append(f"skipped {len(result.skipped)} unreadable files")
    lines += ["", result.confusion.format(), "", report.format(), "",
              gate.format()]
    emit("\n".join(lines), opt.out)
    return 0


def cmd_explain(args):
    opt = merge_options(args, "explain")
    checkpoint = require(opt, "checkpoint", "--checkpoint")
    image_path = require(opt, "image", "--image")
    graph = resolve_architecture(opt.arch)
    weights, _ = load_weights(checkpoint, graph)
    h, w, _ = graph.input_shape
    image = load_image(image_path, resolution=(h, w))
    if opt.body_mask:
        image = apply_body_mask(image)

    model = make_network_scorer(graph, weights)
    if opt.target_class is None:
        target = int(np.argmax(model(image[None])[0]))
    else:
        try:
            target = int(opt.target_class)
        except (TypeError, ValueError):
            target = int(parse_class(str(opt.target_class)))

    mask = critical_factors(model, image, target, grid=parse_grid(opt.grid),
                            drop_threshold=float(opt.threshold),
                            budget=None if opt.budget is None
                            else int(opt.budget))

    fraction = outside_body_fraction(image, mask)
    lines = [mask.format(),
             "outside_body_fraction " +
             ("n/a" if fraction is None else f"{fraction:.4f}")]
    if opt.out:
        save_color_png(opt.out, render_overlay(image, mask))
        lines.append(f"overlay written to {opt.out}")
    emit("\n".join(lines), opt.mask_out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--config", help="JSON file of defaults for this "
                   "subcommand; explicit flags win")
    p.add_argument("--seed", type=int, help="seed for every random draw")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cnct",
        description="Compact chest-CT classifier toolkit: complexity "
                    "analysis, data preparation, training, evaluation, and "
                    "occlusion explanations.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")

    p = sub.add_parser("analyze", help="parameter and FLOP accounting")
    _add_common(p)
    p.add_argument("--arch", help=f"architecture name "
                   f"({', '.join(list_architectures())}) or config path")
    p.add_argument("--baseline", help="architecture to compare against")
    p.add_argument("--resolution", type=int,
                   help="square input resolution override")
    p.add_argument("--json", dest="as_json",
                   action=argparse.BooleanOptionalAction,
                   help="emit structured JSON instead of the table")
    p.add_argument("--out", help="also write the report to this path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("build-manifest",
                       help="metadata CSV to split train/val/test manifest")
    _add_common(p)
    p.add_argument("--metadata", help="metadata CSV path")
    p.add_argument("--data-root", help="directory image paths are relative to")
    p.add_argument("--out", help="manifest CSV to write")
    p.add_argument("--fractions", help="train,val,test fractions "
                   "(default 0.6,0.2,0.2)")
    p.set_defaults(func=cmd_build_manifest)

    p = sub.add_parser("synth-data", help="generate the synthetic CT dataset")
    _add_common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--patients", type=int, help="patients per class")
    p.add_argument("--slices", type=int, help="slices per patient")
    p.add_argument("--resolution", type=int, help="square image size")
    p.add_argument("--table-artifact", dest="table_artifact",
                   action=argparse.BooleanOptionalAction,
                   help="draw a scanner-table bar outside the body")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train on a manifest")
    _add_common(p)
    p.add_argument("--arch", help="architecture name or config path")
    p.add_argument("--manifest", help="manifest CSV with train/val splits")
    p.add_argument("--data-root", help="directory image paths are relative to")
    p.add_argument("--out", help="directory for checkpoint.bin and train.log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--batches-per-epoch", type=int,
                   help="cap batches per epoch (default: one pass)")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction,
                   help="stochastic training augmentation (default on)")
    p.add_argument("--body-mask", dest="body_mask",
                   action=argparse.BooleanOptionalAction,
                   help="body masking inside augmentation (default on)")
    p.add_argument("--initial-checkpoint", help="warm-start weights")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                   help="force bitwise-reproducible execution (default on)")
    p.add_argument("--workers", type=int,
                   help="augmentation worker threads; results are identical "
                   "for any value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="confusion matrix and metrics on a split")
    _add_common(p)
    p.add_argument("--arch", help="architecture name or config path")
    p.add_argument("--manifest", help="manifest CSV")
    p.add_argument("--data-root", help="directory image paths are relative to")
    p.add_argument("--checkpoint", help="weights to evaluate")
    p.add_argument("--split", help="train, val, or test (default test)")
    p.add_argument("--body-mask", dest="body_mask",
                   action=argparse.BooleanOptionalAction,
                   help="apply body masking before inference (default off)")
    p.add_argument("--workers", type=int, help="evaluation shards; the "
                   "matrix is identical for any value")
    p.add_argument("--out", help="also write the report to this path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain",
                       help="occlusion-based critical factors for one image")
    _add_common(p)
    p.add_argument("--arch", help="architecture name or config path")
    p.add_argument("--checkpoint", help="weights to explain")
    p.add_argument("--image", help="input image path")
    p.add_argument("--class", dest="target_class",
                   help="target class index or name (default: the "
                   "model's prediction)")
    p.add_argument("--grid", help="occlusion grid, N or NxM (default 16)")
    p.add_argument("--threshold", type=float,
                   help="stop once confidence < threshold * initial "
                   "(default 0.5)")
    p.add_argument("--budget", type=int, help="maximum cells to select")
    p.add_argument("--body-mask", dest="body_mask",
                   action=argparse.BooleanOptionalAction,
                   help="apply body masking before scoring (default off)")
    p.add_argument("--out", help="overlay PNG path")
    p.add_argument("--mask-out", dest="mask_out",
                   help="also write the mask report to this path")
    p.set_defaults(func=cmd_explain)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if not e.code else int(e.code)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args) or 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except ToolkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
