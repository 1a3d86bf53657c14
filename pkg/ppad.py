"""
PPAD Command-Line Toolkit

Position-guided prompt learning for few-shot anomaly detection on grayscale
(chest X-ray style) images, with structure-preserving anomaly synthesis.

Subcommands:
    synth     Write synthetic anomalies (+ masks) for every image in a folder
    train     Few-shot prompt training on dataset/normal
    eval      Five-view scoring of dataset/{normal,abnormal} with a checkpoint
    viz       Dump the intermediate panels of one anomaly synthesis
    toy       Build the procedural toy dataset
    ablation  Train and evaluate every prompt mode on one train/test pair

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

try:
    from dotenv import load_dotenv
except ModuleNotFoundError:
    raise RuntimeError(
        "Missing dependency: python-dotenv\n"
        "Install it by running: pip install -r requirements.txt"
    )

import argparse
import json
import sys
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Set

import numpy as np

from config import PROMPT_MODES, RunConfig, derive_seed, load_run_config, read_config_file, resolve_config_path
from errors import ConfigError, NotEnoughImagesError, PPADError, PPADIOError
from imaging import (
    GrayImage,
    list_images,
    load_image,
    overlay_points,
    overlay_polyline,
    save_image,
    save_mask,
)
from inference import evaluate, format_comparison_table, format_report_table, summarize_metrics, write_report
from prompts import VIEW_NAMES, region_for
from synth import SynthConfig, gamma_field, synthesize
from toydata import build_toy_dataset
from trainer import TrainConfig, save_checkpoint, load_checkpoint, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# Keys that may differ between training and evaluation
SCORING_KEYS = ("eta",)


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="key = value config file (default: $PPAD_CONFIG)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override any config key (repeatable)")
    parser.add_argument("--seed", type=int, help="Root seed for every random draw")
    parser.add_argument("--verbose", action="store_true", help="Show progress and tracebacks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppad",
        description="Position-guided prompt learning for few-shot anomaly detection",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python ppad.py toy --out toy                                   # Build the toy dataset
  python ppad.py train --data toy/train --out prompts.ppad       # 64 shots, 100 epochs
  python ppad.py eval --data toy/test --checkpoint prompts.ppad --out report.json
  python ppad.py synth --input toy/test/normal --out synth --count 2 --seed 7
  python ppad.py viz --input toy/test/normal/normal_0000.pgm --out panels --seed 3
  python ppad.py ablation --data toy --epochs 20 --runs 5             # mean ± std over 5 seeds
        """,
    )
    sub = parser.add_subparsers(dest="command", metavar="<command>")
    sub.required = True

    p = sub.add_parser("synth", help="Synthesize anomalies for a folder of images")
    p.add_argument("--input", required=True, help="Folder of .pgm/.png images")
    p.add_argument("--out", required=True, help="Output folder")
    p.add_argument("--count", type=int, default=1, help="Synthetic images per input (default: 1)")
    p.add_argument("--view", choices=VIEW_NAMES, default="entire", help="Region receiving the anomaly")
    _common_flags(p)

    p = sub.add_parser("train", help="Few-shot prompt training")
    p.add_argument("--data", required=True, help="Dataset root containing normal/")
    p.add_argument("--out", default="prompts.ppad", help="Checkpoint file to write (default: prompts.ppad)")
    p.add_argument("--shots", type=int, help="Normal images to sample (default: 64)")
    p.add_argument("--epochs", type=int, help="Training epochs (default: 100)")
    p.add_argument("--log", help="Loss CSV path (default: <out>.csv)")
    _common_flags(p)

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    p.add_argument("--data", required=True, help="Dataset root containing normal/ and abnormal/")
    p.add_argument("--checkpoint", required=True, help="Checkpoint written by train")
    p.add_argument("--out", help="JSON report path")
    _common_flags(p)

    p = sub.add_parser("viz", help="Dump the panels of one anomaly synthesis")
    p.add_argument("--input", required=True, help="Image file")
    p.add_argument("--out", required=True, help="Output folder")
    p.add_argument("--view", choices=VIEW_NAMES, default="entire", help="Region receiving the anomaly")
    _common_flags(p)

    p = sub.add_parser("toy", help="Build the procedural toy dataset")
    p.add_argument("--out", required=True, help="Dataset root to create")
    p.add_argument("--train", type=int, default=64, help="Training normals (default: 64)")
    p.add_argument("--test", type=int, default=100, help="Test normals, each with an abnormal copy (default: 100)")
    _common_flags(p)

    p = sub.add_parser("ablation", help="Compare prompt modes on one train/test pair")
    p.add_argument("--data", required=True, help="Root containing train/ and test/ (as built by toy)")
    p.add_argument("--modes", nargs="+", choices=PROMPT_MODES, default=list(PROMPT_MODES))
    p.add_argument("--shots", type=int, help="Normal images to sample (default: 64)")
    p.add_argument("--epochs", type=int, help="Training epochs (default: 100)")
    p.add_argument("--out", help="JSON file for the comparison")
    p.add_argument("--runs", type=int, default=1, help="Repeats per mode with seeds seed, seed+1, ... (default: 1)")
    _common_flags(p)

    return parser


def parse_overrides(args: argparse.Namespace) -> Dict[str, str]:
    """Collect --set pairs and dedicated flags; dedicated flags win."""
    overrides: Dict[str, str] = {}
    for pair in args.overrides:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        overrides[key.strip()] = value.strip()
    for key in ("seed", "shots", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return overrides


def parse_args(argv: Optional[List[str]] = None):
    """
    Parse the command line into (namespace, RunConfig).

    argparse exits with code 2 on unknown flags or missing required ones.

    Raises:
        ConfigError: bad config file, unknown key or bad value
    """
    args = build_parser().parse_args(argv)
    config = load_run_config(args.config, parse_overrides(args))
    return args, config


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def _forced_synth(config: TrainConfig, seed: int) -> SynthConfig:
    return replace(config.synth, apply_probability=1.0, seed=seed)


def run_synth(args, run: RunConfig) -> int:
    config = TrainConfig.from_run_config(run)
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    paths = list_images(args.input)
    if not paths:
        raise NotEnoughImagesError(f"No .pgm/.png images in {args.input}")

    out_dir = Path(args.out)
    region = region_for(args.view, run["image_size"])
    written = 0
    for path in paths:
        img = load_image(path, run["image_size"])
        for i in range(args.count):
            result = synthesize(img, region, _forced_synth(config, derive_seed(run["seed"], path.stem, i)))
            name = path.stem if args.count == 1 else f"{path.stem}_{i:04d}"
            save_image(result.image, out_dir / f"{name}_synth.pgm")
            save_mask(result.mask, out_dir / f"{name}_mask.pgm")
            written += 1
            if args.verbose:
                print(f"  {path.name} #{i}: w={result.weight}, mask area={result.mask.area}")
    print(f"✓ Wrote {written} image/mask pairs to {out_dir}")
    return EXIT_OK


def gamma_display(gamma: np.ndarray) -> GrayImage:
    """Map gamma to [0, 1] for viewing: 1 -> mid-gray, extremes -> 0 or 1."""
    spread = np.max(np.abs(gamma - 1.0))
    if spread == 0:
        return GrayImage(np.full(gamma.shape, 0.5))
    return GrayImage(np.clip(0.5 + 0.5 * (gamma - 1.0) / spread, 0.0, 1.0))


def run_viz(args, run: RunConfig) -> int:
    config = TrainConfig.from_run_config(run)
    img = load_image(args.input, run["image_size"])
    region = region_for(args.view, run["image_size"])
    result = synthesize(img, region, _forced_synth(config, run["seed"]))
    trace = result.trace

    out_dir = Path(args.out)
    save_image(overlay_points(img, trace.points), out_dir / "points.pgm")
    save_image(overlay_polyline(img, trace.hull), out_dir / "hull.pgm")
    save_image(overlay_polyline(img, trace.curve), out_dir / "curve.pgm")
    save_mask(result.mask, out_dir / "mask.pgm")
    save_image(gamma_display(gamma_field(result.mask, result.weight).gamma), out_dir / "gamma.pgm")
    save_image(result.image, out_dir / "synth.pgm")

    print(f"✓ Panels written to {out_dir} (w={result.weight}, attempts={trace.attempts}, "
          f"mask area={result.mask.area})")
    return EXIT_OK


def run_train(args, run: RunConfig) -> int:
    config = TrainConfig.from_run_config(run)
    print("=" * 60)
    print(f"  TRAIN  shots={config.shots}  epochs={config.epochs}  seed={config.seed}  mode={config.mode.name}")
    print("=" * 60)

    log_path = Path(args.log) if args.log else Path(str(args.out) + ".csv")
    ckpt = train(args.data, config, log_path=log_path, verbose=args.verbose)
    save_checkpoint(ckpt, args.out)

    if ckpt.epoch_losses:
        print(f"  Loss: first epoch {ckpt.epoch_losses[0]:.4f} -> last epoch {ckpt.epoch_losses[-1]:.4f}")
    print(f"✓ Checkpoint: {args.out}")
    print(f"✓ Loss log  : {log_path}")
    return EXIT_OK


def run_eval(args, run: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    overrides = _scoring_overrides(args, run, ckpt.config)
    if overrides:
        ckpt = replace(ckpt, config=ckpt.config.updated(overrides))
    report = evaluate(args.data, ckpt, verbose=args.verbose)
    print(format_report_table(report))
    if args.out:
        write_report(report, args.out)
        print(f"✓ Report: {args.out}")
    return EXIT_OK


def _explicit_keys(args) -> Set[str]:
    """Keys named by --set, a dedicated flag, --config or $PPAD_CONFIG."""
    keys = set(parse_overrides(args))
    path = resolve_config_path(args.config)
    if path is not None:
        keys |= set(read_config_file(path))
    return keys


def _scoring_overrides(args, run: RunConfig, trained: RunConfig) -> Dict[str, object]:
    """
    Scoring keys the user set explicitly.

    Raises:
        ConfigError: an explicitly set key outside SCORING_KEYS disagrees with the checkpoint
    """
    explicit = _explicit_keys(args)
    fixed = sorted(k for k in explicit if k not in SCORING_KEYS and run[k] != trained[k])
    if fixed:
        raise ConfigError(f"{', '.join(fixed)} fixed by the checkpoint "
                          f"(only {', '.join(SCORING_KEYS)} can change at evaluation)")
    return {k: run[k] for k in SCORING_KEYS if k in explicit}


def run_toy(args, run: RunConfig) -> int:
    config = TrainConfig.from_run_config(run)
    dataset = build_toy_dataset(args.out, n_train=args.train, n_test=args.test, image_size=run["image_size"],
                                seed=run["seed"], synth=config.synth, verbose=True)
    print(f"  train: {dataset.train_root}")
    print(f"  test : {dataset.test_root}")
    return EXIT_OK


def run_ablation(args, run: RunConfig) -> int:
    if args.runs < 1:
        raise ConfigError("--runs must be >= 1")
    root = Path(args.data)
    rows = []
    for mode in args.modes:
        print(f"\n─── {mode} " + "─" * max(0, 40 - len(mode)))
        results = []
        for r in range(args.runs):
            config = TrainConfig.from_run_config(run.updated({"prompt_mode": mode, "seed": run["seed"] + r}))
            ckpt = train(root / "train", config, verbose=args.verbose)
            report = evaluate(root / "test", ckpt, verbose=args.verbose)
            print(f"  run {r + 1}/{args.runs} (seed {config.seed}): AUC {report.auc:.2f}  ACC {report.acc:.2f}")
            results.append(report.metrics)
        rows.append((mode, summarize_metrics(results)))

    print("\n" + format_comparison_table(rows))
    if args.out:
        out = Path(args.out)
        data = {
            name: {"mean": vars(s.mean), "std": vars(s.std), "runs": [vars(m) for m in s.runs]}
            for name, s in rows
        }
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
        except OSError as e:
            raise PPADIOError(f"Cannot write {out}: {e}") from e
        print(f"✓ Comparison: {out}")
    return EXIT_OK



COMMANDS = {
    "synth": run_synth,
    "train": run_train,
    "eval": run_eval,
    "viz": run_viz,
    "toy": run_toy,
    "ablation": run_ablation,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    load_dotenv()

    try:
        args, run = parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except ConfigError as e:
        print(f"❌ Usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return COMMANDS[args.command](args, run)
    except ConfigError as e:
        print(f"❌ Usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\n⚠ Interrupted by user", file=sys.stderr)
        return EXIT_RUNTIME
    except (PPADError, OSError) as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
