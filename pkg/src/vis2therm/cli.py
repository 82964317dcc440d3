"""Command-line entry point: ``vis2therm <command> [--config PATH] [--seed N] [--out DIR]``.

Exit status is 0 on success, 2 for configuration or validation problems
and 3 for runtime or numeric failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import pipeline
from .config import ExperimentConfig
from .exceptions import CheckpointError, ConfigError, ManifestError, NumericError, ShapeError, ValidationError
from .mixture import parse_regime, table_regimes

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("vis2therm")


def _parse_set(items: list[str]) -> dict[str, str]:
    pairs = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vis2therm", description="Visible-to-thermal augmentation for pedestrian detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="flat key = value experiment config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory (default: cwd)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        return p

    command("toy-data", "render a procedural paired train/test set and a matching toy.cfg")
    command("train-gan", "train the visible-to-thermal translator")
    command("synthesize", "render synthetic thermal images for the training frames")
    p = command("build-mixture", "write the training manifest of one regime")
    p.add_argument("--regime", help="real, synthesized, combined or mixed-<percent real>")
    p = command("train-detector", "fine-tune the detector on one regime")
    p.add_argument("--regime", help="real, synthesized, combined or mixed-<percent real>")
    p.add_argument("--list-regimes", action="store_true", help="print the ablation regimes and exit")
    p.add_argument("--modality", choices=("visible", "thermal"))
    p.add_argument("--init", help="detector checkpoint to start from")
    p = command("evaluate", "score a detector on the test manifest")
    p.add_argument("--overlays", action="store_true", help="also draw TP (blue), FN (green) and FP (red) boxes")
    p = command("ablation", "train and evaluate every regime and write a consolidated table")
    p.add_argument("--regimes", help="comma-separated subset of regimes (default: all twelve)")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    for flag, key in (("regime", "mixture.regime"), ("modality", "detector.modality"), ("init", "init_checkpoint")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return ExperimentConfig.load(args.config, overrides)


def _run(args: argparse.Namespace, cfg: ExperimentConfig, out: Path) -> dict:
    if args.command == "toy-data":
        return pipeline.make_toy_data(cfg, out)
    if args.command == "train-gan":
        return pipeline.run_train_gan(cfg, out)
    if args.command == "synthesize":
        return pipeline.run_synthesize(cfg, out)
    if args.command == "build-mixture":
        return pipeline.run_build_mixture(cfg, out)
    if args.command == "train-detector":
        return pipeline.run_train_detector(cfg, out)
    if args.command == "evaluate":
        report, paths = pipeline.run_evaluate(cfg, out, overlays=args.overlays)
        for subset, value in report.lamr.items():
            print(f"lamr_{subset}\t{value:.4f}")
        return paths
    if args.command == "ablation":
        regimes = None
        if args.regimes:
            regimes = [parse_regime(name, cfg.seed, cfg["mixture.independent"]) for name in args.regimes.split(",")]
        paths = pipeline.run_ablation(cfg, out, regimes)
        print(paths["table"].read_text(encoding="utf-8"), end="")
        return paths
    raise AssertionError(args.command)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "list_regimes", False):
        for spec in table_regimes():
            print(f"{spec.name}\t{spec.real_fraction:g}")
        return EXIT_OK
    try:
        cfg = load_config(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        with FileLock(str(out / ".vis2therm.lock"), timeout=0):
            paths = _run(args, cfg, out)
    except Timeout:
        print(f"error: output directory {args.out} is in use by another run", file=sys.stderr)
        return EXIT_RUNTIME
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ValidationError, ManifestError, CheckpointError, ShapeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
