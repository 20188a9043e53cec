"""Command-line entry points for training, evaluation, sweeps, data
generation, and plotting.

Exit codes: 0 on success, 1 on a runtime failure (e.g. a training run that
crashes), 2 on bad usage or an invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .ablation import ABLATION_AXES, run_ablation
from .checkpoint import load_checkpoint
from .config import ExperimentConfig
from .data import generate_synthetic_dataset, save_directory_dataset
from .evaluation import evaluate_strategy
from .training import build_models, load_training_data, train_experiment

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

TUPLE_KEYS = ("resolution", "image_size")


class UsageError(Exception):
    """Bad arguments or an invalid configuration (exit code 2)."""


def _parse_set_overrides(pairs: list[str]) -> dict[str, dict]:
    sections: dict[str, dict] = {}
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {pair!r}")
        dotted, raw = pair.split("=", 1)
        section, key = dotted.split(".", 1)
        value = yaml.safe_load(raw)
        if key in TUPLE_KEYS and isinstance(value, list):
            value = tuple(value)
        sections.setdefault(section, {})[key] = value
    return sections


def _load_config(path: str, set_pairs: list[str]) -> ExperimentConfig:
    try:
        config = ExperimentConfig.from_yaml(path)
        overrides = _parse_set_overrides(set_pairs or [])
        if overrides:
            config = config.with_overrides(**overrides)
        return config.validate()
    except UsageError:
        raise
    except (ValueError, TypeError, FileNotFoundError, yaml.YAMLError) as exc:
        raise UsageError(str(exc)) from exc


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config YAML")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config field, e.g. --set run.seed=3",
    )


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(part) for part in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"resolution must look like 128x128, got {text!r}") from exc
    return h, w


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cotrainseg",
        description="Co-training experiments for semi-supervised binary segmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment")
    _add_config_args(p_train)
    p_train.add_argument("--resume", action="store_true", help="resume from last.ckpt")
    p_train.add_argument("--warm-start-cache", default=None, help="directory for shared warm starts")
    p_train.add_argument("--output-dir", default=None, help="override run.output_dir")

    p_eval = sub.add_parser("evaluate", help="evaluate a trained checkpoint")
    _add_config_args(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--output-dir", required=True)
    p_eval.add_argument("--target", choices=("auto", "specialist"), default="auto")

    p_ablate = sub.add_parser("ablate", help="sweep one config axis over seeds")
    _add_config_args(p_ablate)
    p_ablate.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p_ablate.add_argument("--values", required=True, help="comma-separated axis values")
    p_ablate.add_argument("--seeds", required=True, help="comma-separated integer seeds")
    p_ablate.add_argument("--output-dir", required=True)
    p_ablate.add_argument("--warm-start-cache", default=None)

    p_gen = sub.add_parser("generate-data", help="write a synthetic dataset to disk")
    p_gen.add_argument("--output-dir", required=True)
    p_gen.add_argument("--count", type=int, default=400)
    p_gen.add_argument("--eval-count", type=int, default=100)
    p_gen.add_argument("--resolution", default="128x128")
    p_gen.add_argument("--shape-family", default="polyp_like", choices=("blob", "ring", "polyp_like"))
    p_gen.add_argument("--noise-level", type=float, default=0.35)
    p_gen.add_argument("--seed", type=int, default=1234)

    p_plot = sub.add_parser("plot", help="render figures for a finished run or sweep")
    p_plot.add_argument("--run-dir", default=None, help="training run directory")
    p_plot.add_argument("--ablation-dir", default=None, help="ablation output directory")
    p_plot.add_argument("--output-dir", default=None)
    return parser


def _cmd_train(args) -> int:
    config = _load_config(args.config, args.set)
    if args.output_dir:
        config = config.with_overrides(run={"output_dir": args.output_dir}).validate()
    result = train_experiment(config, resume=args.resume, warm_start_cache=args.warm_start_cache)
    agg = result.final_summary
    print(f"run complete: {result.output_dir}")
    print(f"dice={agg['dice_mean']:.4f} iou={agg['iou_mean']:.4f}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    config = _load_config(args.config, args.set)
    bundle = build_models(config)
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    ckpt.restore(bundle.named_models())
    _, eval_images, eval_masks = load_training_data(config)
    result = evaluate_strategy(
        config.strategy, bundle, eval_images, eval_masks, seed=config.run.seed, target=args.target
    )
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.report.to_csv(str(out / "metrics.csv"))
    payload = {
        "checkpoint": args.checkpoint,
        "checkpoint_step": ckpt.step,
        "strategy": config.strategy.kind,
        "prompt_source": result.prompt_source,
        "target": result.target,
        "aggregate": result.summary(),
    }
    with open(out / "report.json", "w") as fh:
        json.dump(payload, fh, indent=2)
    agg = result.summary()
    print(f"evaluated {int(agg['num_images'])} images: dice={agg['dice_mean']:.4f}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    config = _load_config(args.config, args.set)
    values: list = []
    for token in args.values.split(","):
        token = token.strip()
        if not token:
            continue
        values.append(yaml.safe_load(token))
    seeds = [int(token) for token in args.seeds.split(",") if token.strip()]
    result = run_ablation(
        config, args.axis, values, seeds, args.output_dir, warm_start_cache=args.warm_start_cache
    )
    failed = [row for row in result.rows if row["status"] == "FAILED"]
    print(f"ablation complete: {result.summary_csv} ({len(failed)} failed run(s))")
    return EXIT_OK if not failed else EXIT_RUNTIME


def _cmd_generate_data(args) -> int:
    resolution = _parse_resolution(args.resolution)
    train = generate_synthetic_dataset(
        args.count, resolution, args.shape_family, args.noise_level, seed=args.seed
    )
    evals = generate_synthetic_dataset(
        args.eval_count, resolution, args.shape_family, args.noise_level, seed=args.seed + 1
    )
    out = Path(args.output_dir)
    save_directory_dataset(train + evals, out)
    lines = [f"{i:05d}.png {'train' if i < len(train) else 'eval'}" for i in range(len(train) + len(evals))]
    (out / "split.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(train)} train / {len(evals)} eval images to {out}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .plots import plot_ablation_bars, plot_run

    if bool(args.run_dir) == bool(args.ablation_dir):
        raise UsageError("pass exactly one of --run-dir or --ablation-dir")
    if args.run_dir:
        if not Path(args.run_dir).is_dir():
            raise UsageError(f"no such run directory: {args.run_dir}")
        written = plot_run(args.run_dir, args.output_dir)
    else:
        summary = Path(args.ablation_dir) / "ablation_summary.csv"
        if not summary.is_file():
            raise UsageError(f"missing {summary}")
        target = Path(args.output_dir or args.ablation_dir)
        target.mkdir(parents=True, exist_ok=True)
        written = [
            plot_ablation_bars(str(summary), metric, str(target / f"ablation_{metric}.png"))
            for metric in ("dice", "iou")
        ]
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "evaluate": _cmd_evaluate,
        "ablate": _cmd_ablate,
        "generate-data": _cmd_generate_data,
        "plot": _cmd_plot,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure inside a run
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
