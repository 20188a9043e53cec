"""Training harness: builds models and optimizers from a config, runs the
strategy step loop, and writes run artifacts (logs, checkpoints, reports).

Everything consumed by a step is a pure function of (seed, step), so a run
resumed from its last checkpoint replays the remaining steps exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import AUGMENT_PRESETS, ExperimentConfig, config_hash
from .data import (
    DatasetSplit,
    MixedBatchIterator,
    generate_synthetic_dataset,
    load_directory_dataset,
    split_pool,
)
from .evaluation import EvalResult, evaluate_strategy
from .generalist import build_fusion, build_generalist
from .specialist import build_specialist
from .strategies import ModelBundle, StrategyConfig, component_names, run_step, step_peft_sam

# fixed per-model seed offsets so sibling models never share init streams
MODEL_SEED_OFFSETS = {"specialist": 101, "specialist_2": 202, "generalist": 303, "fusion": 404}
POINT_RNG_STREAM = 5
WARM_POINT_RNG_STREAM = 7
WARM_DATA_SEED_OFFSET = 9999
EVAL_DATA_SEED_OFFSET = 1


def derive_model_seed(seed: int, name: str) -> int:
    return int(seed) * 1000 + MODEL_SEED_OFFSETS[name]


def build_models(config: ExperimentConfig) -> ModelBundle:
    seed = config.run.seed
    required = config.strategy.models_required
    bundle = ModelBundle()
    if "generalist" in required:
        bundle.generalist = build_generalist(config.generalist, derive_model_seed(seed, "generalist"))
    if "specialist" in required:
        bundle.specialist = build_specialist(config.specialist, derive_model_seed(seed, "specialist"))
    if "specialist_2" in required:
        bundle.specialist_2 = build_specialist(
            config.specialist, derive_model_seed(seed, "specialist_2")
        )
    if "fusion" in required:
        bundle.fusion = build_fusion(config.generalist, derive_model_seed(seed, "fusion"))
    return bundle


def build_optimizers(
    config: ExperimentConfig, bundle: ModelBundle
) -> dict[str, torch.optim.Optimizer]:
    """One optimizer per model: SGD with momentum for specialists, Adam for
    the generalist's trainable subset and for the fusion module."""
    opt = config.optimizer
    optimizers: dict[str, torch.optim.Optimizer] = {}
    for name in ("specialist", "specialist_2"):
        model = getattr(bundle, name)
        if model is not None:
            optimizers[name] = torch.optim.SGD(
                model.parameters(), lr=opt.specialist_lr, momentum=opt.specialist_momentum
            )
    if bundle.generalist is not None:
        optimizers["generalist"] = torch.optim.Adam(
            bundle.generalist.trainable_parameters(), lr=opt.generalist_lr
        )
    if bundle.fusion is not None:
        optimizers["fusion"] = torch.optim.Adam(bundle.fusion.parameters(), lr=opt.fusion_lr)
    return optimizers


def load_training_data(
    config: ExperimentConfig,
) -> tuple[DatasetSplit, list[np.ndarray], list[np.ndarray]]:
    data = config.data
    if data.source == "synthetic":
        pool = generate_synthetic_dataset(
            data.num_train,
            data.resolution,
            data.shape_family,
            data.noise_level,
            seed=data.data_seed,
            channels=config.generalist.in_channels,
        )
        split = split_pool(pool, data.labeled_ratio, seed=data.data_seed)
        eval_samples = generate_synthetic_dataset(
            data.num_eval,
            data.resolution,
            data.shape_family,
            data.noise_level,
            seed=data.data_seed + EVAL_DATA_SEED_OFFSET,
            channels=config.generalist.in_channels,
        )
    else:
        split = load_directory_dataset(data.root, data.labeled_ratio, data.data_seed, subset="train")
        eval_split = load_directory_dataset(data.root, 1.0, data.data_seed, subset="eval")
        eval_samples = list(eval_split.labeled)
    eval_images = [img for img, _ in eval_samples]
    eval_masks = [mask for _, mask in eval_samples]
    return split, eval_images, eval_masks


def _warm_start_digest(config: ExperimentConfig) -> str:
    payload = {
        "generalist": config.generalist.__dict__,
        "seed": config.run.seed,
        "iterations": config.run.warm_start_iterations,
        "resolution": list(config.data.resolution),
        "data_seed": config.data.data_seed + WARM_DATA_SEED_OFFSET,
        "labeled_per_batch": config.run.labeled_per_batch,
    }
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def warm_start_generalist(config: ExperimentConfig, generalist, cache_dir: str | None = None) -> None:
    """Supervised point-prompt pretraining on a disjoint synthetic set,
    standing in for the generalist's pretrained starting point. Loads weights
    into ``generalist`` in place; caches by config digest when a cache
    directory is given, so sibling runs share the same starting weights."""
    iters = config.run.warm_start_iterations
    if iters <= 0:
        return
    cache_path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        cache_path = Path(cache_dir) / f"warmstart_{_warm_start_digest(config)}.ckpt"
        if cache_path.is_file():
            load_checkpoint(str(cache_path)).restore({"generalist": generalist})
            return
    pool = generate_synthetic_dataset(
        64,
        config.data.resolution,
        "blob",
        noise_level=0.2,
        seed=config.data.data_seed + WARM_DATA_SEED_OFFSET,
        channels=config.generalist.in_channels,
    )
    split = split_pool(pool, 1.0, seed=config.data.data_seed + WARM_DATA_SEED_OFFSET)
    iterator = MixedBatchIterator(
        split,
        config.run.labeled_per_batch,
        0,
        seed=config.run.seed + WARM_DATA_SEED_OFFSET,
        weak=AUGMENT_PRESETS[config.data.augment_labeled](),
    )
    optimizer = torch.optim.Adam(
        generalist.trainable_parameters(), lr=config.optimizer.generalist_lr
    )
    strategy = StrategyConfig(
        kind="peft_sam",
        n_fg_points=config.strategy.n_fg_points,
        n_bg_points=config.strategy.n_bg_points,
    )
    for t in range(iters):
        batch = iterator.batch_at(t)
        rng = np.random.default_rng([config.run.seed, WARM_POINT_RNG_STREAM, t])
        out = step_peft_sam(batch, generalist, rng, strategy)
        optimizer.zero_grad(set_to_none=True)
        out.total_loss.backward()
        optimizer.step()
    if cache_path is not None:
        save_checkpoint(str(cache_path), iters, {"generalist": generalist})


@dataclass
class RunResult:
    output_dir: str
    config_digest: str
    final_eval: EvalResult
    loss_rows: list[dict] = field(default_factory=list)
    eval_rows: list[dict] = field(default_factory=list)
    models: ModelBundle | None = None
    final_step: int = 0

    @property
    def final_summary(self) -> dict[str, float]:
        return self.final_eval.summary()


class _CsvLog:
    """Incremental CSV writer that survives resume: rows from a previous
    attempt at or past the resume step are dropped before appending."""

    def __init__(self, path: Path, fieldnames: list[str], keep_below: int | None = None):
        self.path = path
        self.fieldnames = fieldnames
        self.rows: list[dict] = []
        if path.is_file() and keep_below is not None:
            with open(path) as fh:
                for row in csv.DictReader(fh):
                    if int(row["step"]) < keep_below:
                        self.rows.append(row)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        with open(self.path, "a", newline="") as fh:
            csv.DictWriter(fh, fieldnames=self.fieldnames).writerow(row)


def train_experiment(
    config: ExperimentConfig,
    resume: bool = False,
    warm_start_cache: str | None = None,
) -> RunResult:
    """Run one training experiment end to end and write its artifacts.

    Artifacts in ``config.run.output_dir``: config.yaml, loss_log.csv,
    eval_log.csv, last.ckpt, final.ckpt, metrics.csv, report.json, and a DONE
    marker (a FAILED marker with the traceback on error).
    """
    config.validate()
    torch.set_num_threads(1)  # bitwise reproducibility on CPU
    out_dir = Path(config.run.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    config.to_yaml(str(out_dir / "config.yaml"))
    failed_marker = out_dir / "FAILED"
    done_marker = out_dir / "DONE"
    for marker in (failed_marker, done_marker):
        if marker.exists():
            marker.unlink()
    try:
        result = _train_inner(config, resume, warm_start_cache, out_dir, digest)
    except Exception:
        failed_marker.write_text(traceback.format_exc())
        raise
    done_marker.write_text("ok\n")
    return result


def _train_inner(
    config: ExperimentConfig,
    resume: bool,
    warm_start_cache: str | None,
    out_dir: Path,
    digest: str,
) -> RunResult:
    split, eval_images, eval_masks = load_training_data(config)
    bundle = build_models(config)
    if bundle.generalist is not None:
        warm_start_generalist(config, bundle.generalist, cache_dir=warm_start_cache)
    optimizers = build_optimizers(config, bundle)

    last_path = out_dir / "last.ckpt"
    start_step = 0
    if resume:
        if not last_path.is_file():
            raise FileNotFoundError(f"resume requested but no checkpoint at {last_path}")
        ckpt = load_checkpoint(str(last_path))
        if ckpt.config_digest != digest:
            raise ValueError(
                f"checkpoint config digest {ckpt.config_digest} does not match run config {digest}"
            )
        ckpt.restore(bundle.named_models(), optimizers)
        start_step = ckpt.step

    iterator = MixedBatchIterator(
        split,
        config.run.labeled_per_batch,
        config.run.unlabeled_per_batch,
        seed=config.run.seed,
        weak=AUGMENT_PRESETS[config.data.augment_labeled](),
        strong=AUGMENT_PRESETS[config.data.augment_unlabeled](),
    )

    comp_names = component_names(config.strategy)
    loss_log = _CsvLog(
        out_dir / "loss_log.csv",
        ["step", "total", "omega", *comp_names],
        keep_below=start_step if resume else None,
    )
    eval_fields = [
        "step",
        *(f"{m}_{s}" for m in ("dice", "iou", "hd95", "asd") for s in ("mean", "std", "defined")),
        "num_images",
    ]
    eval_log = _CsvLog(
        out_dir / "eval_log.csv",
        eval_fields,
        keep_below=start_step + 1 if resume else None,
    )

    def run_eval(at_step: int) -> EvalResult:
        result = evaluate_strategy(
            config.strategy, bundle, eval_images, eval_masks, seed=config.run.seed
        )
        agg = result.summary()
        eval_log.append({"step": at_step, **{k: agg[k] for k in eval_fields if k != "step"}})
        return result

    total_steps = config.run.iterations
    for t in range(start_step, total_steps):
        batch = iterator.batch_at(t)
        rng = np.random.default_rng([config.run.seed, POINT_RNG_STREAM, t])
        out = run_step(config.strategy, bundle, batch, t, rng)
        for optimizer in optimizers.values():
            optimizer.zero_grad(set_to_none=True)
        out.total_loss.backward()
        for optimizer in optimizers.values():
            optimizer.step()

        if t % config.run.log_interval == 0 or t == total_steps - 1:
            row = {
                "step": t,
                "total": float(out.total_loss.detach()),
                "omega": out.omega,
            }
            for name in comp_names:
                value = out.components.get(name)
                row[name] = float(value.detach()) if value is not None else ""
            loss_log.append(row)
        boundary = t + 1
        if boundary % config.run.checkpoint_interval == 0 and boundary < total_steps:
            save_checkpoint(str(last_path), boundary, bundle.named_models(), optimizers, digest)
        if boundary % config.run.eval_interval == 0 and boundary < total_steps:
            run_eval(boundary)

    save_checkpoint(str(last_path), total_steps, bundle.named_models(), optimizers, digest)
    save_checkpoint(
        str(out_dir / "final.ckpt"), total_steps, bundle.named_models(), optimizers, digest
    )
    final_eval = run_eval(total_steps)
    final_eval.report.to_csv(str(out_dir / "metrics.csv"))
    report = {
        "config_digest": digest,
        "strategy": config.strategy.kind,
        "prompt_source": final_eval.prompt_source,
        "step": total_steps,
        "aggregate": final_eval.summary(),
    }
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    return RunResult(
        output_dir=str(out_dir),
        config_digest=digest,
        final_eval=final_eval,
        loss_rows=loss_log.rows,
        eval_rows=eval_log.rows,
        models=bundle,
        final_step=total_steps,
    )
