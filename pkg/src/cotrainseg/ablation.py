"""Ablation harness: sweep one config axis over several seeds, aggregate the
final metrics, and emit a comparison table plus a bar chart. A run that fails
is recorded as FAILED and the sweep continues."""

from __future__ import annotations

import csv
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .training import RunResult, train_experiment

ABLATION_AXES = ("strategy", "ramp_up", "labeled_ratio")
SUMMARY_METRICS = ("dice", "iou", "hd95", "asd")


def apply_axis_value(
    base: ExperimentConfig, axis: str, value, seed: int, output_dir: str
) -> ExperimentConfig:
    """Specialize the base config for one sweep cell."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    run_updates = {"seed": int(seed), "output_dir": output_dir}
    if axis == "strategy":
        kind = str(value)
        sections = {
            "strategy": {"kind": kind},
            "generalist": {"num_decoders": 2 if kind == "dual_sam" else 1},
        }
        if kind == "peft_sam":
            run_updates["unlabeled_per_batch"] = 0
        config = base.with_overrides(**sections)
    elif axis == "ramp_up":
        config = base.with_overrides(strategy={"ramp_up_enabled": bool(value)})
    else:
        config = base.with_overrides(data={"labeled_ratio": float(value)})
    config = replace(config, run=replace(config.run, **run_updates))
    return config.validate()


def _cell_name(axis: str, value) -> str:
    return f"{axis}={value}"


@dataclass
class AblationResult:
    axis: str
    rows: list[dict] = field(default_factory=list)  # one per (value, seed)
    summary: list[dict] = field(default_factory=list)  # one per value
    runs_csv: str = ""
    summary_csv: str = ""
    plot_path: str = ""

    def summary_for(self, value) -> dict:
        key = str(value)
        for row in self.summary:
            if row["value"] == key:
                return row
        raise KeyError(f"no summary row for value {value!r}")


def _run_fields() -> list[str]:
    return ["axis", "value", "seed", "status", *(f"{m}_mean" for m in SUMMARY_METRICS), "output_dir"]


def _summary_fields() -> list[str]:
    fields = ["axis", "value", "num_seeds", "num_failed"]
    for metric in SUMMARY_METRICS:
        fields += [f"{metric}_mean", f"{metric}_std"]
    return fields


def run_ablation(
    base: ExperimentConfig,
    axis: str,
    values: list,
    seeds: list[int],
    output_dir: str,
    warm_start_cache: str | None = None,
    train_fn=train_experiment,
) -> AblationResult:
    """Train every (value, seed) cell and aggregate per-value statistics.

    ``train_fn`` is injectable for tests; it must match ``train_experiment``.
    """
    if not values:
        raise ValueError("values must be non-empty")
    if not seeds:
        raise ValueError("seeds must be non-empty")
    out_root = Path(output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    result = AblationResult(axis=axis)
    per_value: dict[str, list[dict]] = {}
    for value in values:
        cell_rows: list[dict] = []
        for seed in seeds:
            run_dir = out_root / _cell_name(axis, value) / f"seed{seed}"
            row = {"axis": axis, "value": str(value), "seed": seed, "output_dir": str(run_dir)}
            try:
                config = apply_axis_value(base, axis, value, seed, str(run_dir))
                run: RunResult = train_experiment_safe(config, warm_start_cache, train_fn)
                agg = run.final_summary
                row["status"] = "ok"
                for metric in SUMMARY_METRICS:
                    row[f"{metric}_mean"] = agg[f"{metric}_mean"]
            except Exception:
                (run_dir / "FAILED").parent.mkdir(parents=True, exist_ok=True)
                (run_dir / "FAILED").write_text(traceback.format_exc())
                row["status"] = "FAILED"
                for metric in SUMMARY_METRICS:
                    row[f"{metric}_mean"] = ""
            cell_rows.append(row)
            result.rows.append(row)
        per_value[str(value)] = cell_rows

    for value in values:
        cell_rows = per_value[str(value)]
        ok = [row for row in cell_rows if row["status"] == "ok"]
        summary_row: dict = {
            "axis": axis,
            "value": str(value),
            "num_seeds": len(cell_rows),
            "num_failed": len(cell_rows) - len(ok),
        }
        for metric in SUMMARY_METRICS:
            vals = np.array([row[f"{metric}_mean"] for row in ok], dtype=np.float64)
            defined = vals[~np.isnan(vals)] if len(vals) else vals
            summary_row[f"{metric}_mean"] = float(defined.mean()) if len(defined) else ""
            summary_row[f"{metric}_std"] = float(defined.std(ddof=0)) if len(defined) else ""
        result.summary.append(summary_row)

    result.runs_csv = str(out_root / "ablation_runs.csv")
    with open(result.runs_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_run_fields())
        writer.writeheader()
        writer.writerows(result.rows)
    result.summary_csv = str(out_root / "ablation_summary.csv")
    with open(result.summary_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_summary_fields())
        writer.writeheader()
        writer.writerows(result.summary)
    try:
        from .plots import plot_ablation_bars

        result.plot_path = str(out_root / "ablation_dice.png")
        plot_ablation_bars(result.summary, metric="dice", out_path=result.plot_path)
    except Exception:
        result.plot_path = ""
    return result


def train_experiment_safe(config: ExperimentConfig, warm_start_cache, train_fn) -> RunResult:
    return train_fn(config, resume=False, warm_start_cache=warm_start_cache)
