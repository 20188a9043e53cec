"""Static plots for run and ablation artifacts. All figures are written to
disk; no interactive backend is required."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _read_rows(path_or_rows) -> list[dict]:
    if isinstance(path_or_rows, (str, Path)):
        with open(path_or_rows) as fh:
            return list(csv.DictReader(fh))
    return list(path_or_rows)


def _series(rows: list[dict], key: str) -> tuple[list[float], list[float]]:
    xs, ys = [], []
    for row in rows:
        value = row.get(key, "")
        if value == "" or value is None:
            continue
        xs.append(float(row["step"]))
        ys.append(float(value))
    return xs, ys


def plot_loss_curves(loss_rows_or_path, out_path: str) -> str:
    """Total loss and each component against the training step."""
    rows = _read_rows(loss_rows_or_path)
    if not rows:
        raise ValueError("no loss rows to plot")
    keys = [k for k in rows[0].keys() if k not in ("step", "omega")]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in keys:
        xs, ys = _series(rows, key)
        if xs:
            ax.plot(xs, ys, label=key, linewidth=1.6 if key == "total" else 1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_omega_curve(loss_rows_or_path, out_path: str) -> str:
    rows = _read_rows(loss_rows_or_path)
    xs, ys = _series(rows, "omega")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(xs, ys, color="tab:purple")
    ax.set_xlabel("step")
    ax.set_ylabel("ramp weight")
    ax.set_ylim(-0.05, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_eval_curves(eval_rows_or_path, out_path: str, metrics=("dice", "iou")) -> str:
    rows = _read_rows(eval_rows_or_path)
    if not rows:
        raise ValueError("no evaluation rows to plot")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for metric in metrics:
        xs, ys = _series(rows, f"{metric}_mean")
        if xs:
            ax.plot(xs, ys, marker="o", markersize=3, label=metric)
    ax.set_xlabel("step")
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_ablation_bars(summary_rows_or_path, metric: str, out_path: str) -> str:
    """Bar chart of one metric's per-value mean with a std error bar."""
    rows = _read_rows(summary_rows_or_path)
    labels, means, stds = [], [], []
    for row in rows:
        mean = row.get(f"{metric}_mean", "")
        if mean == "" or mean is None:
            continue
        labels.append(str(row["value"]))
        means.append(float(mean))
        std = row.get(f"{metric}_std", "")
        stds.append(float(std) if std not in ("", None) else 0.0)
    if not labels:
        raise ValueError(f"no defined {metric} values to plot")
    fig, ax = plt.subplots(figsize=(1.4 * len(labels) + 2.5, 4))
    ax.bar(range(len(labels)), means, yerr=stds, capsize=4, color="tab:blue", alpha=0.85)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(f"{metric} (mean over seeds)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_run(run_dir: str, out_dir: str | None = None) -> list[str]:
    """Render the standard figure set for one finished run directory."""
    run = Path(run_dir)
    target = Path(out_dir) if out_dir else run
    target.mkdir(parents=True, exist_ok=True)
    written = []
    loss_path = run / "loss_log.csv"
    if loss_path.is_file():
        written.append(plot_loss_curves(loss_path, str(target / "loss_curves.png")))
        written.append(plot_omega_curve(loss_path, str(target / "omega_curve.png")))
    eval_path = run / "eval_log.csv"
    if eval_path.is_file():
        written.append(plot_eval_curves(eval_path, str(target / "eval_curves.png")))
    if not written:
        raise FileNotFoundError(f"no loss_log.csv or eval_log.csv under {run}")
    return written
