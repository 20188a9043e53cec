"""Segmentation metrics: overlap (Dice, IoU) and surface distances (HD95, ASD).

Surface metrics operate on boundary pixels under 4-connectivity, with the
image border treated as background (an object touching the edge still has a
boundary there). Distances are Euclidean in pixel units.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

UNDEFINED = float("nan")

SCALAR_METRICS = ("dice", "iou", "hd95", "asd")


def _as_binary(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary with values in {{0, 1}}")
    return arr.astype(bool)


def dice_iou(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """Overlap scores for binary masks. Both masks empty scores 1.0 by
    convention; exactly one empty scores 0.0."""
    p = _as_binary(pred, "pred")
    t = _as_binary(target, "target")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    inter = float(np.logical_and(p, t).sum())
    ps = float(p.sum())
    ts = float(t.sum())
    if ps == 0.0 and ts == 0.0:
        return 1.0, 1.0
    dice = 2.0 * inter / (ps + ts)
    iou = inter / (ps + ts - inter)
    return dice, iou


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (row, col) of foreground pixels with at least one
    background 4-neighbor, counting out-of-image as background."""
    m = _as_binary(mask, "mask")
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def directed_distances(from_coords: np.ndarray, to_coords: np.ndarray) -> np.ndarray:
    """Distance from each point in ``from_coords`` to its nearest neighbor in
    ``to_coords``."""
    if len(from_coords) == 0 or len(to_coords) == 0:
        raise ValueError("directed_distances requires non-empty point sets")
    tree = cKDTree(np.asarray(to_coords, dtype=np.float64))
    dists, _ = tree.query(np.asarray(from_coords, dtype=np.float64), k=1)
    return np.atleast_1d(dists)


@dataclass(frozen=True)
class SurfaceDistanceResult:
    hd95: float
    asd: float
    defined: bool


def surface_distances(pred: np.ndarray, target: np.ndarray) -> SurfaceDistanceResult:
    """HD95 is the 95th percentile (linear interpolation) of the pooled
    directed boundary distances; ASD is the mean of the two directed average
    distances. Either mask empty leaves both undefined."""
    p = _as_binary(pred, "pred")
    t = _as_binary(target, "target")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    pb = boundary_pixels(p)
    tb = boundary_pixels(t)
    if len(pb) == 0 or len(tb) == 0:
        return SurfaceDistanceResult(UNDEFINED, UNDEFINED, defined=False)
    d_pt = directed_distances(pb, tb)
    d_tp = directed_distances(tb, pb)
    pooled = np.concatenate([d_pt, d_tp])
    hd95 = float(np.percentile(pooled, 95, method="linear"))
    asd = 0.5 * (float(d_pt.mean()) + float(d_tp.mean()))
    return SurfaceDistanceResult(hd95, asd, defined=True)


def compute_image_metrics(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    dice, iou = dice_iou(pred, target)
    surf = surface_distances(pred, target)
    return {"dice": dice, "iou": iou, "hd95": surf.hd95, "asd": surf.asd}


@dataclass
class MetricReport:
    """Per-image metric rows plus aggregate statistics.

    Surface metrics can be undefined (NaN) when a mask is empty; aggregates
    for those metrics are taken over the defined rows only and the count of
    defined rows is reported alongside.
    """

    rows: list[dict] = field(default_factory=list)

    def add(self, index: int, metrics: dict[str, float]) -> None:
        row = {"index": int(index)}
        for key in SCALAR_METRICS:
            row[key] = float(metrics[key])
        self.rows.append(row)

    def aggregate(self) -> dict[str, float]:
        out: dict[str, float] = {"num_images": float(len(self.rows))}
        for key in SCALAR_METRICS:
            values = np.array([row[key] for row in self.rows], dtype=np.float64)
            defined = values[~np.isnan(values)]
            out[f"{key}_mean"] = float(defined.mean()) if len(defined) else UNDEFINED
            out[f"{key}_std"] = float(defined.std(ddof=0)) if len(defined) else UNDEFINED
            out[f"{key}_defined"] = float(len(defined))
        return out

    def to_csv(self, path: str | None = None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["index", *SCALAR_METRICS])
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: row[k] for k in ["index", *SCALAR_METRICS]})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        report = cls()
        for row in csv.DictReader(io.StringIO(text)):
            report.add(int(row["index"]), {k: float(row[k]) for k in SCALAR_METRICS})
        return report

    def to_json(self, path: str | None = None) -> str:
        payload = {"rows": self.rows, "aggregate": self.aggregate()}
        text = json.dumps(payload, indent=2, allow_nan=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        payload = json.loads(text, parse_constant=lambda s: float(s))
        report = cls()
        for row in payload["rows"]:
            report.add(int(row["index"]), {k: float(row[k]) for k in SCALAR_METRICS})
        return report

    def equals(self, other: "MetricReport") -> bool:
        if len(self.rows) != len(other.rows):
            return False
        for a, b in zip(self.rows, other.rows):
            if a["index"] != b["index"]:
                return False
            for key in SCALAR_METRICS:
                va, vb = a[key], b[key]
                if math.isnan(va) != math.isnan(vb):
                    return False
                if not math.isnan(va) and va != vb:
                    return False
        return True


def evaluate_predictions(
    predict: Callable[[np.ndarray], np.ndarray],
    images: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
) -> MetricReport:
    """Run a predictor over an evaluation set and collect per-image metrics.

    ``predict`` maps one (H, W) float image to a binary (H, W) mask.
    """
    if len(images) != len(masks):
        raise ValueError("images and masks must have the same length")
    report = MetricReport()
    for i, (image, mask) in enumerate(zip(images, masks)):
        pred = np.asarray(predict(image))
        report.add(i, compute_image_metrics(pred, mask))
    return report
