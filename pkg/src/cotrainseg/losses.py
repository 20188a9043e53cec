"""Losses, pseudo-label extraction, prompt point sampling, and the ramp-up.

All functions are pure in their inputs plus explicit random state. The
segmentation loss is the unweighted mean of soft Dice and cross-entropy; the
distillation loss is a pixel-mean KL divergence with the teacher detached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .generalist import PromptSet

DICE_EPS = 1e-5


@dataclass(frozen=True)
class RampUpSchedule:
    """Ramp weight omega(t): exp(-scale * (1 - t/t_max)^2) up to t_max, then 1.

    With the default scale of 1 the ramp starts at omega(0) = exp(-1) and
    rises monotonically to 1 at t = t_max.
    """

    t_max: int
    exponent_scale: float = 1.0

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")

    def weight(self, t: int) -> float:
        return ramp_weight(self, t)


def ramp_weight(schedule: RampUpSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    if t > schedule.t_max:
        return 1.0
    frac = 1.0 - t / schedule.t_max
    return float(np.exp(-schedule.exponent_scale * frac * frac))


@dataclass
class PseudoLabel:
    """Hard per-pixel labels from a prediction map; never carries gradient."""

    labels: torch.Tensor  # (H, W) or (B, H, W), int64 in {0, 1}
    detached: bool = True


def pseudo_label(pred: torch.Tensor) -> PseudoLabel:
    """Per-pixel argmax over the class axis; exact ties resolve to background."""
    fg = pred[..., 1, :, :]
    bg = pred[..., 0, :, :]
    labels = (fg > bg).long().detach()
    return PseudoLabel(labels=labels)


def _target_tensor(target) -> torch.Tensor:
    if isinstance(target, PseudoLabel):
        target = target.labels
    if isinstance(target, np.ndarray):
        target = torch.from_numpy(target.astype(np.int64))
    return target.long()


def seg_loss(pred: torch.Tensor, target) -> torch.Tensor:
    """Mean of soft Dice loss and cross-entropy over 2-class logits.

    ``pred`` is (2, H, W) or (B, 2, H, W) logits; ``target`` a binary mask,
    pseudo-label, or matching integer tensor. Differentiable w.r.t. ``pred``
    only. Dice uses the soft foreground probability with eps smoothing, so
    empty target + empty prediction stays finite.
    """
    if pred.dim() == 3:
        pred = pred.unsqueeze(0)
    target = _target_tensor(target)
    if target.dim() == 2:
        target = target.unsqueeze(0)
    if target.shape != (pred.shape[0],) + pred.shape[-2:]:
        raise ValueError(
            f"target shape {tuple(target.shape)} does not match prediction {tuple(pred.shape)}"
        )
    log_probs = F.log_softmax(pred, dim=1)
    ce = F.nll_loss(log_probs, target)
    p_fg = log_probs[:, 1].exp()
    t = target.to(pred.dtype)
    inter = (p_fg * t).sum(dim=(-2, -1))
    denom = p_fg.sum(dim=(-2, -1)) + t.sum(dim=(-2, -1))
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    return 0.5 * (dice.mean() + ce)


def kd_loss(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Pixel-mean KL(softmax(teacher) || softmax(student)), teacher detached."""
    if student.shape != teacher.shape:
        raise ValueError(
            f"student shape {tuple(student.shape)} != teacher shape {tuple(teacher.shape)}"
        )
    squeeze = student.dim() == 3
    if squeeze:
        student = student.unsqueeze(0)
        teacher = teacher.unsqueeze(0)
    teacher = teacher.detach()
    log_p_t = F.log_softmax(teacher, dim=1)
    log_p_s = F.log_softmax(student, dim=1)
    kl = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=1)
    return kl.mean()


def sample_points(
    mask,
    n_fg: int = 5,
    n_bg: int = 5,
    rng: np.random.Generator | None = None,
) -> PromptSet:
    """Uniformly sample point prompts without replacement from a binary mask.

    Takes up to ``n_fg`` foreground and ``n_bg`` background pixels; a class
    with fewer pixels than requested contributes all it has, with no
    substitution from the other class.
    """
    if isinstance(mask, PseudoLabel):
        mask = mask.labels
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    if rng is None:
        rng = np.random.default_rng()
    points: list[tuple[int, int, int]] = []
    for label, want in ((1, n_fg), (0, n_bg)):
        coords = np.argwhere(mask == label)
        take = min(want, len(coords))
        if take > 0:
            chosen = rng.choice(len(coords), size=take, replace=False)
            points.extend((int(coords[i][0]), int(coords[i][1]), label) for i in chosen)
    return PromptSet(points=points)
