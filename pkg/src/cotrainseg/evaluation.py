"""Evaluation-time prediction for each training strategy.

At evaluation no ground truth is available, so each strategy prompts the
generalist the same way it does during training, with its own side of the
loop: the learned default box when nothing else exists, two-phase
self-prompting for the dual-decoder setup, the fused specialist mask, or
points sampled from the specialist's prediction. Point sampling is seeded per
image from the image bytes, so reports are reproducible regardless of
evaluation order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .generalist import Generalist, PromptSet
from .losses import pseudo_label, sample_points
from .metrics import MetricReport, evaluate_predictions
from .strategies import ModelBundle, StrategyConfig

PROMPT_SOURCES = {
    "peft_sam": "learned_box_only",
    "dual_sam": "self_prompt_two_phase",
    "sp_sam": "fusion_mask",
    "sc_sam": "specialist_points",
}


def _image_rng(image: np.ndarray, seed: int) -> np.random.Generator:
    digest = zlib.crc32(np.ascontiguousarray(image, dtype=np.float32).tobytes())
    return np.random.default_rng([seed, digest])


def _to_input(image: np.ndarray, channels: int) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, ...]
    if arr.shape[0] != channels:
        raise ValueError(f"expected {channels} channel(s), got {arr.shape[0]}")
    return torch.from_numpy(arr).unsqueeze(0)


def _fg_mask(logits: torch.Tensor) -> np.ndarray:
    return pseudo_label(logits[0]).labels.cpu().numpy().astype(np.uint8)


def predict_box_only(generalist: Generalist, image: np.ndarray) -> np.ndarray:
    """Decode from the learned default box tokens alone."""
    with torch.no_grad():
        x = _to_input(image, generalist.config.in_channels)
        embedding = generalist.encode_image(x)
        logits = generalist.decode_mask(embedding, generalist.encode_prompts(PromptSet()))
    return _fg_mask(logits)


def predict_dual_self_prompt(
    generalist: Generalist,
    image: np.ndarray,
    rng: np.random.Generator,
    n_fg: int = 5,
    n_bg: int = 5,
) -> np.ndarray:
    """Each decoder first decodes unprompted, then re-decodes with points from
    its own first-pass prediction; the two probability maps are averaged."""
    with torch.no_grad():
        x = _to_input(image, generalist.config.in_channels)
        embedding = generalist.encode_image(x)
        empty = generalist.encode_prompts(PromptSet())
        probs = []
        for d in (1, 2):
            first = generalist.decode_mask(embedding, empty, decoder_index=d)
            points = sample_points(pseudo_label(first[0]), n_fg, n_bg, rng)
            second = generalist.decode_mask(embedding, generalist.encode_prompts(points), d)
            probs.append(F.softmax(second, dim=1))
        fused = torch.stack(probs).mean(dim=0)
    return (fused[0, 1] > fused[0, 0]).cpu().numpy().astype(np.uint8)


def predict_fusion_mask(
    specialist: torch.nn.Module,
    specialist_2: torch.nn.Module,
    fusion: torch.nn.Module,
    generalist: Generalist,
    image: np.ndarray,
) -> np.ndarray:
    with torch.no_grad():
        x = _to_input(image, generalist.config.in_channels)
        mask_prompt = fusion(specialist(x), specialist_2(x))
        embedding = generalist.encode_image(x)
        prompt = generalist.encode_prompts(PromptSet(mask_prompt=mask_prompt[0]))
        logits = generalist.decode_mask(embedding, prompt)
    return _fg_mask(logits)


def predict_specialist_points(
    specialist: torch.nn.Module,
    generalist: Generalist,
    image: np.ndarray,
    rng: np.random.Generator,
    n_fg: int = 5,
    n_bg: int = 5,
) -> np.ndarray:
    with torch.no_grad():
        x = _to_input(image, generalist.config.in_channels)
        p_unet = specialist(x)
        points = sample_points(pseudo_label(p_unet[0]), n_fg, n_bg, rng)
        embedding = generalist.encode_image(x)
        logits = generalist.decode_mask(embedding, generalist.encode_prompts(points))
    return _fg_mask(logits)


def predict_specialist_only(specialist: torch.nn.Module, image: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None, ...]
        logits = specialist(torch.from_numpy(arr).unsqueeze(0))
    return _fg_mask(logits)


def build_predictor(
    strategy: StrategyConfig,
    models: ModelBundle,
    seed: int = 0,
    target: str = "auto",
) -> tuple[Callable[[np.ndarray], np.ndarray], str]:
    """Return (predict_fn, prompt_source) for a trained model bundle.

    ``target="specialist"`` evaluates the specialist network alone;
    ``"auto"`` evaluates the strategy's final output (the generalist branch).
    """
    strategy.validate()
    if target not in ("auto", "specialist"):
        raise ValueError(f"unknown evaluation target {target!r}")
    if target == "specialist":
        if models.specialist is None:
            raise ValueError("specialist evaluation requires a specialist model")
        return (lambda image: predict_specialist_only(models.specialist, image)), "none"

    kind = strategy.kind
    n_fg, n_bg = strategy.n_fg_points, strategy.n_bg_points
    if kind == "peft_sam":
        return (lambda image: predict_box_only(models.generalist, image)), PROMPT_SOURCES[kind]
    if kind == "dual_sam":
        def predict(image, _g=models.generalist):
            return predict_dual_self_prompt(_g, image, _image_rng(image, seed), n_fg, n_bg)

        return predict, PROMPT_SOURCES[kind]
    if kind == "sp_sam":
        def predict(image, _m=models):
            return predict_fusion_mask(
                _m.specialist, _m.specialist_2, _m.fusion, _m.generalist, image
            )

        return predict, PROMPT_SOURCES[kind]

    def predict(image, _m=models):
        return predict_specialist_points(
            _m.specialist, _m.generalist, image, _image_rng(image, seed), n_fg, n_bg
        )

    return predict, PROMPT_SOURCES[kind]


@dataclass
class EvalResult:
    report: MetricReport
    prompt_source: str
    target: str

    def summary(self) -> dict[str, float]:
        return self.report.aggregate()


def evaluate_strategy(
    strategy: StrategyConfig,
    models: ModelBundle,
    images: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    seed: int = 0,
    target: str = "auto",
) -> EvalResult:
    predict, prompt_source = build_predictor(strategy, models, seed, target)
    report = evaluate_predictions(predict, images, masks)
    return EvalResult(report=report, prompt_source=prompt_source, target=target)
