"""The four training strategies as interchangeable step functions.

Each step consumes one mixed batch and the models it needs, and returns the
total loss with its named components (ramp weight already applied where it
applies). Cross-supervision targets are always detached pseudo-labels, so
every cross term trains exactly one side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import Batch
from .generalist import FusionModule, Generalist, PromptSet
from .losses import RampUpSchedule, pseudo_label, ramp_weight, sample_points, seg_loss, kd_loss

STRATEGY_KINDS = ("peft_sam", "dual_sam", "sp_sam", "sc_sam")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "sc_sam"
    ramp_up_enabled: bool = True
    t_max: int = 600
    ramp_exponent_scale: float = 1.0
    n_fg_points: int = 5
    n_bg_points: int = 5
    # sp_sam: distill from SAM's hard argmax instead of its soft distribution
    kd_hard_target: bool = False
    # sc_sam: sample labeled-branch prompts from ground truth instead of the
    # specialist's prediction
    labeled_prompts_from_gt: bool = False

    def validate(self) -> "StrategyConfig":
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        return self

    @property
    def models_required(self) -> frozenset[str]:
        return {
            "peft_sam": frozenset({"generalist"}),
            "dual_sam": frozenset({"generalist"}),
            "sp_sam": frozenset({"generalist", "specialist", "specialist_2", "fusion"}),
            "sc_sam": frozenset({"generalist", "specialist"}),
        }[self.kind]


@dataclass
class StepOutput:
    """Total loss plus named components; omega is the applied ramp weight.

    ``total_loss == sum(components.values())`` with omega pre-applied to the
    component it scales. ``extras`` carries non-loss debug data (e.g. the
    prompt sets used), never consumed by training itself.
    """

    total_loss: torch.Tensor
    components: dict[str, torch.Tensor]
    omega: float
    extras: dict = field(default_factory=dict)


def component_names(config: StrategyConfig) -> list[str]:
    return {
        "peft_sam": ["sup_generalist"],
        "dual_sam": ["sup_d1", "sup_d2", "unsup_d1_from_d2", "unsup_d2_from_d1"],
        "sp_sam": [
            "sup_specialist_1",
            "sup_specialist_2",
            "sup_generalist",
            "kd_specialist_1",
            "kd_specialist_2",
        ],
        "sc_sam": [
            "sup_specialist",
            "sup_generalist",
            "unsup_spec_from_gen",
            "unsup_gen_from_spec",
        ],
    }[config.kind]


def _finish(components: dict[str, torch.Tensor], omega: float, extras: dict) -> StepOutput:
    total = sum(components.values())
    return StepOutput(total_loss=total, components=components, omega=omega, extras=extras)


def _decode_per_image(
    generalist: Generalist,
    embedding: torch.Tensor,
    prompts: list[PromptSet],
    decoder_index: int = 1,
) -> torch.Tensor:
    outs = [
        generalist.decode_mask(embedding[i : i + 1], generalist.encode_prompts(p), decoder_index)
        for i, p in enumerate(prompts)
    ]
    return torch.cat(outs, dim=0)


def step_peft_sam(
    batch: Batch,
    generalist: Generalist,
    rng: np.random.Generator,
    config: StrategyConfig | None = None,
) -> StepOutput:
    """Supervised-only fine-tuning: point prompts sampled from ground truth."""
    config = (config or StrategyConfig(kind="peft_sam")).validate()
    if batch.num_unlabeled > 0:
        raise ValueError("peft_sam is supervised-only; batch contains unlabeled samples")
    prompts = [
        sample_points(batch.labeled_masks[i], config.n_fg_points, config.n_bg_points, rng)
        for i in range(batch.num_labeled)
    ]
    embedding = generalist.encode_image(batch.labeled_images)
    p_sam = _decode_per_image(generalist, embedding, prompts)
    components = {"sup_generalist": seg_loss(p_sam, batch.labeled_masks)}
    return _finish(components, omega=0.0, extras={"prompts": prompts})


def step_dual_sam(
    batch: Batch,
    generalist: Generalist,
    rng: np.random.Generator,
    config: StrategyConfig | None = None,
    phase1_override=None,
) -> StepOutput:
    """Two-decoder cross-prompting: each decoder prompts and supervises the
    other. Phase 1 decodes unprompted (learned default box only); phase 2
    decodes with points sampled from the other decoder's phase-1 pseudo-label.

    ``phase1_override(decoder_index, logits) -> logits`` taps the phase-1
    output before point sampling (test instrumentation).
    """
    config = (config or StrategyConfig(kind="dual_sam")).validate()
    if len(generalist.decoders) != 2:
        raise ValueError("dual_sam requires a generalist with num_decoders=2")
    images = torch.cat([batch.labeled_images, batch.unlabeled_images], dim=0)
    n_lab = batch.num_labeled
    embedding = generalist.encode_image(images)

    empty_prompt = generalist.encode_prompts(PromptSet())
    phase1 = {}
    with torch.no_grad():
        for d in (1, 2):
            logits = generalist.decode_mask(embedding, empty_prompt, decoder_index=d)
            if phase1_override is not None:
                logits = phase1_override(d, logits)
            phase1[d] = logits
    points = {
        d: [
            sample_points(
                pseudo_label(phase1[d][i]), config.n_fg_points, config.n_bg_points, rng
            )
            for i in range(images.shape[0])
        ]
        for d in (1, 2)
    }
    # cross-prompting: decoder 1 consumes decoder 2's points and vice versa
    p1 = _decode_per_image(generalist, embedding, points[2], decoder_index=1)
    p2 = _decode_per_image(generalist, embedding, points[1], decoder_index=2)

    components = {
        "sup_d1": seg_loss(p1[:n_lab], batch.labeled_masks),
        "sup_d2": seg_loss(p2[:n_lab], batch.labeled_masks),
    }
    if batch.num_unlabeled > 0:
        components["unsup_d1_from_d2"] = seg_loss(p1[n_lab:], pseudo_label(p2[n_lab:]))
        components["unsup_d2_from_d1"] = seg_loss(p2[n_lab:], pseudo_label(p1[n_lab:]))
    return _finish(components, omega=1.0, extras={"points": points})


def step_sp_sam(
    batch: Batch,
    specialist: torch.nn.Module,
    specialist_2: torch.nn.Module,
    fusion: FusionModule,
    generalist: Generalist,
    config: StrategyConfig | None = None,
) -> StepOutput:
    """Dual specialists fused into a mask prompt for the generalist; the
    generalist distills back into the specialists on unlabeled data."""
    config = (config or StrategyConfig(kind="sp_sam")).validate()
    for name, model in (
        ("specialist", specialist),
        ("specialist_2", specialist_2),
        ("fusion", fusion),
        ("generalist", generalist),
    ):
        if model is None:
            raise ValueError(f"sp_sam requires model {name!r}")
    images = torch.cat([batch.labeled_images, batch.unlabeled_images], dim=0)
    n_lab = batch.num_labeled
    p1 = specialist(images)
    p2 = specialist_2(images)
    mask_prompt = fusion(p1, p2)  # (B, 1, H', W'), differentiable
    embedding = generalist.encode_image(images)
    prompts = [PromptSet(mask_prompt=mask_prompt[i]) for i in range(images.shape[0])]
    p_sam = _decode_per_image(generalist, embedding, prompts)

    components = {
        "sup_specialist_1": seg_loss(p1[:n_lab], batch.labeled_masks),
        "sup_specialist_2": seg_loss(p2[:n_lab], batch.labeled_masks),
        "sup_generalist": seg_loss(p_sam[:n_lab], batch.labeled_masks),
    }
    if batch.num_unlabeled > 0:
        teacher = p_sam[n_lab:].detach()
        if config.kd_hard_target:
            hard = pseudo_label(teacher).labels
            components["kd_specialist_1"] = F.nll_loss(F.log_softmax(p1[n_lab:], dim=1), hard)
            components["kd_specialist_2"] = F.nll_loss(F.log_softmax(p2[n_lab:], dim=1), hard)
        else:
            components["kd_specialist_1"] = kd_loss(p1[n_lab:], teacher)
            components["kd_specialist_2"] = kd_loss(p2[n_lab:], teacher)
    return _finish(components, omega=1.0, extras={})


def step_sc_sam(
    batch: Batch,
    specialist: torch.nn.Module,
    generalist: Generalist,
    schedule: RampUpSchedule,
    t: int,
    rng: np.random.Generator,
    config: StrategyConfig | None = None,
) -> StepOutput:
    """Bi-directional co-training: the specialist prompts the generalist with
    points from its own prediction; each side supervises the other on
    unlabeled data, the specialist-to-generalist term scaled by omega(t)."""
    config = (config or StrategyConfig(kind="sc_sam")).validate()
    if t < 0:
        raise ValueError("t must be >= 0")
    omega = ramp_weight(schedule, t) if config.ramp_up_enabled else 1.0
    images = torch.cat([batch.labeled_images, batch.unlabeled_images], dim=0)
    n_lab = batch.num_labeled
    p_unet = specialist(images)

    prompts = []
    for i in range(images.shape[0]):
        if i < n_lab and config.labeled_prompts_from_gt:
            source = batch.labeled_masks[i]
        else:
            source = pseudo_label(p_unet[i])
        prompts.append(sample_points(source, config.n_fg_points, config.n_bg_points, rng))
    embedding = generalist.encode_image(images)
    p_sam = _decode_per_image(generalist, embedding, prompts)

    components = {
        "sup_specialist": seg_loss(p_unet[:n_lab], batch.labeled_masks),
        "sup_generalist": seg_loss(p_sam[:n_lab], batch.labeled_masks),
    }
    if batch.num_unlabeled > 0:
        components["unsup_spec_from_gen"] = seg_loss(p_unet[n_lab:], pseudo_label(p_sam[n_lab:]))
        components["unsup_gen_from_spec"] = omega * seg_loss(
            p_sam[n_lab:], pseudo_label(p_unet[n_lab:])
        )
    return _finish(components, omega=omega, extras={"prompts": prompts})


@dataclass
class ModelBundle:
    """The models a strategy may need; unused slots stay None."""

    generalist: Generalist | None = None
    specialist: torch.nn.Module | None = None
    specialist_2: torch.nn.Module | None = None
    fusion: FusionModule | None = None

    def named_models(self) -> dict[str, torch.nn.Module]:
        return {
            name: model
            for name, model in (
                ("generalist", self.generalist),
                ("specialist", self.specialist),
                ("specialist_2", self.specialist_2),
                ("fusion", self.fusion),
            )
            if model is not None
        }


def run_step(
    config: StrategyConfig,
    models: ModelBundle,
    batch: Batch,
    t: int,
    rng: np.random.Generator,
) -> StepOutput:
    """Dispatch one training step to the configured strategy."""
    config.validate()
    missing = config.models_required - set(models.named_models())
    if missing:
        raise ValueError(f"strategy {config.kind} missing models: {sorted(missing)}")
    if config.kind == "peft_sam":
        return step_peft_sam(batch, models.generalist, rng, config)
    if config.kind == "dual_sam":
        return step_dual_sam(batch, models.generalist, rng, config)
    if config.kind == "sp_sam":
        return step_sp_sam(
            batch, models.specialist, models.specialist_2, models.fusion, models.generalist, config
        )
    schedule = RampUpSchedule(config.t_max, config.ramp_exponent_scale)
    return step_sc_sam(batch, models.specialist, models.generalist, schedule, t, rng, config)
