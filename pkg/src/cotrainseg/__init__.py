"""Co-training experiments for semi-supervised binary segmentation.

A compact specialist network and a promptable transformer segmenter train
each other through prompts and pseudo-labels; three baselines (supervised
prompt fine-tuning, dual-decoder cross-prompting, and dual-specialist mask
prompting) share the same data, metrics, and harness.
"""

from .checkpoint import Checkpoint, checkpoint_bytes, load_checkpoint, save_checkpoint
from .config import (
    DataConfig,
    ExperimentConfig,
    OptimizerConfig,
    RunConfig,
    config_hash,
)
from .data import (
    AugmentationConfig,
    Batch,
    DatasetSplit,
    MixedBatchIterator,
    augment,
    generate_synthetic_dataset,
    load_directory_dataset,
    save_directory_dataset,
    split_pool,
)
from .evaluation import EvalResult, build_predictor, evaluate_strategy
from .generalist import (
    FusionModule,
    Generalist,
    GeneralistConfig,
    PromptSet,
    build_fusion,
    build_generalist,
)
from .losses import (
    DICE_EPS,
    PseudoLabel,
    RampUpSchedule,
    kd_loss,
    pseudo_label,
    ramp_weight,
    sample_points,
    seg_loss,
)
from .metrics import (
    MetricReport,
    boundary_pixels,
    compute_image_metrics,
    dice_iou,
    evaluate_predictions,
    surface_distances,
)
from .specialist import SpecialistConfig, UNet, build_specialist, parameter_count
from .strategies import (
    ModelBundle,
    StepOutput,
    StrategyConfig,
    component_names,
    run_step,
    step_dual_sam,
    step_peft_sam,
    step_sc_sam,
    step_sp_sam,
)
from .training import RunResult, build_models, build_optimizers, train_experiment
from .ablation import AblationResult, apply_axis_value, run_ablation

__version__ = "0.1.0"

__all__ = [
    "AblationResult",
    "AugmentationConfig",
    "Batch",
    "Checkpoint",
    "DataConfig",
    "DatasetSplit",
    "DICE_EPS",
    "EvalResult",
    "ExperimentConfig",
    "FusionModule",
    "Generalist",
    "GeneralistConfig",
    "MetricReport",
    "MixedBatchIterator",
    "ModelBundle",
    "OptimizerConfig",
    "PromptSet",
    "PseudoLabel",
    "RampUpSchedule",
    "RunConfig",
    "RunResult",
    "SpecialistConfig",
    "StepOutput",
    "StrategyConfig",
    "UNet",
    "apply_axis_value",
    "augment",
    "boundary_pixels",
    "build_fusion",
    "build_generalist",
    "build_models",
    "build_optimizers",
    "build_predictor",
    "build_specialist",
    "checkpoint_bytes",
    "component_names",
    "compute_image_metrics",
    "config_hash",
    "dice_iou",
    "evaluate_predictions",
    "evaluate_strategy",
    "generate_synthetic_dataset",
    "kd_loss",
    "load_checkpoint",
    "load_directory_dataset",
    "parameter_count",
    "pseudo_label",
    "ramp_weight",
    "run_ablation",
    "run_step",
    "sample_points",
    "save_checkpoint",
    "save_directory_dataset",
    "seg_loss",
    "split_pool",
    "step_dual_sam",
    "step_peft_sam",
    "step_sc_sam",
    "step_sp_sam",
    "surface_distances",
    "train_experiment",
]
