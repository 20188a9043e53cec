"""Experiment configuration: nested dataclasses with YAML round-trip and a
content hash for run identity."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import yaml

from .data import AugmentationConfig
from .generalist import GeneralistConfig
from .specialist import SpecialistConfig
from .strategies import StrategyConfig

AUGMENT_PRESETS = {
    "weak": AugmentationConfig.weak,
    "strong": AugmentationConfig.strong,
    "disabled": AugmentationConfig.disabled,
    "geometric_only": AugmentationConfig.geometric_only,
}


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | directory
    root: str | None = None
    num_train: int = 400
    num_eval: int = 100
    resolution: tuple[int, int] = (128, 128)
    shape_family: str = "polyp_like"
    noise_level: float = 0.35
    labeled_ratio: float = 0.05
    data_seed: int = 1234
    augment_labeled: str = "weak"
    augment_unlabeled: str = "strong"

    def validate(self) -> "DataConfig":
        if self.source not in ("synthetic", "directory"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "directory" and not self.root:
            raise ValueError("directory data source requires root")
        if self.source == "synthetic" and self.num_train < 1:
            raise ValueError("num_train must be >= 1")
        if not 0.0 < self.labeled_ratio <= 1.0:
            raise ValueError("labeled_ratio must be in (0, 1]")
        if len(self.resolution) != 2 or min(self.resolution) < 8:
            raise ValueError("resolution must be (H, W) with H, W >= 8")
        for name in (self.augment_labeled, self.augment_unlabeled):
            if name not in AUGMENT_PRESETS:
                raise ValueError(f"unknown augmentation preset {name!r}")
        return self


@dataclass(frozen=True)
class OptimizerConfig:
    specialist_lr: float = 0.01
    specialist_momentum: float = 0.9
    generalist_lr: float = 1e-4
    fusion_lr: float = 1e-4

    def validate(self) -> "OptimizerConfig":
        for name in ("specialist_lr", "generalist_lr", "fusion_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.specialist_momentum < 1.0:
            raise ValueError("specialist_momentum must be in [0, 1)")
        return self


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    iterations: int = 2000
    labeled_per_batch: int = 4
    unlabeled_per_batch: int = 4
    warm_start_iterations: int = 0
    checkpoint_interval: int = 500
    eval_interval: int = 500
    log_interval: int = 50
    output_dir: str = "runs/run"

    def validate(self) -> "RunConfig":
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.labeled_per_batch < 1:
            raise ValueError("labeled_per_batch must be >= 1")
        if self.unlabeled_per_batch < 0:
            raise ValueError("unlabeled_per_batch must be >= 0")
        if self.warm_start_iterations < 0:
            raise ValueError("warm_start_iterations must be >= 0")
        for name in ("checkpoint_interval", "eval_interval", "log_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    specialist: SpecialistConfig = field(default_factory=SpecialistConfig)
    generalist: GeneralistConfig = field(default_factory=GeneralistConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        self.data.validate()
        self.specialist.validate()
        self.generalist.validate()
        self.strategy.validate()
        self.optimizer.validate()
        self.run.validate()
        if tuple(self.generalist.image_size) != tuple(self.data.resolution):
            raise ValueError(
                f"generalist image_size {self.generalist.image_size} must match "
                f"data resolution {self.data.resolution}"
            )
        if self.strategy.kind == "dual_sam" and self.generalist.num_decoders != 2:
            raise ValueError("dual_sam requires generalist num_decoders=2")
        if self.strategy.kind != "dual_sam" and self.generalist.num_decoders != 1:
            raise ValueError(f"{self.strategy.kind} requires generalist num_decoders=1")
        if self.strategy.kind == "peft_sam" and self.run.unlabeled_per_batch != 0:
            raise ValueError("peft_sam is supervised-only; set unlabeled_per_batch=0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        payload = dict(payload)
        sections = {
            "data": DataConfig,
            "specialist": SpecialistConfig,
            "generalist": GeneralistConfig,
            "strategy": StrategyConfig,
            "optimizer": OptimizerConfig,
            "run": RunConfig,
        }
        kwargs = {}
        unknown = set(payload) - set(sections)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        for name, section_cls in sections.items():
            section = dict(payload.get(name, {}))
            allowed = set(section_cls.__dataclass_fields__)
            bad = set(section) - allowed
            if bad:
                raise ValueError(f"unknown keys in config section {name!r}: {sorted(bad)}")
            # YAML has no tuple type; restore the tuple-valued fields
            for key in ("resolution", "image_size"):
                if key in section and section[key] is not None:
                    section[key] = tuple(section[key])
            kwargs[name] = section_cls(**section)
        return cls(**kwargs)

    def to_yaml(self, path: str | None = None) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_yaml(cls, text_or_path: str) -> "ExperimentConfig":
        if "\n" not in text_or_path and text_or_path.endswith((".yaml", ".yml")):
            with open(text_or_path) as fh:
                payload = yaml.safe_load(fh)
        else:
            payload = yaml.safe_load(text_or_path)
        if not isinstance(payload, dict):
            raise ValueError("config YAML must be a mapping")
        return cls.from_dict(payload)

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Return a copy with per-section field overrides, e.g.
        ``cfg.with_overrides(run={"seed": 3}, strategy={"kind": "sc_sam"})``."""
        updates = {}
        for name, fields in sections.items():
            current = getattr(self, name)
            updates[name] = replace(current, **fields)
        return replace(self, **updates)


def config_hash(config: ExperimentConfig) -> str:
    """Stable 16-hex-digit digest of the configuration.

    The artifact location is not part of run identity: two runs that differ
    only in output_dir produce interchangeable checkpoints."""
    payload = config.to_dict()
    payload["run"] = {k: v for k, v in payload["run"].items() if k != "output_dir"}
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
