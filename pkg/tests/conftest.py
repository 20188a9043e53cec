import numpy as np
import pytest
import torch

from cotrainseg import (
    DatasetSplit,
    ExperimentConfig,
    GeneralistConfig,
    MixedBatchIterator,
    SpecialistConfig,
    build_generalist,
    build_specialist,
    generate_synthetic_dataset,
    split_pool,
)


# per-criterion pass/fail lines recorded by test_acceptance.py, echoed after
# the run so they survive pytest's output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_generalist_config():
    return GeneralistConfig(
        in_channels=1,
        image_size=(32, 32),
        patch_size=8,
        embed_dim=32,
        encoder_depth=2,
        num_heads=2,
        mlp_ratio=2.0,
        adapter_dim=4,
        decoder_depth=2,
    )


@pytest.fixture
def tiny_specialist_config():
    return SpecialistConfig(in_channels=1, base_width=4, depth=2)


@pytest.fixture
def tiny_generalist(tiny_generalist_config):
    return build_generalist(tiny_generalist_config, seed=0)


@pytest.fixture
def tiny_specialist(tiny_specialist_config):
    return build_specialist(tiny_specialist_config, seed=0)


@pytest.fixture(scope="session")
def tiny_split() -> DatasetSplit:
    pool = generate_synthetic_dataset(12, (32, 32), "blob", noise_level=0.2, seed=11)
    return split_pool(pool, labeled_ratio=0.5, seed=11)


@pytest.fixture
def tiny_batch(tiny_split):
    iterator = MixedBatchIterator(tiny_split, labeled_per_batch=2, unlabeled_per_batch=2, seed=5)
    return iterator.batch_at(0)


@pytest.fixture
def labeled_only_batch(tiny_split):
    iterator = MixedBatchIterator(tiny_split, labeled_per_batch=2, unlabeled_per_batch=0, seed=5)
    return iterator.batch_at(0)


@pytest.fixture
def tiny_experiment_config(tmp_path) -> ExperimentConfig:
    """A complete experiment config small enough to train in seconds."""
    base = ExperimentConfig()
    return base.with_overrides(
        data={
            "num_train": 16,
            "num_eval": 3,
            "resolution": (32, 32),
            "shape_family": "blob",
            "noise_level": 0.2,
            "labeled_ratio": 0.25,
        },
        specialist={"base_width": 4, "depth": 2},
        generalist={
            "image_size": (32, 32),
            "patch_size": 8,
            "embed_dim": 32,
            "encoder_depth": 1,
            "num_heads": 2,
            "mlp_ratio": 2.0,
            "adapter_dim": 4,
        },
        strategy={"kind": "sc_sam", "t_max": 4},
        run={
            "iterations": 4,
            "labeled_per_batch": 2,
            "unlabeled_per_batch": 2,
            "checkpoint_interval": 2,
            "eval_interval": 4,
            "log_interval": 1,
            "output_dir": str(tmp_path / "run"),
        },
    ).validate()


def rand_binary_mask(rng: np.random.Generator, shape=(32, 32), p=0.3) -> np.ndarray:
    return (rng.random(shape) < p).astype(np.uint8)
