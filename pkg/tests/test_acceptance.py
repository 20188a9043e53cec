"""Acceptance suite.

Each test checks one release criterion and records a [PASS]/[FAIL] line that
is echoed in the terminal summary. Criteria 8 and 9 share a 3-seed training
protocol on the 48x48 benchmark (12 runs, roughly half an hour on one CPU
core); everything else runs in seconds.
"""

import math
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from cotrainseg import (
    ExperimentConfig,
    MixedBatchIterator,
    RampUpSchedule,
    build_generalist,
    build_specialist,
    compute_image_metrics,
    dice_iou,
    generate_synthetic_dataset,
    kd_loss,
    ramp_weight,
    sample_points,
    seg_loss,
    split_pool,
    step_peft_sam,
    step_sc_sam,
    surface_distances,
    train_experiment,
)
from cotrainseg.generalist import GeneralistConfig
from cotrainseg.specialist import SpecialistConfig

from conftest import ACCEPTANCE_LINES
from test_metrics import oracle_surface

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def record(ok: bool, name: str, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    assert ok, line


def small_generalist_config() -> GeneralistConfig:
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


def random_mask(rng: np.random.Generator, shape=(32, 32), density=None) -> np.ndarray:
    p = rng.uniform(0.05, 0.6) if density is None else density
    return (rng.random(shape) < p).astype(np.uint8)


def test_01_metric_oracle_equivalence():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    checked = 0
    for i in range(200):
        pred = random_mask(rng)
        target = random_mask(rng)
        if i % 25 == 0:
            pred = np.zeros_like(pred)  # exercise the undefined convention
        got = surface_distances(pred, target)
        want_hd95, want_asd = oracle_surface(pred, target)
        if math.isnan(want_hd95):
            assert not got.defined and math.isnan(got.hd95) and math.isnan(got.asd)
            continue
        worst = max(worst, abs(got.hd95 - want_hd95), abs(got.asd - want_asd))
        checked += 1
    elapsed = time.perf_counter() - start
    record(
        worst < 1e-9 and elapsed < 30.0,
        "01 metric oracle equivalence",
        f"max |diff| {worst:.2e} over {checked} defined of 200 pairs, {elapsed:.1f} s",
    )


def test_02_dice_iou_identity_and_trivial_cases():
    mask = random_mask(np.random.default_rng(3))
    same = compute_image_metrics(mask, mask.copy())
    trivial_ok = same == {"dice": 1.0, "iou": 1.0, "hd95": 0.0, "asd": 0.0}

    pred = np.zeros((16, 16), dtype=np.uint8)
    target = np.zeros((16, 16), dtype=np.uint8)
    pred[:4, :4] = 1
    target[10:, 10:] = 1
    trivial_ok = trivial_ok and dice_iou(pred, target) == (0.0, 0.0)

    rng = np.random.default_rng(202)
    worst = 0.0
    for i in range(100):
        a = random_mask(rng, (24, 24), density=0.0 if i == 0 else None)
        b = random_mask(rng, (24, 24), density=0.0 if i <= 1 else None)
        dice, iou = dice_iou(a, b)
        worst = max(worst, abs(dice - 2.0 * iou / (1.0 + iou)))
    record(
        trivial_ok and worst < 1e-12,
        "02 dice-iou identity and trivial cases",
        f"identical->(1,1,0,0) {trivial_ok}, max identity residual {worst:.2e} over 100 cases",
    )


def test_03_ramp_up_exactness():
    schedule = RampUpSchedule(t_max=600)
    start_err = abs(ramp_weight(schedule, 0) - math.exp(-1.0))
    end_ok = ramp_weight(schedule, 600) == 1.0 and ramp_weight(schedule, 5000) == 1.0
    ts = np.unique(np.random.default_rng(11).integers(0, 1200, size=10_000))
    values = [ramp_weight(schedule, int(t)) for t in sorted(ts)]
    monotone = all(b >= a for a, b in zip(values, values[1:]))
    record(
        start_err <= 1e-12 and end_ok and monotone,
        "03 ramp-up exactness",
        f"|w(0)-e^-1| = {start_err:.1e}, w(t_max)=1 {end_ok}, monotone over 10,000 samples {monotone}",
    )


def _fd_check(loss_fn, x: torch.Tensor, seed: int) -> float:
    x = x.detach().clone().requires_grad_(True)
    loss_fn(x).backward()
    rng = np.random.default_rng(seed)
    h = 1e-6
    worst = 0.0
    for _ in range(50):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        with torch.no_grad():
            xp = x.detach().clone()
            xp[idx] += h
            xm = x.detach().clone()
            xm[idx] -= h
            fd = (float(loss_fn(xp)) - float(loss_fn(xm))) / (2 * h)
        analytic = float(x.grad[idx])
        scale = max(abs(fd), abs(analytic), 1e-4)
        worst = max(worst, abs(fd - analytic) / scale)
    return worst


def test_04_loss_gradient_checks():
    torch.manual_seed(4)
    target = (torch.rand(1, 8, 8) > 0.5).long()
    seg_logits = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    seg_worst = _fd_check(lambda x: seg_loss(x, target), seg_logits, seed=40)

    teacher = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    student = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    kd_worst = _fd_check(lambda x: kd_loss(x, teacher), student, seed=41)
    record(
        seg_worst < 1e-3 and kd_worst < 1e-3,
        "04 loss gradient checks",
        f"worst rel err: seg {seg_worst:.2e}, kd {kd_worst:.2e} (50 coords each, 8x8)",
    )


def test_05_gradient_partition():
    specialist = build_specialist(SpecialistConfig(in_channels=1, base_width=4, depth=2), seed=1)
    generalist = build_generalist(small_generalist_config(), seed=2)
    pool = generate_synthetic_dataset(24, (32, 32), "blob", noise_level=0.3, seed=77)
    iterator = MixedBatchIterator(split_pool(pool, 0.5, seed=77), 2, 2, seed=13)
    schedule = RampUpSchedule(t_max=50)

    def total_grad(params) -> float:
        return sum(float(p.grad.abs().sum()) for p in params if p.grad is not None)

    leaked = 0.0
    for t in range(10):
        out = step_sc_sam(
            iterator.batch_at(t), specialist, generalist, schedule, t, np.random.default_rng(t)
        )
        for model in (specialist, generalist):
            for p in model.parameters():
                p.grad = None
        out.components["unsup_gen_from_spec"].backward(retain_graph=True)
        leaked = max(leaked, total_grad(specialist.parameters()))
        for model in (specialist, generalist):
            for p in model.parameters():
                p.grad = None
        out.components["unsup_spec_from_gen"].backward(retain_graph=True)
        leaked = max(leaked, total_grad(generalist.trainable_parameters()))
    record(
        leaked == 0.0,
        "05 gradient partition",
        f"cross-term gradient leaked onto the other model: {leaked} (10 batches, must be exactly 0)",
    )


def test_06_freezing_contract():
    generalist = build_generalist(small_generalist_config(), seed=5)
    pool = generate_synthetic_dataset(16, (32, 32), "blob", noise_level=0.2, seed=55)
    iterator = MixedBatchIterator(split_pool(pool, 1.0, seed=55), 4, 0, seed=21)
    optimizer = torch.optim.Adam(generalist.trainable_parameters(), lr=1e-3)

    before = {n: p.detach().clone() for n, p in generalist.named_parameters()}
    for t in range(100):
        out = step_peft_sam(iterator.batch_at(t), generalist, np.random.default_rng([5, t]))
        optimizer.zero_grad(set_to_none=True)
        out.total_loss.backward()
        optimizer.step()

    frozen_intact = all(
        torch.equal(before[n], p) for n, p in generalist.named_parameters() if not p.requires_grad
    )
    changed = {"adapter": False, "prompt_encoder.": False, "decoders.": False}
    for key in changed:
        changed[key] = any(
            not torch.equal(before[n], p)
            for n, p in generalist.named_parameters()
            if key in n and p.requires_grad
        )
    record(
        frozen_intact and all(changed.values()),
        "06 freezing contract",
        f"base bit-identical after 100 steps: {frozen_intact}; "
        f"changed adapter/prompt/decoder: {changed['adapter']}/{changed['prompt_encoder.']}/{changed['decoders.']}",
    )


def test_07_prompt_sampling_contract():
    rng = np.random.default_rng(7)
    failures = []
    for i in range(1000):
        if i % 50 == 0:
            mask = np.zeros((32, 32), dtype=np.uint8)
        elif i % 50 == 1:
            mask = np.ones((32, 32), dtype=np.uint8)
        else:
            mask = (rng.random((32, 32)) < rng.uniform(0.0, 1.0)).astype(np.uint8)
        prompt = sample_points(mask, 5, 5, rng)
        fg = [(y, x) for y, x, label in prompt.points if label == 1]
        bg = [(y, x) for y, x, label in prompt.points if label == 0]
        want_fg = min(5, int(mask.sum()))
        want_bg = min(5, int(mask.size - mask.sum()))
        ok = (
            len(fg) == want_fg
            and len(bg) == want_bg
            and len(set(fg)) == len(fg)
            and len(set(bg)) == len(bg)
            and all(mask[y, x] == 1 for y, x in fg)
            and all(mask[y, x] == 0 for y, x in bg)
        )
        if not ok:
            failures.append(i)
    record(
        not failures,
        "07 prompt sampling contract",
        f"{1000 - len(failures)}/1000 masks honored 5+5 and degenerate rules"
        + (f"; first failures {failures[:5]}" if failures else ""),
    )


PROTOCOL_VARIANTS = (
    ("peft", "peft_sam", True),
    ("dual", "dual_sam", True),
    ("sc", "sc_sam", True),
    ("sc_noramp", "sc_sam", False),
)
PROTOCOL_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def directional_protocol(tmp_path_factory):
    """Train all four strategies for 3 seeds on the shared 48x48 benchmark.

    Warm starts are cached per seed so every strategy begins from the same
    generalist weights; the comparison is paired."""
    root = tmp_path_factory.mktemp("directional")
    base = ExperimentConfig.from_yaml(str(CONFIG_DIR / "bench_48.yaml"))
    dice: dict[tuple[str, int], float] = {}
    max_minutes = 0.0
    print(flush=True)
    for seed in PROTOCOL_SEEDS:
        for name, kind, ramp in PROTOCOL_VARIANTS:
            config = base.with_overrides(
                strategy={"kind": kind, "ramp_up_enabled": ramp},
                generalist={"num_decoders": 2 if kind == "dual_sam" else 1},
                run={
                    "seed": seed,
                    "output_dir": str(root / f"{name}_seed{seed}"),
                    "unlabeled_per_batch": 0 if kind == "peft_sam" else base.run.unlabeled_per_batch,
                },
            ).validate()
            start = time.perf_counter()
            result = train_experiment(config, warm_start_cache=str(root / "warm"))
            minutes = (time.perf_counter() - start) / 60.0
            max_minutes = max(max_minutes, minutes)
            dice[(name, seed)] = result.final_summary["dice_mean"]
            print(
                f"  protocol {name} seed {seed}: dice {dice[(name, seed)]:.4f} ({minutes:.1f} min)",
                flush=True,
            )
    means = {
        name: float(np.mean([dice[(name, s)] for s in PROTOCOL_SEEDS]))
        for name, _, _ in PROTOCOL_VARIANTS
    }
    return SimpleNamespace(dice=dice, means=means, max_minutes=max_minutes)


def _per_seed(protocol, name: str) -> str:
    return "/".join(f"{protocol.dice[(name, s)]:.4f}" for s in PROTOCOL_SEEDS)


def test_08_directional_method_claim(directional_protocol):
    means = directional_protocol.means
    margin_peft = means["sc"] - means["peft"]
    margin_dual = means["sc"] - means["dual"]
    ok = margin_peft >= 0.02 and margin_dual >= 0.0 and directional_protocol.max_minutes <= 30.0
    record(
        ok,
        "08 directional method claim",
        f"mean dice over seeds {PROTOCOL_SEEDS}: sc {means['sc']:.4f}, peft {means['peft']:.4f}, "
        f"dual {means['dual']:.4f}; sc-peft {margin_peft:+.4f} (need >= +0.02), "
        f"sc-dual {margin_dual:+.4f} (need >= 0); per-seed sc {_per_seed(directional_protocol, 'sc')}, "
        f"peft {_per_seed(directional_protocol, 'peft')}, dual {_per_seed(directional_protocol, 'dual')}; "
        f"benchmark configs/bench_48.yaml, slowest run {directional_protocol.max_minutes:.1f} min",
    )


def test_09_ablation_direction(directional_protocol):
    means = directional_protocol.means
    margin = means["sc"] - means["sc_noramp"]
    record(
        margin > 0.0,
        "09 ablation direction (ramp-up)",
        f"mean dice with ramp {means['sc']:.4f} vs without {means['sc_noramp']:.4f} "
        f"({margin:+.4f}, must be strictly positive); per-seed with "
        f"{_per_seed(directional_protocol, 'sc')}, without {_per_seed(directional_protocol, 'sc_noramp')}",
    )


def _mini_config(output_dir: str) -> ExperimentConfig:
    base = ExperimentConfig.from_yaml(str(CONFIG_DIR / "bench_48.yaml"))
    return base.with_overrides(
        data={"num_eval": 8},
        run={
            "iterations": 30,
            "warm_start_iterations": 5,
            "checkpoint_interval": 10,
            "eval_interval": 1000,
            "log_interval": 1,
            "output_dir": output_dir,
        },
    ).validate()


def test_10_determinism(tmp_path):
    result_a = train_experiment(_mini_config(str(tmp_path / "a")))
    result_b = train_experiment(_mini_config(str(tmp_path / "b")))
    log_a = (Path(result_a.output_dir) / "loss_log.csv").read_bytes()
    log_b = (Path(result_b.output_dir) / "loss_log.csv").read_bytes()
    record(
        log_a == log_b,
        "10 determinism",
        f"identical config+seed loss CSVs byte-identical: {log_a == log_b} "
        f"({len(result_a.loss_rows)} logged steps)",
    )


def test_11_resume_equivalence(tmp_path, monkeypatch):
    straight = train_experiment(_mini_config(str(tmp_path / "straight")))

    import cotrainseg.training as training
    from cotrainseg.strategies import run_step as real_run_step

    def interrupt(strategy, bundle, batch, t, rng):
        if t == 15:
            raise RuntimeError("simulated interruption")
        return real_run_step(strategy, bundle, batch, t, rng)

    config = _mini_config(str(tmp_path / "resumed"))
    with monkeypatch.context() as patched:
        patched.setattr(training, "run_step", interrupt)
        with pytest.raises(RuntimeError, match="simulated interruption"):
            train_experiment(config)
    resumed = train_experiment(config, resume=True)

    final_straight = float(straight.loss_rows[-1]["total"])
    final_resumed = float(resumed.loss_rows[-1]["total"])
    diff = abs(final_straight - final_resumed)
    record(
        diff < 1e-5,
        "11 resume equivalence",
        f"final loss straight {final_straight:.8f} vs resumed {final_resumed:.8f} "
        f"(|diff| {diff:.1e}, tolerance 1e-5; interrupted at step 15 of 30)",
    )
