"""Data model, synthetic benchmark generation, directory loading, and augmentation.

Images are float32 arrays of shape (C, H, W) with values in [0, 1]; masks are
uint8 arrays of shape (H, W) with values in {0, 1}. Dataset objects are plain
immutable containers; all randomness flows through explicit seeds so that
splits, generated data, and batch composition are reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import map_coordinates

Sample = tuple[np.ndarray, np.ndarray]

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

SHAPE_FAMILIES = ("blob", "ring", "polyp_like")


def validate_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"image must have shape (C, H, W) with C in {{1, 3}}, got {image.shape}")
    if image.shape[1] <= 0 or image.shape[2] <= 0:
        raise ValueError(f"image spatial dims must be positive, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return image


def validate_mask(mask: np.ndarray, image: np.ndarray | None = None) -> np.ndarray:
    if mask.ndim != 2:
        raise ValueError(f"mask must have shape (H, W), got {mask.shape}")
    values = np.unique(mask)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError(f"mask must be binary, found values {values}")
    if image is not None and mask.shape != image.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[1:]}")
    return mask


@dataclass(frozen=True)
class DatasetSplit:
    """Labeled pool (image, mask) plus unlabeled pool (image only)."""

    labeled: list[Sample]
    unlabeled: list[np.ndarray]
    labeled_ratio: float

    @property
    def num_labeled(self) -> int:
        return len(self.labeled)

    @property
    def num_unlabeled(self) -> int:
        return len(self.unlabeled)


@dataclass(frozen=True)
class AugmentationConfig:
    """Parameters of the augmentation pipeline.

    The strong pipeline applies every transform the weak one does, plus grid
    distortion and a harsher shift-scale-rotate range.
    """

    strength: str = "weak"
    flip_prob: float = 0.5
    brightness_contrast_prob: float = 0.5
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    shift_scale_rotate_prob: float = 0.5
    shift_limit: float = 0.08
    scale_limit: float = 0.12
    rotate_limit: float = 20.0
    dropout_prob: float = 0.3
    dropout_holes: int = 4
    dropout_size: float = 0.1
    grid_distortion_prob: float = 0.0
    grid_num_steps: int = 4
    grid_magnitude: float = 0.12

    @staticmethod
    def weak() -> "AugmentationConfig":
        return AugmentationConfig(strength="weak")

    @staticmethod
    def strong() -> "AugmentationConfig":
        return AugmentationConfig(
            strength="strong",
            shift_limit=0.12,
            scale_limit=0.18,
            rotate_limit=30.0,
            grid_distortion_prob=0.5,
        )

    @staticmethod
    def disabled() -> "AugmentationConfig":
        return AugmentationConfig(
            strength="weak",
            flip_prob=0.0,
            brightness_contrast_prob=0.0,
            shift_scale_rotate_prob=0.0,
            dropout_prob=0.0,
            grid_distortion_prob=0.0,
        )

    def geometric_only(self) -> "AugmentationConfig":
        return replace(self, brightness_contrast_prob=0.0, dropout_prob=0.0)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, int], cells: int = 8) -> np.ndarray:
    """Smooth random field in [0, 1] from a bilinearly upsampled coarse grid."""
    coarse = rng.random((cells, cells))
    h, w = shape
    ii = np.linspace(0, cells - 1, h)
    jj = np.linspace(0, cells - 1, w)
    grid = np.meshgrid(ii, jj, indexing="ij")
    return map_coordinates(coarse, grid, order=1, mode="nearest")


def _star_shape_mask(
    rng: np.random.Generator,
    shape: tuple[int, int],
    center: tuple[float, float],
    radius: float,
    wobble: float = 0.12,
) -> np.ndarray:
    """Rasterize a smooth star-convex region with a random radial profile."""
    h, w = shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy = ii - center[0]
    dx = jj - center[1]
    dist = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    profile = np.ones_like(theta)
    for k in range(2, 6):
        amp = rng.uniform(-wobble, wobble) / (k - 1)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        profile = profile + amp * np.cos(k * theta + phase)
    return (dist <= radius * profile).astype(np.uint8)


def _sample_shape(
    rng: np.random.Generator, shape: tuple[int, int], family: str
) -> np.ndarray:
    h, w = shape
    scale = min(h, w)
    cy = rng.uniform(0.32, 0.68) * h
    cx = rng.uniform(0.32, 0.68) * w
    radius = rng.uniform(0.16, 0.30) * scale
    if family == "blob":
        return _star_shape_mask(rng, shape, (cy, cx), radius)
    if family == "ring":
        outer = _star_shape_mask(rng, shape, (cy, cx), radius)
        inner = _star_shape_mask(rng, shape, (cy, cx), radius * rng.uniform(0.35, 0.55))
        return (outer & ~inner.astype(bool)).astype(np.uint8)
    if family == "polyp_like":
        body = _star_shape_mask(rng, shape, (cy, cx), radius)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        bump_c = (cy + radius * np.sin(angle), cx + radius * np.cos(angle))
        bump = _star_shape_mask(rng, shape, bump_c, radius * rng.uniform(0.35, 0.6))
        return (body.astype(bool) | bump.astype(bool)).astype(np.uint8)
    raise ValueError(f"unknown shape family {family!r}; expected one of {SHAPE_FAMILIES}")


def generate_synthetic_dataset(
    count: int,
    image_size: tuple[int, int] = (128, 128),
    shape_family: str = "blob",
    noise_level: float = 0.1,
    seed: int = 0,
    channels: int = 1,
) -> list[Sample]:
    """Generate images of one random smooth foreground shape over a textured
    background, together with the exact rasterized mask.

    At ``noise_level == 0`` the background stays strictly below 0.5 and the
    foreground strictly above, so thresholding the image at 0.5 recovers the
    mask exactly. Deterministic for a fixed seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    h, w = image_size
    if h < 32 or w < 32:
        raise ValueError("image size must be at least 32x32")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    rng = np.random.default_rng(seed)
    samples: list[Sample] = []
    for _ in range(count):
        mask = _sample_shape(rng, (h, w), shape_family)
        while not mask.any():  # degenerate ring draw; resample
            mask = _sample_shape(rng, (h, w), shape_family)
        background = 0.05 + 0.40 * _smooth_noise(rng, (h, w))
        fg_base = rng.uniform(0.62, 0.88)
        foreground = np.clip(fg_base + 0.07 * (_smooth_noise(rng, (h, w)) - 0.5), 0.55, 0.95)
        intensity = np.where(mask.astype(bool), foreground, background)
        image = np.repeat(intensity[None], channels, axis=0)
        if channels == 3:
            image = image * rng.uniform(0.85, 1.0, size=(3, 1, 1))
        if noise_level > 0:
            image = image + noise_level * rng.standard_normal(image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        samples.append((image, mask))
    return samples


def split_pool(
    pool: list[Sample], labeled_ratio: float, seed: int
) -> DatasetSplit:
    """Deterministically split a pool into labeled/unlabeled disjoint sets."""
    if not 0.0 < labeled_ratio <= 1.0:
        raise ValueError("labeled_ratio must lie in (0, 1]")
    if not pool:
        raise ValueError("cannot split an empty pool")
    order = np.random.default_rng(seed).permutation(len(pool))
    n_labeled = max(1, int(np.floor(labeled_ratio * len(pool))))
    labeled = [pool[i] for i in order[:n_labeled]]
    unlabeled = [pool[i][0] for i in order[n_labeled:]]
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, labeled_ratio=labeled_ratio)


# ---------------------------------------------------------------------------
# Directory loading / saving
# ---------------------------------------------------------------------------


def _load_image_file(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr[..., :3].transpose(2, 0, 1)
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        arr = (arr - lo) / (hi - lo)
    else:
        arr = np.zeros_like(arr)
    return arr


def _load_mask_file(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 255))):
        raise ValueError(f"mask {path} is not binary 0/255, found values {values.tolist()}")
    return (arr > 127).astype(np.uint8)


def _read_manifest(path: Path) -> dict[str, str]:
    tags = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, tag = line.split()
        tags[name] = tag
    return tags


def load_directory_dataset(
    root_path: str | os.PathLike,
    labeled_ratio: float,
    seed: int,
    subset: str | None = None,
) -> DatasetSplit:
    """Load filename-matched images/ and masks/ pairs and split them.

    An optional ``split.txt`` manifest (one "filename tag" pair per line)
    restricts loading to the files tagged ``subset`` when given.
    """
    root = Path(root_path)
    image_dir = root / "images"
    mask_dir = root / "masks"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"missing images directory: {image_dir}")
    names = sorted(p.name for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if subset is not None:
        manifest_path = root / "split.txt"
        if not manifest_path.is_file():
            raise FileNotFoundError(f"subset={subset!r} requested but {manifest_path} does not exist")
        tags = _read_manifest(manifest_path)
        names = [n for n in names if tags.get(n) == subset]
    if not names:
        raise ValueError(f"no images found under {image_dir}" + (f" for subset {subset!r}" if subset else ""))
    pool: list[Sample] = []
    for name in names:
        mask_path = mask_dir / (Path(name).stem + ".png")
        if not mask_path.is_file():
            raise FileNotFoundError(f"no mask for image {name}: expected {mask_path}")
        image = _load_image_file(image_dir / name)
        mask = _load_mask_file(mask_path)
        if mask.shape != image.shape[1:]:
            raise ValueError(f"mask shape {mask.shape} does not match image {name} {image.shape[1:]}")
        pool.append((image, mask))
    return split_pool(pool, labeled_ratio, seed)


def save_directory_dataset(samples: list[Sample], out_dir: str | os.PathLike) -> None:
    """Serialize samples to the images/ + masks/ PNG layout the loader reads."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i, (image, mask) in enumerate(samples):
        name = f"{i:05d}.png"
        arr = np.clip(image * 255.0, 0, 255).astype(np.uint8)
        if arr.shape[0] == 1:
            Image.fromarray(arr[0]).save(out / "images" / name)
        else:
            Image.fromarray(arr.transpose(1, 2, 0)).save(out / "images" / name)
        Image.fromarray((mask.astype(np.uint8) * 255)).save(out / "masks" / name)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def _upsample_field(coarse: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    gi = np.linspace(0, coarse.shape[0] - 1, h)
    gj = np.linspace(0, coarse.shape[1] - 1, w)
    grid = np.meshgrid(gi, gj, indexing="ij")
    return map_coordinates(coarse, grid, order=1, mode="nearest")


def _geometric_source_coords(
    shape: tuple[int, int], config: AugmentationConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray] | None:
    """Compose one output->source sampling map for every fired geometric op.

    Returns None when no geometric op fired, so callers can skip resampling
    entirely (exact identity).
    """
    h, w = shape
    si, sj = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    fired = False

    if config.grid_distortion_prob > 0 and rng.random() < config.grid_distortion_prob:
        g = config.grid_num_steps + 1
        mag = config.grid_magnitude * min(h, w) / config.grid_num_steps
        di = _upsample_field(rng.uniform(-mag, mag, size=(g, g)), shape)
        dj = _upsample_field(rng.uniform(-mag, mag, size=(g, g)), shape)
        si, sj = si + di, sj + dj
        fired = True

    if config.shift_scale_rotate_prob > 0 and rng.random() < config.shift_scale_rotate_prob:
        shift_y = rng.uniform(-config.shift_limit, config.shift_limit) * h
        shift_x = rng.uniform(-config.shift_limit, config.shift_limit) * w
        scale = 1.0 + rng.uniform(-config.scale_limit, config.scale_limit)
        angle = np.deg2rad(rng.uniform(-config.rotate_limit, config.rotate_limit))
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        # inverse mapping of rotate+scale about center followed by shift
        yy = (si - cy - shift_y) / scale
        xx = (sj - cx - shift_x) / scale
        cos_a, sin_a = np.cos(angle), np.sin(angle)
        si = cos_a * yy + sin_a * xx + cy
        sj = -sin_a * yy + cos_a * xx + cx
        fired = True

    if config.flip_prob > 0 and rng.random() < config.flip_prob:
        sj = (w - 1) - sj
        fired = True

    return (si, sj) if fired else None


def augment(
    image: np.ndarray,
    mask: np.ndarray | None,
    config: AugmentationConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply the configured pipeline; geometric ops hit image and mask with the
    same sampling map, photometric ops touch the image only.

    The mask is warped by thresholding the bilinearly warped indicator at 0.5,
    so it stays binary and matches the image warp exactly.
    """
    h, w = image.shape[1], image.shape[2]
    coords = _geometric_source_coords((h, w), config, rng)
    if coords is not None:
        si, sj = coords
        image = np.stack(
            [
                map_coordinates(c.astype(np.float64), [si, sj], order=1, mode="constant", cval=0.0)
                for c in image
            ]
        )
        if mask is not None:
            warped = map_coordinates(
                mask.astype(np.float64), [si, sj], order=1, mode="constant", cval=0.0
            )
            mask = (warped > 0.5).astype(np.uint8)

    if config.brightness_contrast_prob > 0 and rng.random() < config.brightness_contrast_prob:
        alpha = 1.0 + rng.uniform(-config.contrast_limit, config.contrast_limit)
        beta = rng.uniform(-config.brightness_limit, config.brightness_limit)
        image = alpha * (image - 0.5) + 0.5 + beta

    if config.dropout_prob > 0 and rng.random() < config.dropout_prob:
        image = image.copy()
        hole_h = max(1, int(config.dropout_size * h))
        hole_w = max(1, int(config.dropout_size * w))
        for _ in range(config.dropout_holes):
            y = rng.integers(0, h - hole_h + 1)
            x = rng.integers(0, w - hole_w + 1)
            image[:, y : y + hole_h, x : x + hole_w] = 0.0

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, mask


# ---------------------------------------------------------------------------
# Batch iteration
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """One mixed training batch, already augmented and tensorized."""

    labeled_images: torch.Tensor  # (L, C, H, W) float32
    labeled_masks: torch.Tensor  # (L, H, W) int64
    unlabeled_images: torch.Tensor  # (U, C, H, W) float32
    step: int = 0

    @property
    def num_labeled(self) -> int:
        return int(self.labeled_images.shape[0])

    @property
    def num_unlabeled(self) -> int:
        return int(self.unlabeled_images.shape[0])


class MixedBatchIterator:
    """Yields batches with a fixed labeled/unlabeled composition.

    Each pool is consumed through per-epoch seeded permutations, so the
    smaller pool cycles with reshuffling. The batch at step t is a pure
    function of (seed, t), which keeps resumed runs identical to
    straight-through runs.
    """

    def __init__(
        self,
        split: DatasetSplit,
        labeled_per_batch: int,
        unlabeled_per_batch: int,
        seed: int,
        weak: AugmentationConfig | None = None,
        strong: AugmentationConfig | None = None,
    ):
        if labeled_per_batch < 1:
            raise ValueError("labeled_per_batch must be >= 1")
        if unlabeled_per_batch < 0:
            raise ValueError("unlabeled_per_batch must be >= 0")
        if unlabeled_per_batch > 0 and split.num_unlabeled == 0:
            raise ValueError("requested unlabeled samples but the split has none")
        self.split = split
        self.labeled_per_batch = labeled_per_batch
        self.unlabeled_per_batch = unlabeled_per_batch
        self.seed = seed
        self.weak = weak if weak is not None else AugmentationConfig.weak()
        self.strong = strong if strong is not None else AugmentationConfig.strong()
        self._step = 0

    def _pool_index(self, stream: int, pool_size: int, position: int) -> int:
        epoch = position // pool_size
        perm = np.random.default_rng([self.seed, stream, epoch]).permutation(pool_size)
        return int(perm[position % pool_size])

    def batch_at(self, step: int) -> Batch:
        if step < 0:
            raise ValueError("step must be >= 0")
        lab_images, lab_masks, unl_images = [], [], []
        for slot in range(self.labeled_per_batch):
            idx = self._pool_index(0, self.split.num_labeled, step * self.labeled_per_batch + slot)
            image, mask = self.split.labeled[idx]
            rng = np.random.default_rng([self.seed, 2, step, slot])
            image, mask = augment(image, mask, self.weak, rng)
            lab_images.append(image)
            lab_masks.append(mask)
        for slot in range(self.unlabeled_per_batch):
            idx = self._pool_index(1, self.split.num_unlabeled, step * self.unlabeled_per_batch + slot)
            image = self.split.unlabeled[idx]
            rng = np.random.default_rng([self.seed, 3, step, slot])
            image, _ = augment(image, None, self.strong, rng)
            unl_images.append(image)
        c, h, w = lab_images[0].shape
        unl = (
            torch.from_numpy(np.stack(unl_images))
            if unl_images
            else torch.zeros((0, c, h, w), dtype=torch.float32)
        )
        return Batch(
            labeled_images=torch.from_numpy(np.stack(lab_images)),
            labeled_masks=torch.from_numpy(np.stack(lab_masks).astype(np.int64)),
            unlabeled_images=unl,
            step=step,
        )

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        batch = self.batch_at(self._step)
        self._step += 1
        return batch


def make_batch_iterator(
    split: DatasetSplit,
    labeled_per_batch: int,
    unlabeled_per_batch: int,
    seed: int,
    weak: AugmentationConfig | None = None,
    strong: AugmentationConfig | None = None,
) -> MixedBatchIterator:
    return MixedBatchIterator(split, labeled_per_batch, unlabeled_per_batch, seed, weak, strong)


def to_image_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))


def to_mask_tensor(mask: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(mask, dtype=np.int64))
