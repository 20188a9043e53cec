"""Data pipeline tests: synthetic generation, splitting, augmentation,
batch composition, and the on-disk directory format.

The frozen foreground-fraction value below was produced by a reference run of
the generator (200 blobs at 64x64, noise 0.1, seed 3) and guards against
accidental changes to the shape sampler or its RNG consumption order.
"""

import numpy as np
import pytest
import torch

from cotrainseg import (
    AugmentationConfig,
    MixedBatchIterator,
    augment,
    generate_synthetic_dataset,
    load_directory_dataset,
    save_directory_dataset,
    split_pool,
)

GOLDEN_FG_FRACTION = 0.173480224609375


class TestSyntheticGeneration:
    def test_shapes_dtypes_ranges(self):
        samples = generate_synthetic_dataset(5, (32, 48), "polyp_like", 0.3, seed=0)
        assert len(samples) == 5
        for image, mask in samples:
            assert image.shape == (1, 32, 48) and image.dtype == np.float32
            assert mask.shape == (32, 48) and mask.dtype == np.uint8
            assert 0.0 <= image.min() and image.max() <= 1.0
            assert set(np.unique(mask)) <= {0, 1}
            assert mask.any()

    def test_deterministic_for_seed(self):
        a = generate_synthetic_dataset(3, (32, 32), "ring", 0.2, seed=9)
        b = generate_synthetic_dataset(3, (32, 32), "ring", 0.2, seed=9)
        for (ia, ma), (ib, mb) in zip(a, b):
            assert np.array_equal(ia, ib) and np.array_equal(ma, mb)

    def test_different_seeds_differ(self):
        a = generate_synthetic_dataset(1, (32, 32), "blob", 0.2, seed=1)[0][0]
        b = generate_synthetic_dataset(1, (32, 32), "blob", 0.2, seed=2)[0][0]
        assert not np.array_equal(a, b)

    def test_zero_noise_threshold_recovers_mask(self):
        samples = generate_synthetic_dataset(6, (32, 32), "blob", 0.0, seed=4)
        for image, mask in samples:
            assert np.array_equal((image[0] > 0.5).astype(np.uint8), mask)

    def test_golden_foreground_fraction(self):
        samples = generate_synthetic_dataset(200, (64, 64), "blob", 0.1, seed=3)
        frac = float(np.mean([mask.mean() for _, mask in samples]))
        assert frac == pytest.approx(GOLDEN_FG_FRACTION, abs=1e-12)

    def test_three_channel_images(self):
        samples = generate_synthetic_dataset(2, (32, 32), "blob", 0.1, seed=5, channels=3)
        assert samples[0][0].shape == (3, 32, 32)

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            generate_synthetic_dataset(0, (32, 32), "blob", 0.1, seed=0)
        with pytest.raises(ValueError):
            generate_synthetic_dataset(1, (16, 16), "blob", 0.1, seed=0)
        with pytest.raises(ValueError):
            generate_synthetic_dataset(1, (32, 32), "hexagon", 0.1, seed=0)


class TestSplitPool:
    def test_disjoint_and_complete(self):
        pool = generate_synthetic_dataset(20, (32, 32), "blob", 0.1, seed=6)
        split = split_pool(pool, 0.25, seed=0)
        assert split.num_labeled == 5
        assert split.num_unlabeled == 15
        labeled_ids = {id(img) for img, _ in split.labeled}
        unlabeled_ids = {id(img) for img in split.unlabeled}
        assert not labeled_ids & unlabeled_ids

    def test_floor_with_minimum_one(self):
        pool = generate_synthetic_dataset(10, (32, 32), "blob", 0.1, seed=7)
        assert split_pool(pool, 0.05, seed=0).num_labeled == 1  # floor(0.5) -> min 1
        assert split_pool(pool, 0.39, seed=0).num_labeled == 3
        assert split_pool(pool, 1.0, seed=0).num_unlabeled == 0

    def test_deterministic(self):
        pool = generate_synthetic_dataset(12, (32, 32), "blob", 0.1, seed=8)
        a = split_pool(pool, 0.5, seed=3)
        b = split_pool(pool, 0.5, seed=3)
        assert all(np.array_equal(x[0], y[0]) for x, y in zip(a.labeled, b.labeled))

    def test_rejects_bad_ratio(self):
        pool = generate_synthetic_dataset(4, (32, 32), "blob", 0.1, seed=9)
        for ratio in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                split_pool(pool, ratio, seed=0)


class TestAugment:
    def _sample(self, seed=10):
        image, mask = generate_synthetic_dataset(1, (32, 32), "blob", 0.0, seed=seed)[0]
        return image, mask

    def test_disabled_is_identity(self):
        image, mask = self._sample()
        out_img, out_mask = augment(image, mask, AugmentationConfig.disabled(), np.random.default_rng(0))
        assert np.array_equal(out_img, image)
        assert np.array_equal(out_mask, mask)

    def test_deterministic_given_rng(self):
        image, mask = self._sample()
        cfg = AugmentationConfig.strong()
        a = augment(image, mask, cfg, np.random.default_rng(33))
        b = augment(image, mask, cfg, np.random.default_rng(33))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_mask_stays_binary(self):
        image, mask = self._sample()
        cfg = AugmentationConfig.strong()
        for seed in range(10):
            _, out_mask = augment(image, mask, cfg, np.random.default_rng(seed))
            assert set(np.unique(out_mask)) <= {0, 1}

    def test_geometric_consistency_invariant(self):
        # warping the float mask as an image and thresholding at 0.5 must give
        # exactly the warped binary mask, for purely geometric configs
        _, mask = self._sample()
        cfg = AugmentationConfig.strong().geometric_only()
        indicator = mask.astype(np.float32)[None]
        for seed in range(20):
            warped_img, warped_mask = augment(indicator, mask, cfg, np.random.default_rng(seed))
            assert np.array_equal((warped_img[0] > 0.5).astype(np.uint8), warped_mask)

    def test_photometric_leaves_mask_alone(self):
        image, mask = self._sample()
        cfg = AugmentationConfig(
            flip_prob=0.0,
            brightness_limit=0.3,
            contrast_limit=0.3,
            shift_scale_rotate_prob=0.0,
            dropout_prob=0.0,
            grid_distortion_prob=0.0,
        )
        out_img, out_mask = augment(image, mask, cfg, np.random.default_rng(3))
        assert np.array_equal(out_mask, mask)
        assert not np.array_equal(out_img, image)

    def test_image_without_mask(self):
        image, _ = self._sample()
        out_img, out_mask = augment(image, None, AugmentationConfig.strong(), np.random.default_rng(4))
        assert out_mask is None
        assert out_img.shape == image.shape

    def test_values_stay_in_unit_range(self):
        image, mask = self._sample()
        cfg = AugmentationConfig.strong()
        for seed in range(10):
            out_img, _ = augment(image, mask, cfg, np.random.default_rng(seed))
            assert out_img.min() >= 0.0 and out_img.max() <= 1.0


class TestMixedBatchIterator:
    def _split(self, n=12, ratio=0.5, seed=11):
        pool = generate_synthetic_dataset(n, (32, 32), "blob", 0.2, seed=seed)
        return split_pool(pool, ratio, seed=seed)

    def test_composition_and_types(self):
        it = MixedBatchIterator(self._split(), 3, 2, seed=0)
        batch = it.batch_at(0)
        assert batch.labeled_images.shape == (3, 1, 32, 32)
        assert batch.labeled_images.dtype == torch.float32
        assert batch.labeled_masks.shape == (3, 32, 32)
        assert batch.labeled_masks.dtype == torch.int64
        assert batch.unlabeled_images.shape == (2, 1, 32, 32)

    def test_batch_at_is_pure(self):
        it = MixedBatchIterator(self._split(), 2, 2, seed=1)
        a = it.batch_at(7)
        b = it.batch_at(7)
        assert torch.equal(a.labeled_images, b.labeled_images)
        assert torch.equal(a.labeled_masks, b.labeled_masks)
        assert torch.equal(a.unlabeled_images, b.unlabeled_images)

    def test_iterator_protocol_matches_batch_at(self):
        it1 = MixedBatchIterator(self._split(), 2, 1, seed=2)
        it2 = MixedBatchIterator(self._split(), 2, 1, seed=2)
        for t in range(3):
            nxt = next(it1)
            direct = it2.batch_at(t)
            assert torch.equal(nxt.labeled_images, direct.labeled_images)

    def test_small_pool_cycles_with_reshuffle(self):
        split = self._split(n=8, ratio=0.25)  # 2 labeled images
        it = MixedBatchIterator(
            split, 1, 0, seed=3, weak=AugmentationConfig.disabled()
        )
        seen = [it.batch_at(t).labeled_images for t in range(4)]
        # one epoch is 2 steps; both pool items must appear in each epoch
        first_epoch = {seen[0].sum().item(), seen[1].sum().item()}
        second_epoch = {seen[2].sum().item(), seen[3].sum().item()}
        assert first_epoch == second_epoch
        assert len(first_epoch) == 2

    def test_unlabeled_requested_but_absent(self):
        split = self._split(ratio=1.0)
        with pytest.raises(ValueError):
            MixedBatchIterator(split, 2, 2, seed=0)

    def test_zero_unlabeled_allowed(self):
        it = MixedBatchIterator(self._split(), 2, 0, seed=0)
        batch = it.batch_at(0)
        assert batch.num_unlabeled == 0
        assert batch.unlabeled_images.shape[0] == 0

    def test_seed_changes_batches(self):
        split = self._split()
        a = MixedBatchIterator(split, 2, 2, seed=0).batch_at(0)
        b = MixedBatchIterator(split, 2, 2, seed=1).batch_at(0)
        assert not torch.equal(a.labeled_images, b.labeled_images)


class TestDirectoryFormat:
    def test_save_load_round_trip(self, tmp_path):
        samples = generate_synthetic_dataset(6, (32, 32), "blob", 0.2, seed=12)
        save_directory_dataset(samples, tmp_path)
        split = load_directory_dataset(tmp_path, labeled_ratio=1.0, seed=0)
        assert split.num_labeled == 6
        originals = {mask.tobytes(): img for img, mask in samples}
        for image, mask in split.labeled:
            assert mask.tobytes() in originals
            # PNG stores 8-bit; loader renormalizes per image
            assert image.shape == (1, 32, 32)
            assert 0.0 <= image.min() and image.max() <= 1.0

    def test_non_binary_mask_rejected(self, tmp_path):
        from PIL import Image

        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(tmp_path / "images" / "a.png")
        Image.fromarray(np.full((8, 8), 127, dtype=np.uint8)).save(tmp_path / "masks" / "a.png")
        with pytest.raises(ValueError):
            load_directory_dataset(tmp_path, labeled_ratio=1.0, seed=0)

    def test_missing_mask_rejected(self, tmp_path):
        from PIL import Image

        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(tmp_path / "images" / "a.png")
        with pytest.raises(FileNotFoundError):
            load_directory_dataset(tmp_path, labeled_ratio=1.0, seed=0)

    def test_subset_manifest(self, tmp_path):
        samples = generate_synthetic_dataset(4, (32, 32), "blob", 0.2, seed=13)
        save_directory_dataset(samples, tmp_path)
        (tmp_path / "split.txt").write_text(
            "00000.png train\n00001.png train\n00002.png eval\n00003.png eval\n"
        )
        train = load_directory_dataset(tmp_path, 1.0, seed=0, subset="train")
        evalset = load_directory_dataset(tmp_path, 1.0, seed=0, subset="eval")
        assert train.num_labeled == 2 and evalset.num_labeled == 2

    def test_subset_without_manifest_rejected(self, tmp_path):
        samples = generate_synthetic_dataset(2, (32, 32), "blob", 0.2, seed=14)
        save_directory_dataset(samples, tmp_path)
        with pytest.raises(FileNotFoundError):
            load_directory_dataset(tmp_path, 1.0, seed=0, subset="train")
