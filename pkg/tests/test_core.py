import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import dilate_brute, erode_brute
from memprop_matte.core import (
    AlphaSequence,
    RegionPartition,
    SegMaskSequence,
    VideoClip,
    binarize_alpha,
    make_region_partition,
    trimap_from_segmask,
)


class TestDataTypes:
    def test_clip_requires_stride_divisible_size(self):
        with pytest.raises(ValueError, match="divisible"):
            VideoClip(torch.zeros(2, 3, 30, 32))

    def test_clip_rejects_out_of_range(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            VideoClip(torch.full((1, 3, 16, 16), 1.5))

    def test_clip_rejects_empty(self):
        with pytest.raises(ValueError):
            VideoClip(torch.zeros(0, 3, 16, 16))

    def test_alpha_clamps(self):
        seq = AlphaSequence(torch.tensor([[[[1.5, -0.5]] * 2]]))
        assert seq.alpha.min() >= 0 and seq.alpha.max() <= 1

    def test_mask_must_be_binary(self):
        with pytest.raises(ValueError, match="0 or 1"):
            SegMaskSequence(torch.full((1, 1, 4, 4), 0.5))

    def test_partition_must_cover(self):
        ones = torch.ones(1, 4, 4)
        zeros = torch.zeros(1, 4, 4)
        with pytest.raises(ValueError, match="disjoint"):
            RegionPartition(ones, ones, zeros)


class TestMakeRegionPartition:
    def test_all_zeros_is_core_bg(self):
        part = make_region_partition(torch.zeros(1, 8, 8), 0.99, 0.01)
        assert part.core_bg.sum() == 64
        assert part.boundary.sum() == 0

    def test_all_ones_is_core_fg(self):
        part = make_region_partition(torch.ones(1, 8, 8))
        assert part.core_fg.sum() == 64

    def test_center_half_is_boundary(self):
        alpha = torch.zeros(1, 3, 3)
        alpha[0, 1, 1] = 0.5
        part = make_region_partition(alpha, 0.99, 0.01)
        assert part.boundary.sum() == 1
        assert part.boundary[0, 1, 1] == 1
        assert part.core_bg.sum() == 8

    def test_bad_thresholds_rejected(self):
        with pytest.raises(ValueError):
            make_region_partition(torch.zeros(1, 4, 4), fg_thresh=0.2, bg_thresh=0.5)

    def test_non_finite_rejected(self):
        alpha = torch.zeros(1, 4, 4)
        alpha[0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            make_region_partition(alpha)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_partition_invariant(self, seed):
        rng = np.random.default_rng(seed)
        alpha = torch.from_numpy(rng.random((1, 12, 12), dtype=np.float32))
        part = make_region_partition(alpha)
        total = part.core_fg + part.core_bg + part.boundary
        assert torch.all(total == 1)
        assert torch.all(part.core_fg * part.core_bg == 0)
        assert torch.all(part.core_fg * part.boundary == 0)
        assert torch.all(part.core_bg * part.boundary == 0)


class TestTrimapFromSegmask:
    def test_kernel_one_is_identity(self):
        rng = np.random.default_rng(0)
        mask = torch.from_numpy((rng.random((1, 10, 10)) > 0.5).astype(np.float32))
        part = trimap_from_segmask(mask, 1)
        assert torch.equal(part.core_fg, mask)
        assert part.boundary.sum() == 0

    def test_centered_square_kernel_three(self):
        # 3x3 square centered in 7x7: erode -> center pixel, dilate -> 5x5
        mask = torch.zeros(1, 7, 7)
        mask[0, 2:5, 2:5] = 1
        part = trimap_from_segmask(mask, 3)
        assert part.core_fg.sum() == 1
        assert part.core_fg[0, 3, 3] == 1
        assert part.boundary.sum() == 25 - 1
        assert part.core_bg.sum() == 49 - 25

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            trimap_from_segmask(torch.zeros(1, 4, 4), 2)

    def test_matches_brute_force_morphology(self):
        rng = np.random.default_rng(7)
        for kernel in (3, 5):
            for _ in range(5):
                mask = (rng.random((9, 9)) > 0.6).astype(np.float32)
                part = trimap_from_segmask(torch.from_numpy(mask), kernel)
                np.testing.assert_array_equal(
                    part.core_fg[0].numpy(), erode_brute(mask, kernel)
                )
                np.testing.assert_array_equal(
                    (1 - part.core_bg[0]).numpy(), dilate_brute(mask, kernel)
                )

    def test_boundary_monotone_in_kernel(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            mask = torch.from_numpy((rng.random((1, 12, 12)) > 0.5).astype(np.float32))
            small = trimap_from_segmask(mask, 3).boundary
            large = trimap_from_segmask(mask, 5).boundary
            assert torch.all(small <= large)


class TestBinarizeAlpha:
    def test_threshold_50_fires_at_030(self):
        # 0.3 * 255 = 76.5 >= 50
        out = binarize_alpha(torch.full((1, 2, 2), 0.3), 50)
        assert torch.all(out == 1)

    def test_zero_alpha_never_fires(self):
        for thr in (1, 50, 255):
            assert torch.all(binarize_alpha(torch.zeros(1, 2, 2), thr) == 0)

    def test_equality_uses_geq(self):
        alpha = torch.full((1, 1, 1), 50.0 / 255.0)
        assert binarize_alpha(alpha, 50).item() == 1

    def test_idempotent_on_own_output(self):
        rng = np.random.default_rng(2)
        alpha = torch.from_numpy(rng.random((1, 8, 8), dtype=np.float32))
        once = binarize_alpha(alpha, 50)
        twice = binarize_alpha(once, 50)
        assert torch.equal(once, twice)

    def test_threshold_range_checked(self):
        with pytest.raises(ValueError):
            binarize_alpha(torch.zeros(1, 2, 2), 256)
