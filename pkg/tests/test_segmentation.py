import numpy as np
import pytest

from conftest import coverage_contains, random_map_corpus
from salg.oracle import brute_force_assign
from salg.segmentation import (EPS_NORM, SegmentationConfig, assign_tokens, estimate_region_means,
                               gather_regions, pad_to_grid, regular_assignment, scatter_regions,
                               segment)
from salg.tensor import Tensor


def _two_tone_map():
    f = np.zeros((4, 4, 2))
    f[:, :2] = (1.0, 0.0)
    f[:, 2:] = (0.0, 1.0)
    return f


class TestSegmentationConfig:
    def test_coverage_and_slots(self):
        cfg = SegmentationConfig(7, 1)
        assert cfg.coverage_side == 9 and cfg.slots == 82
        assert SegmentationConfig(7, 2).slots == 122

    @pytest.mark.parametrize("window,pad", [(0, 1), (3, -1)])
    def test_invalid(self, window, pad):
        with pytest.raises(ValueError):
            SegmentationConfig(window, pad)

    def test_default_eps(self):
        assert SegmentationConfig(2, 0).eps_norm == EPS_NORM == 1e-12


class TestPadToGrid:
    def test_already_divisible(self):
        f, valid = pad_to_grid(np.ones((14, 14, 3)), 7)
        assert f.shape == (14, 14, 3) and valid.all()

    def test_fifteen_to_twentyone(self):
        f, valid = pad_to_grid(np.ones((15, 15, 2)), 7)
        assert f.shape == (21, 21, 2)
        assert valid.sum() == 225 and not valid[15:].any() and not valid[:, 15:].any()
        assert (f[15:] == 0).all() and (f[:, 15:] == 0).all()

    def test_rectangular(self):
        f, valid = pad_to_grid(np.ones((9, 5, 1)), 4)
        assert f.shape == (12, 8, 1) and valid.shape == (12, 8)

    def test_tensor_input(self):
        f, _ = pad_to_grid(Tensor(np.ones((1, 5, 5, 2))), 4)
        assert isinstance(f, Tensor) and f.shape == (1, 8, 8, 2)


class TestRegionMeans:
    def test_constant_map(self):
        means = estimate_region_means(np.full((6, 4, 3), 2.5), SegmentationConfig(2, 1))
        np.testing.assert_array_equal(means.grid, np.full((1, 3, 2, 3), 2.5))

    def test_row_index_map(self):
        f = np.repeat(np.arange(4.0)[:, None, None], 4, axis=1)
        means = estimate_region_means(f, SegmentationConfig(2, 0))
        np.testing.assert_array_equal(means.grid[0, :, :, 0], [[0.5, 0.5], [2.5, 2.5]])

    def test_matches_loop_average(self, rng):
        f = rng.standard_normal((12, 8, 5))
        means = estimate_region_means(f, SegmentationConfig(4, 1)).grid[0]
        for a in range(3):
            for q in range(2):
                block = f[4 * a:4 * a + 4, 4 * q:4 * q + 4].reshape(-1, 5)
                np.testing.assert_allclose(means[a, q], block.mean(axis=0), rtol=0, atol=1e-12)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError, match="pad_to_grid"):
            estimate_region_means(np.ones((5, 4, 1)), SegmentationConfig(2, 0))


class TestAssignTokens:
    def test_two_tone_example(self):
        a = segment(_two_tone_map(), SegmentationConfig(2, 1))
        assert a.region_id[0, 0, 1] == 0
        assert a.region_id[0, 1, 2] == 1

    def test_constant_map_gives_regular_grid(self):
        cfg = SegmentationConfig(7, 1)
        a = segment(np.full((14, 14, 4), 0.3), cfg)
        np.testing.assert_array_equal(a.region_id, regular_assignment((1, 14, 14), cfg).region_id)

    @pytest.mark.parametrize("pad", [0, 1, 2, 3])
    def test_zero_map_gives_regular_grid(self, pad):
        cfg = SegmentationConfig(4, pad)
        a = segment(np.zeros((12, 8, 3)), cfg)
        np.testing.assert_array_equal(a.region_id, regular_assignment((1, 12, 8), cfg).region_id)

    def test_single_region(self, rng):
        a = segment(rng.standard_normal((6, 6, 3)), SegmentationConfig(6, 2))
        assert (a.region_id == 0).all()

    def test_positive_scaling_of_one_token(self, rng):
        cfg = SegmentationConfig(4, 1)
        f = rng.standard_normal((8, 12, 6))
        means = estimate_region_means(f, cfg)
        base = assign_tokens(f, means, cfg).region_id
        for lam in (1e-6, 0.5, 3.0, 1e6):
            g = f.copy()
            g[5, 7] *= lam
            np.testing.assert_array_equal(assign_tokens(g, means, cfg).region_id, base)

    def test_matches_brute_force_on_ties(self):
        cfg = SegmentationConfig(2, 1)
        f = _two_tone_map()
        np.testing.assert_array_equal(segment(f, cfg).region_id, brute_force_assign(f, cfg).region_id)

    def test_batch_matches_single(self, rng):
        cfg = SegmentationConfig(4, 2)
        f = rng.standard_normal((3, 8, 8, 4))
        batch = segment(f, cfg).region_id
        for b in range(3):
            np.testing.assert_array_equal(batch[b], segment(f[b], cfg).region_id[0])

    def test_means_mismatch_rejected(self, rng):
        cfg = SegmentationConfig(4, 1)
        means = estimate_region_means(rng.standard_normal((8, 8, 2)), cfg)
        with pytest.raises(ValueError):
            assign_tokens(rng.standard_normal((12, 8, 2)), means, cfg)

    def test_partition_and_coverage_fuzz(self):
        for f, cfg in random_map_corpus(60, seed=11):
            fp, valid = pad_to_grid(f, cfg.window)
            a = segment(fp, cfg, valid)
            rid = a.region_id[0]
            assert rid.min() >= 0 and rid.max() < a.num_regions
            for y, x in zip(*np.nonzero(valid)):
                assert coverage_contains(rid[y, x], y, x, a.n_cols, cfg)


class TestGatherScatter:
    def test_no_overlap_masks_full_window(self, rng):
        cfg = SegmentationConfig(2, 0)
        f = rng.standard_normal((1, 4, 6, 3))
        a = segment(f, cfg)
        b = gather_regions(f, a, np.zeros((a.num_regions, 3)))
        assert b.mask.all()

    def test_constant_map_masks(self):
        cfg = SegmentationConfig(7, 1)
        f = np.ones((1, 14, 14, 2))
        a = segment(f, cfg)
        b = gather_regions(f, a, np.zeros((4, 2)))
        assert b.tokens.shape == (1, 4, 82, 2)
        np.testing.assert_array_equal(b.mask[:, :, 1:].sum(axis=-1), np.full((1, 4), 49))
        assert b.mask[:, :, 0].all()

    def test_agr_slot_and_layout(self, rng):
        cfg = SegmentationConfig(2, 1)
        f = rng.standard_normal((1, 4, 4, 3))
        agr = rng.standard_normal((1, 4, 3))
        a = segment(f, cfg)
        b = gather_regions(f, a, agr)
        np.testing.assert_array_equal(b.tokens.data[:, :, 0], agr)
        # region 3 covers rows/cols 1..4; slot 1 is (1, 1), the last slots fall off the map
        assert tuple(b.origin[0, 3, 1]) == (1, 1)
        assert (b.origin[0, 3, -4:] == -1).all() and not b.mask[0, 3, -4:].any()
        live = b.mask[0, :, 1:]
        np.testing.assert_array_equal(b.tokens.data[0, :, 1:][~live], 0.0)

    def test_agr_count_mismatch(self, rng):
        a = segment(rng.standard_normal((4, 4, 2)), SegmentationConfig(2, 0))
        with pytest.raises(ValueError, match="AGR"):
            gather_regions(rng.standard_normal((1, 4, 4, 2)), a, np.zeros((3, 2)))

    def test_round_trip_fuzz(self):
        for f, cfg in random_map_corpus(100, seed=12):
            fp, valid = pad_to_grid(f[None], cfg.window)
            a = segment(fp, cfg, valid)
            c = fp.shape[-1]
            b = gather_regions(fp, a, np.zeros((a.num_regions, c)))
            assert b.mask[0, :, 1:].sum() == valid.sum()
            out = scatter_regions(b, a, fp.shape).data
            np.testing.assert_array_equal(out[0][valid], fp[0][valid])
            assert (out[0][~valid] == 0).all()

    def test_scatter_detects_double_write(self, rng):
        cfg = SegmentationConfig(2, 1)
        f = rng.standard_normal((1, 4, 4, 2))
        a = segment(f, cfg)
        b = gather_regions(f, a, np.zeros((4, 2)))
        b.mask[0, 0, 1:] = b.origin[0, 0, 1:, 0] >= 0
        with pytest.raises(RuntimeError, match="partition"):
            scatter_regions(b, a, f.shape)

    def test_scatter_detects_missed_token(self, rng):
        cfg = SegmentationConfig(2, 0)
        f = rng.standard_normal((1, 4, 4, 2))
        a = segment(f, cfg)
        b = gather_regions(f, a, np.zeros((4, 2)))
        b.mask[0, 2, 3] = False
        with pytest.raises(RuntimeError):
            scatter_regions(b, a, f.shape)
