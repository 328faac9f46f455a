import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embcam.errors import AllZeroHeatmap, ChannelOutOfRange, MissingRegion
from embcam.gradweights import SparseWeights, top_m
from embcam.heatmap import (Heatmap, RegionAnnotation, evaluate_regions, grad_cam_heatmap, iou,
                            localization_accuracy, localize, normalize_heatmap, pgm_bytes, read_pgm,
                            region_score, upsample_bilinear, write_pgm)

from oracles import bilinear_point, box_iou_by_pixels, flood_fill_box

A_HAND = np.array([[[1, -1], [0, 2]], [[0, 1], [1, 0]]], dtype=np.float32)


class TestGradCam:
    def test_hand_example(self):
        h = grad_cam_heatmap(A_HAND, [1.0, -1.0])
        np.testing.assert_array_equal(h.grid, [[1, 0], [0, 2]])
        assert not h.normalized

    def test_zero_weights(self):
        assert not grad_cam_heatmap(A_HAND, [0.0, 0.0]).grid.any()

    def test_sparse_equals_dense(self):
        a = grad_cam_heatmap(A_HAND, SparseWeights([0], [1.0])).grid
        b = grad_cam_heatmap(A_HAND, [1.0, 0.0]).grid
        assert a.tobytes() == b.tobytes()

    def test_full_topm_bitwise(self):
        rng = np.random.default_rng(0)
        A = rng.random((12, 7, 7)).astype(np.float32)
        alpha = rng.standard_normal(12).astype(np.float32)
        assert grad_cam_heatmap(A, top_m(alpha, 12)).grid.tobytes() == grad_cam_heatmap(A, alpha).grid.tobytes()

    def test_channel_out_of_range(self):
        with pytest.raises(ChannelOutOfRange):
            grad_cam_heatmap(A_HAND, SparseWeights([2], [1.0]))
        with pytest.raises(ChannelOutOfRange):
            grad_cam_heatmap(A_HAND, [1.0, 2.0, 3.0])


class TestNormalize:
    def test_scale_by_max(self):
        h = normalize_heatmap(Heatmap([[1, 0], [0, 2]]))
        np.testing.assert_array_equal(h.grid, [[0.5, 0], [0, 1]])
        assert h.normalized and not h.degenerate

    def test_idempotent(self):
        h = normalize_heatmap(Heatmap([[1, 0], [0, 3]]))
        assert normalize_heatmap(h).grid.tobytes() == h.grid.tobytes()
        assert normalize_heatmap(h.grid).grid.tobytes() == h.grid.tobytes()

    def test_all_zero(self):
        h = normalize_heatmap(Heatmap(np.zeros((3, 3))))
        assert h.degenerate and not h.grid.any()


class TestUpsample:
    def test_constant(self):
        h = upsample_bilinear(Heatmap([[0.7]]), 5, 3)
        assert h.shape == (3, 5)
        np.testing.assert_allclose(h.grid, 0.7, rtol=0, atol=1e-7)

    def test_against_scalar_oracle(self):
        g = [[0.0, 1.0], [1.0, 0.0]]
        h = upsample_bilinear(Heatmap(g), 4, 4)
        for y, x in itertools.product(range(4), range(4)):
            assert h.grid[y, x] == pytest.approx(bilinear_point(g, x, y, 4, 4), abs=1e-7)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 13), st.integers(1, 13))
    def test_random_against_oracle(self, seed, H, W, oh, ow):
        g = np.random.default_rng(seed).random((H, W))
        h = upsample_bilinear(g, ow, oh)
        ref = np.array([[bilinear_point(g.tolist(), x, y, ow, oh) for x in range(ow)] for y in range(oh)])
        np.testing.assert_allclose(h.grid, ref, atol=1e-6)

    def test_same_size_identity(self):
        g = np.random.default_rng(1).random((7, 5)).astype(np.float32)
        np.testing.assert_allclose(upsample_bilinear(g, 5, 7).grid, g, atol=1e-6)


class TestPgm:
    def test_hand_bytes(self, tmp_path):
        write_pgm(Heatmap([[0.0, 1.0]], normalized=True), tmp_path / "h.pgm")
        assert (tmp_path / "h.pgm").read_bytes() == b"P5\n2 1\n255\n\x00\xff"

    def test_half_rounds_away_from_zero(self):
        assert pgm_bytes(Heatmap([[0.5]]))[-1] == 128

    def test_all_zero(self):
        assert pgm_bytes(Heatmap(np.zeros((2, 3))))[-6:] == b"\x00" * 6

    def test_reject_unnormalized(self):
        with pytest.raises(ValueError):
            pgm_bytes(Heatmap([[2.0]]))

    def test_read_back(self, tmp_path):
        g = np.random.default_rng(2).random((4, 6))
        write_pgm(g, tmp_path / "x.pgm")
        back = read_pgm(tmp_path / "x.pgm")
        assert back.shape == (4, 6)
        np.testing.assert_array_equal(back, np.floor(255 * g.astype(np.float32).astype(np.float64) + 0.5))


class TestRegionScore:
    def test_uniform_box(self):
        ann = RegionAnnotation(10, 10, box=(2, 3, 7, 7))
        assert region_score(np.ones((10, 10)), ann) == pytest.approx(0.2, abs=1e-12)

    def test_all_inside(self):
        g = np.zeros((6, 6))
        g[2:4, 2:4] = 1
        assert region_score(g, RegionAnnotation(6, 6, box=(1, 1, 5, 5))) == 1.0

    def test_hand_sums(self):
        assert region_score([[1, 0], [0, 3]], RegionAnnotation(2, 2, box=(1, 0, 2, 2))) == pytest.approx(0.75, abs=1e-6)

    def test_mask(self):
        mask = np.array([[0, 255], [0, 0]], dtype=np.uint8)
        assert region_score([[1, 1], [1, 1]], RegionAnnotation(2, 2, mask=mask), "mask") == 0.25

    def test_errors(self):
        with pytest.raises(AllZeroHeatmap):
            region_score(np.zeros((2, 2)), RegionAnnotation(2, 2, box=(0, 0, 1, 1)))
        with pytest.raises(MissingRegion):
            region_score(np.ones((2, 2)), RegionAnnotation(2, 2, box=(0, 0, 1, 1)), "mask")
        with pytest.raises(MissingRegion):
            RegionAnnotation(2, 2)

    def test_raw_equals_normalized(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            g = rng.random((8, 9)).astype(np.float32)
            ann = RegionAnnotation(9, 8, box=(1, 2, 6, 7))
            assert region_score(g, ann) == pytest.approx(region_score(normalize_heatmap(g), ann), abs=1e-6)

    def test_evaluate_skips_zero(self):
        ann = RegionAnnotation(2, 2, box=(0, 0, 1, 2))
        rep = evaluate_regions([(2, np.ones((2, 2)), ann), (1, np.zeros((2, 2)), ann)])
        assert rep.skipped == [1] and rep.count == 1 and rep.mean == 0.5


class TestLocalize:
    def test_top_left_block(self):
        g = np.full((4, 4), 0.1)
        g[:2, :2] = 1.0
        assert localize(g, 0.2) == (0, 0, 2, 2)

    def test_larger_component_wins(self):
        g = np.zeros((5, 8))
        g[0, 0:3] = 1          # 3 pixels
        g[3:4, 3:8] = 1        # 5 pixels
        assert localize(g, 0.5) == (3, 3, 8, 4)

    def test_diagonal_is_connected(self):
        g = np.eye(4)
        assert localize(g, 0.5) == (0, 0, 4, 4)

    def test_tie_goes_to_first_in_row_major(self):
        g = np.zeros((4, 4))
        g[3, 0] = g[3, 1] = 1
        g[0, 3] = g[1, 3] = 1
        assert localize(g, 0.5) == (3, 0, 4, 2)

    def test_threshold_one_keeps_max(self):
        g = normalize_heatmap(np.random.default_rng(4).random((6, 6)))
        r, c = np.unravel_index(np.argmax(g.grid), g.shape)
        assert localize(g, 1.0) == (c, r, c + 1, r + 1)

    def test_random_against_flood_fill(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            b = rng.random((12, 12)) < rng.uniform(0.2, 0.7)
            ref = flood_fill_box(b)
            if ref is not None:
                assert localize(b.astype(np.float32), 0.5) == ref


class TestIou:
    def test_hand_values(self):
        assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
        assert iou((0, 0, 2, 2), (2, 2, 4, 4)) == 0.0
        assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == 1 / 3

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 8), min_size=8, max_size=8))
    def test_properties(self, v):
        a = (min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 1, max(v[2], v[3]) + 1)
        b = (min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 1, max(v[6], v[7]) + 1)
        s = iou(a, b)
        assert s == iou(b, a)
        assert 0.0 <= s <= 1.0
        assert (s == 1.0) == (a == b)
        assert s == pytest.approx(box_iou_by_pixels(a, b, 10, 10))


class TestLocalizationAccuracy:
    def test_exact_component(self):
        g = np.zeros((8, 8))
        g[2:5, 3:7] = 1.0
        rep = localization_accuracy([(0, g, (3, 2, 7, 5))], [0.2, 0.5, 1.0])
        assert rep.accuracy == {0.2: 1.0, 0.5: 1.0, 1.0: 1.0}

    def test_zero_heatmap_is_a_miss(self):
        g = np.zeros((4, 4))
        g[0, 0] = 1
        rep = localization_accuracy([(0, np.zeros((4, 4)), (0, 0, 1, 1)), (1, g, (0, 0, 1, 1))], [0.2])
        assert rep.accuracy[0.2] == 0.5 and rep.skipped == [0]
