import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posemetric.augmentation import (
    Occluder,
    OccluderBank,
    OcclusionConfig,
    apply_occlusions,
    box_iou,
    cell_rects,
    grid_shape,
    iou_min,
    make_occluder_pool,
    max_corner_deviation,
    occlude_batch,
    occlude_features,
    occlude_to_level,
    occluder_resize_factor,
    occlusion_level,
    perturb_bbox,
    perturb_boxes,
    resample_features,
    union_area,
)
from posemetric.dataset import BBox, generate_dataset


def raster_union(rects, res=512):
    """Pixel-centre rasterization of a rectangle union on the unit square."""
    c = (np.arange(res) + 0.5) / res
    X, Y = np.meshgrid(c, c)
    mask = np.zeros_like(X, dtype=bool)
    for x0, y0, x1, y1 in rects:
        mask |= (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1)
    return mask.mean()


class FixedDraw:
    """rng stand-in whose uniform draws always return ``value``."""

    def __init__(self, value):
        self.value = value

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.value if size is None else np.full(size, self.value)


class TestCornerDeviation:
    def test_examples(self):
        assert max_corner_deviation(100, 100, 0.0) == 0.0
        assert max_corner_deviation(100, 100, 1.0) == 50.0
        n = max_corner_deviation(100, 100, 0.25)
        assert n == pytest.approx((200 - math.sqrt(30000)) / 4, abs=1e-12)
        assert n == pytest.approx(6.6987, abs=1e-4)
        assert (100 - 2 * n) ** 2 / 1e4 == pytest.approx(0.75, abs=1e-12)

    def test_inverse_identity_grid(self):
        for w in range(20, 401, 38):
            for h in range(20, 401, 38):
                for beta in np.linspace(0, 1, 11):
                    n = max_corner_deviation(w, h, beta)
                    assert n >= 0
                    assert abs(iou_min(w, h, n) - (1 - beta)) < 1e-9

    @pytest.mark.parametrize("beta", [-0.1, 1.1])
    def test_rejects_beta(self, beta):
        with pytest.raises(ValueError):
            max_corner_deviation(10, 10, beta)


class TestPerturbBBox:
    def test_zero_beta_is_identity(self, rng):
        b = BBox(3, 4, 50, 70)
        assert perturb_bbox(b, 0.0, rng) == b

    @pytest.mark.parametrize("w,h,beta", [(100, 100, 0.25), (40, 300, 0.5), (200, 60, 0.9)])
    def test_iou_bound_monte_carlo(self, rng, w, h, beta):
        boxes = np.tile([10.0, 20.0, w, h], (10_000, 1))
        out = perturb_boxes(boxes, beta, rng)
        iou = box_iou(boxes, out)
        assert iou.min() >= (1 - beta) - 1e-9
        assert (out[:, 2] > 0).all() and (out[:, 3] > 0).all()

    def test_corner_shift_within_n(self, rng):
        boxes = np.tile([0.0, 0.0, 100.0, 100.0], (5000, 1))
        out = perturb_boxes(boxes, 0.25, rng)
        n = max_corner_deviation(100, 100, 0.25)
        assert np.abs(out[:, :2]).max() <= n
        assert np.abs(out[:, :2] + out[:, 2:] - 100.0).max() <= n + 1e-9

    def test_full_beta_never_negative(self, rng):
        boxes = np.tile([0.0, 0.0, 80.0, 80.0], (5000, 1))
        iou = box_iou(boxes, perturb_boxes(boxes, 1.0, rng))
        assert (iou >= 0).all() and (iou <= 1).all()


class TestResizeFactor:
    def test_zero_scale(self, rng):
        assert all(occluder_resize_factor(0.0, rng) == (0.0, 0.0) for _ in range(100))

    def test_boundary_draw(self):
        assert occluder_resize_factor(0.5, FixedDraw(1.0)) == (0.5, 0.5)

    def test_mean(self, rng):
        f = np.array([occluder_resize_factor(0.5, rng)[0] for _ in range(100_000)])
        assert abs(f.mean() - 0.25) < 0.005
        assert f.min() >= 0 and f.max() <= 0.5


class TestUnionArea:
    def test_single_quarter(self):
        assert union_area([(0, 0, 0.5, 0.5)]) == 0.25

    def test_overlap_and_empty(self):
        assert union_area([]) == 0.0
        assert union_area([(0, 0, 0.5, 0.5), (0.25, 0.25, 0.75, 0.75)]) == pytest.approx(0.4375)
        assert union_area([(0.1, 0.1, 0.1, 0.9)]) == 0.0

    def test_against_raster(self, rng):
        for _ in range(40):
            k = rng.integers(1, 9)
            lo = rng.uniform(0, 1, size=(k, 2))
            hi = np.minimum(lo + rng.uniform(0.05, 0.6, size=(k, 2)), 1.0)
            rects = np.concatenate([lo, hi], axis=1)
            assert abs(union_area(rects) - raster_union(rects)) < 0.01

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(*[st.floats(0, 1)] * 4), min_size=1, max_size=8))
    def test_bounded(self, raw):
        rects = [(min(a, c), min(b, d), max(a, c), max(b, d)) for a, b, c, d in raw]
        area = union_area(rects)
        assert 0.0 <= area <= 1.0 + 1e-12
        assert area >= max((r[2] - r[0]) * (r[3] - r[1]) for r in rects) - 1e-12


@pytest.mark.parametrize(
    "ratio,level",
    [(0.0, "L0"), (0.1, "L0"), (0.2, "L1"), (0.39, "L1"), (0.4, "L2"), (0.6, "L3"), (0.79, "L3"), (0.95, "L3")],
)
def test_occlusion_level_bins(ratio, level):
    assert occlusion_level(ratio) == level


class TestOcclusion:
    @pytest.fixture
    def sample(self):
        return generate_dataset(0, 1, ["car"], {"sedan": 1.0})[0]

    def test_zero_scale_leaves_sample(self, sample, rng):
        pool = make_occluder_pool(0, 16)
        out, ratio = apply_occlusions(sample, OcclusionConfig(s_occ=0.0), pool, rng)
        assert ratio == 0.0 and out.occlusion_level == "L0"
        np.testing.assert_array_equal(out.camera_feat, sample.camera_feat)

    def test_pool_exhausted_by_filter(self, sample, rng):
        pool = [Occluder("car", (0, 0, 0.5, 0.5), np.zeros(16))]
        with pytest.raises(ValueError):
            apply_occlusions(sample, OcclusionConfig(excluded_category="car"), pool, rng)

    def test_excluded_category_never_applied(self, sample, rng):
        pool = make_occluder_pool(1, 16, categories=("dog", "cat"))
        pool.append(Occluder("car", (0, 0, 1, 1), np.full(16, 1e6)))
        cfg = OcclusionConfig(s_occ=1.0, excluded_category="car")
        for _ in range(300):
            out, ratio = apply_occlusions(sample, cfg, pool, rng)
            assert np.abs(out.camera_feat).max() < 100
            assert 0.0 <= ratio <= 1.0
            assert out.occlusion_level == occlusion_level(ratio)

    def test_render_untouched(self, sample, rng):
        out, _ = apply_occlusions(sample, OcclusionConfig(s_occ=1.0), make_occluder_pool(0, 16), rng)
        np.testing.assert_array_equal(out.render_feat, sample.render_feat)

    @pytest.mark.parametrize("level", ["L1", "L2", "L3"])
    def test_occlude_to_level(self, sample, rng, level):
        pool = make_occluder_pool(5, 16)
        out, ratio = occlude_to_level(sample, level, pool, rng, excluded="car")
        assert out.occlusion_level == level

    def test_batch_matches_zero_scale(self, rng):
        feats = rng.normal(size=(5, 16))
        bank = OccluderBank.from_pool(make_occluder_pool(0, 16), "car")
        np.testing.assert_array_equal(occlude_batch(feats, bank, OcclusionConfig(s_occ=0.0), rng), feats)


class TestFeatureGrid:
    def test_grid_shape(self):
        assert grid_shape(16) == (4, 4)
        assert grid_shape(4) == (2, 2)
        assert grid_shape(12) == (3, 4)
        assert cell_rects(16)[5].tolist() == [0.25, 0.25, 0.5, 0.5]

    def test_full_cover_replaces(self, rng):
        feats = rng.normal(size=(2, 16))
        fills = rng.normal(size=(2, 1, 16))
        out = occlude_features(feats, np.tile([0, 0, 1, 1.0], (2, 1, 1)), fills)
        np.testing.assert_allclose(out, fills[:, 0])

    def test_partial_cover_touches_only_footprint(self, rng):
        feats = rng.normal(size=(1, 16))
        out = occlude_features(feats, [[[0, 0, 0.25, 0.25]]], np.zeros((1, 1, 16)))
        assert out[0, 0] == 0.0
        np.testing.assert_array_equal(out[0, 1:], feats[0, 1:])

    def test_resample_identity(self, rng):
        feats = rng.normal(size=(3, 16))
        boxes = np.array([[0, 0, 100, 80.0]] * 3)
        np.testing.assert_allclose(resample_features(feats, boxes, boxes), feats, atol=1e-12)

    def test_resample_shift_by_one_cell(self, rng):
        feats = rng.normal(size=(1, 16))
        box = np.array([[0, 0, 100, 100.0]])
        moved = np.array([[25, 0, 100, 100.0]])
        out = resample_features(feats, box, moved).reshape(4, 4)
        grid = feats.reshape(4, 4)
        np.testing.assert_allclose(out[:, :3], grid[:, 1:], atol=1e-12)
        np.testing.assert_allclose(out[:, 3], grid[:, 3], atol=1e-12)
