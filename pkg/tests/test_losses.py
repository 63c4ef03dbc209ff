import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rgbx_depth import autodiff as ad
from rgbx_depth import losses as L
from rgbx_depth.autodiff import Tensor
from rgbx_depth.fields import DepthField

EPS = 1e-6
SCALES = (0.1, 1.0, 10.0)
SHIFTS = (-5.0, 0.0, 5.0)


@pytest.fixture
def z():
    rng = np.random.default_rng(7)
    values = rng.uniform(0.05, 1.0, (16, 16))
    return DepthField(values / values.max(), np.ones((16, 16), dtype=bool))


def row(values):
    values = np.asarray(values, dtype=np.float64)[None]
    return DepthField.dense(values)


def value(t):
    return t.item() if isinstance(t, Tensor) else float(t)


class TestStandardize:
    def test_g2s_hand_example(self):
        out, stats = L.standardize(np.array([1.0, 2.0, 3.0]), np.ones(3, bool), "g2s", 1e-12)
        np.testing.assert_allclose(out.data, [-1.5, 0.0, 1.5], rtol=1e-10)
        assert stats.center == 2.0
        assert stats.spread == pytest.approx(2.0 / 3.0)

    @pytest.mark.parametrize("variant", L.VARIANTS)
    def test_constant_is_zero(self, variant):
        out, _ = L.standardize(np.full((4, 4), 0.7), np.ones((4, 4), bool), variant)
        assert np.all(out.data == 0.0)

    @pytest.mark.parametrize("variant", L.VARIANTS)
    def test_empty_mask(self, variant):
        out, stats = L.standardize(np.arange(4.0), np.zeros(4, bool), variant)
        assert np.all(out.data == 0.0)
        assert stats.center == 0.0 and stats.spread == 0.0

    def test_affine_discrepancy_is_epsilon_bounded(self, z):
        a = z.values
        base, _ = L.standardize(a, z.valid)
        moved, _ = L.standardize(10.0 * a + 3.0, z.valid)
        assert np.abs(base.data - moved.data).max() < 1e-4

    def test_statistics_use_mask_only(self):
        a = np.array([1.0, 2.0, 3.0, 1000.0])
        out, stats = L.standardize(a, np.array([1, 1, 1, 0], bool))
        assert stats.center == 2.0

    def test_variants_agree_on_symmetric_two_value_field(self):
        a = np.tile([0.2, 0.8], 8).reshape(4, 4)
        mask = np.ones((4, 4), bool)
        outs = [L.standardize(a, mask, v)[0].data for v in L.VARIANTS]
        for other in outs[1:]:
            np.testing.assert_array_equal(outs[0], other)

    @pytest.mark.parametrize("variant,center,spread", [
        ("zs", 2.5, np.sqrt(1.25)),
        ("ms", 2.5, 1.0),
        ("g2s", 2.5, 1.0),
    ])
    def test_variant_statistics(self, variant, center, spread):
        _, stats = L.standardize(np.array([1.0, 2.0, 3.0, 4.0]), np.ones(4, bool), variant)
        assert stats.center == pytest.approx(center)
        assert stats.spread == pytest.approx(spread)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            L.standardize(np.ones(3), np.ones(3, bool), "minmax")


class TestLossSA:
    def test_identity(self, z):
        assert value(L.loss_sa(z.values, z, z)) == pytest.approx(0.0, abs=1e-12)

    def test_affine_with_empty_x(self, z):
        x = DepthField.empty(z.shape)
        assert value(L.loss_sa(2.0 * z.values + 1.0, z, x)) <= 1e-4

    def test_offset_with_full_x(self, z):
        out = value(L.loss_sa(z.values + 0.1, z, z))
        # first term vanishes; second is 0.1 * M / (M + eps)
        assert out == pytest.approx(0.1 * 256 / (256 + EPS), abs=1e-10)

    @pytest.mark.parametrize("s", SCALES)
    @pytest.mark.parametrize("f", SHIFTS)
    def test_relative_term_invariance(self, z, s, f):
        assert value(L.loss_sa(s * z.values + f, z, DepthField.empty(z.shape))) <= 1e-4

    def test_absolute_term_uses_x_and_gt_overlap(self, z):
        xv = np.zeros(z.shape, bool)
        xv[0, :4] = True
        gt = DepthField(z.values, z.valid & ~np.eye(16, dtype=bool))
        x = DepthField(z.values, xv)
        d = z.values + 0.5
        # only 3 of the 4 X pixels are GT-valid once the diagonal is removed
        expected_abs = 0.5 * 3 / (3 + EPS)
        rel = value(L.loss_sa(d, gt, DepthField.empty(z.shape)))
        assert value(L.loss_sa(d, gt, x)) - rel == pytest.approx(expected_abs, abs=1e-10)


class TestLossSG:
    def test_identity(self, z):
        assert value(L.loss_sg(z.values, z, scales=3)) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("s", [
        pytest.param(0.1, marks=pytest.mark.xfail(
            strict=True, reason="the eps-sized residual, amplified by Sobel over several "
                                "scales, exceeds 1e-4 when s = 0.1")),
        1.0, 10.0])
    @pytest.mark.parametrize("f", SHIFTS)
    def test_affine_smooth_field(self, s, f):
        yy, xx = np.mgrid[0:32, 0:32] / 31.0
        gt = DepthField.dense(0.2 + 0.5 * yy + 0.2 * np.sin(3 * xx))
        assert value(L.loss_sg(s * gt.values + f, gt, scales=3)) <= 1e-4

    @pytest.mark.parametrize("s", SCALES)
    def test_affine_noise_field_bound(self, z, s):
        # |R| <= max|sz| * delta; each Sobel pair has tap magnitude sum 16; pooling keeps max
        sz, stats = L.standardize(z.values, z.valid)
        delta = abs(EPS / s - EPS) / (stats.spread + EPS / s)
        out = value(L.loss_sg(s * z.values + 5.0, z, scales=3))
        assert out <= 3 * 16 * np.abs(sz.data).max() * delta * 1.001 + 1e-13

    def test_ramp_residual(self):
        # constant GT standardizes to 0, so R is the standardized ramp with slope 1/(2 + eps)
        ramp = np.tile(np.arange(8.0), (8, 1))
        gt = DepthField.dense(np.ones((8, 8)))
        out = value(L.loss_sg(ramp, gt, scales=1))
        slope = 1.0 / (2.0 + EPS)
        assert out == pytest.approx(8 * slope * 36 / (36 + EPS), rel=1e-12)

    def test_diff_operator_ramp(self):
        ramp = np.tile(np.arange(8.0), (8, 1))
        gt = DepthField.dense(np.ones((8, 8)))
        out = value(L.loss_sg(ramp, gt, operator="diff", scales=1))
        slope = 1.0 / (2.0 + EPS)
        # forward difference support: all but the last row and column
        assert out == pytest.approx(slope * 49 / (49 + EPS), rel=1e-12)

    def test_invalid_pixels_do_not_leak(self, z):
        # changing GT-invalid values of d must not change the gradient term
        valid = np.ones(z.shape, bool)
        valid[5:9, 5:9] = False
        gt = DepthField(z.values, valid)
        d = z.values * 1.3
        d2 = d.copy()
        d2[~valid] = 100.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert value(L.loss_sg(d, gt)) == value(L.loss_sg(d2, gt))

    def test_too_small_for_all_scales_warns(self, z):
        with pytest.warns(RuntimeWarning, match="gradient scales"):
            L.loss_sg(z.values * 2.0, z, scales=4)

    def test_unknown_operator(self, z):
        with pytest.raises(ValueError):
            L.loss_sg(z.values, z, operator="laplace")


class TestLossG2:
    def test_identity(self, z):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert L.loss_g2(z.values, z, z).total == pytest.approx(0.0, abs=1e-12)

    def test_lambda_zero_is_sa(self, z):
        d = np.random.default_rng(0).uniform(0, 1, z.shape)
        x = DepthField(z.values, z.valid & (d > 0.5))
        br = L.loss_g2(d, z, x, L.LossConfig(lam=0.0, scales=3))
        assert br.total == value(L.loss_sa(d, z, x))

    def test_components_recombine(self, z):
        d = np.random.default_rng(1).uniform(0, 1, z.shape)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            br = L.loss_g2(d, z, DepthField.empty(z.shape))
        assert abs(br.total - br.sa_term - 0.5 * br.sg_term) <= 1e-12
        assert br.case is L.RegressionCase.AFFINE


class TestRegressionCase:
    def test_empty(self):
        assert L.regression_case(DepthField.empty((4, 4))) == (L.RegressionCase.AFFINE, 0, 0)

    def test_single_value(self):
        x = DepthField(np.full((10, 10), 0.5), np.ones((10, 10), bool))
        assert L.regression_case(x) == (L.RegressionCase.SCALE, 100, 1)

    def test_two_values(self):
        x = row([0.2, 0.7, 0.2])
        case, count, distinct = L.regression_case(x)
        assert case is L.RegressionCase.DIRECT and distinct == 2 and count == 3

    def test_float_noise_does_not_inflate(self):
        x = row([0.5, 0.5 + 1e-12, 0.5 - 1e-13])
        assert L.regression_case(x)[0] is L.RegressionCase.SCALE


class TestPointwiseLosses:
    def test_identity(self, z):
        assert value(L.loss_l1(z.values, z)) == 0.0
        assert value(L.loss_l2(z.values, z)) == 0.0

    @pytest.mark.parametrize("c", [-0.3, 0.25])
    def test_constant_offset(self, z, c):
        scale = 256 / (256 + EPS)
        assert value(L.loss_l1(z.values + c, z)) == pytest.approx(abs(c) * scale, rel=1e-12)
        assert value(L.loss_l2(z.values + c, z)) == pytest.approx(c * c * scale, rel=1e-12)

    def test_empty_gt(self):
        gt = DepthField.empty((3, 3))
        assert value(L.loss_l1(np.ones((3, 3)), gt)) == 0.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(-10, 10)),
       arrays(np.float64, (6, 6), elements=st.floats(0.01, 1)))
def test_l2_dominates_l1_squared(d, zv):
    gt = DepthField.dense(zv)
    l1 = value(L.loss_l1(d, gt, epsilon=0.0))
    l2 = value(L.loss_l2(d, gt, epsilon=0.0))
    assert l2 >= l1 ** 2 - 1e-9 * max(1.0, l2)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(0.0, 2.0)),
       arrays(np.float64, (8, 8), elements=st.floats(0.01, 1.0)),
       arrays(bool, (8, 8)))
def test_losses_non_negative(d, zv, xv):
    gt = DepthField.dense(zv)
    x = DepthField(zv, xv)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert L.loss_g2(d, gt, x).total >= 0
    assert value(L.loss_scale_invariant(d, gt)) >= -1e-12
    assert value(L.loss_affine_invariant(d, gt)) >= 0
    assert value(L.loss_ranking(d, gt, np.array([[0, 5], [7, 63]]))) >= 0


class TestScaleInvariant:
    def test_identity(self, z):
        assert value(L.loss_scale_invariant(z.values, z)) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("s", [0.01, 0.5, 3.0, 250.0])
    def test_scale(self, z, s):
        assert abs(value(L.loss_scale_invariant(s * z.values, z))) <= 1e-12

    def test_hand_value(self):
        gt = row([1.0, 1.0])
        out = value(L.loss_scale_invariant(np.array([[1.0, 2.0]]), gt))
        assert out == pytest.approx(np.log(2) ** 2 / 4, rel=1e-12)

    def test_clamps_non_positive(self):
        gt = row([1.0, 1.0])
        assert np.isfinite(value(L.loss_scale_invariant(np.array([[0.0, -1.0]]), gt)))


class TestAffineInvariant:
    def test_identity(self, z):
        assert value(L.loss_affine_invariant(z.values, z)) == 0.0

    def test_hand_value(self):
        # medians 2 and 2, spreads 1 and 2/3
        sd = (np.array([1.0, 2.0, 4.0]) - 2.0) / (1.0 + EPS)
        sz = (np.array([1.0, 2.0, 3.0]) - 2.0) / (2.0 / 3.0 + EPS)
        expected = np.abs(sd - sz).sum() / (3 + EPS)
        out = value(L.loss_affine_invariant(np.array([[1.0, 2.0, 4.0]]), row([1.0, 2.0, 3.0])))
        assert out == pytest.approx(expected, rel=1e-12)
        assert out == pytest.approx(1.0 / 3.0, rel=1e-5)

    def test_even_count_median(self):
        out, stats = L.standardize(np.array([4.0, 1.0, 3.0, 2.0]), np.ones(4, bool), "ms")
        assert stats.center == 2.5

    @pytest.mark.parametrize("s", SCALES)
    @pytest.mark.parametrize("f", SHIFTS)
    def test_affine_within_epsilon_bound(self, z, s, f):
        # standardized fields differ by |sz| * |eps/s - eps| / (spread + eps/s)
        out = value(L.loss_affine_invariant(s * z.values + f, z))
        _, stats = L.standardize(z.values, z.valid, "ms")
        sz, _ = L.standardize(z.values, z.valid, "ms")
        bound = np.abs(sz.data).mean() * abs(EPS / s - EPS) / (stats.spread + EPS / s)
        assert out <= bound * 1.001 + 1e-13
        assert out <= 1e-4

    @pytest.mark.xfail(strict=True, reason="with eps = 1e-6 the residual for s != 1 is "
                                           "about 1e-5, above the 1e-6 example tolerance")
    @pytest.mark.parametrize("s", [0.1, 10.0])
    def test_affine_example_tolerance(self, z, s):
        assert value(L.loss_affine_invariant(s * z.values + 5.0, z)) <= 1e-6


class TestRanking:
    def test_tied_pair_equal_prediction(self):
        gt = row([1.0, 1.0])
        assert value(L.loss_ranking(np.array([[0.3, 0.3]]), gt, [[0, 1]])) == 0.0

    def test_ordered_pair_large_margin(self):
        gt = row([2.0, 1.0])
        assert value(L.loss_ranking(np.array([[60.0, 0.0]]), gt, [[0, 1]])) < 1e-20

    def test_ordered_pair_equal_prediction(self):
        gt = row([2.0, 1.0])
        assert value(L.loss_ranking(np.array([[0.5, 0.5]]), gt, [[0, 1]])) == pytest.approx(
            np.log(2), rel=1e-15)

    def test_labels_threshold(self):
        labels = L.ordinal_labels(np.array([1.02, 1.005, 1.0]), np.array([1.0, 1.0, 1.02]))
        np.testing.assert_array_equal(labels, [1, 0, -1])

    def test_empty_pairs(self):
        assert value(L.loss_ranking(np.ones((2, 2)), DepthField.dense(np.ones((2, 2))),
                                    np.zeros((0, 2)))) == 0.0


class TestGradients:
    @pytest.fixture
    def fields(self):
        rng = np.random.default_rng(11)
        gt = DepthField(rng.uniform(0.1, 1, (8, 8)), rng.random((8, 8)) > 0.15)
        x = DepthField(gt.values, gt.valid & (rng.random((8, 8)) < 0.3))
        return rng.uniform(0.1, 1, (8, 8)), gt, x

    @pytest.mark.parametrize("variant", L.VARIANTS)
    @pytest.mark.parametrize("operator", L.OPERATORS)
    def test_g2_variants(self, fields, variant, operator):
        d, gt, x = fields
        cfg = L.LossConfig(variant=variant, operator=operator, scales=2)
        assert ad.check_gradients(lambda t: L.loss_g2(t, gt, x, cfg).loss, [d]) <= 1e-4

    @pytest.mark.parametrize("name", ["l1", "l2", "si", "ai", "rank"])
    def test_related_losses(self, fields, name):
        d, gt, _ = fields
        pairs = np.random.default_rng(0).integers(0, 64, (50, 2))
        fn = {
            "l1": lambda t: L.loss_l1(t, gt),
            "l2": lambda t: L.loss_l2(t, gt),
            "si": lambda t: L.loss_scale_invariant(t, gt),
            "ai": lambda t: L.loss_affine_invariant(t, gt),
            "rank": lambda t: L.loss_ranking(t, gt, pairs),
        }[name]
        assert ad.check_gradients(fn, [d]) <= 1e-4
