"""Attribution pipeline tests: rank normalization properties, thresholding,
channel aggregation against loop oracles, layer fusion, and the end-to-end
explanation path on a stub classifier."""

import numpy as np
import pytest

from tilewise_xai.xai import (
    Explanation,
    XaiConfig,
    XaiError,
    aggregate_channels,
    channel_attribution,
    explain_tile,
    fuse_layers,
    percentile_normalize,
    threshold_map,
    to_uint8,
)


def rank_oracle(a):
    """Brute force: fraction of entries strictly smaller, ties share rank."""
    flat = a.reshape(-1)
    out = np.empty(flat.size)
    for i, v in enumerate(flat):
        out[i] = np.sum(flat < v) / flat.size
    return out.reshape(a.shape)


class TestPercentileNormalize:
    def test_worked_example(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(percentile_normalize(a),
                              [[0.0, 0.25], [0.5, 0.75]])

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(101)
        for _ in range(20):
            a = rng.integers(0, 6, size=(5, 7)).astype(float)  # plenty of ties
            assert np.array_equal(percentile_normalize(a), rank_oracle(a))

    def test_distinct_values_give_a_permutation_of_grid(self):
        rng = np.random.default_rng(103)
        for _ in range(10):
            a = rng.normal(size=(8, 8))
            out = percentile_normalize(a)
            assert np.array_equal(np.sort(out.reshape(-1)),
                                  np.arange(64) / 64.0)

    def test_invariant_under_monotone_transforms_bit_exact(self):
        rng = np.random.default_rng(107)
        a = rng.normal(size=(12, 12))
        base = percentile_normalize(a)
        for f in (lambda x: 3.0 * x + 1.0, lambda x: x ** 3, np.tanh):
            assert np.array_equal(percentile_normalize(f(a)), base)

    def test_constant_map_normalizes_to_zero(self):
        out = percentile_normalize(np.full((4, 4), 2.5))
        assert np.array_equal(out, np.zeros((4, 4)))

    def test_output_range(self):
        rng = np.random.default_rng(109)
        out = percentile_normalize(rng.normal(size=(16, 16)))
        assert out.min() >= 0.0
        assert out.max() < 1.0


class TestThresholdMap:
    def test_popcount_near_nominal_for_distinct_values(self):
        rng = np.random.default_rng(113)
        for t in (0.5, 0.8, 0.9, 0.95):
            for _ in range(5):
                norm = percentile_normalize(rng.normal(size=(16, 16)))
                pop = int(threshold_map(norm, t).sum())
                assert abs(pop - (1.0 - t) * 256) <= 1.0

    def test_masks_shrink_as_threshold_grows(self):
        rng = np.random.default_rng(127)
        norm = percentile_normalize(rng.normal(size=(32, 32)))
        prev = threshold_map(norm, 0.5)
        for t in (0.8, 0.9, 0.95):
            cur = threshold_map(norm, t)
            assert not np.any(cur & ~prev)  # subset of the looser mask
            prev = cur

    def test_zero_threshold_keeps_everything(self):
        norm = percentile_normalize(np.arange(9.0).reshape(3, 3))
        assert threshold_map(norm, 0.0).all()

    def test_out_of_range_threshold_rejected(self):
        norm = np.zeros((2, 2))
        with pytest.raises(XaiError):
            threshold_map(norm, 1.0)
        with pytest.raises(XaiError):
            threshold_map(norm, -0.1)

    def test_selected_entries_are_the_largest(self):
        rng = np.random.default_rng(131)
        a = rng.normal(size=(10, 10))
        mask = threshold_map(percentile_normalize(a), 0.9)
        kept = a[mask]
        dropped = a[~mask]
        assert kept.min() > dropped.max()


class TestAggregation:
    def test_aggregators_match_loop_oracles(self):
        rng = np.random.default_rng(137)
        attr = rng.normal(size=(4, 5, 6))
        h, w, c = attr.shape
        mean_o = np.zeros((h, w))
        abs_o = np.zeros((h, w))
        var_o = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                vals = attr[i, j]
                mean_o[i, j] = sum(vals) / c
                abs_o[i, j] = sum(abs(v) for v in vals) / c
                mu = sum(vals) / c
                var_o[i, j] = sum((v - mu) ** 2 for v in vals) / c
        assert np.max(np.abs(aggregate_channels(attr, "mean") - mean_o)) < 1e-12
        assert np.max(np.abs(aggregate_channels(attr, "abs") - abs_o)) < 1e-12
        assert np.max(np.abs(aggregate_channels(attr, "var") - var_o)) < 1e-12

    def test_abs_dominates_mean_pointwise(self):
        rng = np.random.default_rng(139)
        attr = rng.normal(size=(3, 3, 8))
        assert np.all(aggregate_channels(attr, "abs")
                      >= aggregate_channels(attr, "mean") - 1e-15)

    def test_single_channel_mean_and_abs(self):
        attr = np.array([[[-2.0]], [[3.0]]]).reshape(2, 1, 1)
        assert np.array_equal(aggregate_channels(attr, "mean").reshape(-1), [-2.0, 3.0])
        assert np.array_equal(aggregate_channels(attr, "abs").reshape(-1), [2.0, 3.0])
        assert np.array_equal(aggregate_channels(attr, "var").reshape(-1), [0.0, 0.0])

    def test_channel_attribution_is_elementwise_product(self):
        rng = np.random.default_rng(149)
        act = rng.normal(size=(3, 3, 2))
        grad = rng.normal(size=(3, 3, 2))
        assert np.array_equal(channel_attribution(act, grad), act * grad)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(XaiError):
            channel_attribution(np.ones((2, 2, 1)), np.ones((2, 2, 2)))
        with pytest.raises(XaiError):
            aggregate_channels(np.ones((2, 2)), "mean")


class TestFusion:
    def test_nearest_upscale_is_block_replication(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        fused = fuse_layers({1: m}, 4, mode="nearest")
        want = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
        assert np.array_equal(fused, want)

    def test_layers_sum(self):
        a = np.full((2, 2), 1.0)
        b = np.full((4, 4), 2.0)
        fused = fuse_layers({1: a, 2: b}, 4)
        assert np.array_equal(fused, np.full((4, 4), 3.0))

    def test_zero_layer_changes_nothing(self):
        rng = np.random.default_rng(151)
        m = rng.normal(size=(4, 4))
        with_zero = fuse_layers({1: m, 2: np.zeros((8, 8))}, 8)
        without = fuse_layers({1: m}, 8)
        assert np.array_equal(with_zero, without)

    def test_per_layer_rescale_equalizes_peaks(self):
        a = np.array([[10.0, 0.0], [0.0, 0.0]])
        b = np.array([[0.1, 0.0], [0.0, 0.0]])
        fused = fuse_layers({1: a, 2: b}, 2, per_layer_rescale=True)
        assert fused[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_bilinear_preserves_constant(self):
        fused = fuse_layers({1: np.full((3, 3), 7.0)}, 9, mode="bilinear")
        assert np.max(np.abs(fused - 7.0)) < 1e-12

    def test_empty_input_rejected(self):
        with pytest.raises(XaiError):
            fuse_layers({}, 4)


class TestXaiConfig:
    def test_defaults_are_valid(self):
        cfg = XaiConfig()
        assert cfg.layers == (2, 4, 6, 8)
        assert cfg.aggregator == "abs"
        assert 0.95 in cfg.thresholds

    def test_invalid_settings_rejected(self):
        with pytest.raises(XaiError):
            XaiConfig(aggregator="max")
        with pytest.raises(XaiError):
            XaiConfig(layers=())
        with pytest.raises(XaiError):
            XaiConfig(layers=(2, 2))
        with pytest.raises(XaiError):
            XaiConfig(thresholds=(1.0,))
        with pytest.raises(XaiError):
            XaiConfig(upscale="cubic")

    def test_digest_distinguishes_settings_and_is_stable(self):
        a = XaiConfig()
        b = XaiConfig(aggregator="var")
        assert a.digest() == XaiConfig().digest()
        assert a.digest() != b.digest()
        assert len(a.digest()) == 16


class StubClassifier:
    """Planted-signal classifier: attribution concentrated in one quadrant."""

    def __init__(self, layers=(2, 4), size=8):
        self.layers = layers
        self.size = size

    def attribution_pass(self, tile):
        taps = {}
        for k, layer in enumerate(self.layers):
            res = self.size // (2 ** k)
            act = np.ones((res, res, 3))
            grad = np.zeros((res, res, 3))
            grad[: res // 2, : res // 2, :] = 1.0  # hot top-left quadrant
            taps[layer] = (act, grad)
        return 0.875, taps


class TestExplainTile:
    def test_explanation_structure_and_locality(self):
        tile = np.zeros((8, 8, 3))
        cfg = XaiConfig(layers=(2, 4), thresholds=(0.5, 0.75))
        exp = explain_tile(StubClassifier(), tile, cfg)
        assert isinstance(exp, Explanation)
        assert exp.prediction == 0.875
        assert exp.raw.shape == (8, 8)
        assert set(exp.masks) == {0.5, 0.75}
        # all relevance sits in the hot quadrant
        hot = np.zeros((8, 8), dtype=bool)
        hot[:4, :4] = True
        assert exp.masks[0.75].sum() > 0
        assert not np.any(exp.masks[0.75] & ~hot)

    def test_masks_match_manual_threshold(self):
        tile = np.zeros((8, 8, 3))
        cfg = XaiConfig(layers=(2, 4), thresholds=(0.5,))
        exp = explain_tile(StubClassifier(), tile, cfg)
        assert np.array_equal(exp.masks[0.5], threshold_map(exp.normalized, 0.5))
        assert np.array_equal(exp.normalized, percentile_normalize(exp.raw))

    def test_missing_tap_rejected(self):
        tile = np.zeros((8, 8, 3))
        cfg = XaiConfig(layers=(2, 4, 6))
        with pytest.raises(XaiError):
            explain_tile(StubClassifier(layers=(2, 4)), tile, cfg)

    def test_threshold_override(self):
        tile = np.zeros((8, 8, 3))
        cfg = XaiConfig(layers=(2,), thresholds=(0.5,))
        exp = explain_tile(StubClassifier(layers=(2,)), tile, cfg, thresholds=(0.25,))
        assert set(exp.masks) == {0.25}


class TestUint8Render:
    def test_endpoints_and_monotonicity(self):
        norm = np.array([0.0, 0.25, 0.5, 0.999])
        u = to_uint8(norm)
        assert u.dtype == np.uint8
        assert u[0] == 0
        assert u[-1] == 255
        assert list(u) == sorted(u)
