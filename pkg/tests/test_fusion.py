"""Fusion-network tests: closed-form weight-map traces, complementarity
and masking invariants, the step-edge gradient-preservation property,
and the parameter-count budget."""

import math

import numpy as np
import pytest

from coopbev.autodiff import Tensor, concat_channels, conv2d, mul, sub, sum_all
from coopbev.errors import ShapeMismatchError
from coopbev.fusion import (
    FusionParams,
    compute_weight_map,
    forward_dual,
    fuse_complementary,
    fuse_maxout,
    init_fusion_params,
    reduce_to_single_channel,
)
from coopbev.geometry import BEVFeatureMap, GridSpec, OverlapMask, Pose2D

H, W, C = 8, 6, 3


def fmap(data, grid=None):
    data = np.asarray(data, dtype=np.float64)
    grid = grid or GridSpec(data.shape[1], data.shape[2], 1.0)
    return BEVFeatureMap(Tensor(data), Pose2D(), grid)


def const_maps(ego_val, warped_val):
    return (fmap(np.full((C, H, W), float(ego_val))),
            fmap(np.full((C, H, W), float(warped_val))))


def random_params(seed, **kw):
    return init_fusion_params(C, np.random.default_rng(seed), **kw)


def zero_params(layers=2):
    p = random_params(0, layers=layers)
    for t in p.parameters():
        t.data[:] = 0.0
    for _, bn in p.wnet:
        bn.mode = "eval"
        bn.gamma.data[:] = 1.0
        bn.running_mean[:] = 0.0
        bn.running_var[:] = 1.0
    return p


def band_mask(rows_on):
    m = np.zeros((H, W), dtype=bool)
    m[:rows_on] = True
    return OverlapMask(m)


class TestReduce:
    def test_mean_mode(self):
        ego, warped = const_maps(2.0, 4.0)
        p = random_params(1, reduce_mode="mean")
        phi = reduce_to_single_channel(ego, warped, p)
        np.testing.assert_array_equal(phi.data, np.full((1, H, W), 3.0))

    def test_max_mode(self):
        ego, warped = const_maps(2.0, 4.0)
        p = random_params(1, reduce_mode="max")
        phi = reduce_to_single_channel(ego, warped, p)
        np.testing.assert_array_equal(phi.data, np.full((1, H, W), 4.0))

    def test_conv_mode_zero_weights(self):
        ego, warped = const_maps(2.0, 4.0)
        phi = reduce_to_single_channel(ego, warped, zero_params())
        np.testing.assert_array_equal(phi.data, np.zeros((1, H, W)))

    def test_shape_mismatch(self):
        ego, _ = const_maps(1.0, 1.0)
        other = fmap(np.zeros((C, H, W + 2)))
        with pytest.raises(ShapeMismatchError):
            reduce_to_single_channel(ego, other, random_params(0))


class TestWeightMap:
    def test_zero_weights_degenerate_half(self):
        ego, warped = const_maps(0.0, 0.0)
        p = zero_params()
        phi = reduce_to_single_channel(ego, warped, p)
        overlap = band_mask(5)
        wm = compute_weight_map(phi, overlap, p)
        np.testing.assert_allclose(wm.raw.data, np.full((1, H, W), 0.5), atol=1e-12)
        np.testing.assert_array_equal(wm.normalized.data[0, :5], 0.5)
        np.testing.assert_array_equal(wm.normalized.data[0, 5:], 0.0)

    def test_all_false_overlap_zero(self):
        ego, warped = const_maps(1.0, 2.0)
        p = random_params(3)
        p.set_mode("eval")
        phi = reduce_to_single_channel(ego, warped, p)
        wm = compute_weight_map(phi, band_mask(0), p)
        np.testing.assert_array_equal(wm.normalized.data, 0.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_minmax_hits_zero_and_one_exactly(self, seed):
        rng = np.random.default_rng(seed)
        ego = fmap(rng.normal(size=(C, H, W)))
        warped = fmap(rng.normal(size=(C, H, W)))
        p = random_params(seed + 100)
        p.set_mode("eval")
        phi = reduce_to_single_channel(ego, warped, p)
        overlap = band_mask(6)
        wm = compute_weight_map(phi, overlap, p)
        vals = wm.normalized.data[0][overlap.mask]
        assert vals.min() == 0.0
        assert vals.max() == 1.0
        assert np.all((vals >= 0.0) & (vals <= 1.0))

    def test_exactly_zero_off_overlap(self):
        rng = np.random.default_rng(7)
        ego = fmap(rng.normal(size=(C, H, W)))
        warped = fmap(rng.normal(size=(C, H, W)))
        p = random_params(8)
        p.set_mode("eval")
        wm = compute_weight_map(reduce_to_single_channel(ego, warped, p), band_mask(3), p)
        np.testing.assert_array_equal(wm.normalized.data[0, 3:], 0.0)

    @pytest.mark.parametrize("layers,kernel", [(1, 1), (2, 3), (3, 5)])
    def test_weight_net_depth_and_kernel_knobs(self, layers, kernel):
        rng = np.random.default_rng(0)
        ego = fmap(rng.normal(size=(C, H, W)))
        warped = fmap(rng.normal(size=(C, H, W)))
        p = random_params(1, layers=layers, kernel=kernel)
        p.set_mode("eval")
        wm = compute_weight_map(reduce_to_single_channel(ego, warped, p), band_mask(6), p)
        assert wm.normalized.shape == (1, H, W)


class TestFuseComplementary:
    def _weight_map(self, value, overlap):
        m = np.where(overlap.mask, value, 0.0)[None]
        return m

    def test_m_one_zeroes_sender_blend(self):
        rng = np.random.default_rng(0)
        ego = fmap(rng.normal(size=(C, H, W)))
        warped = fmap(rng.normal(size=(C, H, W)))
        overlap = band_mask(H)
        from coopbev.fusion import WeightMap
        m = WeightMap(raw=Tensor(np.ones((1, H, W))),
                      normalized=Tensor(np.ones((1, H, W))), overlap=overlap)
        send_part = mul(warped.data, sub(Tensor(np.ones((1, H, W))), m.normalized))
        np.testing.assert_array_equal(send_part.data, 0.0)
        p = random_params(1)
        out = fuse_complementary(ego, warped, m, p)
        expected = conv2d(concat_channels(ego.data, Tensor(np.zeros((C, H, W)))), p.fuse)
        np.testing.assert_array_equal(out.data, expected.data)

    def test_half_weight_symmetric_blend(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(C, H, W))
        ego, warped = fmap(f), fmap(f.copy())
        m_half = Tensor(np.full((1, H, W), 0.5))
        ego_part = mul(ego.data, m_half)
        send_part = mul(warped.data, sub(Tensor(np.ones((1, H, W))), m_half))
        np.testing.assert_allclose(ego_part.data + send_part.data, f, atol=1e-15)

    def test_blend_sensitivity_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        ego = fmap(rng.normal(size=(C, H, W)))
        warped_data = rng.normal(size=(C, H, W))
        p = random_params(3)
        p.set_mode("eval")
        overlap = band_mask(6)
        warped = fmap(warped_data)
        phi = reduce_to_single_channel(ego, warped, p)
        wm = compute_weight_map(phi, overlap, p)
        one_minus_m = 1.0 - wm.normalized.data[0]

        warped_t = Tensor(warped_data.copy(), requires_grad=True)
        blend2 = mul(warped_t, sub(Tensor(np.ones((1, H, W))), wm.normalized.detach()))
        sum_all(blend2).backward()
        for c in range(C):
            np.testing.assert_allclose(warped_t.grad[c], one_minus_m, atol=1e-12)

        # central differences on a few entries
        h = 1e-6
        m_const = wm.normalized.data[0]
        for (c, i, j) in [(0, 1, 1), (1, 4, 3), (2, 5, 5)]:
            base = warped_data[c, i, j]
            f_plus = (base + h) * (1.0 - m_const[i, j])
            f_minus = (base - h) * (1.0 - m_const[i, j])
            numeric = (f_plus - f_minus) / (2 * h)
            assert numeric == pytest.approx(warped_t.grad[c, i, j], abs=1e-6)

    def test_complementary_off_uses_unit_weight(self):
        rng = np.random.default_rng(4)
        ego = fmap(rng.normal(size=(C, H, W)))
        warped = fmap(rng.normal(size=(C, H, W)))
        overlap = band_mask(H)
        p = random_params(5, complementary=False)
        p.set_mode("eval")
        phi = reduce_to_single_channel(ego, warped, p)
        wm = compute_weight_map(phi, overlap, p)
        out = fuse_complementary(ego, warped, wm, p)
        expected = conv2d(concat_channels(mul(ego.data, wm.normalized), warped.data), p.fuse)
        np.testing.assert_array_equal(out.data, expected.data)


class TestFuseMaxout:
    def test_ego_dominates(self):
        ego, warped = const_maps(5.0, 1.0)
        out = fuse_maxout(ego, warped, band_mask(H))
        np.testing.assert_array_equal(out.data, ego.data.data)

    def test_zero_sensitivity_when_ego_larger(self):
        ego, _ = const_maps(5.0, 0.0)
        warped_t = Tensor(np.random.default_rng(0).uniform(0, 1, (C, H, W)),
                          requires_grad=True)
        warped = BEVFeatureMap(warped_t, Pose2D(), ego.grid)
        out = fuse_maxout(ego, warped, band_mask(H))
        sum_all(out).backward()
        np.testing.assert_array_equal(warped_t.grad, 0.0)

    def test_mixed_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        e = rng.normal(size=(C, H, W))
        v = rng.normal(size=(C, H, W))
        overlap = band_mask(5)
        out = fuse_maxout(fmap(e), fmap(v), overlap).data
        expect = np.empty_like(e)
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    if overlap.mask[i, j]:
                        expect[c, i, j] = max(e[c, i, j], v[c, i, j])
                    else:
                        expect[c, i, j] = e[c, i, j]
        np.testing.assert_array_equal(out, expect)


class TestForwardDual:
    def test_no_neighbor_bit_identical(self):
        rng = np.random.default_rng(0)
        ego = fmap(rng.normal(size=(C, H, W)))
        out = forward_dual(ego, None, None, random_params(0))
        assert out is ego.data

    def test_all_false_overlap_equals_individual(self):
        rng = np.random.default_rng(1)
        ego = fmap(rng.normal(size=(C, H, W)))
        warped = fmap(rng.normal(size=(C, H, W)))
        p = random_params(2)
        p.set_mode("eval")
        out = forward_dual(ego, warped, band_mask(0), p)
        np.testing.assert_array_equal(out.data, ego.data.data)

    def test_full_overlap_equals_fuse_complementary(self):
        rng = np.random.default_rng(2)
        ego = fmap(rng.normal(size=(C, H, W)))
        warped = fmap(rng.normal(size=(C, H, W)))
        p = random_params(3)
        p.set_mode("eval")
        via_dispatch = forward_dual(ego, warped, band_mask(H), p)
        phi = reduce_to_single_channel(ego, warped, p)
        wm = compute_weight_map(phi, band_mask(H), p)
        direct = fuse_complementary(ego, warped, wm, p)
        np.testing.assert_array_equal(via_dispatch.data, direct.data)

    def test_grid_mismatch_rejected(self):
        ego = fmap(np.zeros((C, H, W)))
        other_grid = GridSpec(H, W, 2.0)
        warped = fmap(np.zeros((C, H, W)), grid=other_grid)
        with pytest.raises(ShapeMismatchError):
            forward_dual(ego, warped, band_mask(2), random_params(0))

    def test_unknown_method_rejected(self):
        ego, warped = const_maps(1.0, 2.0)
        with pytest.raises(ValueError):
            forward_dual(ego, warped, band_mask(2), random_params(0), method="mean")


class TestInvariants:
    @pytest.mark.parametrize("seed", range(8))
    def test_complementary_weights_sum_to_one_exactly(self, seed):
        rng = np.random.default_rng(seed)
        ego = fmap(rng.normal(size=(C, H, W)))
        warped = fmap(rng.normal(size=(C, H, W)))
        p = random_params(seed)
        p.set_mode("eval")
        overlap = band_mask(int(rng.integers(2, H + 1)))
        wm = compute_weight_map(reduce_to_single_channel(ego, warped, p), overlap, p)
        m = wm.normalized.data[0][overlap.mask]
        sender_w = 1.0 - m
        assert np.all(m + sender_w == 1.0)

    @pytest.mark.parametrize("seed", range(8))
    def test_off_overlap_output_bit_equals_individual(self, seed):
        rng = np.random.default_rng(seed + 50)
        ego = fmap(rng.normal(size=(C, H, W)))
        warped = fmap(rng.normal(size=(C, H, W)))
        p = random_params(seed)
        p.set_mode("eval")
        rows_on = int(rng.integers(1, H))
        overlap = band_mask(rows_on)
        out = forward_dual(ego, warped, overlap, p)
        off = ~overlap.mask
        np.testing.assert_array_equal(out.data[:, off], ego.data.data[:, off])

    def test_step_edge_gradient_preservation(self):
        """Maxout kills the sender gradient; complementary keeps 1 - m."""
        g = 1.0
        ego = fmap(np.full((C, H, W), 5.0))
        step = np.zeros((C, H, W))
        step[0, :, W // 2:] = g
        overlap = band_mask(H)

        warped_t = Tensor(step.copy(), requires_grad=True)
        warped = BEVFeatureMap(warped_t, Pose2D(), ego.grid)
        out = fuse_maxout(ego, warped, overlap)
        sum_all(out).backward()
        np.testing.assert_array_equal(warped_t.grad, 0.0)

        p = random_params(11)
        p.set_mode("eval")
        phi = reduce_to_single_channel(ego, warped, p)
        wm = compute_weight_map(phi, overlap, p)
        m = wm.normalized.data[0]
        blend_in = Tensor(step.copy(), requires_grad=True)
        blend2 = mul(blend_in, sub(Tensor(np.ones((1, H, W))), wm.normalized.detach()))
        sum_all(blend2).backward()
        for c in range(C):
            np.testing.assert_allclose(blend_in.grad[c], 1.0 - m, atol=1e-12)
        assert np.all((1.0 - m)[m < 1.0] > 0.0)
        assert np.any(m < 1.0)


class TestParameterBudget:
    def test_count_at_production_width(self):
        p = init_fusion_params(256, np.random.default_rng(0))
        n = p.n_params()
        assert 125_000 <= n <= 140_000
        # reduce 1x1 (2C -> 1) + two 3x3 1-ch convs with BN + fuse 1x1 (2C -> C)
        expected = (2 * 256 + 1) + 2 * (9 + 1 + 2) + (2 * 256 * 256 + 256)
        assert n == expected

    def test_reduce_ablation_drops_reduce_params(self):
        conv = init_fusion_params(8, np.random.default_rng(0), reduce_mode="conv")
        mean = init_fusion_params(8, np.random.default_rng(0), reduce_mode="mean")
        assert conv.n_params() - mean.n_params() == 2 * 8 + 1
