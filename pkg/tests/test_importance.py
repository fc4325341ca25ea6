"""Step surrogate, mask construction, and the importance scorer."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from vrvq import (
    ImportanceNet,
    ScaleRange,
    i2m_hard,
    i2m_ste,
    importance_backward,
    importance_forward,
    load_importance_net,
    mask_depths,
    rate_loss,
    sample_scale,
    save_importance_net,
    soft_masks,
    surrogate_eval,
)
from vrvq._binio import FormatError

# high-precision reference values (50-digit arithmetic, frozen):
# (alpha, k, s, value, derivative)
SURROGATE_TABLE = [
    (0.5, 0, 0.5, 0.5, 0.24491866240370913),
    (0.5, 0, -3.0, 0.030437423655932318, 0.029439663215475223),
    (0.5, 0, 4.0, 0.96956257634406768, 0.029439663215475223),
    (0.5, 3, 3.25, 0.43906841376394362, 0.24135520006119108),
    (2.0, 0, 0.5, 0.5, 0.76159415595576489),
    (2.0, 0, 0.1, 0.22151453984793614, 0.57209066653558615),
    (2.0, 0, 0.9, 0.77848546015206387, 0.57209066653558613),
    (2.0, 0, -1.5, 0.00060757155962839622, 0.0024272252879323399),
    (2.0, 0, 2.5, 0.9993924284403716, 0.0024272252879323399),
    (2.0, 2, 2.75, 0.68383141601387981, 0.6836327054524381),
    (2.0, 5, 4.0, 0.0044536303862284929, 0.01765085983162508),
    (8.0, 0, 0.5, 0.5, 0.99932929973906704),
    (8.0, 0, 0.25, 0.25113398648277075, 0.98200764586330623),
    (8.0, 0, 1.5, 0.99997903710405347, 0.00033535009271513266),
    (8.0, 1, 0.0, 7.0334472326882041e-9, 1.1253514939092944e-7),
    (8.0, 4, 6.0, 0.99999999296655277, 1.1253514939092944e-7),
]


class TestSurrogate:
    @pytest.mark.parametrize("alpha,k,s,value,deriv", SURROGATE_TABLE)
    def test_frozen_values(self, alpha, k, s, value, deriv):
        v, d = surrogate_eval(s, k, alpha)
        np.testing.assert_allclose(v, value, atol=5e-13, rtol=0)
        np.testing.assert_allclose(d, deriv, rtol=1e-9)

    @pytest.mark.parametrize("alpha", [0.5, 2.0, 8.0, 64.0])
    @pytest.mark.parametrize("k", [0, 1, 7])
    def test_midpoint_is_exactly_half(self, alpha, k):
        v, _ = surrogate_eval(k + 0.5, k, alpha)
        assert float(v) == 0.5

    @pytest.mark.parametrize("alpha", [0.5, 2.0, 8.0])
    def test_open_unit_range_and_monotone_grid(self, alpha):
        s = np.linspace(-5.0, 13.0, 10_001)
        v, d = surrogate_eval(s, 0, alpha)
        assert np.all(v > 0.0) and np.all(v < 1.0)
        assert np.all(d > 0.0)
        assert np.all(np.diff(v) >= 0.0)
        # every value float64 can still distinguish from the endpoints
        # must be strictly increasing
        band = (v > 1e-12) & (v < 1.0 - 1e-12)
        idx = np.flatnonzero(band)
        assert np.all(np.diff(v[idx]) > 0.0)

    @pytest.mark.parametrize("alpha", [0.5, 2.0, 8.0])
    def test_derivative_matches_finite_differences(self, alpha):
        s = np.linspace(-5.0, 13.0, 400)
        v_hi, _ = surrogate_eval(s + 1e-6, 3, alpha)
        v_lo, _ = surrogate_eval(s - 1e-6, 3, alpha)
        fd = (v_hi - v_lo) / 2e-6
        _, d = surrogate_eval(s, 3, alpha)
        keep = d >= 1e-3  # below this FD cancellation dominates
        np.testing.assert_allclose(d[keep], fd[keep], rtol=1e-6)

    def test_far_right_tail_saturates_toward_one(self):
        v, _ = surrogate_eval(10.0, 0, 2.0)
        assert 1.0 - float(v) < 1e-8

    @given(
        st.floats(min_value=0.1, max_value=16.0),
        st.integers(min_value=0, max_value=7),
        st.floats(min_value=-4.0, max_value=4.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_reflection_symmetry(self, alpha, k, offset):
        # f(k + 1/2 + t) + f(k + 1/2 - t) = 1
        hi, _ = surrogate_eval(k + 0.5 + offset, k, alpha)
        lo, _ = surrogate_eval(k + 0.5 - offset, k, alpha)
        np.testing.assert_allclose(float(hi) + float(lo), 1.0, atol=1e-12)

    @given(
        st.floats(min_value=0.1, max_value=16.0),
        st.integers(min_value=0, max_value=6),
        st.floats(min_value=-3.0, max_value=10.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_depends_only_on_distance_to_step(self, alpha, k, s):
        base, base_d = surrogate_eval(s, 0, alpha)
        shifted, shifted_d = surrogate_eval(s + k, k, alpha)
        np.testing.assert_allclose(float(base), float(shifted), rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(float(base_d), float(shifted_d), rtol=1e-9, atol=0)

    def test_sharpness_steepens_the_riser(self):
        # larger alpha pushes values closer to the hard step
        lo, _ = surrogate_eval(0.75, 0, 0.5)
        mid, _ = surrogate_eval(0.75, 0, 2.0)
        hi, _ = surrogate_eval(0.75, 0, 8.0)
        assert float(lo) < float(mid) < float(hi)

    def test_large_alpha_limit_is_clipped_ramp(self):
        # at alpha = 64 the surrogate hugs clip(s - k, 0, 1); its derivative
        # is near zero at plateau midpoints and near one mid-riser
        v, d_mid = surrogate_eval(0.5, 0, 64.0)
        np.testing.assert_allclose(float(v), 0.5)
        assert float(d_mid) > 0.999
        for s_plateau in (-0.5, 1.5):
            _, d = surrogate_eval(s_plateau, 0, 64.0)
            assert float(d) < 1e-13


class TestMasks:
    def test_hard_mask_small_example(self):
        # l*p = [0.4, 1.0, 2.3, 3.9] against steps k = 0..3
        p = np.array([0.1, 0.25, 0.575, 0.975])
        mask = i2m_hard(p, 4.0, 4)
        expected = np.array(
            [
                [1, 1, 1, 1],
                [0, 1, 1, 1],
                [0, 0, 1, 1],
                [0, 0, 0, 1],
            ],
            dtype=np.float64,
        )
        np.testing.assert_array_equal(mask, expected)

    def test_depths_count_mask_rows(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.001, 0.999, size=200)
        mask = i2m_hard(p, 7.3, 6)
        depths = mask_depths(p, 7.3, 6)
        np.testing.assert_array_equal(mask.sum(axis=0).astype(np.int64), depths)
        assert depths.min() >= 1

    def test_scalar_input_gives_column(self):
        mask = i2m_hard(0.5, 2.0, 4)
        assert mask.shape == (4,)
        np.testing.assert_array_equal(mask, [1, 1, 0, 0])

    @given(
        st.floats(min_value=1e-6, max_value=1.0 - 1e-6),
        st.floats(min_value=0.8, max_value=48.0),
    )
    @settings(max_examples=300, deadline=None)
    def test_ste_forward_equals_hard_and_prefix_holds(self, p, scale):
        hard = i2m_hard(p, scale, 8)
        fwd, back = i2m_ste(p, scale, 2.0, 8)
        np.testing.assert_array_equal(fwd, hard)
        assert back.shape == (8,)
        assert np.all(back > 0)
        # prefix property: once a stage is off, all deeper stages are off
        assert np.all(np.diff(hard) <= 0)
        assert hard[0] == 1.0

    def test_ste_backward_is_scaled_surrogate_slope(self):
        p, scale, alpha = 0.37, 5.0, 2.0
        _, back = i2m_ste(p, scale, alpha, 4)
        for k in range(4):
            _, d = surrogate_eval(scale * p, k, alpha)
            np.testing.assert_allclose(back[k], scale * float(d), rtol=1e-12)

    def test_soft_masks_match_surrogate_values(self):
        p = np.array([0.2, 0.8])
        soft = soft_masks(p, 3.0, 2.0, 4)
        for k in range(4):
            v, _ = surrogate_eval(3.0 * p, k, 2.0)
            np.testing.assert_allclose(soft[k], v, rtol=1e-12)

    def test_rate_loss_is_mean_importance(self):
        p = np.array([0.25, 0.5, 0.75])
        assert rate_loss(p) == pytest.approx(0.5)


class TestScaleSampling:
    def test_within_range(self):
        rng = np.random.default_rng(5)
        dist = ScaleRange(0.8, 48.0)
        draws = np.array([sample_scale(rng, dist) for _ in range(5000)])
        assert draws.min() >= 0.8
        assert draws.max() <= 48.0

    def test_log_uniform_median(self):
        rng = np.random.default_rng(7)
        dist = ScaleRange(0.8, 48.0)
        draws = np.array([sample_scale(rng, dist) for _ in range(20000)])
        geo_mid = np.sqrt(0.8 * 48.0)
        assert abs(np.median(draws) - geo_mid) / geo_mid < 0.05

    def test_bad_range_rejected(self):
        with pytest.raises(ValueError):
            ScaleRange(2.0, 1.0)
        with pytest.raises(ValueError):
            ScaleRange(0.0, 1.0)


class TestImportanceNet:
    def test_forward_shape_and_range(self):
        rng = np.random.default_rng(3)
        net = ImportanceNet.random_init(6, hidden=5, seed=1)
        z = rng.standard_normal((6, 17))
        p = importance_forward(net, z)
        assert p.shape == (17,)
        assert np.all(p > 0) and np.all(p < 1)

    def test_param_count(self):
        net = ImportanceNet.zeros(6, hidden=5)
        # inputs are 5 stacked context columns
        assert net.n_inputs == 30
        assert net.n_params == 31 * 5 + 5 + 1

    def test_zero_net_outputs_half(self):
        net = ImportanceNet.zeros(4, hidden=3)
        z = np.ones((4, 9))
        np.testing.assert_allclose(importance_forward(net, z), 0.5)

    def test_context_uses_edge_replication(self):
        # constant columns make every context window identical, so a frame in
        # the middle scores the same as the edge frames
        net = ImportanceNet.random_init(3, hidden=4, seed=2)
        z = np.tile(np.array([[0.3], [-1.0], [0.7]]), (1, 8))
        p = importance_forward(net, z)
        np.testing.assert_allclose(p, p[0], rtol=1e-12)

    def test_edge_frames_replicate_boundary_columns(self):
        net = ImportanceNet.random_init(2, hidden=4, seed=3)
        rng = np.random.default_rng(6)
        z = rng.standard_normal((2, 7))
        # prepending two copies of the first column shifts scores right by two
        padded = np.concatenate([z[:, :1], z[:, :1], z], axis=1)
        p = importance_forward(net, z)
        p_pad = importance_forward(net, padded)
        np.testing.assert_allclose(p_pad[2:5], p[:3], rtol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        net = ImportanceNet.random_init(4, hidden=6, seed=4)
        z = rng.standard_normal((4, 11))
        upstream = rng.standard_normal(11)

        def loss(params):
            probe = ImportanceNet(4, 6, params.copy())
            return float(importance_forward(probe, z) @ upstream)

        grad = importance_backward(net, z, upstream)
        fd = central_diff(loss, net.params, h=1e-6)
        assert rel_err(grad, fd) < 1e-7

    def test_save_load_round_trip(self, tmp_path):
        net = ImportanceNet.random_init(5, hidden=7, seed=8)
        path = tmp_path / "net.vimp"
        save_importance_net(net, path)
        back = load_importance_net(path)
        assert back.dim == 5 and back.hidden == 7
        # parameters survive the float32 container exactly once rounded
        np.testing.assert_array_equal(
            back.params, net.params.astype(np.float32).astype(np.float64)
        )

    def test_load_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.vimp"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(FormatError, match="magic"):
            load_importance_net(path)

    def test_load_rejects_trailing_bytes(self, tmp_path):
        net = ImportanceNet.random_init(3, hidden=2, seed=0)
        path = tmp_path / "net.vimp"
        save_importance_net(net, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_importance_net(path)
