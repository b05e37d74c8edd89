import math

import numpy as np
import pytest

from normrl.errors import ConfigError
from normrl.numcore import Prng, grad_check
from normrl.normlayers import (
    BatchNormState,
    CropRegion,
    CrossNormConfig,
    SelfNormParams,
    batchnorm_backward,
    batchnorm_forward,
    channel_stats,
    crossnorm_backward,
    crossnorm_forward,
    sample_crop,
    sample_pairing,
    selfnorm_backward,
    selfnorm_forward,
)

NO_CROP = CrossNormConfig(crop_enabled=False)


class TestChannelStats:
    def test_constant_channel(self):
        x = np.full((1, 1, 4, 4), 5.0)
        st = channel_stats(x)
        assert st.mu[0, 0] == 5.0
        assert st.sigma[0, 0] == 0.0

    def test_two_by_two_hand_value(self):
        # mean of [1,3,1,3] is 2, population std is 1
        x = np.array([[[[1.0, 3.0], [1.0, 3.0]]]])
        st = channel_stats(x)
        assert st.mu[0, 0] == pytest.approx(2.0)
        assert st.sigma[0, 0] == pytest.approx(1.0)

    def test_full_region_equals_whole_map(self):
        rng = Prng(0)
        x = rng.normal(size=(3, 2, 6, 7))
        regions = [CropRegion(0, 0, 6, 7)] * 3
        full = channel_stats(x)
        crop = channel_stats(x, regions)
        np.testing.assert_allclose(crop.mu, full.mu, atol=1e-12)
        np.testing.assert_allclose(crop.sigma, full.sigma, atol=1e-12)

    def test_degenerate_region_rejected(self):
        x = np.zeros((1, 1, 4, 4))
        with pytest.raises(ConfigError):
            channel_stats(x, [CropRegion(0, 0, 1, 1)])
        with pytest.raises(ConfigError):
            channel_stats(x, [CropRegion(3, 3, 2, 2)])


class TestSamplePairing:
    def test_singleton_is_fixed_point(self):
        assert sample_pairing(Prng(0), 1).tolist() == [0]

    def test_pair_always_swaps(self):
        for seed in range(10):
            assert sample_pairing(Prng(seed), 2).tolist() == [1, 0]

    def test_involution_with_odd_leftover(self):
        for seed in range(20):
            p = sample_pairing(Prng(seed), 7)
            np.testing.assert_array_equal(p[p], np.arange(7))
            assert (p == np.arange(7)).sum() == 1  # exactly one fixed point

    def test_uniform_over_matchings_of_four(self):
        # 3 perfect matchings exist on 4 elements; each unordered pair
        # appears in exactly one, so each pair should show up 1/3 of draws
        rng = Prng(123)
        counts = {}
        n_draws = 10_000
        for _ in range(n_draws):
            p = sample_pairing(rng, 4)
            pair = frozenset((0, int(p[0])))
            counts[pair] = counts.get(pair, 0) + 1
        assert len(counts) == 3
        for c in counts.values():
            assert abs(c / n_draws - 1 / 3) < 0.02

    def test_permutation_mode_is_bijection(self):
        p = sample_pairing(Prng(5), 9, mode="permutation")
        assert sorted(p.tolist()) == list(range(9))


class TestSampleCrop:
    def test_full_range_is_whole_map(self):
        cfg = CrossNormConfig(crop_frac_range=(1.0, 1.0))
        r = sample_crop(Prng(0), 8, 8, cfg)
        assert (r.top, r.left, r.height, r.width) == (0, 0, 8, 8)

    def test_height_range_half_to_full(self):
        cfg = CrossNormConfig(crop_frac_range=(0.5, 1.0))
        rng = Prng(1)
        seen = set()
        for _ in range(1000):
            r = sample_crop(rng, 8, 8, cfg)
            seen.add(r.height)
            assert 4 <= r.height <= 8 and 4 <= r.width <= 8
        assert seen == {4, 5, 6, 7, 8}

    def test_region_always_in_bounds(self):
        cfg = CrossNormConfig()
        rng = Prng(2)
        for _ in range(1000):
            h = int(rng.integers(2, 12))
            w = int(rng.integers(2, 12))
            r = sample_crop(rng, h, w, cfg)
            r.validate(h, w)

    def test_bad_frac_range_rejected(self):
        with pytest.raises(ConfigError):
            CrossNormConfig(crop_frac_range=(0.0, 1.0))
        with pytest.raises(ConfigError):
            CrossNormConfig(crop_frac_range=(0.9, 0.5))


class TestCrossNorm:
    def test_self_pairing_is_identity(self):
        x = Prng(3).normal(size=(3, 2, 5, 5))
        y, _ = crossnorm_forward(x, np.arange(3), None, NO_CROP)
        np.testing.assert_array_equal(y, x)

    def test_statistic_transplant(self):
        rng = Prng(4)
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        x[1] = x[1] * 2.0 + 10.0
        pairing = np.array([1, 0])
        y, _ = crossnorm_forward(x, pairing, None, NO_CROP)
        st_x = channel_stats(x)
        st_y = channel_stats(y)
        assert np.abs(st_y.mu[0] - st_x.mu[1]).max() < 1e-4
        assert np.abs(st_y.sigma[0] / st_x.sigma[1] - 1).max() < 1e-3
        assert np.abs(st_y.mu[1] - st_x.mu[0]).max() < 1e-4

    def test_crop_statistic_transplant(self):
        rng = Prng(5)
        x = rng.normal(size=(4, 3, 12, 12)).astype(np.float32) * 2 + 1
        cfg = CrossNormConfig(crop_enabled=True)
        pairing = sample_pairing(rng, 4)
        regions = [sample_crop(rng, 12, 12, cfg) for _ in range(4)]
        y, _ = crossnorm_forward(x, pairing, regions, cfg)
        donor = channel_stats(x, regions)
        out = channel_stats(y)
        for i in range(4):
            p = pairing[i]
            assert np.abs(out.mu[i] - donor.mu[p]).max() < 1e-4
            assert np.abs(out.sigma[i] / donor.sigma[p] - 1).max() < 1e-3

    def test_identical_stats_near_identity(self):
        rng = Prng(6)
        base = rng.normal(size=(1, 2, 6, 6))
        shuffled = base.reshape(1, 2, -1)[:, :, rng.permutation(36)].reshape(base.shape)
        x = np.concatenate([base, shuffled], axis=0)  # identical mean/std per channel
        y, _ = crossnorm_forward(x, np.array([1, 0]), None, NO_CROP)
        # swap with equal stats collapses to standardize-and-restore: y == x up to eps
        np.testing.assert_allclose(y, x, atol=1e-4)

    def test_permutation_equivariance(self):
        rng = Prng(7)
        x = rng.normal(size=(4, 2, 5, 5))
        pairing = sample_pairing(rng, 4)
        y, _ = crossnorm_forward(x, pairing, None, NO_CROP)
        perm = rng.permutation(4)
        inv = np.argsort(perm)
        pairing_p = inv[pairing[perm]]
        y_p, _ = crossnorm_forward(x[perm], pairing_p, None, NO_CROP)
        np.testing.assert_allclose(y_p, y[perm], atol=1e-10)

    def test_zero_upstream_zero_grad(self):
        rng = Prng(8)
        x = rng.normal(size=(4, 2, 5, 5))
        pairing = sample_pairing(rng, 4)
        _, cache = crossnorm_forward(x, pairing, None, NO_CROP)
        g = crossnorm_backward(cache, np.zeros_like(x))
        assert not g.any()

    def test_backward_finite_differences(self):
        rng = Prng(9)
        for trial in range(20):
            n = int(rng.integers(2, 6))
            c = int(rng.integers(1, 4))
            h = int(rng.integers(4, 9))
            crop = trial % 2 == 0
            cfg = CrossNormConfig(crop_enabled=crop)
            x = rng.normal(size=(n, c, h, h))
            pairing = sample_pairing(rng, n)
            regions = [sample_crop(rng, h, h, cfg) for _ in range(n)] if crop else None
            up = rng.normal(size=x.shape)

            def f(xx):
                y, cache = crossnorm_forward(xx, pairing, regions, cfg)
                return (y * up).sum(), crossnorm_backward(cache, up)

            assert grad_check(f, x) < 1e-4

    def test_pairing_length_mismatch(self):
        with pytest.raises(ConfigError):
            crossnorm_forward(np.zeros((3, 1, 4, 4)), np.array([1, 0]), None, NO_CROP)


class TestSelfNorm:
    def test_forced_unit_gates_is_exact_identity(self):
        rng = Prng(10)
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        params = SelfNormParams.init(rng, 3, 2, np.float32)
        y, _ = selfnorm_forward(x, channel_stats(x), params, gate_override=(1.0, 1.0))
        assert np.abs(y - x).max() < 1e-6

    def test_half_mean_gate_on_zero_mean_channel(self):
        rng = Prng(11)
        x = rng.normal(size=(1, 2, 8, 8))
        x -= x.mean(axis=(2, 3), keepdims=True)
        params = SelfNormParams.init(rng, 2, 2, np.float64)
        y, _ = selfnorm_forward(x, channel_stats(x), params, gate_override=(0.5, 1.0))
        np.testing.assert_allclose(y, x, atol=1e-12)

    def test_scalar_closed_form_oracle(self):
        # independent scalar evaluation of the recalibration map on a 1x1x2x2 input
        x = np.array([[[[0.5, 1.5], [2.5, -0.5]]]])
        rng = Prng(12)
        params = SelfNormParams.init(rng, 1, 2, np.float64)
        y, _ = selfnorm_forward(x, channel_stats(x), params)

        vals = x.reshape(-1)
        mu = vals.mean()
        sigma = math.sqrt(((vals - mu) ** 2).mean())

        def gate(w1, b1, w2, b2):
            z = [w1[h][0] * mu + w1[h][1] * sigma + b1[h] for h in range(2)]
            t = [math.tanh(v) for v in z]
            o = sum(w2[h] * t[h] for h in range(2)) + b2
            return 1.0 / (1.0 + math.exp(-o))

        f = gate(params.mean_w1[0], params.mean_b1[0], params.mean_w2[0], params.mean_b2[0])
        g = gate(params.std_w1[0], params.std_b1[0], params.std_w2[0], params.std_b2[0])
        sigma_new = g * sigma
        mu_new = f * mu
        want = sigma_new * (vals - mu) / sigma + mu_new
        np.testing.assert_allclose(y.reshape(-1), want, atol=1e-12)

    def test_output_stat_law(self):
        rng = Prng(13)
        x = (rng.normal(size=(4, 5, 10, 10)) * 1.5 + 0.7).astype(np.float32)
        params = SelfNormParams.init(rng, 5, 2, np.float32)
        stats = channel_stats(x)
        y, cache = selfnorm_forward(x, stats, params)
        out = channel_stats(y)
        np.testing.assert_allclose(out.mu, cache["f"] * stats.mu, atol=1e-4)
        np.testing.assert_allclose(out.sigma, cache["g"] * stats.sigma, rtol=1e-3)

    def test_gates_strictly_in_unit_interval(self):
        rng = Prng(14)
        params = SelfNormParams.init(rng, 4, 2, np.float64)
        mu = rng.normal(0, 100, size=(6250, 4))
        sigma = np.abs(rng.normal(0, 100, size=(6250, 4)))
        from normrl.normlayers import ChannelStats

        x = np.zeros((6250, 4, 1, 2))
        x[:, :, 0, 0] = mu - sigma
        x[:, :, 0, 1] = mu + sigma
        _, cache = selfnorm_forward(x, ChannelStats(mu, sigma), params)
        for gate in (cache["f"], cache["g"]):
            assert gate.min() > 0.0
            assert gate.max() < 1.0

    def test_zero_upstream_zero_grads(self):
        rng = Prng(15)
        x = rng.normal(size=(2, 3, 5, 5))
        params = SelfNormParams.init(rng, 3, 2, np.float64)
        _, cache = selfnorm_forward(x, channel_stats(x), params)
        g, gp = selfnorm_backward(cache, np.zeros_like(x))
        assert not g.any()
        assert all(not v.any() for v in gp.values())

    def test_backward_finite_differences(self):
        rng = Prng(16)
        for trial in range(10):
            n = int(rng.integers(1, 4))
            c = int(rng.integers(1, 4))
            h = int(rng.integers(3, 7))
            x = rng.normal(size=(n, c, h, h))
            params = SelfNormParams.init(rng, c, 2, np.float64)
            params.mean_w1 += rng.normal(0, 0.3, size=params.mean_w1.shape)
            params.std_w1 += rng.normal(0, 0.3, size=params.std_w1.shape)
            up = rng.normal(size=x.shape)

            def f_x(xx):
                y, cache = selfnorm_forward(xx, channel_stats(xx), params)
                g, _ = selfnorm_backward(cache, up)
                return (y * up).sum(), g

            assert grad_check(f_x, x, min_grad=1e-5) < 1e-4

            name = ("mean_w1", "std_w2", "mean_b2", "std_b1")[trial % 4]

            def f_p(arr):
                d = {k: v.copy() for k, v in params.arrays().items()}
                d[name] = arr
                p2 = SelfNormParams(**d)
                y, cache = selfnorm_forward(x, channel_stats(x), p2)
                _, gp = selfnorm_backward(cache, up)
                return (y * up).sum(), gp[name]

            assert grad_check(f_p, params.arrays()[name].copy(), min_grad=1e-5) < 1e-4

    def test_parameter_count_matches_contract(self):
        h = 2
        c = 5
        params = SelfNormParams.init(Prng(17), c, h, np.float32)
        total = sum(v.size for v in params.arrays().values())
        assert total == c * 2 * (2 * h + h + h + 1)


class TestBatchNorm:
    def test_train_mode_standardizes_batch(self):
        rng = Prng(18)
        x = (rng.normal(size=(8, 3, 6, 6)) * 2.0 + 3.0).astype(np.float32)
        state = BatchNormState.init(3, np.float32)
        y, _ = batchnorm_forward(x, state, train=True)
        m = y.mean(axis=(0, 2, 3))
        s = y.std(axis=(0, 2, 3))
        assert np.abs(m).max() < 1e-5
        assert np.abs(s - 1).max() < 1e-4

    def test_eval_with_unit_running_stats_is_identity(self):
        rng = Prng(19)
        x = rng.normal(size=(4, 2, 5, 5)).astype(np.float64)
        state = BatchNormState.init(2, np.float64)
        y, _ = batchnorm_forward(x, state, train=False)
        np.testing.assert_allclose(y, x, atol=1e-4)

    def test_running_stats_updated_in_train_only(self):
        rng = Prng(20)
        x = rng.normal(size=(6, 2, 4, 4)) + 5.0
        state = BatchNormState.init(2, np.float64)
        batchnorm_forward(x, state, train=False)
        np.testing.assert_array_equal(state.running_mean, np.zeros(2))
        batchnorm_forward(x, state, train=True)
        assert np.abs(state.running_mean - 0.1 * x.mean(axis=(0, 2, 3))).max() < 1e-12
        assert (state.running_var >= 0).all()

    def test_backward_finite_differences(self):
        rng = Prng(21)
        for trial in range(10):
            n = int(rng.integers(2, 5))
            c = int(rng.integers(1, 4))
            x = rng.normal(size=(n, c, 4, 4))
            gamma = rng.normal(1.0, 0.3, size=c)
            beta = rng.normal(size=c)
            train = trial % 3 != 0
            up = rng.normal(size=x.shape)

            def make_state():
                st = BatchNormState.init(c, np.float64)
                st.gamma = gamma.copy()
                st.beta = beta.copy()
                st.running_mean = np.full(c, 0.2)
                st.running_var = np.full(c, 1.4)
                return st

            def f_x(xx):
                y, cache = batchnorm_forward(xx, make_state(), train)
                g, _, _ = batchnorm_backward(cache, up)
                return (y * up).sum(), g

            def f_g(gg):
                st = make_state()
                st.gamma = gg
                y, cache = batchnorm_forward(x, st, train)
                _, dg, _ = batchnorm_backward(cache, up)
                return (y * up).sum(), dg

            assert grad_check(f_x, x, min_grad=1e-5) < 1e-4
            assert grad_check(f_g, gamma.copy(), min_grad=1e-5) < 1e-4
