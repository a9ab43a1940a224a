import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tide import numerics as nx
from tide.schedule import (
    ConfigError,
    NoiseSchedule,
    WeightFn,
    build_schedule,
    ddim_sample,
    ddim_step,
    dm_loss,
    forward_diffuse,
    forward_step,
)

schedules = st.builds(
    lambda T, lo, span: build_schedule("linear", T, lo, min(lo + span, 0.5)),
    st.integers(1, 60),
    st.floats(1e-4, 0.1),
    st.floats(0.0, 0.4),
)


class TestBuild:
    def test_constant_running_product(self):
        s = build_schedule("constant", 10, 0.02)
        assert s.alpha_bar[1] == pytest.approx(0.98, abs=1e-15)
        assert s.alpha_bar[2] == pytest.approx(0.9604, abs=1e-15)

    def test_linear_closed_form(self):
        s = build_schedule("linear", 2, 0.1, 0.3)
        assert np.allclose(s.beta, [0.1, 0.3], atol=1e-15)
        assert np.allclose(s.alpha_bar, [1.0, 0.9, 0.63], atol=1e-15)

    def test_long_linear_tail(self):
        s = build_schedule("linear", 1000, 1e-4, 0.02)
        betas = 1e-4 + (0.02 - 1e-4) * np.arange(1000) / 999
        direct = math.prod(1.0 - b for b in betas)
        assert s.alpha_bar[-1] == pytest.approx(direct, rel=1e-10)
        assert 0 < s.alpha_bar[-1] < 0.01

    @pytest.mark.parametrize(
        "args",
        [("linear", 0, 0.1, 0.2), ("linear", 5, 0.3, 0.2), ("linear", 5, 0.0, 0.2), ("constant", 3, 1.0), ("cosine", 3, 0.1, 0.2)],
    )
    def test_rejects(self, args):
        with pytest.raises(ConfigError):
            build_schedule(*args)

    def test_arrays_read_only(self):
        s = build_schedule("linear", 4, 0.1, 0.2)
        with pytest.raises(ValueError):
            s.alpha_bar[1] = 0.5

    def test_dict_roundtrip(self):
        s = build_schedule("linear", 50, 1e-3, 0.2)
        back = NoiseSchedule.from_dict(s.to_dict())
        assert np.array_equal(back.alpha_bar, s.alpha_bar)

    def test_snr(self):
        s = build_schedule("constant", 3, 0.5)
        assert s.snr(1) == pytest.approx(1.0)
        with pytest.raises(IndexError):
            s.snr(0)

    @given(schedules)
    def test_alpha_bar_invariants(self, s):
        ab = s.alpha_bar
        assert ab[0] == 1.0
        assert np.all(np.diff(ab) < 0)
        assert ab[-1] > 0
        assert np.all((s.beta > 0) & (s.beta < 1))


class TestWeightFn:
    def test_constant(self):
        assert WeightFn(value=2.5)(123.0) == 2.5

    @pytest.mark.parametrize("kw", [{"value": 0.0}, {"value": -1.0}, {"kind": "snr"}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            WeightFn(**kw)


class TestForward:
    def test_zero_noise(self, rng):
        s = build_schedule("linear", 10, 0.01, 0.2)
        x0 = rng.standard_normal((3, 2))
        assert np.array_equal(forward_diffuse(x0, 4, np.zeros_like(x0), s), np.sqrt(s.alpha_bar[4]) * x0)

    def test_zero_signal(self, rng):
        s = build_schedule("linear", 10, 0.01, 0.2)
        e = rng.standard_normal((3, 2))
        assert np.array_equal(forward_diffuse(np.zeros_like(e), 7, e, s), np.sqrt(1 - s.alpha_bar[7]) * e)

    def test_marginal_variance(self, rng):
        s = build_schedule("linear", 20, 0.01, 0.2)
        t = 6
        xt = forward_diffuse(np.zeros(10_000), t, rng.standard_normal(10_000), s)
        assert xt.var() == pytest.approx(1 - s.alpha_bar[t], rel=0.05)

    @pytest.mark.parametrize("t", [0, 11])
    def test_t_range(self, t):
        s = build_schedule("linear", 10, 0.01, 0.2)
        with pytest.raises(IndexError):
            forward_diffuse(np.zeros(2), t, np.zeros(2), s)

    def test_shape_mismatch(self):
        s = build_schedule("linear", 10, 0.01, 0.2)
        with pytest.raises(ValueError):
            forward_diffuse(np.zeros(2), 1, np.zeros(3), s)

    def test_step_scaling(self, rng):
        s = build_schedule("constant", 3, 0.19)
        x = rng.standard_normal(5)
        assert np.allclose(forward_step(x, 2, np.zeros(5), s), 0.9 * x, atol=1e-15)
        n = rng.standard_normal(5)
        assert np.allclose(forward_step(np.zeros(5), 2, n, s), np.sqrt(0.19) * n, atol=1e-15)

    def test_markov_chain_matches_marginal(self, rng):
        s = build_schedule("linear", 8, 0.02, 0.3)
        x0 = 1.5
        x = np.full(10_000, x0)
        for t in range(1, 7):
            x = forward_step(x, t, rng.standard_normal(x.shape), s)
        ab = s.alpha_bar[6]
        assert x.mean() == pytest.approx(np.sqrt(ab) * x0, rel=0.05)
        assert x.var() == pytest.approx(1 - ab, rel=0.05)


class TestDDIM:
    def test_first_step_recovers_x0(self, rng):
        s = build_schedule("linear", 10, 0.01, 0.2)
        x0, e = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        assert np.max(np.abs(ddim_step(forward_diffuse(x0, 1, e, s), e, 1, s) - x0)) < 1e-12

    def test_degenerate_equal_alpha_bar(self, rng):
        # beta tiny enough that consecutive alpha_bar round to the same float
        s = build_schedule("constant", 2, 1e-17)
        assert s.alpha_bar[1] == s.alpha_bar[2]
        x = rng.standard_normal(6)
        assert np.array_equal(ddim_step(x, np.zeros(6), 2, s), x)

    @given(schedules, st.integers(0, 2**32 - 1))
    def test_oracle_inversion(self, s, seed):
        r = np.random.default_rng(seed)
        x0, e = r.standard_normal((2, 2, 3)), r.standard_normal((2, 2, 3))
        x = forward_diffuse(x0, s.T, e, s)
        for t in range(s.T, 0, -1):
            x = ddim_step(x, e, t, s)
        assert np.max(np.abs(x - x0)) < 1e-9

    def test_step_range(self):
        s = build_schedule("linear", 3, 0.1, 0.2)
        with pytest.raises(IndexError):
            ddim_step(np.zeros(2), np.zeros(2), 0, s)

    def test_sample_deterministic(self):
        s = build_schedule("linear", 10, 0.01, 0.2)
        pred = lambda x, t: np.tanh(x) * t / 10  # noqa: E731
        a = ddim_sample(pred, (3, 3), s, seed=5)
        b = ddim_sample(pred, (3, 3), s, seed=5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, ddim_sample(pred, (3, 3), s, seed=6))

    def test_sample_single_step_closed_form(self):
        s = build_schedule("constant", 1, 0.3)
        x1 = np.random.default_rng(9).standard_normal((2, 3))
        out = ddim_sample(lambda x, t: np.zeros_like(x), (2, 3), s, seed=9)
        assert np.allclose(out, x1 / np.sqrt(s.alpha_bar[1]), atol=1e-15)

    def test_sample_learns_mean(self):
        # exact noise predictor for data concentrated at mu: eps = (x - sqrt(ab) mu) / sqrt(1 - ab)
        s = build_schedule("linear", 50, 1e-3, 0.2)
        mu = np.array([0.7, -0.4])

        def pred(x, t):
            ab = s.alpha_bar[t]
            return (x - np.sqrt(ab) * mu) / np.sqrt(1 - ab)

        outs = np.array([ddim_sample(pred, (2,), s, seed=k) for k in range(50)])
        assert np.allclose(outs.mean(axis=0), mu, rtol=0.1)


class TestDMLoss:
    def test_zero(self, rng):
        s = build_schedule("linear", 5, 0.01, 0.2)
        e = rng.standard_normal(4)
        assert dm_loss(e, e, 2, WeightFn(), s).item() == 0.0

    def test_unit(self):
        s = build_schedule("linear", 5, 0.01, 0.2)
        assert dm_loss(np.array([1.0, 0.0]), np.zeros(2), 3, WeightFn(), s).item() == 1.0

    def test_shape_mismatch(self):
        s = build_schedule("linear", 5, 0.01, 0.2)
        with pytest.raises(ValueError):
            dm_loss(np.zeros(2), np.zeros(3), 1, WeightFn(), s)

    def test_gradient(self, rng):
        s = build_schedule("linear", 5, 0.01, 0.2)
        w = WeightFn(value=1.7)
        e = rng.standard_normal((2, 3))
        p = nx.ParamSet({"h": rng.standard_normal((2, 3))})
        _, g = nx.value_and_grad(lambda q: dm_loss(e, q["h"], 4, w, s), p)
        assert np.allclose(g["h"], 2 * 1.7 * (p["h"].data - e), atol=1e-12)
        assert nx.finite_diff_check(lambda q: dm_loss(e, q["h"], 4, w, s), p).passed
