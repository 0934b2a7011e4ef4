import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsrdm.carrier import synth_carrier
from dsrdm.schedule import (
    MatchInfeasible,
    claimed_scale,
    default_step,
    forward_sample,
    linear_schedule,
    match_to_channel,
    verify_matching,
)


class TestLinearSchedule:
    def test_single_step(self):
        s = linear_schedule(1, 0.1, 0.1)
        assert s.abar(1) == pytest.approx(0.9)

    def test_standard_setting_end_value(self):
        s = linear_schedule(1000, 1e-4, 0.02)
        direct = math.prod(1.0 - b for b in np.linspace(1e-4, 0.02, 1000))
        assert s.abar(1000) == pytest.approx(direct, rel=1e-12)
        assert s.abar(1000) == pytest.approx(4.04e-5, rel=0.01)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 2000), st.floats(1e-5, 0.05), st.floats(0.0, 0.2))
    def test_strictly_decreasing(self, T, b0, extra):
        s = linear_schedule(T, b0, min(b0 + extra, 0.5))
        assert np.all(np.diff(s.alpha_bar) < 0)

    def test_cumprod_matches_direct_product(self):
        s = linear_schedule(10_000, 1e-4, 0.02)
        beta = np.linspace(1e-4, 0.02, 10_000)
        for t in (1, 17, 5000, 10_000):
            assert s.abar(t) == pytest.approx(math.prod(1 - beta[:t]), rel=1e-12)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 0.01), (10, 1e-4, 1.0)])
    def test_rejects_bad_parameters(self, args):
        with pytest.raises(ValueError):
            linear_schedule(*args)

    def test_step_range(self):
        with pytest.raises(ValueError):
            linear_schedule(10).abar(11)


class TestForwardSample:
    def test_identities(self):
        s = linear_schedule(100)
        rng = np.random.default_rng(0)
        x0, eps = rng.uniform(-1, 1, (4, 4, 3)), rng.standard_normal((4, 4, 3))
        ab = s.abar(40)
        np.testing.assert_allclose(forward_sample(x0, np.zeros_like(x0), 40, s), math.sqrt(ab) * x0)
        np.testing.assert_allclose(forward_sample(np.zeros_like(x0), eps, 40, s), math.sqrt(1 - ab) * eps)
        inv = (forward_sample(x0, eps, 40, s) - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
        assert np.max(np.abs(inv - eps)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward_sample(np.zeros(4), np.zeros(5), 1, linear_schedule(10))


def sched_with_abar(value):
    """A one-step schedule whose alpha_bar is ``value``."""
    return linear_schedule(1, 1 - value, 1 - value)


class TestMatching:
    def test_budget_example(self):
        ms = match_to_channel(sched_with_abar(0.5), 1, np.array([0.1]))
        assert ms.alpha_bar_i[0] == pytest.approx(0.6)
        assert ms.carrier_scale[0] == pytest.approx(math.sqrt(0.6 / 0.5))

    def test_printed_rule_example(self):
        ms = match_to_channel(sched_with_abar(0.5), 1, np.array([0.1]), rule="printed")
        assert ms.alpha_bar_i[0] == pytest.approx(0.4)
        assert ms.w[0] == pytest.approx(0.7)

    def test_infeasible(self):
        with pytest.raises(MatchInfeasible):
            match_to_channel(sched_with_abar(0.5), 1, np.array([0.6]))

    def test_zero_noise_is_identity(self):
        s = linear_schedule(100)
        ms = match_to_channel(s, 30, np.zeros(6))
        np.testing.assert_array_equal(ms.alpha_bar_i, np.full(6, s.abar(30)))
        np.testing.assert_array_equal(ms.carrier_scale, np.ones(6))

    def test_clip_keeps_unmatched_elements_at_pretrained_level(self):
        ms = match_to_channel(sched_with_abar(0.5), 1, np.array([0.1, 0.7]), on_infeasible="clip")
        np.testing.assert_array_equal(ms.clipped, [False, True])
        assert ms.alpha_bar_i[1] == pytest.approx(0.5)
        assert ms.carrier_scale[1] == pytest.approx(1.0)
        assert ms.budget_residual() < 1e-15

    def test_negative_noise(self):
        with pytest.raises(ValueError):
            match_to_channel(linear_schedule(10), 5, np.array([-0.1]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 1000), st.lists(st.floats(0, 0.9), min_size=1, max_size=20))
    def test_budget_and_mean_identities(self, t, noise):
        s = linear_schedule(1000)
        noise = np.array(noise)
        noise = noise * (1 - s.abar(t)) * 0.99
        ms = match_to_channel(s, t, noise)
        ab = s.abar(t)
        np.testing.assert_allclose((1 - ms.alpha_bar_i) + noise, 1 - ab, rtol=0, atol=1e-15)
        np.testing.assert_allclose(math.sqrt(ab) * ms.carrier_scale, np.sqrt(ms.alpha_bar_i), rtol=1e-13)

    def test_signal_share_falls_as_noise_rises(self):
        s = linear_schedule(1000)
        noise = np.linspace(0, 0.5, 11)
        ms = match_to_channel(s, 800, noise)
        share = np.sqrt(1 - ms.alpha_bar_i)
        assert np.all(np.diff(share) < 0)
        np.testing.assert_allclose(ms.w, 1 - s.abar(800), atol=1e-15)

    def test_default_step(self):
        s = linear_schedule(1000)
        assert default_step(s, np.full(4, 0.05)) == 1000
        t = default_step(linear_schedule(16, 0.01, 0.01), np.full(4, 0.05))
        assert t is not None and 1 - linear_schedule(16, 0.01, 0.01).abar(t) > 0.06
        assert default_step(s, np.full(4, 2.0)) is None

    def test_default_step_skips_too_quiet_steps(self):
        s = linear_schedule(16, 0.01, 0.01)
        t = default_step(s, np.array([0.05]))
        assert t == 16
        assert default_step(s, np.array([0.14])) is None


@pytest.fixture(scope="module")
def setup():
    s = linear_schedule(1000)
    x0 = synth_carrier(8, "gaussian-blob", 3).data
    noise = np.random.default_rng(0).uniform(0.02, 0.3, x0.shape)
    return s, x0, noise


class TestVerifyMatching:
    def test_matched_passes(self, setup):
        s, x0, noise = setup
        ms = match_to_channel(s, 600, noise)
        rep = verify_matching(ms, x0, 10_000, seed=1)
        assert rep.mean_ok and rep.var_ok and rep.ks_ok
        assert rep.passed

    def test_qam_payload_also_matches_in_moments(self, setup):
        s, x0, noise = setup
        rep = verify_matching(match_to_channel(s, 600, noise), x0, 10_000, seed=2, M=16)
        assert rep.mean_ok and rep.var_ok

    @pytest.mark.parametrize("rule", ["printed", "identity"])
    def test_wrong_scale_fails_mean(self, setup, rule):
        s, x0, noise = setup
        rep = verify_matching(match_to_channel(s, 300, noise), x0, 10_000, seed=3, scale_rule=rule)
        assert not rep.mean_ok

    def test_printed_schedule_rule_fails_variance(self, setup):
        s, x0, noise = setup
        ms = match_to_channel(s, 300, noise, rule="printed")
        rep = verify_matching(ms, x0, 10_000, seed=4)
        assert not rep.var_ok

    def test_zero_noise_same_law(self, setup):
        s, x0, _ = setup
        ms = match_to_channel(s, 600, np.zeros(x0.shape))
        rep = verify_matching(ms, x0, 10_000, seed=5)
        assert rep.passed and rep.ks_pvalue >= 0.01

    def test_claimed_scales(self, setup):
        s, _, noise = setup
        ms = match_to_channel(s, 600, noise)
        np.testing.assert_allclose(claimed_scale(ms, "printed") * claimed_scale(ms, "matched"), 1.0)
        with pytest.raises(ValueError):
            claimed_scale(ms, "other")

    def test_needs_trials(self, setup):
        s, x0, noise = setup
        with pytest.raises(ValueError):
            verify_matching(match_to_channel(s, 600, noise), x0, 50)
