import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freedom.schedule import (
    DiffusionState,
    NoiseSchedule,
    RngSpec,
    ScheduleError,
    STREAM_INIT,
    STREAM_STEP,
    forward_noise,
    make_linear_schedule,
)


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.1, 0.1)
    assert s.betas.tolist() == [0.1]
    assert s.alpha_bars[0] == pytest.approx(0.9, rel=1e-15)


def test_two_step_product():
    s = make_linear_schedule(2, 0.1, 0.2)
    assert s.alpha_bar(2) == pytest.approx(0.72, rel=1e-14)


def test_alpha_bar_T_matches_extended_precision_product():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    mpmath.mp.dps = 50
    acc = mpmath.mpf(1)
    for i in range(1000):
        beta = mpmath.mpf(1e-4) + (mpmath.mpf(0.02) - mpmath.mpf(1e-4)) * i / 999
        acc *= 1 - beta
    assert abs(s.alpha_bar(1000) - float(acc)) <= 1e-12 * float(acc)


def test_linear_endpoints_and_monotone():
    s = make_linear_schedule()
    assert s.T == 1000
    assert s.betas[0] == 1e-4 and s.betas[-1] == pytest.approx(0.02, rel=1e-15)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bar(0) == 1.0


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0), (2.5, 0.1, 0.2)])
def test_rejects_bad_schedules(args):
    with pytest.raises(ScheduleError):
        make_linear_schedule(*args)


def test_inconsistent_alpha_bars_rejected():
    betas = np.array([0.1, 0.2])
    with pytest.raises(ScheduleError):
        NoiseSchedule(betas, np.array([0.9, 0.7]))


def test_schedule_arrays_are_read_only():
    s = make_linear_schedule(10, 0.01, 0.02)
    with pytest.raises(ValueError):
        s.betas[0] = 0.5


@pytest.mark.parametrize("t", [0, 11, -1])
def test_timestep_range(t):
    s = make_linear_schedule(10, 0.01, 0.02)
    with pytest.raises(ScheduleError):
        s.beta(t)
    with pytest.raises(ScheduleError):
        forward_noise(np.zeros(2), t, s, RngSpec(0))


@settings(max_examples=50, deadline=None)
@given(
    T=st.integers(1, 300),
    lo=st.floats(1e-5, 0.05),
    span=st.floats(0.0, 0.3),
)
def test_schedule_invariants(T, lo, span):
    s = make_linear_schedule(T, lo, lo + span)
    assert np.all(s.betas > 0) and np.all(s.betas < 1)
    recomputed = np.cumprod(1.0 - s.betas)
    assert np.all(np.abs(recomputed - s.alpha_bars) <= 1e-12 * recomputed)
    assert np.all(np.diff(np.concatenate([[1.0], s.alpha_bars])) < 0)


def test_forward_noise_zero_noise_level():
    # abar_t == 1 is only reachable through a schedule whose noise vanishes to
    # double precision: beta = 1e-17 leaves 1 - beta == 1 exactly.
    s = NoiseSchedule(np.array([1e-17]), np.array([1.0]))
    x0 = np.array([1.5, -2.0])
    np.testing.assert_array_equal(forward_noise(x0, 1, s, RngSpec(3)), x0)


def test_forward_noise_pure_scaling():
    s = make_linear_schedule(100, 1e-3, 0.05)
    eps = np.random.default_rng(0).standard_normal(3)
    out = forward_noise(np.zeros(3), 40, s, None, noise=eps)
    np.testing.assert_allclose(out, np.sqrt(1 - s.alpha_bar(40)) * eps, rtol=0, atol=0)


def test_forward_noise_monte_carlo_moments():
    s = make_linear_schedule()
    t, N = 300, 100_000
    x0 = np.array([2.0, -1.0])
    xs = forward_noise(np.broadcast_to(x0, (N, 2)), t, s, RngSpec(11))
    ab = s.alpha_bar(t)
    sigma = np.sqrt(1 - ab)
    assert np.all(np.abs(xs.mean(0) - np.sqrt(ab) * x0) <= 4 * sigma / np.sqrt(N))
    np.testing.assert_allclose(xs.var(0), 1 - ab, rtol=0.02)


def test_rng_streams_reproducible_and_distinct():
    a = RngSpec(7).generator(STREAM_STEP).standard_normal(5)
    b = RngSpec(7).generator(STREAM_STEP).standard_normal(5)
    c = RngSpec(7).generator(STREAM_INIT).standard_normal(5)
    d = RngSpec(7, stream_id=1).generator(STREAM_STEP).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_rng_seed_range():
    RngSpec(2**64 - 1)
    with pytest.raises(ValueError):
        RngSpec(2**64)
    with pytest.raises(ValueError):
        RngSpec(-1)


def test_diffusion_state_finite():
    assert DiffusionState(3, np.zeros(2)).is_finite()
    assert not DiffusionState(3, np.array([np.nan, 0.0])).is_finite()
