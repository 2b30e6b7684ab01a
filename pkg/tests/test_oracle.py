import math

import numpy as np
import pytest
from scipy import stats

from freedom.energy import L2Target, LinearOperator, MixtureClass, RegionBall, stack_of
from freedom.oracle import (
    OracleError,
    OracleSampler,
    TwoSampleReport,
    calibrate_rho,
    ddnm_direction,
    dps_ddnm_suite,
    dps_direction,
    energy_distance,
    finite_diff_check,
    grid_posterior,
    paired_mean_test,
    rejection_sample,
    total_variation,
    two_sample_test,
)
from freedom.schedule import RngSpec, make_linear_schedule
from freedom.scores import gaussian_mixture, isotropic_gaussian, sample_data
from freedom.tasks import TASKS, gaussian_quadratic_posterior, three_gmm

SCHED = make_linear_schedule()
BOX = [(-8.0, 8.0), (-8.0, 8.0)]


# -- rejection sampling -------------------------------------------------------


def test_rejection_lambda_zero_is_base_model():
    m = three_gmm()
    res = rejection_sample(OracleSampler(m, stack_of([MixtureClass(m, 0)]), 0.0), 2000, RngSpec(0))
    assert res.acceptance_rate == 1.0
    ref = sample_data(m, 2000, np.random.default_rng(1))
    assert two_sample_test(res.samples, ref, n_perm=500, seed=0).p_value > 0.01


def test_rejection_tiny_ball_support():
    m = three_gmm()
    ball = RegionBall([3.0, 0.0], 0.3)
    res = rejection_sample(OracleSampler(m, stack_of([ball]), 1e12), 500, RngSpec(2))
    dist = np.linalg.norm(res.samples - ball.center, axis=1)
    assert np.all(dist <= 0.3 + 1e-5)


def test_rejection_mixture_class_closed_form():
    # at lambda = 1 the acceptance probability is r_k(x), so accepted draws
    # follow component k exactly and the acceptance rate is w_k
    m = three_gmm()
    k, n = 2, 3000
    res = rejection_sample(OracleSampler(m, stack_of([MixtureClass(m, k)]), 1.0), n, RngSpec(3))
    w = m.weights[k]
    sd = math.sqrt(w * (1 - w) / res.proposals)
    assert abs(res.acceptance_rate - w) <= 3 * sd
    comp = m.means[k] + m.scales[k] * np.random.default_rng(4).standard_normal((n, 2))
    assert two_sample_test(res.samples, comp, n_perm=500, seed=1).p_value > 0.01


def test_rejection_reweighted_component_frequencies():
    # Gaussian-mixture base tilted by exp(-lam ||x - c||^2) is again a mixture;
    # component k gets weight proportional to w_k Z_k with
    # Z_k = (1 + 2 lam s_k^2)^(-d/2) exp(-lam ||mu_k - c||^2 / (1 + 2 lam s_k^2)).
    means = np.array([[-12.0, 0.0], [0.0, 12.0], [12.0, 0.0]])
    m = gaussian_mixture([0.5, 0.3, 0.2], means, [1.0, 0.8, 1.2])
    c = np.array([4.0, 2.0])
    lam = 0.01
    a = 1 + 2 * lam * m.scales**2
    z = a ** (-1.0) * np.exp(-lam * ((m.means - c) ** 2).sum(1) / a)
    expected = m.weights * z / (m.weights * z).sum()
    n = 6000
    res = rejection_sample(OracleSampler(m, stack_of([L2Target(c)]), lam), n, RngSpec(5))
    labels = ((res.samples[:, None, :] - means[None]) ** 2).sum(-1).argmin(1)
    freq = np.bincount(labels, minlength=3) / n
    assert np.all(np.abs(freq - expected) <= 3 * np.sqrt(expected * (1 - expected) / n))


def test_rejection_aborts_at_low_acceptance():
    m = isotropic_gaussian([0.0, 0.0])
    with pytest.raises(OracleError):
        rejection_sample(OracleSampler(m, stack_of([RegionBall([9.0, 9.0], 0.1)]), 1e6), 10, RngSpec(6))


def test_oracle_validation():
    m = isotropic_gaussian([0.0, 0.0, 0.0])
    with pytest.raises(OracleError):
        OracleSampler(m, stack_of([L2Target([0.0, 0.0, 0.0])]), 1.0, "grid")
    with pytest.raises(OracleError):
        OracleSampler(m, stack_of([L2Target([0.0, 0.0, 0.0])]), -1.0)


# -- grid posterior -----------------------------------------------------------


def test_grid_lambda_zero_equals_base():
    m = three_gmm()
    g = grid_posterior(OracleSampler(m, stack_of([MixtureClass(m, 0)]), 0.0), BOX, 160)
    np.testing.assert_allclose(g.density, g.base_density, rtol=1e-12)
    assert abs(g.total_mass() - 1) <= 1e-6


def test_grid_conjugate_gaussian():
    mean, scale, target, lam = np.array([0.5, -0.3]), 1.2, np.array([1.5, 0.5]), 0.7
    m = isotropic_gaussian(mean, scale)
    g = grid_posterior(OracleSampler(m, stack_of([L2Target(target)]), lam), BOX, 200)
    mu, sd = gaussian_quadratic_posterior(mean, scale, target, lam)
    exact = stats.multivariate_normal(mu, sd**2 * np.eye(2)).pdf(g.points()).reshape(g.density.shape)
    # the table is normalised by a midpoint sum, so allow that quadrature error
    np.testing.assert_allclose(g.density, exact, atol=1e-6)
    assert abs(g.total_mass() - 1) <= 1e-6
    np.testing.assert_allclose(g.mean(), mu, atol=1e-6)


def test_grid_refinement_converges():
    m = three_gmm()
    oracle = OracleSampler(m, stack_of([MixtureClass(m, 0)]), 1.0)
    coarse = grid_posterior(oracle, BOX, 200)
    fine = grid_posterior(oracle, BOX, 400)
    assert total_variation(fine.coarsen(), coarse.masses) < 1e-4


def test_grid_coverage_error():
    m = isotropic_gaussian([0.0, 0.0])
    with pytest.raises(OracleError):
        grid_posterior(OracleSampler(m, stack_of([L2Target([0.0, 0.0])]), 1.0, "grid"), [(-2, 2), (-2, 2)], 50)


def test_grid_sample_moments():
    m = isotropic_gaussian([0.0, 0.0])
    g = grid_posterior(OracleSampler(m, stack_of([L2Target([1.0, 1.0])]), 1.0), BOX, 200)
    x = g.sample(20_000, np.random.default_rng(0))
    mu, sd = gaussian_quadratic_posterior([0.0, 0.0], 1.0, [1.0, 1.0], 1.0)
    assert np.all(np.abs(x.mean(0) - mu) <= 4 * sd / math.sqrt(20_000))


@pytest.mark.parametrize("name", ["gaussian-quadratic", "gmm-class", "bimodal-steer", "two-term-steer",
                                  "linear-inverse"])
def test_rejection_and_grid_agree_on_tasks(name):
    task = TASKS[name]
    rej = rejection_sample(OracleSampler(task.model, task.stack, 1.0), 2000, RngSpec(7)).samples
    g = grid_posterior(OracleSampler(task.model, task.stack, 1.0, "grid"), BOX, 300)
    grid_draws = g.sample(2000, np.random.default_rng(8))
    assert two_sample_test(rej, grid_draws, n_perm=500, seed=2).p_value > 0.01


# -- two-sample tests ---------------------------------------------------------


def test_identical_sets():
    a = np.random.default_rng(0).normal(size=(300, 2))
    assert energy_distance(a, a) == pytest.approx(0.0, abs=1e-12)
    rep = two_sample_test(a, a.copy(), n_perm=500)
    assert rep.statistic == pytest.approx(0.0, abs=1e-12) and rep.p_value > 0.5


@pytest.mark.parametrize("metric", ["energy", "mmd", "ks"])
def test_disjoint_clusters(metric):
    gen = np.random.default_rng(1)
    a = gen.normal(size=(200, 2))
    b = gen.normal(size=(200, 2)) + 6.0
    rep = two_sample_test(a, b, metric=metric, n_perm=500)
    assert rep.p_value < 0.01 and rep.n_perm == 500
    assert 0 < rep.p_value <= 1


def test_degenerate_inputs_flagged():
    rep = two_sample_test(np.ones((5, 2)), np.ones((7, 2)))
    assert rep.degenerate and rep.p_value == 1.0
    with pytest.raises(ValueError):
        two_sample_test(np.zeros((0, 2)), np.ones((3, 2)))


def test_report_serialisation_and_bandwidth():
    gen = np.random.default_rng(2)
    rep = two_sample_test(gen.normal(size=(100, 2)), gen.normal(size=(100, 2)), metric="mmd", n_perm=500)
    assert rep.bandwidth is not None and rep.bandwidth > 0
    row = rep.csv_row()
    assert len(row) == len(TwoSampleReport.CSV_FIELDS) and row[0] == "mmd"
    assert "mmd" in rep.summary()


def test_sliced_close_to_exact():
    gen = np.random.default_rng(3)
    a = gen.normal(size=(1500, 2))
    b = gen.normal(size=(1500, 2)) * 1.1
    ex = two_sample_test(a, b, method="exact", n_perm=200)
    sl = two_sample_test(a, b, method="sliced", n_perm=200, n_dirs=64)
    assert sl.statistic == pytest.approx(ex.statistic, rel=0.05)


def test_sliced_exact_in_one_dimension():
    gen = np.random.default_rng(4)
    a, b = gen.normal(size=300), gen.normal(size=200) + 0.2
    ex = energy_distance(a, b)
    rep = two_sample_test(a, b, n_perm=10)
    assert rep.statistic == pytest.approx(ex, rel=1e-10)


def test_calibration_under_null():
    # 100 null trials at alpha = 0.05: the rejection count is Binomial(100, 0.05)
    m = three_gmm()
    rejections = 0
    for trial in range(100):
        gen = np.random.default_rng(1000 + trial)
        a, b = sample_data(m, 2000, gen), sample_data(m, 2000, gen)
        rejections += two_sample_test(a, b, n_perm=500, seed=trial).p_value <= 0.05
    lo, hi = stats.binom.ppf([0.0015, 0.9985], 100, 0.05)
    assert lo <= rejections <= hi


# -- gradient checker and DPS / DDNM -----------------------------------------


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda x: 0.0, lambda x: np.zeros(1), np.zeros((1, 1)), h=0.0)


def test_finite_diff_check_detects_wrong_gradient():
    err = finite_diff_check(lambda x: float(x @ x), lambda x: 3 * x, np.ones((3, 2)))
    assert err > 0.3


def test_directions_identity_operator():
    op = LinearOperator.from_matrix(np.eye(3))
    gen = np.random.default_rng(0)
    y, x = gen.normal(size=3), gen.normal(size=3)
    np.testing.assert_allclose(dps_direction(op, y, x), 2 * (y - x), rtol=1e-14)
    np.testing.assert_allclose(ddnm_direction(op, y, x), y - x, rtol=1e-14)


def test_directions_vanish_at_consistency():
    gen = np.random.default_rng(1)
    A = gen.normal(size=(3, 8))
    op = LinearOperator.from_matrix(A)
    x = gen.normal(size=8)
    assert np.abs(dps_direction(op, A @ x, x)).max() <= 1e-12
    assert np.abs(ddnm_direction(op, A @ x, x)).max() <= 1e-12


def test_suite_random_operator():
    gen = np.random.default_rng(2)
    A = gen.normal(size=(3, 8))
    rep = dps_ddnm_suite(LinearOperator.from_matrix(A), A @ gen.normal(size=8), n_draws=1000)
    assert rep.passed and rep.min_inner_product >= 0 and rep.consistency_residual <= 1e-8


def test_suite_flags_out_of_range_y():
    op = LinearOperator.from_matrix(np.array([[1.0, 0.0], [2.0, 0.0]]))
    with pytest.raises(OracleError):
        dps_ddnm_suite(op, np.array([1.0, 0.0]))


# -- calibration --------------------------------------------------------------


def test_calibrate_lambda_zero():
    m = isotropic_gaussian([0.0, 0.0])
    stk = stack_of([L2Target([1.5, 0.0])])
    g = grid_posterior(OracleSampler(m, stk, 0.0, "grid"), BOX, 100)
    res = calibrate_rho(m, stk, SCHED, 0.0, n=200, grid=g)
    assert res.rho == 0.0


def test_calibrated_rho_monotone_in_lambda():
    m = isotropic_gaussian([0.0, 0.0])
    stk = stack_of([L2Target([1.5, 0.0])])
    rhos = []
    for lam in (0.25, 1.0, 4.0):
        g = grid_posterior(OracleSampler(m, stk, lam, "grid"), BOX, 200)
        rhos.append(calibrate_rho(m, stk, SCHED, lam, budget=10, n=500, seed=1, grid=g).rho)
    assert rhos[0] < rhos[1] < rhos[2]


def test_paired_mean_test():
    gen = np.random.default_rng(5)
    a = gen.normal(size=200)
    assert paired_mean_test(a, a) == 1.0
    assert paired_mean_test(a + 0.5, a + gen.normal(0, 0.1, 200), "greater") < 0.01
    assert np.isnan(paired_mean_test(np.array([np.inf]), np.array([0.0])))


def test_paired_mean_test_null_calibration():
    gen = np.random.default_rng(6)
    p = np.array([paired_mean_test(gen.normal(size=50), gen.normal(size=50), n_resamples=2000, seed=i)
                  for i in range(200)])
    rejections = int(np.sum(p <= 0.05))
    lo, hi = stats.binom.ppf([0.0015, 0.9985], 200, 0.05)
    assert lo <= rejections <= hi
