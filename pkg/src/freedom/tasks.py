"""Registered benchmark tasks with their oracles and pass thresholds.

Every task either has an oracle (closed form, grid quadrature, rejection
sampling) or is marked ``trend-only``. ``evaluate(seed)`` runs the task
end to end and returns a :class:`TaskResult` verdict.

Chains in one batch play the role of seeds: chain ``i`` of two arms shares
its initial state, so per-chain results pair across arms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .energy import (
    EnergyStack,
    L2Target,
    LinearOperator,
    MixtureClass,
    RegionBall,
    stack_energy,
    stack_of,
)
from .oracle import (
    OracleSampler,
    calibrate_rho,
    dps_ddnm_suite,
    grid_posterior,
    paired_mean_test,
    rejection_sample,
)
from .sampler import GuidanceConfig, sample, sample_time_travel
from .schedule import NoiseSchedule, RngSpec, make_linear_schedule
from .scores import ScoreModel, gaussian_mixture, isotropic_gaussian


@dataclass
class TaskResult:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)

    def line(self) -> str:
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in self.metrics.items() if np.isscalar(v))
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {shown}"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4g}"
    return str(v)


@dataclass(frozen=True)
class BenchmarkTask:
    name: str
    description: str
    model: ScoreModel
    stack: EnergyStack
    guidance: GuidanceConfig
    oracle: str  # "grid" | "rejection" | "closed-form" | "trend-only"
    thresholds: dict
    runner: Callable = field(repr=False, compare=False, default=None)
    schedule: NoiseSchedule = field(default_factory=make_linear_schedule, repr=False, compare=False)

    def evaluate(self, seed: int = 0, **overrides) -> TaskResult:
        return self.runner(self, seed, **overrides)


# ---------------------------------------------------------------------------
# shared models

THREE_GMM = dict(weights=[0.3, 0.3, 0.4], means=[[-3.0, 0.0], [3.0, 0.0], [0.0, 3.0]], scales=[0.6, 0.6, 0.6])
BIMODAL = dict(weights=[0.9, 0.1], means=[[-4.0, 0.0], [4.0, 0.0]], scales=[0.5, 0.5])


def three_gmm() -> ScoreModel:
    return gaussian_mixture(**THREE_GMM)


def bimodal() -> ScoreModel:
    return gaussian_mixture(**BIMODAL)


def gaussian_quadratic_posterior(mean, scale, target, lam):
    """Closed-form ``N(mean, scale^2 I) * exp(-lam ||x - target||^2)``: (mean, std)."""
    prec = 1.0 / scale**2 + 2.0 * lam
    mu = (np.asarray(mean) / scale**2 + 2.0 * lam * np.asarray(target)) / prec
    return mu, 1.0 / np.sqrt(prec)


# ---------------------------------------------------------------------------
# runners


def _run_gaussian_quadratic(task: BenchmarkTask, seed: int, n: int = 2000, budget: int = 12) -> TaskResult:
    lam = task.thresholds["lambda_eff"]
    oracle = OracleSampler(task.model, task.stack, lam, "grid")
    grid = grid_posterior(oracle, [(-8.0, 8.0), (-8.0, 8.0)], 200)
    mu, sd = gaussian_quadratic_posterior(task.model.means[0], task.model.scales[0], task.stack.terms[0].target, lam)
    grid_sd = np.sqrt(grid.expectation(lambda p: (p[:, 0] - grid.mean()[0]) ** 2))
    cal = calibrate_rho(task.model, task.stack, task.schedule, lam, budget=budget, cfg=task.guidance,
                        n=n, seed=seed, grid=grid)
    passed = cal.distance < task.thresholds["energy_distance"]
    return TaskResult(task.name, bool(passed), {
        "rho": cal.rho,
        "energy_distance": cal.distance,
        "threshold": task.thresholds["energy_distance"],
        "grid_mean_err": float(np.abs(grid.mean() - mu).max()),
        "grid_sd_err": float(abs(grid_sd - sd)),
        "n": n,
    })


def _run_gmm_class(task: BenchmarkTask, seed: int, n: int = 2000, budget: int = 12) -> TaskResult:
    lam = task.thresholds["lambda_eff"]
    oracle = OracleSampler(task.model, task.stack, lam, "rejection")
    rej = rejection_sample(oracle, n, RngSpec(seed + 1000))
    cal = calibrate_rho(task.model, task.stack, task.schedule, lam, budget=budget, cfg=task.guidance,
                        n=n, seed=seed, reference=rej.samples)
    passed = cal.distance < task.thresholds["energy_distance"]
    return TaskResult(task.name, bool(passed), {
        "rho": cal.rho,
        "energy_distance": cal.distance,
        "threshold": task.thresholds["energy_distance"],
        "acceptance_rate": rej.acceptance_rate,
        "n": n,
    })


def bimodal_arms(task: BenchmarkTask) -> dict:
    base = task.guidance
    r = task.thresholds["repeats"]
    return {
        "plain": base.replace(travel_repeats=1),
        "semantic": base.replace(travel_repeats=r),
        "all-steps": base.replace(travel_repeats=r, stage_bounds=(1.0, 0.0)),
    }


def _run_bimodal(task: BenchmarkTask, seed: int, n: int = 200) -> TaskResult:
    energies, evals = {}, {}
    for name, cfg in bimodal_arms(task).items():
        out = sample_time_travel(task.model, task.stack, cfg, task.schedule, RngSpec(seed), n=n, trace_chains=0)
        energies[name] = stack_energy(task.stack, out.x0)
        evals[name] = out.counters.score_evals
    alpha = task.thresholds["alpha"]
    p_improve = paired_mean_test(energies["plain"], energies["semantic"], "greater", seed=seed)
    p_same = paired_mean_test(energies["semantic"], energies["all-steps"], seed=seed)
    savings = 1.0 - evals["semantic"] / evals["all-steps"]
    # integer comparison: savings >= min_savings
    enough = (evals["all-steps"] - evals["semantic"]) * 100 >= round(task.thresholds["min_savings"] * 100) * evals["all-steps"]
    lower = energies["semantic"].mean() < energies["plain"].mean()
    passed = lower and p_improve < alpha and p_same > alpha and enough
    return TaskResult(task.name, bool(passed), {
        "mean_energy_plain": float(energies["plain"].mean()),
        "mean_energy_semantic": float(energies["semantic"].mean()),
        "mean_energy_all": float(energies["all-steps"].mean()),
        "p_improve": p_improve,
        "p_same": p_same,
        "score_evals_semantic": evals["semantic"],
        "score_evals_all": evals["all-steps"],
        "savings": savings,
        "n": n,
        "energies": energies,
    })


def _run_control_sweep(task: BenchmarkTask, seed: int, n: int = 200) -> TaskResult:
    rhos = np.asarray(task.thresholds["rho_sweep"], dtype=np.float64)
    means = []
    for rho in rhos:
        out = sample(task.model, task.stack, task.guidance.replace(rho_base=float(rho)), task.schedule,
                     RngSpec(seed), n=n, trace_chains=0)
        means.append(float(np.mean(stack_energy(task.stack, out.x0))))
    rs = float(stats.spearmanr(rhos, means).statistic)
    passed = rs <= task.thresholds["max_spearman"]
    metrics = {"spearman": rs, "n": n}
    metrics.update({f"mean_energy_rho={r:g}": m for r, m in zip(rhos, means)})
    return TaskResult(task.name, bool(passed), metrics)


def _run_two_term(task: BenchmarkTask, seed: int, n: int = 200) -> TaskResult:
    cls, reg = task.stack.terms
    finals = {}
    for name, stk in (("class", stack_of([cls])), ("region", stack_of([reg])), ("both", task.stack)):
        x = sample(task.model, stk, task.guidance, task.schedule, RngSpec(seed), n=n, trace_chains=0).x0
        finals[name] = (cls.value(x), reg.value(x))
    q = task.thresholds["quantile"]
    p_cls = float(np.quantile(finals["class"][0], q))
    p_reg = float(np.quantile(finals["region"][1], q))
    both_cls, both_reg = finals["both"]
    ok = (both_cls < p_cls) & (both_reg < p_reg)
    frac = float(ok.mean())
    return TaskResult(task.name, frac >= task.thresholds["min_fraction"], {
        "fraction_both": frac,
        "fraction_class": float(np.mean(both_cls < p_cls)),
        "fraction_region": float(np.mean(both_reg < p_reg)),
        "class_q90": p_cls,
        "region_q90": p_reg,
        "n": n,
    })


def random_operator(gen: np.random.Generator, m: int = 3, d: int = 8) -> LinearOperator:
    return LinearOperator.from_matrix(gen.standard_normal((m, d)))


def _run_linear_inverse(task: BenchmarkTask, seed: int, n: int = 200, n_ops: int = 20) -> TaskResult:
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 77])))
    worst_resid, worst_inner, zeros_ok = 0.0, 1.0, True
    for _ in range(n_ops):
        op = random_operator(gen)
        y = op.A @ gen.standard_normal(op.A.shape[1])
        rep = dps_ddnm_suite(op, y, seed=int(gen.integers(2**32)), n_draws=1000)
        worst_resid = max(worst_resid, rep.consistency_residual)
        worst_inner = min(worst_inner, rep.min_inner_product)
        zeros_ok = zeros_ok and rep.zero_at_consistency
    lin = task.stack.terms[0]
    op = LinearOperator.from_matrix(lin.A)
    rep = dps_ddnm_suite(op, lin.y, task.model, task.schedule, seed=seed, n_draws=1000, cfg=task.guidance,
                         n_chains=n, threshold=task.thresholds["residual"])
    passed = (worst_resid <= task.thresholds["consistency"] and zeros_ok and worst_inner >= 0.0
              and rep.guided_pass_fraction >= task.thresholds["min_fraction"])
    return TaskResult(task.name, bool(passed), {
        "max_ddnm_residual": worst_resid,
        "min_normalized_inner": worst_inner,
        "zero_at_consistency": zeros_ok,
        "guided_fraction": rep.guided_pass_fraction,
        "operators": n_ops,
        "n": n,
    })


# ---------------------------------------------------------------------------
# registry


def _build_registry() -> dict:
    g = isotropic_gaussian([0.0, 0.0], 1.0)
    tg = three_gmm()
    bm = bimodal()
    tasks = [
        BenchmarkTask(
            "gaussian-quadratic",
            "standard Gaussian base, squared-distance energy; tempered posterior is Gaussian",
            g, stack_of([L2Target([1.5, 0.0])]), GuidanceConfig(rho_mode="beta"), "closed-form",
            {"lambda_eff": 1.0, "energy_distance": 0.05}, _run_gaussian_quadratic,
        ),
        BenchmarkTask(
            "gmm-class",
            "three-component 2-D mixture steered to component 0 by its negative log responsibility",
            tg, stack_of([MixtureClass(tg, 0)]), GuidanceConfig(rho_mode="beta"), "rejection",
            {"lambda_eff": 1.0, "energy_distance": 0.05}, _run_gmm_class,
        ),
        BenchmarkTask(
            "bimodal-steer",
            "far-apart 90/10 mixture steered to the minor mode; time travel on vs off",
            bm, stack_of([MixtureClass(bm, 1)]), GuidanceConfig(rho_mode="beta", rho_base=0.04), "trend-only",
            {"repeats": 3, "alpha": 0.05, "min_savings": 0.40}, _run_bimodal,
        ),
        BenchmarkTask(
            "control-sweep",
            "bimodal steering over a logarithmic sweep of the guidance scale",
            bm, stack_of([MixtureClass(bm, 1)]), GuidanceConfig(rho_mode="beta"), "trend-only",
            {"rho_sweep": [0.005, 0.01, 0.02, 0.04, 0.08], "max_spearman": -0.8}, _run_control_sweep,
        ),
        BenchmarkTask(
            "two-term-steer",
            "class term plus a small target ball inside that class",
            tg, stack_of([MixtureClass(tg, 0), RegionBall([-3.5, -0.4], 0.2)]),
            GuidanceConfig(rho_mode="beta", rho_base=0.3), "trend-only",
            {"quantile": 0.9, "min_fraction": 0.8}, _run_two_term,
        ),
        BenchmarkTask(
            "linear-inverse",
            "observe the first coordinate of a 2-D mixture sample; DDNM/DPS consistency",
            tg, stack_of([_inpainting_term()]), GuidanceConfig(rho_mode="constant", rho_base=0.4), "closed-form",
            {"residual": 1e-2, "min_fraction": 0.95, "consistency": 1e-8}, _run_linear_inverse,
        ),
    ]
    return {t.name: t for t in tasks}


def _inpainting_term():
    from .energy import LinearMeasurement

    return LinearMeasurement([[1.0, 0.0]], [-2.5])


TASKS = _build_registry()


def get_task(name: str) -> BenchmarkTask:
    try:
        return TASKS[name]
    except KeyError:
        raise KeyError(f"unknown task {name!r}; known: {', '.join(sorted(TASKS))}") from None
