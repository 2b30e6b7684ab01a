"""Seeded experiment runs, paired arm comparisons and their on-disk artifacts.

Layout under ``out_dir``::

    samples/<arm>/seed-<seed>.csv
    traces/<arm>/seed-<seed>-chain-<c>.csv
    summary.csv           one row per (arm, seed)
    compare.csv           paired deltas vs the first arm (two or more arms)

Each seed's batch is independent and written to its own files; the summary
is assembled afterwards in arm/seed order, so outputs are bit-identical
for a given config.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .energy import stack_energy
from .oracle import paired_mean_test
from .sampler import GuidanceConfig, sample
from .schedule import RNG_ALGORITHM, RngSpec
from .traceio import export_trace, write_samples, write_table

SUMMARY_COLUMNS = ["arm", "seed", "n", "mean_energy", "median_energy", "score_evals", "grad_evals"]
COMPARE_COLUMNS = ["seed", "arm", "baseline", "mean_energy_arm", "mean_energy_baseline", "delta", "p_paired",
                   "score_evals_arm", "score_evals_baseline"]


@dataclass
class ArmRun:
    arm: str
    seed: int
    samples: np.ndarray
    energies: np.ndarray
    score_evals: int
    grad_evals: int


@dataclass
class ArtifactSet:
    out_dir: Path
    config_hash: str
    runs: list = field(default_factory=list)
    files: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    comparison: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def run(self, arm: str, seed: int) -> ArmRun:
        for r in self.runs:
            if r.arm == arm and r.seed == seed:
                return r
        raise KeyError((arm, seed))


def file_meta(cfg: ExperimentConfig, arm: str, seed: int | None, guidance: GuidanceConfig) -> dict:
    s = cfg.schedule
    meta = {
        "config_hash": cfg.hash,
        "rng": RNG_ALGORITHM,
        "arm": arm,
        "schedule": f"linear T={s.T} beta_1={float(s.betas[0])!r} beta_T={float(s.betas[-1])!r}",
        "rho_mode": guidance.rho_mode,
        "rho_base": repr(float(guidance.rho_base)),
        "jacobian_mode": guidance.jacobian_mode(cfg.model.dim),
    }
    if seed is not None:
        meta["seed"] = seed
    return meta


def _energies(cfg: ExperimentConfig, x: np.ndarray) -> np.ndarray:
    if cfg.stack is None:
        return np.full(x.shape[0], np.nan)
    return np.atleast_1d(stack_energy(cfg.stack, x))


def run_seed(cfg: ExperimentConfig, arm: str, guidance: GuidanceConfig, seed: int, out: Path):
    """Sample one seed of one arm and write its files. Returns (ArmRun, paths)."""
    res = sample(cfg.model, cfg.stack, guidance, cfg.schedule, RngSpec(seed), n=cfg.n_samples,
                 trace_chains=cfg.trace_chains)
    meta = file_meta(cfg, arm, seed, guidance)
    paths = [write_samples(res.x0, out / "samples" / arm / f"seed-{seed}.csv", meta)]
    for c in range(min(cfg.trace_chains, cfg.n_samples)):
        paths.append(export_trace(res.trace, out / "traces" / arm / f"seed-{seed}-chain-{c}.csv", meta, chain=c,
                                  dim=cfg.model.dim))
    run = ArmRun(arm, seed, res.x0, _energies(cfg, res.x0), res.counters.score_evals, res.counters.grad_evals)
    return run, paths


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int = 1) -> ArtifactSet:
    """Run every (arm, seed) pair; ``workers > 1`` fans them out over processes.

    Results are collected in arm/seed order either way, so the artifacts do
    not depend on ``workers``.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    arts = ArtifactSet(out, cfg.hash)
    arms = cfg.arm_configs()
    jobs = [(cfg, arm, guidance, seed, out) for arm, guidance in arms.items() for seed in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(run_seed, *zip(*jobs)))
    else:
        results = [run_seed(*job) for job in jobs]
    for run, paths in results:
        arts.runs.append(run)
        arts.files.extend(paths)

    for r in arts.runs:
        arts.summary.append({
            "arm": r.arm, "seed": r.seed, "n": r.samples.shape[0],
            "mean_energy": float(np.mean(r.energies)), "median_energy": float(np.median(r.energies)),
            "score_evals": r.score_evals, "grad_evals": r.grad_evals,
        })
    meta = file_meta(cfg, "all", None, cfg.guidance)
    arts.files.append(write_table(arts.summary, SUMMARY_COLUMNS, out / "summary.csv", meta))

    names = list(arms)
    if len(names) > 1:
        base = names[0]
        for seed in cfg.seeds:
            b = arts.run(base, seed)
            for arm in names[1:]:
                a = arts.run(arm, seed)
                arts.comparison.append({
                    "seed": seed, "arm": arm, "baseline": base,
                    "mean_energy_arm": float(np.mean(a.energies)),
                    "mean_energy_baseline": float(np.mean(b.energies)),
                    "delta": float(np.mean(a.energies) - np.mean(b.energies)),
                    "p_paired": paired_mean_test(a.energies, b.energies, seed=seed),
                    "score_evals_arm": a.score_evals, "score_evals_baseline": b.score_evals,
                })
        arts.files.append(write_table(arts.comparison, COMPARE_COLUMNS, out / "compare.csv", meta))

    arts.verdicts = check_thresholds(cfg, arts)
    return arts


def check_thresholds(cfg: ExperimentConfig, arts: ArtifactSet) -> dict:
    thr = cfg.thresholds
    verdicts = {}
    if "max_mean_energy" in thr:
        limit = float(thr["max_mean_energy"])
        for row in arts.summary:
            verdicts[f"{row['arm']}/seed-{row['seed']}/mean_energy"] = row["mean_energy"] <= limit
    if "energy_level" in thr:
        level = float(thr["energy_level"])
        need = float(thr.get("min_fraction_below", 0.5))
        for r in arts.runs:
            verdicts[f"{r.arm}/seed-{r.seed}/fraction_below"] = float(np.mean(r.energies < level)) >= need
    return verdicts
