"""Energy-guided reverse diffusion.

Three loops share one guided update:

* :func:`sample_freedom` - ancestral steps in the score form
  ``x_{t-1} = (1 + beta_t / 2) x_t + beta_t s + sqrt(beta_t) eps`` followed by
  ``x_{t-1} -= rho_t g_t`` where ``g_t`` is the gradient, with respect to
  ``x_t``, of the energy evaluated at the posterior-mean estimate of ``x0``.
* :func:`sample_time_travel` - the same, repeating the step ``r_t`` times at
  each timestep and re-noising one step back up between repeats.
* :func:`sample_ddim` - DDIM over a strided subsequence of timesteps with the
  same guidance subtraction after each step.

All loops run a batch of ``n`` chains at once. A chain's noise comes from
three separate streams (initial state, per-step noise, re-noising) derived
from one :class:`~freedom.schedule.RngSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .energy import EnergyStack, default_jacobian_mode, guided_grad_at, stack_energy
from .schedule import (
    STREAM_INIT,
    STREAM_STEP,
    STREAM_TRAVEL,
    NoiseSchedule,
    RngSpec,
    DiffusionState,
)
from .scores import ScoreModel, score_at

RHO_MODES = ("constant", "one-minus-alpha-bar", "beta", "grad-norm")


class ConfigError(ValueError):
    pass


class SamplingDiverged(RuntimeError):
    """Raised when any coordinate becomes non-finite. Carries the trace so far."""

    def __init__(self, state: DiffusionState, repeat: int, trace: "SampleTrace"):
        super().__init__(f"non-finite state at t={state.t} (repeat {repeat})")
        self.state = state
        self.repeat = repeat
        self.trace = trace


@dataclass(frozen=True)
class GuidanceConfig:
    rho_mode: str = "one-minus-alpha-bar"
    rho_base: float = 0.0
    travel_repeats: int = 1
    stage_bounds: tuple = (0.7, 0.3)  # (f_hi, f_lo) fractions of T
    repeats: tuple | None = None  # explicit r_1..r_T; overrides travel_repeats
    ddim_steps: int | None = None  # None means every timestep
    eta_ddim: float = 0.0
    jacobian: str | None = None  # "exact" | "stop" | None (by dimension)

    def __post_init__(self):
        if self.rho_mode not in RHO_MODES:
            raise ConfigError(f"rho_mode must be one of {RHO_MODES}, got {self.rho_mode!r}")
        if not (self.rho_base >= 0 and np.isfinite(self.rho_base)):
            raise ConfigError("rho_base must be a finite nonnegative number")
        if int(self.travel_repeats) != self.travel_repeats or self.travel_repeats < 1:
            raise ConfigError("travel_repeats must be a positive integer")
        f_hi, f_lo = (float(v) for v in self.stage_bounds)
        if not (0.0 <= f_lo < f_hi <= 1.0):
            raise ConfigError(f"stage bounds need 0 <= f_lo < f_hi <= 1, got {self.stage_bounds}")
        object.__setattr__(self, "stage_bounds", (f_hi, f_lo))
        if self.repeats is not None:
            object.__setattr__(self, "repeats", tuple(int(r) for r in self.repeats))
        if self.ddim_steps is not None and (int(self.ddim_steps) != self.ddim_steps or self.ddim_steps < 1):
            raise ConfigError("ddim_steps must be a positive integer or None")
        if not (0.0 <= self.eta_ddim <= 1.0):
            raise ConfigError("eta_ddim must lie in [0, 1]")
        if self.jacobian not in (None, "exact", "stop"):
            raise ConfigError("jacobian must be 'exact', 'stop' or None")

    def replace(self, **changes) -> "GuidanceConfig":
        d = asdict(self)
        d.update(changes)
        return GuidanceConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_bounds"] = list(self.stage_bounds)
        if self.repeats is not None:
            d["repeats"] = list(self.repeats)
        return d

    def repeat_schedule(self, sched: NoiseSchedule) -> np.ndarray:
        """``r_t`` for ``t = 1..T`` (index ``t - 1``)."""
        T = sched.T
        _, semantic, _ = stage_partition(self, sched)
        if self.repeats is not None:
            r = np.asarray(self.repeats, dtype=np.int64)
            if r.shape != (T,):
                raise ConfigError(f"repeats must list {T} values")
            if np.any(r < 1):
                raise ConfigError("every r_t must be >= 1")
            outside = np.ones(T, dtype=bool)
            outside[np.asarray(semantic, dtype=np.int64) - 1] = False
            if np.any(r[outside] != 1):
                raise ConfigError("r_t > 1 is only allowed inside the semantic stage")
            return r
        r = np.ones(T, dtype=np.int64)
        r[np.asarray(semantic, dtype=np.int64) - 1] = int(self.travel_repeats)
        return r

    def rho(self, abar: float, beta_eff: float, g: np.ndarray):
        """Step size for guidance gradient ``g`` (batch); scalar or ``(n, 1)``."""
        base = self.rho_base
        if self.rho_mode == "constant":
            return base
        if self.rho_mode == "one-minus-alpha-bar":
            return base * (1.0 - abar)
        if self.rho_mode == "beta":
            return base * beta_eff
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        return np.divide(base, norms, out=np.zeros_like(norms), where=norms > 0)

    def jacobian_mode(self, dim: int) -> str:
        return self.jacobian or default_jacobian_mode(dim)


def stage_partition(cfg: GuidanceConfig, sched: NoiseSchedule):
    """Split ``1..T`` into (chaotic, semantic, refinement) timestep ranges.

    The semantic stage is ``f_lo T < t <= f_hi T`` with both bounds rounded to
    the nearest integer; chaotic lies above it and refinement below.
    """
    f_hi, f_lo = cfg.stage_bounds
    if not (0.0 <= f_lo < f_hi <= 1.0):
        raise ConfigError("inverted stage bounds")
    T = sched.T
    lo = int(round(f_lo * T))
    hi = int(round(f_hi * T))
    return range(hi + 1, T + 1), range(lo + 1, hi + 1), range(1, lo + 1)


@dataclass
class TraceStep:
    step_index: int
    t: int
    repeat: int
    x: np.ndarray  # (k, d) x_t of recorded chains before the step
    x0: np.ndarray  # (k, d) posterior-mean estimate
    energy: np.ndarray  # (k,) stack energy at x0
    grad_norm: np.ndarray  # (k,)


@dataclass
class SampleTrace:
    steps: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.steps)

    def append(self, t, repeat, x, x0, energy, grad_norm):
        self.steps.append(TraceStep(len(self.steps), int(t), int(repeat), x, x0, energy, grad_norm))

    def timesteps(self) -> np.ndarray:
        return np.array([s.t for s in self.steps], dtype=np.int64)

    def repeats(self) -> np.ndarray:
        return np.array([s.repeat for s in self.steps], dtype=np.int64)

    def energies(self, chain: int = 0) -> np.ndarray:
        return np.array([s.energy[chain] for s in self.steps])


def check_trace_discipline(trace: SampleTrace) -> bool:
    """Consecutive records either move to a lower timestep after the last
    repeat, or stay at ``t`` with the repeat index counting down by one
    (a re-noise from ``t - 1`` back up to ``t`` happened in between)."""
    for a, b in zip(trace.steps, trace.steps[1:]):
        if b.t == a.t:
            if b.repeat != a.repeat - 1:
                return False
        elif b.t < a.t:
            if a.repeat != 1:
                return False
        else:
            return False
    return True


@dataclass
class Counters:
    score_evals: int = 0
    grad_evals: int = 0


@dataclass
class SampleResult:
    x0: np.ndarray
    trace: SampleTrace
    counters: Counters

    def __iter__(self):
        # allows ``x0, trace = sample_freedom(...)``
        yield self.x0
        yield self.trace


def ancestral_step(model: ScoreModel, x_t, t: int, sched: NoiseSchedule, rng=None, noise=None, s=None):
    """One reverse step ``(1 + b/2) x + b s + sqrt(b) eps``; ``eps = 0`` at ``t = 1``.

    ``rng`` is a ``numpy.random.Generator`` or :class:`RngSpec` (step stream);
    ``noise`` overrides the draw. ``s`` reuses a precomputed score.
    """
    sched.check_t(t)
    beta = sched.beta(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    if s is None:
        s = score_at(model, x_t, sched.alpha_bar(t))
    if t > 1:
        if noise is None:
            gen = rng.generator(STREAM_STEP) if isinstance(rng, RngSpec) else rng
            noise = gen.standard_normal(x_t.shape)
        return (1.0 + 0.5 * beta) * x_t + beta * s + np.sqrt(beta) * noise
    return (1.0 + 0.5 * beta) * x_t + beta * s


def estimate_x0(model: ScoreModel, x_t, t: int, sched: NoiseSchedule, s=None):
    """Posterior-mean estimate from the score: ``(x_t + (1 - abar) s) / sqrt(abar)``."""
    sched.check_t(t)
    abar = sched.alpha_bar(t)
    if s is None:
        s = score_at(model, x_t, abar)
    return (np.asarray(x_t, dtype=np.float64) + (1.0 - abar) * s) / np.sqrt(abar)


class _Run:
    """State shared by one sampling run: generators, counters, trace."""

    def __init__(self, model, stack, cfg, sched, rng, n, x_T, trace_chains):
        if stack is not None and stack.dim != model.dim:
            raise ConfigError("energy stack and model disagree on dimension")
        self.model, self.stack, self.cfg, self.sched = model, stack, cfg, sched
        self.mode = cfg.jacobian_mode(model.dim)
        self.gen_init = rng.generator(STREAM_INIT)
        self.gen_step = rng.generator(STREAM_STEP)
        self.gen_travel = rng.generator(STREAM_TRAVEL)
        if x_T is None:
            x = self.gen_init.standard_normal((n, model.dim))
        else:
            x = np.array(x_T, dtype=np.float64, copy=True).reshape(-1, model.dim)
        self.x = x
        self.k = min(int(trace_chains), x.shape[0])
        self.counters = Counters()
        self.trace = SampleTrace(meta={
            "seed": int(rng.seed),
            "stream_id": int(rng.stream_id),
            "jacobian_mode": self.mode,
            "rho_mode": cfg.rho_mode,
            "rho_base": cfg.rho_base,
        })

    def guide(self, x_t, x_next, t, repeat, abar, beta_eff, s):
        """Subtract ``rho g`` from ``x_next`` and record the step."""
        if self.stack is not None:
            g, x0 = guided_grad_at(self.stack, self.model, x_t, abar, self.mode, s=s)
            self.counters.grad_evals += 1
            rho = self.cfg.rho(abar, beta_eff, g)
            if np.any(rho != 0):
                # overflow is caught by the finiteness check below
                with np.errstate(over="ignore", invalid="ignore"):
                    x_next = x_next - rho * g
        else:
            g = None
            x0 = (x_t + (1.0 - abar) * s) / np.sqrt(abar)
        if self.k:
            k = self.k
            e = stack_energy(self.stack, x0[:k]) if self.stack is not None else np.full(k, np.nan)
            gn = np.linalg.norm(g[:k], axis=1) if g is not None else np.zeros(k)
            self.trace.append(t, repeat, x_t[:k].copy(), x0[:k].copy(), np.atleast_1d(e), gn)
        if not np.all(np.isfinite(x_next)):
            raise SamplingDiverged(DiffusionState(t - 1, x_next), repeat, self.trace)
        return x_next

    def ddpm_step(self, x_t, t, repeat):
        sched = self.sched
        abar = sched.alpha_bar(t)
        beta = sched.beta(t)
        eps = self.gen_step.standard_normal(x_t.shape) if t > 1 else None
        s = score_at(self.model, x_t, abar)
        self.counters.score_evals += 1
        x_next = ancestral_step(self.model, x_t, t, sched, noise=eps, s=s)
        return self.guide(x_t, x_next, t, repeat, abar, beta, s)

    def result(self, x):
        self.trace.meta["score_evals"] = self.counters.score_evals
        self.trace.meta["grad_evals"] = self.counters.grad_evals
        return SampleResult(x, self.trace, self.counters)


def sample_unguided(model: ScoreModel, sched: NoiseSchedule, rng: RngSpec, n: int = 1,
                    x_T=None, trace_chains: int = 0) -> SampleResult:
    """Plain ancestral sampling (no energy)."""
    return sample_freedom(model, None, GuidanceConfig(), sched, rng, n, x_T, trace_chains)


def sample_freedom(model: ScoreModel, stack: EnergyStack | None, cfg: GuidanceConfig,
                   sched: NoiseSchedule, rng: RngSpec, n: int = 1, x_T=None,
                   trace_chains: int = 1) -> SampleResult:
    """Guided ancestral sampling, one guided step per timestep."""
    if cfg.repeats is not None and any(r != 1 for r in cfg.repeats):
        raise ConfigError("sample_freedom runs without time travel; use sample_time_travel")
    run = _Run(model, stack, cfg, sched, rng, n, x_T, trace_chains)
    x = run.x
    for t in range(sched.T, 0, -1):
        x = run.ddpm_step(x, t, 1)
    return run.result(x)


def sample_time_travel(model: ScoreModel, stack: EnergyStack | None, cfg: GuidanceConfig,
                       sched: NoiseSchedule, rng: RngSpec, n: int = 1, x_T=None,
                       trace_chains: int = 1) -> SampleResult:
    """Guided ancestral sampling with ``r_t`` repeats per timestep.

    Between repeats the new iterate is pushed back to timestep ``t`` with
    ``x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps``; no re-noise follows
    the last repeat.
    """
    repeats = cfg.repeat_schedule(sched)
    run = _Run(model, stack, cfg, sched, rng, n, x_T, trace_chains)
    x = run.x
    for t in range(sched.T, 0, -1):
        beta = sched.beta(t)
        for i in range(int(repeats[t - 1]), 0, -1):
            x_prev = run.ddpm_step(x, t, i)
            if i > 1:
                eps2 = run.gen_travel.standard_normal(x.shape)
                x = np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps2
        x = x_prev
    return run.result(x)


def ddim_timesteps(sched: NoiseSchedule, steps: int | None) -> np.ndarray:
    """Strictly decreasing timesteps from ``T`` down to 1 (``steps`` of them)."""
    T = sched.T
    if steps is None:
        steps = T
    if int(steps) != steps or not (1 <= steps <= T):
        raise ConfigError(f"ddim_steps must be in 1..{T}, got {steps}")
    if steps == 1:
        return np.array([T], dtype=np.int64)
    ts = np.round(np.linspace(1, T, int(steps))).astype(np.int64)[::-1]
    if np.any(np.diff(ts) >= 0):
        raise ConfigError("timestep subsequence is not strictly decreasing")
    return ts


def sample_ddim(model: ScoreModel, stack: EnergyStack | None, cfg: GuidanceConfig,
                sched: NoiseSchedule, rng: RngSpec, n: int = 1, x_T=None,
                trace_chains: int = 1) -> SampleResult:
    """Guided DDIM over ``cfg.ddim_steps`` timesteps.

    ``eta_ddim = 0`` is deterministic given ``x_T``; ``eta_ddim = 1`` uses the
    ancestral posterior variance for each stride. Time-travel repeats, when
    configured, re-noise from the previous subsequence timestep back to ``t``.
    """
    ts = ddim_timesteps(sched, cfg.ddim_steps)
    repeats = cfg.repeat_schedule(sched)
    run = _Run(model, stack, cfg, sched, rng, n, x_T, trace_chains)
    x = run.x
    eta = cfg.eta_ddim
    for j, t in enumerate(ts):
        t = int(t)
        t_prev = int(ts[j + 1]) if j + 1 < len(ts) else 0
        ab = sched.alpha_bar(t)
        ab_p = sched.alpha_bar(t_prev)
        beta_eff = 1.0 - ab / ab_p
        sigma = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab) * beta_eff)
        for i in range(int(repeats[t - 1]), 0, -1):
            s = score_at(model, x, ab)
            run.counters.score_evals += 1
            x0 = (x + (1.0 - ab) * s) / np.sqrt(ab)
            eps_hat = -np.sqrt(1.0 - ab) * s
            x_prev = np.sqrt(ab_p) * x0 + np.sqrt(max(1.0 - ab_p - sigma**2, 0.0)) * eps_hat
            if sigma > 0:
                x_prev = x_prev + sigma * run.gen_step.standard_normal(x.shape)
            x_prev = run.guide(x, x_prev, t, i, ab, beta_eff, s)
            if i > 1:
                eps2 = run.gen_travel.standard_normal(x.shape)
                x = np.sqrt(1.0 - beta_eff) * x_prev + np.sqrt(beta_eff) * eps2
        x = x_prev
    return run.result(x)


def sample(model, stack, cfg: GuidanceConfig, sched, rng, n=1, x_T=None, trace_chains=1) -> SampleResult:
    """Dispatch on the config: DDIM when ``ddim_steps`` is set, else
    ancestral sampling (with time travel when any ``r_t > 1``)."""
    if cfg.ddim_steps is not None:
        return sample_ddim(model, stack, cfg, sched, rng, n, x_T, trace_chains)
    return sample_time_travel(model, stack, cfg, sched, rng, n, x_T, trace_chains)
