"""Noise schedules, forward noising and the seeded randomness contract.

Timesteps are 1-based: ``t = 1..T``. ``alpha_bar(0)`` is defined as 1 so that
samplers can step to the clean state without special-casing it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RNG_ALGORITHM = "numpy.PCG64/SeedSequence(seed,spawn_key=(stream_id,purpose))"

# Purposes for the RNG streams of one sampling run. Keeping them apart means
# toggling time travel does not shift the initial noise or the step noise.
STREAM_INIT = 0
STREAM_STEP = 1
STREAM_TRAVEL = 2
STREAM_DATA = 3
STREAM_ORACLE = 4

ALPHA_BAR_RTOL = 1e-12


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance-preserving schedule.

    ``betas[t - 1]`` is beta_t and ``alpha_bars[t - 1]`` is the cumulative
    product of ``1 - beta_i`` for ``i <= t``.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError("betas must be a non-empty vector")
        if alpha_bars.shape != betas.shape:
            raise ScheduleError("alpha_bars must have the same length as betas")
        if not np.all((betas > 0) & (betas < 1)):
            raise ScheduleError("every beta must lie in (0, 1)")
        expected = np.cumprod(1.0 - betas)
        if np.any(np.abs(alpha_bars - expected) > ALPHA_BAR_RTOL * expected):
            raise ScheduleError("alpha_bars inconsistent with betas")
        betas.flags.writeable = False
        alpha_bars.flags.writeable = False
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        return cls(betas=betas, alpha_bars=np.cumprod(1.0 - betas))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if not (lo <= int(t) <= self.T) or int(t) != t:
            raise ScheduleError(f"timestep {t} outside {lo}..{self.T}")
        return int(t)

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        t = self.check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def describe(self) -> dict:
        return {
            "T": self.T,
            "beta_first": float(self.betas[0]),
            "beta_last": float(self.betas[-1]),
        }


def make_linear_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_min`` to ``beta_max`` inclusive."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not (0 < beta_min <= beta_max < 1):
        raise ScheduleError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    return NoiseSchedule.from_betas(np.linspace(beta_min, beta_max, int(T)))


@dataclass(frozen=True)
class RngSpec:
    """Seed plus stream id; ``generator(purpose)`` yields an independent stream.

    Equal ``(seed, stream_id, purpose)`` and equal consumption order give
    bit-identical draws.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")

    def generator(self, purpose: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), int(purpose)))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, stream_id: int) -> "RngSpec":
        return RngSpec(self.seed, stream_id)


@dataclass
class DiffusionState:
    t: int
    x: np.ndarray

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.x)))


def forward_noise(x0, t: int, sched: NoiseSchedule, rng, noise=None) -> np.ndarray:
    """Draw ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``rng`` may be an :class:`RngSpec` or a ``numpy.random.Generator``.
    ``noise`` overrides the draw (used by tests that need a fixed eps).
    """
    sched.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    return noise_at_level(x0, sched.alpha_bar(t), rng, noise)


def noise_at_level(x0, abar, rng, noise=None):
    if noise is None:
        gen = rng.generator(STREAM_DATA) if isinstance(rng, RngSpec) else rng
        noise = gen.standard_normal(x0.shape)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise
