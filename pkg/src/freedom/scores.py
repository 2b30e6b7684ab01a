"""Closed-form scores of isotropic Gaussian mixtures under VP noising.

Every supported model is a mixture ``sum_k w_k N(mu_k, s_k^2 I)``; an
empirical model is the special case ``s_k = 0`` with uniform weights. At noise
level ``abar`` the marginal of ``x_t`` is again a mixture with means
``sqrt(abar) mu_k`` and variances ``abar s_k^2 + (1 - abar)``.

All functions accept a single point ``(d,)`` or a batch ``(n, d)`` and return
the matching shape. Responsibilities are computed with a max-shifted
log-sum-exp: the per-point maximum log-weight is subtracted before
exponentiating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule

KINDS = ("isotropic-gaussian", "gaussian-mixture", "empirical")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreModel:
    kind: str
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    scales: np.ndarray  # (K,) component standard deviations

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        s = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        if mu.shape[0] == 0:
            raise ModelError("model has no components")
        if not (w.shape == s.shape == (mu.shape[0],)):
            raise ModelError("weights, means and scales disagree on component count")
        if not np.all(np.isfinite(mu)):
            raise ModelError("means must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ModelError("mixture weights must be a simplex vector")
        if self.kind == "empirical":
            if np.any(s != 0):
                raise ModelError("empirical models have zero-width components")
        elif np.any(s <= 0):
            raise ModelError("component scales must be strictly positive")
        for name, arr in (("weights", w), ("means", mu), ("scales", s)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def n_components(self) -> int:
        return int(self.means.shape[0])

    def to_dict(self) -> dict:
        if self.kind == "empirical":
            return {"kind": self.kind, "points": self.means.tolist()}
        if self.kind == "isotropic-gaussian":
            return {"kind": self.kind, "mean": self.means[0].tolist(), "scale": float(self.scales[0])}
        return {
            "kind": self.kind,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
        }


def isotropic_gaussian(mean, scale: float = 1.0) -> ScoreModel:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    return ScoreModel("isotropic-gaussian", np.ones(1), mean[None, :], np.array([float(scale)]))


def gaussian_mixture(weights, means, scales) -> ScoreModel:
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (means.shape[0],)).copy()
    return ScoreModel("gaussian-mixture", np.asarray(weights, dtype=np.float64), means, scales)


def empirical(points) -> ScoreModel:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] < 1:
        raise ModelError("empirical model needs at least one data point")
    k = points.shape[0]
    return ScoreModel("empirical", np.full(k, 1.0 / k), points, np.zeros(k))


def model_from_dict(spec: dict) -> ScoreModel:
    kind = spec.get("kind")
    if kind == "isotropic-gaussian":
        return isotropic_gaussian(spec["mean"], spec.get("scale", 1.0))
    if kind == "gaussian-mixture":
        return gaussian_mixture(spec["weights"], spec["means"], spec["scales"])
    if kind == "empirical":
        return empirical(spec["points"])
    raise ModelError(f"unknown model kind {kind!r}")


def _prep(model: ScoreModel, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[-1] != model.dim:
        raise ModelError(f"expected dimension {model.dim}, got {xb.shape[-1]}")
    if not np.all(np.isfinite(xb)):
        raise ModelError("non-finite input")
    return xb, single


def _abar(t: int, sched: NoiseSchedule) -> float:
    sched.check_t(t)
    return sched.alpha_bar(t)


def _components(model: ScoreModel, xb: np.ndarray, abar: float):
    """Per-component means, variances, log-weights and residuals at level abar."""
    if not (0.0 < abar <= 1.0):
        raise ModelError(f"noise level abar={abar} outside (0, 1]")
    m = np.sqrt(abar) * model.means  # (K, d)
    v = abar * model.scales**2 + (1.0 - abar)  # (K,)
    if np.any(v <= 0):
        raise ModelError("degenerate component variance at this noise level")
    diff = xb[:, None, :] - m[None, :, :]  # (n, K, d)
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    d = model.dim
    with np.errstate(divide="ignore"):
        logw = np.log(model.weights)
    logn = logw[None, :] - 0.5 * d * np.log(2 * np.pi * v)[None, :] - sq / (2 * v[None, :])
    return m, v, diff, logn


def _responsibilities(logn: np.ndarray) -> np.ndarray:
    shifted = logn - logn.max(axis=1, keepdims=True)
    r = np.exp(shifted)
    return r / r.sum(axis=1, keepdims=True)


def log_density_at(model: ScoreModel, x, abar: float):
    xb, single = _prep(model, x)
    _, _, _, logn = _components(model, xb, abar)
    out = logsumexp(logn, axis=1)
    return float(out[0]) if single else out


def score_at(model: ScoreModel, x, abar: float):
    xb, single = _prep(model, x)
    _, v, diff, logn = _components(model, xb, abar)
    r = _responsibilities(logn)
    s = -np.einsum("nk,nkd->nd", r / v[None, :], diff)
    return s[0] if single else s


def posterior_mean_at(model: ScoreModel, x, abar: float):
    """E[x0 | x_t] by responsibility weighting of per-component Gaussian posteriors."""
    xb, single = _prep(model, x)
    _, v, _, logn = _components(model, xb, abar)
    r = _responsibilities(logn)
    # per component: (mu_k (1 - abar) + sqrt(abar) s_k^2 x) / v_k
    coef_mu = (1.0 - abar) / v  # (K,)
    coef_x = np.sqrt(abar) * model.scales**2 / v  # (K,)
    out = (r * coef_x[None, :]).sum(axis=1)[:, None] * xb + (r * coef_mu[None, :]) @ model.means
    return out[0] if single else out


def score_hessian_at(model: ScoreModel, x, abar: float):
    """Hessian of log p_t: responsibility-weighted component Hessians plus the
    covariance of component scores under the responsibilities."""
    xb, single = _prep(model, x)
    _, v, diff, logn = _components(model, xb, abar)
    r = _responsibilities(logn)
    sk = -diff / v[None, :, None]  # (n, K, d)
    centred = sk - np.einsum("nk,nkd->nd", r, sk)[:, None, :]
    d = model.dim
    h = -(r / v[None, :]).sum(axis=1)[:, None, None] * np.eye(d)[None, :, :]
    h = h + np.einsum("nk,nki,nkj->nij", r, centred, centred)
    return h[0] if single else h


def responsibilities_at(model: ScoreModel, x, abar: float):
    xb, single = _prep(model, x)
    _, _, _, logn = _components(model, xb, abar)
    r = _responsibilities(logn)
    return r[0] if single else r


def score(model: ScoreModel, x, t: int, sched: NoiseSchedule):
    """Exact score of the noisy marginal at timestep ``t``."""
    return score_at(model, x, _abar(t, sched))


def log_density(model: ScoreModel, x, t: int, sched: NoiseSchedule):
    return log_density_at(model, x, _abar(t, sched))


def posterior_mean(model: ScoreModel, x, t: int, sched: NoiseSchedule):
    return posterior_mean_at(model, x, _abar(t, sched))


def score_hessian(model: ScoreModel, x, t: int, sched: NoiseSchedule):
    return score_hessian_at(model, x, _abar(t, sched))


def sample_data(model: ScoreModel, n: int, gen: np.random.Generator) -> np.ndarray:
    """Exact draws from the clean (t = 0) distribution."""
    labels = gen.choice(model.n_components, size=n, p=model.weights)
    z = gen.standard_normal((n, model.dim))
    return model.means[labels] + model.scales[labels, None] * z
