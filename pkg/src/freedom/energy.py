"""Time-independent energies on clean samples and their gradients.

Each term measures how far a clean estimate ``x0`` is from satisfying one
condition. Values are nonnegative and zero exactly when the condition holds.
The fixed linear maps used here (projections, block averaging, random
features) play the part of the pretrained feature extractors a real image
pipeline would use, while keeping every gradient closed-form.

Terms evaluate on a point ``(d,)`` or a batch ``(n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .schedule import NoiseSchedule
from .scores import ScoreModel, _prep, posterior_mean_at, responsibilities_at, score_at

EXACT_JACOBIAN_MAX_DIM = 32


class EnergyError(ValueError):
    pass


def _batch(x, dim: int):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[-1] != dim:
        raise EnergyError(f"expected dimension {dim}, got {xb.shape[-1]}")
    if not np.all(np.isfinite(xb)):
        raise EnergyError("non-finite input")
    return xb, single


def _out(v, single):
    if single:
        return float(v[0]) if v.ndim == 1 else v[0]
    return v


class EnergyTerm:
    """Base class. Subclasses implement ``_value`` and ``_grad`` on batches."""

    kind: str = ""
    dim: int

    def value(self, x0):
        xb, single = _batch(x0, self.dim)
        return _out(self._value(xb), single)

    def grad(self, x0):
        xb, single = _batch(x0, self.dim)
        return _out(self._grad(xb), single)

    def _value(self, xb):  # pragma: no cover - abstract
        raise NotImplementedError

    def _grad(self, xb):  # pragma: no cover - abstract
        raise NotImplementedError

    def to_dict(self) -> dict:  # pragma: no cover - abstract
        raise NotImplementedError


class _Quadratic(EnergyTerm):
    """``||M x - b||^2`` for a fixed matrix and target."""

    def __init__(self, matrix, target):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        self.target = np.atleast_1d(np.asarray(target, dtype=np.float64))
        if self.target.shape != (self.matrix.shape[0],):
            raise EnergyError("target length must equal the number of matrix rows")
        self.dim = self.matrix.shape[1]

    def residual(self, xb):
        return xb @ self.matrix.T - self.target

    def _value(self, xb):
        r = self.residual(xb)
        return np.einsum("nm,nm->n", r, r)

    def _grad(self, xb):
        return 2.0 * self.residual(xb) @ self.matrix


class L2Target(_Quadratic):
    """``||P x0 - c||^2``: feature-space match to a target vector."""

    kind = "l2-target"

    def __init__(self, target, projection=None):
        target = np.atleast_1d(np.asarray(target, dtype=np.float64))
        if projection is None:
            projection = np.eye(target.size)
        super().__init__(projection, target)

    def to_dict(self):
        return {"kind": self.kind, "target": self.target.tolist(), "projection": self.matrix.tolist()}


class LinearMeasurement(_Quadratic):
    """``||y - A x0||^2`` for a linear degradation ``A``."""

    kind = "linear-measurement"

    def __init__(self, A, y):
        super().__init__(A, y)

    @property
    def A(self):
        return self.matrix

    @property
    def y(self):
        return self.target

    def to_dict(self):
        return {"kind": self.kind, "A": self.matrix.tolist(), "y": self.target.tolist()}


def block_average_matrix(d: int, factor: int = 2) -> np.ndarray:
    """Downsampling by averaging consecutive blocks of ``factor`` coordinates.

    A trailing partial block is averaged over the coordinates it has.
    """
    rows = -(-d // factor)
    K = np.zeros((rows, d))
    for i in range(rows):
        lo, hi = i * factor, min((i + 1) * factor, d)
        K[i, lo:hi] = 1.0 / (hi - lo)
    return K


class LowPass(_Quadratic):
    """``||K x_src - K x0||^2`` with ``K`` a block-averaging low-pass filter."""

    kind = "lowpass"

    def __init__(self, source, factor: int = 2):
        self.source = np.atleast_1d(np.asarray(source, dtype=np.float64))
        self.factor = int(factor)
        K = block_average_matrix(self.source.size, self.factor)
        super().__init__(K, K @ self.source)

    def to_dict(self):
        return {"kind": self.kind, "source": self.source.tolist(), "factor": self.factor}


def gram_features(d: int, seed: int, rows: int | None = None) -> np.ndarray:
    """Fixed random feature matrix with ``4 d`` rows by default."""
    m = 4 * d if rows is None else rows
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    return gen.standard_normal((m, d)) / np.sqrt(d)


class GramStyle(EnergyTerm):
    """``||G(x_ref) - G(x0)||_F^2`` with ``G(x) = (F x)(F x)^T / m``."""

    kind = "gram-style"

    def __init__(self, reference, features=None, feature_seed: int = 0):
        self.reference = np.atleast_1d(np.asarray(reference, dtype=np.float64))
        self.dim = self.reference.size
        self.feature_seed = int(feature_seed)
        if features is None:
            features = gram_features(self.dim, self.feature_seed)
        self.features = np.asarray(features, dtype=np.float64)
        if self.features.shape[1] != self.dim:
            raise EnergyError("feature matrix width must match the reference dimension")
        self.m = self.features.shape[0]
        self.gram_ref = self.gram(self.reference)

    def gram(self, x):
        u = self.features @ np.asarray(x, dtype=np.float64)
        return np.outer(u, u) / self.m

    def _diff(self, xb):
        u = xb @ self.features.T  # (n, m)
        return u, u[:, :, None] * u[:, None, :] / self.m - self.gram_ref[None]

    def _value(self, xb):
        _, diff = self._diff(xb)
        return np.einsum("nij,nij->n", diff, diff)

    def _grad(self, xb):
        u, diff = self._diff(xb)
        du = (4.0 / self.m) * np.einsum("nij,nj->ni", diff, u)
        return du @ self.features

    def to_dict(self):
        return {"kind": self.kind, "reference": self.reference.tolist(), "feature_seed": self.feature_seed}


class RegionBall(EnergyTerm):
    """Squared hinge distance to a ball: ``max(0, ||x0 - c|| - r)^2``."""

    kind = "region-softmin"

    def __init__(self, center, radius: float):
        self.center = np.atleast_1d(np.asarray(center, dtype=np.float64))
        self.radius = float(radius)
        if self.radius < 0:
            raise EnergyError("radius must be nonnegative")
        self.dim = self.center.size

    def _parts(self, xb):
        diff = xb - self.center
        dist = np.sqrt(np.einsum("nd,nd->n", diff, diff))
        return diff, dist, np.maximum(dist - self.radius, 0.0)

    def _value(self, xb):
        _, _, h = self._parts(xb)
        return h * h

    def _grad(self, xb):
        diff, dist, h = self._parts(xb)
        scale = np.divide(2.0 * h, dist, out=np.zeros_like(dist), where=h > 0)
        return scale[:, None] * diff

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "radius": self.radius}


class MixtureClass(EnergyTerm):
    """Negative log responsibility of one component of a clean Gaussian mixture.

    Acts as a noise-free classifier: zero when the component owns the point
    outright, large when another component dominates.
    """

    kind = "mixture-class"

    def __init__(self, model: ScoreModel, component: int):
        if model.kind == "empirical":
            raise EnergyError("mixture-class needs components with positive width")
        if not (0 <= int(component) < model.n_components):
            raise EnergyError(f"component {component} out of range")
        self.model = model
        self.component = int(component)
        self.dim = model.dim

    def _logn(self, xb):
        diff = xb[:, None, :] - self.model.means[None]
        v = self.model.scales**2
        sq = np.einsum("nkd,nkd->nk", diff, diff)
        with np.errstate(divide="ignore"):
            logw = np.log(self.model.weights)
        logn = logw - 0.5 * self.dim * np.log(2 * np.pi * v) - sq / (2 * v)
        return diff, logn

    def _value(self, xb):
        # -log r_k = log(1 + sum_{j != k} exp(l_j - l_k)), written to keep
        # precision when component k owns the point
        _, logn = self._logn(xb)
        a = np.delete(logn - logn[:, [self.component]], self.component, axis=1)
        if a.shape[1] == 0:
            return np.zeros(xb.shape[0])
        top = np.maximum(a.max(axis=1), 0.0)
        rest = np.exp(a - top[:, None]).sum(axis=1)
        small = top == 0
        out = np.where(small, np.log1p(np.where(small, rest, 0.0)), top + np.log(np.exp(-top) + rest))
        return np.maximum(out, 0.0)

    def _grad(self, xb):
        diff, logn = self._logn(xb)
        r = np.exp(logn - logn.max(axis=1, keepdims=True))
        r /= r.sum(axis=1, keepdims=True)
        sk = -diff / (self.model.scales**2)[None, :, None]
        # grad(-log r_k) = sum_{j != k} r_j (s_j - s_k); no cancellation when r_k ~ 1
        rel = sk - sk[:, [self.component]]
        return np.einsum("nk,nkd->nd", r, rel)

    def to_dict(self):
        return {"kind": self.kind, "model": self.model.to_dict(), "component": self.component}


def energy(term: EnergyTerm, x0):
    return term.value(x0)


def energy_grad(term: EnergyTerm, x0):
    return term.grad(x0)


@dataclass(frozen=True)
class EnergyStack:
    """Weighted sum of energy terms."""

    terms: tuple
    weights: tuple = field(default=())

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise EnergyError("an energy stack needs at least one term")
        weights = tuple(float(w) for w in self.weights) if self.weights else (1.0,) * len(terms)
        if len(weights) != len(terms):
            raise EnergyError("one weight per term required")
        if any(w < 0 for w in weights):
            raise EnergyError("weights must be nonnegative")
        dims = {t.dim for t in terms}
        if len(dims) != 1:
            raise EnergyError(f"terms disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.terms[0].dim

    def to_dict(self) -> dict:
        return {"terms": [t.to_dict() for t in self.terms], "weights": list(self.weights)}


def stack_energy(stack: EnergyStack, x0):
    total = 0.0
    for w, term in zip(stack.weights, stack.terms):
        total = total + w * term.value(x0)
    return total


def stack_grad(stack: EnergyStack, x0):
    total = 0.0
    for w, term in zip(stack.weights, stack.terms):
        total = total + w * term.grad(x0)
    return total


def default_jacobian_mode(dim: int) -> str:
    return "exact" if dim <= EXACT_JACOBIAN_MAX_DIM else "stop"


def guided_grad_at(stack: EnergyStack, model: ScoreModel, x_t, abar: float, mode: str | None = None,
                   s=None):
    """Gradient of ``D(c, x0|t(x_t))`` with respect to ``x_t``.

    ``mode="exact"`` chains through the Jacobian of the posterior mean,
    ``(I + (1 - abar) H) / sqrt(abar)`` with ``H`` the Hessian of
    ``log p_t``. ``mode="stop"`` keeps only the ``1 / sqrt(abar)`` factor.
    ``s`` is an already-computed score at ``x_t``, reused when given.

    Returns ``(grad, x0_hat)``.
    """
    xb, single = _prep(model, x_t)
    mode = mode or default_jacobian_mode(model.dim)
    if s is None:
        s = score_at(model, xb, abar)
    s = np.atleast_2d(s)
    x0 = (xb + (1.0 - abar) * s) / np.sqrt(abar)
    g0 = np.atleast_2d(stack_grad(stack, x0))
    if mode == "exact":
        g = np.einsum("nij,nj->ni", posterior_mean_jacobian_at(model, xb, abar), g0)
    elif mode == "stop":
        g = g0 / np.sqrt(abar)
    else:
        raise EnergyError(f"unknown jacobian mode {mode!r}")
    if single:
        return g[0], x0[0]
    return g, x0


def posterior_mean_jacobian_at(model: ScoreModel, x_t, abar: float):
    """Jacobian of the posterior mean, ``(I + (1 - abar) H) / sqrt(abar)``.

    Evaluated in the centred form
    ``sum_k r_k c_k I + (1 - abar) / sqrt(abar) * Cov_r(s_k)`` with
    ``c_k = sqrt(abar) s_k^2 / v_k``, which avoids the cancellation between
    ``I`` and ``(1 - abar) H`` when one component dominates.
    """
    xb, single = _prep(model, x_t)
    r = responsibilities_at(model, xb, abar)
    v = abar * model.scales**2 + (1.0 - abar)
    sk = -(xb[:, None, :] - np.sqrt(abar) * model.means[None]) / v[None, :, None]
    centred = sk - np.einsum("nk,nkd->nd", r, sk)[:, None, :]
    cov = np.einsum("nk,nki,nkj->nij", r, centred, centred)
    c = r @ (np.sqrt(abar) * model.scales**2 / v)
    J = c[:, None, None] * np.eye(model.dim)[None] + (1.0 - abar) / np.sqrt(abar) * cov
    return J[0] if single else J


def guided_grad_wrt_xt(stack: EnergyStack, model: ScoreModel, x_t, t: int, sched: NoiseSchedule,
                       mode: str | None = None):
    sched.check_t(t)
    g, _ = guided_grad_at(stack, model, x_t, sched.alpha_bar(t), mode)
    return g


def guided_energy_at(stack: EnergyStack, model: ScoreModel, x_t, abar: float):
    """``D(c, posterior_mean(x_t))``; the scalar field whose gradient guides."""
    return stack_energy(stack, posterior_mean_at(model, x_t, abar))


@dataclass(frozen=True)
class LinearOperator:
    A: np.ndarray
    A_pinv: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        P = np.atleast_2d(np.asarray(self.A_pinv, dtype=np.float64))
        if P.shape != A.shape[::-1]:
            raise EnergyError("pseudoinverse must have the transposed shape of A")
        err = np.linalg.norm(A @ P @ A - A) / max(np.linalg.norm(A), 1e-300)
        if err > 1e-8:
            raise EnergyError(f"A A+ A != A (relative error {err:.2e})")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "A_pinv", P)

    @classmethod
    def from_matrix(cls, A) -> "LinearOperator":
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        return cls(A, np.linalg.pinv(A))


def ddnm_update(op: LinearOperator, y, x0):
    """Range-space correction ``x0 - A+ (A x0 - y)``."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    x0 = np.asarray(x0, dtype=np.float64)
    if y.shape != (op.A.shape[0],) or x0.shape[-1] != op.A.shape[1]:
        raise EnergyError("dimension mismatch between operator, y and x0")
    return x0 - (x0 @ op.A.T - y) @ op.A_pinv.T


def term_from_dict(spec: dict, model: ScoreModel | None = None) -> EnergyTerm:
    kind = spec.get("kind")
    if kind == "l2-target":
        return L2Target(spec["target"], spec.get("projection"))
    if kind == "linear-measurement":
        return LinearMeasurement(spec["A"], spec["y"])
    if kind == "lowpass":
        return LowPass(spec["source"], spec.get("factor", 2))
    if kind == "gram-style":
        return GramStyle(spec["reference"], feature_seed=spec.get("feature_seed", 0))
    if kind == "region-softmin":
        return RegionBall(spec["center"], spec["radius"])
    if kind == "mixture-class":
        from .scores import model_from_dict

        ref = spec.get("model", "base")
        if ref == "base":
            if model is None:
                raise EnergyError("mixture-class with model='base' needs the base model")
            cls_model = model
        else:
            cls_model = model_from_dict(ref)
        return MixtureClass(cls_model, spec["component"])
    raise EnergyError(f"unknown energy kind {kind!r}")


def stack_from_dict(spec: dict, model: ScoreModel | None = None) -> EnergyStack:
    terms = [term_from_dict(t, model) for t in spec["terms"]]
    return EnergyStack(tuple(terms), tuple(spec.get("weights", ())))


def stack_of(terms: Sequence[EnergyTerm], weights: Sequence[float] = ()) -> EnergyStack:
    return EnergyStack(tuple(terms), tuple(weights))
