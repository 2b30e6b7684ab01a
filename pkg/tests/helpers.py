"""Random instance generators shared by the test modules."""

import numpy as np

from freedom.energy import (
    GramStyle,
    L2Target,
    LinearMeasurement,
    LowPass,
    MixtureClass,
    RegionBall,
)
from freedom.scores import empirical, gaussian_mixture, isotropic_gaussian

KINDS = ("l2-target", "linear-measurement", "lowpass", "gram-style", "region-softmin", "mixture-class")


def rng(seed=0):
    return np.random.default_rng(seed)


def random_gmm(gen, d=2, k=None):
    k = k or int(gen.integers(1, 4))
    w = gen.dirichlet(np.ones(k) * 2.0)
    return gaussian_mixture(w, gen.normal(0, 2, (k, d)), gen.uniform(0.3, 1.5, k))


def random_model(gen, d=2):
    kind = gen.integers(3)
    if kind == 0:
        return isotropic_gaussian(gen.normal(0, 1, d), gen.uniform(0.5, 2.0))
    if kind == 1:
        return random_gmm(gen, d)
    return empirical(gen.normal(0, 2, (int(gen.integers(1, 6)), d)))


def random_term(gen, kind, d):
    """A random term of ``kind`` on dimension ``d`` (mixture-class builds its own GMM)."""
    if kind == "l2-target":
        m = int(gen.integers(1, d + 1))
        return L2Target(gen.normal(size=m), gen.normal(size=(m, d)))
    if kind == "linear-measurement":
        m = int(gen.integers(1, d + 1))
        return LinearMeasurement(gen.normal(size=(m, d)), gen.normal(size=m))
    if kind == "lowpass":
        return LowPass(gen.normal(size=d), factor=int(gen.integers(1, 3)))
    if kind == "gram-style":
        return GramStyle(gen.normal(size=d), feature_seed=int(gen.integers(1000)))
    if kind == "region-softmin":
        return RegionBall(gen.normal(size=d), gen.uniform(0.1, 1.0))
    if kind == "mixture-class":
        model = random_gmm(gen, d, k=int(gen.integers(2, 4)))
        return MixtureClass(model, int(gen.integers(model.n_components)))
    raise ValueError(kind)



# ---------------------------------------------------------------------------
# extended-precision oracle: independent re-implementations evaluated in
# mpmath, so central differences are free of double-precision round-off

import mpmath as mp  # noqa: E402

MP_DPS = 40


def _mpv(x):
    return [mp.mpf(float(v)) for v in np.asarray(x, dtype=np.float64).ravel()]


def _mat(M):
    return [[mp.mpf(float(v)) for v in row] for row in np.atleast_2d(M)]


def mp_energy(term, x):
    x = list(x)
    kind = term.kind
    if kind in ("l2-target", "linear-measurement", "lowpass"):
        M, b = _mat(term.matrix), _mpv(term.target)
        return mp.fsum((mp.fsum(Mi[j] * x[j] for j in range(len(x))) - bi) ** 2 for Mi, bi in zip(M, b))
    if kind == "gram-style":
        F = _mat(term.features)
        ref = _mpv(term.reference)
        m = len(F)
        u = [mp.fsum(Fi[j] * x[j] for j in range(len(x))) for Fi in F]
        ur = [mp.fsum(Fi[j] * ref[j] for j in range(len(x))) for Fi in F]
        return mp.fsum((u[i] * u[j] / m - ur[i] * ur[j] / m) ** 2 for i in range(m) for j in range(m))
    if kind == "region-softmin":
        c = _mpv(term.center)
        dist = mp.sqrt(mp.fsum((xi - ci) ** 2 for xi, ci in zip(x, c)))
        h = max(dist - mp.mpf(term.radius), mp.mpf(0))
        return h * h
    if kind == "mixture-class":
        logs = _mp_log_components(term.model, x, mp.mpf(1))
        return -(logs[term.component] - _mp_lse(logs))
    raise ValueError(kind)


def _mp_lse(vals):
    top = max(vals)
    return top + mp.log(mp.fsum(mp.exp(v - top) for v in vals))


def _mp_log_components(model, x, abar):
    d = len(x)
    out = []
    for w, mu, s in zip(model.weights, model.means, model.scales):
        v = abar * mp.mpf(float(s)) ** 2 + 1 - abar
        sq = mp.fsum((xi - mp.sqrt(abar) * mp.mpf(float(m))) ** 2 for xi, m in zip(x, mu))
        lw = mp.log(mp.mpf(float(w))) if w > 0 else mp.mpf("-inf")
        out.append(lw - mp.mpf(d) / 2 * mp.log(2 * mp.pi * v) - sq / (2 * v))
    return out


def mp_posterior_mean(model, x, abar):
    abar = mp.mpf(float(abar))
    logs = _mp_log_components(model, x, abar)
    lse = _mp_lse(logs)
    r = [mp.exp(v - lse) for v in logs]
    out = [mp.mpf(0)] * len(x)
    for rk, mu, s in zip(r, model.means, model.scales):
        s2 = mp.mpf(float(s)) ** 2
        v = abar * s2 + 1 - abar
        for i in range(len(x)):
            out[i] += rk * (mp.mpf(float(mu[i])) * (1 - abar) + mp.sqrt(abar) * s2 * x[i]) / v
    return out


def mp_fd_grad(f, x, h=1e-5):
    """Central differences of an mpmath scalar function at float point ``x``."""
    with mp.workdps(MP_DPS):
        xs = _mpv(x)
        hh = mp.mpf(h)
        g = []
        for i in range(len(xs)):
            up = list(xs)
            dn = list(xs)
            up[i] += hh
            dn[i] -= hh
            g.append(float((f(up) - f(dn)) / (2 * hh)))
    return np.array(g)


def mp_relative_error(grad, fd):
    return float(np.linalg.norm(fd - grad) / (np.linalg.norm(grad) + 1e-30))
