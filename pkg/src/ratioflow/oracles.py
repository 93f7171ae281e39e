"""Closed-form Gaussian ground truth.

For data ``q = N(mu, Sigma)`` and a schedule ``(alpha_t, sigma_t)`` the
marginal path is ``p_t = N(alpha_t mu, C_t)`` with
``C_t = alpha_t^2 Sigma + sigma_t^2 I``.  Everything below is computed in the
eigenbasis of ``Sigma`` so that ``C_t`` is diagonal.

The marginal velocity is evaluated as
``alpha_dot E[x1|x] + sigma sigma_dot C_t^{-1}(x - alpha mu)``, which is the
posterior-mean form with the ``1/sigma`` factor cancelled, so the oracle stays
finite at ``t = 1`` whenever ``Sigma`` is non-singular.  None of this touches
the autodiff module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .fields import FieldProvider
from .schedules import Schedule

JITTER = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class GaussianSpec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.ndim == 1:
            cov = np.diag(cov)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ConfigurationError(f"covariance shape {cov.shape} does not match mean ({d},)")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ConfigurationError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError("covariance is not positive definite") from exc
        evals, evecs = np.linalg.eigh(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_evals", np.maximum(evals, 0.0))
        object.__setattr__(self, "_evecs", evecs)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self._chol.T

    def to_dict(self):
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["cov"], dtype=np.float64))


def shifted_gaussian(s: float, d: int) -> GaussianSpec:
    """``N(s * ones(d), I)``."""
    return GaussianSpec(np.full(d, float(s)), np.eye(d))


def standard_gaussian(d: int) -> GaussianSpec:
    return GaussianSpec(np.zeros(d), np.eye(d))


def block_correlated_cov(d: int, rho: float = 0.8) -> np.ndarray:
    """Block-diagonal covariance of ``2 x 2`` blocks ``[[1, rho], [rho, 1]]``."""
    if d % 2:
        raise ConfigurationError(f"block-correlated covariance needs even d, got {d}")
    block = np.array([[1.0, rho], [rho, 1.0]])
    return np.kron(np.eye(d // 2), block)


def log_density(g: GaussianSpec, x) -> np.ndarray:
    """Multivariate normal log-density via the Cholesky factor."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != g.dim:
        raise ConfigurationError(f"point dimension {x.shape[-1]} != {g.dim}")
    diff = (x - g.mean).reshape(-1, g.dim)
    z = np.linalg.solve(g._chol, diff.T).T
    logdet = 2.0 * np.sum(np.log(np.diag(g._chol)))
    out = -0.5 * (np.sum(z * z, axis=-1) + logdet + g.dim * LOG_2PI)
    return out.reshape(x.shape[:-1])


def analytic_log_ratio(q: GaussianSpec, q2: GaussianSpec, x) -> np.ndarray:
    if q.dim != q2.dim:
        raise ConfigurationError("both Gaussians must share a dimension")
    return log_density(q, x) - log_density(q2, x)


def _marginal_parts(g: GaussianSpec, schedule: Schedule, x, t):
    """Return ``(alpha, y, c, evals, evecs)``: ``y`` is ``x - alpha mu`` in the eigenbasis."""
    t = float(t)
    alpha = float(schedule.alpha(t))
    sig2 = float(schedule.sigma_sq(t))
    c = alpha * alpha * g._evals + sig2
    if np.any(c <= 0.0):
        raise DomainError(f"marginal covariance is singular at t = {t}")
    c = np.maximum(c, JITTER)
    x = np.asarray(x, dtype=np.float64)
    y = (x - alpha * g.mean) @ g._evecs
    return alpha, y, c


def marginal_log_density(g: GaussianSpec, schedule: Schedule, x, t) -> np.ndarray:
    alpha, y, c = _marginal_parts(g, schedule, x, t)
    return -0.5 * (np.sum(y * y / c, axis=-1) + np.sum(np.log(c)) + g.dim * LOG_2PI)


def marginal_score(g: GaussianSpec, schedule: Schedule, x, t) -> np.ndarray:
    """``-(alpha^2 Sigma + sigma^2 I)^{-1} (x - alpha mu)``."""
    _, y, c = _marginal_parts(g, schedule, x, t)
    return -(y / c) @ g._evecs.T


def posterior_mean(g: GaussianSpec, schedule: Schedule, x, t) -> np.ndarray:
    """``E[x1 | x_t = x] = mu + alpha Sigma C_t^{-1} (x - alpha mu)``."""
    alpha, y, c = _marginal_parts(g, schedule, x, t)
    return g.mean + alpha * (y * g._evals / c) @ g._evecs.T


def marginal_velocity(g: GaussianSpec, schedule: Schedule, x, t) -> np.ndarray:
    alpha, y, c = _marginal_parts(g, schedule, x, t)
    a_dot = float(schedule.alpha_dot(t))
    ssd = float(schedule.sigma_sigma_dot(t))
    coef = a_dot * alpha * g._evals / c + ssd / c
    return a_dot * g.mean + (y * coef) @ g._evecs.T


def marginal_divergence(g: GaussianSpec, schedule: Schedule, x, t) -> np.ndarray:
    """Trace of the (affine) velocity's coefficient matrix, broadcast over points."""
    alpha, _, c = _marginal_parts(g, schedule, np.zeros(g.dim), t)
    a_dot = float(schedule.alpha_dot(t))
    ssd = float(schedule.sigma_sigma_dot(t))
    tr = float(np.sum((a_dot * alpha * g._evals + ssd) / c))
    x = np.asarray(x)
    return np.full(x.shape[:-1], tr)


def oracle_field_provider(g: GaussianSpec, schedule: Schedule) -> FieldProvider:
    return FieldProvider(
        velocity=lambda x, t: marginal_velocity(g, schedule, x, t),
        score=lambda x, t: marginal_score(g, schedule, x, t),
        divergence=lambda x, t: marginal_divergence(g, schedule, x, t),
        name=f"oracle(mean={np.round(g.mean[:3], 4).tolist()}..., schedule={schedule.kind})",
    )


def pooled_gaussian(components, weights=None) -> GaussianSpec:
    """Moment-matched Gaussian of a mixture of Gaussians.

    Used as the simulation field standing in for an unconditional model when
    only Gaussian oracles are available; any smooth field is a valid choice.
    """
    comps = list(components)
    w = np.full(len(comps), 1.0 / len(comps)) if weights is None else np.asarray(weights, float)
    mean = sum(wi * c.mean for wi, c in zip(w, comps))
    cov = sum(wi * (c.cov + np.outer(c.mean - mean, c.mean - mean)) for wi, c in zip(w, comps))
    return GaussianSpec(mean, 0.5 * (cov + cov.T))


def mi_ground_truth(d: int, rho: float = 0.8) -> float:
    """Mutual information between odd and even coordinates of ``N(0, Sigma)``.

    ``0.5 * log(1 / |Sigma|)`` with ``|Sigma| = (1 - rho^2)^(d/2)``.
    """
    if d <= 0 or d % 2:
        raise ConfigurationError(f"d must be a positive even integer, got {d}")
    return 0.5 * (d // 2) * float(-np.log(1.0 - rho * rho))


def endpoint_gaussian(g: GaussianSpec, schedule: Schedule) -> GaussianSpec:
    """Density the flow actually reaches at ``t = 1``.

    Equal to ``g`` unless the schedule keeps residual noise (kind II with
    ``sigma_min > 0``), in which case it is ``g`` smoothed by that noise.
    """
    a = float(schedule.alpha(1.0))
    s2 = float(schedule.sigma_sq(1.0))
    return GaussianSpec(a * g.mean, a * a * g.cov + s2 * np.eye(g.dim))
