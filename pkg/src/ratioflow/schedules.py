"""Gaussian probability-path schedules and their closed-form targets.

All schedules use ``alpha_t = t``.  The noise scale ``sigma_t`` is one of

* ``"I"``:   ``1 - t``
* ``"II"``:  ``1 - (1 - sigma_min) t``
* ``"III"``: ``sqrt((1 - lam) t^2 + (lam - 2) t + 1)``, i.e. the collapse of
  a linear interpolant with extra path noise of variance ``lam t (1 - t)``.

Functions accept scalar ``t`` or arrays broadcastable against the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

KINDS = ("I", "II", "III")

#: Default clamped time window for training and evaluation.
T_WINDOW = (1e-3, 1.0 - 1e-3)


@dataclass(frozen=True)
class Schedule:
    kind: str = "I"
    sigma_min: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        kind = str(self.kind).upper()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 <= self.sigma_min <= 1.0:
            raise ConfigurationError(f"sigma_min must lie in [0, 1], got {self.sigma_min}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")

    # -- coefficients -------------------------------------------------------

    def alpha(self, t):
        return np.asarray(t, dtype=np.float64) * 1.0

    def alpha_dot(self, t):
        return np.ones_like(np.asarray(t, dtype=np.float64))

    def sigma_sq(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "I":
            return (1.0 - t) ** 2
        if self.kind == "II":
            return (1.0 - (1.0 - self.sigma_min) * t) ** 2
        # lam t (1 - t) + (1 - t)^2, clamped against rounding below zero at t=1
        return np.maximum(self.lam * t * (1.0 - t) + (1.0 - t) ** 2, 0.0)

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "I":
            return 1.0 - t
        if self.kind == "II":
            return 1.0 - (1.0 - self.sigma_min) * t
        return np.sqrt(self.sigma_sq(t))

    def sigma_dot(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "I":
            return -np.ones_like(t)
        if self.kind == "II":
            return np.full_like(t, -(1.0 - self.sigma_min))
        s = self.sigma(t)
        if np.any(s == 0.0):
            raise DomainError("sigma_dot of schedule III is unbounded where sigma = 0 (t = 1)")
        return (2.0 * (1.0 - self.lam) * t + (self.lam - 2.0)) / (2.0 * s)

    def sigma_sigma_dot(self, t):
        """``sigma_t * d sigma_t / dt``, finite on all of ``[0, 1]``."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "III":
            return 0.5 * (2.0 * (1.0 - self.lam) * t + (self.lam - 2.0))
        return self.sigma(t) * self.sigma_dot(t)

    def endpoint_sigma(self):
        return (1.0, self.sigma_min if self.kind == "II" else 0.0)

    def to_dict(self):
        return {"kind": self.kind, "sigma_min": float(self.sigma_min), "lambda": float(self.lam)}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "I"), float(d.get("sigma_min", 0.0)),
                   float(d.get("lambda", d.get("lam", 0.0))))


def _positive_sigma(s: Schedule, t):
    sig = s.sigma(t)
    if np.any(sig <= 0.0):
        raise DomainError(f"sigma_t = 0 at t = {t}; stay inside the time window")
    return sig


def _col(v):
    """Broadcast a per-row coefficient against ``(n, d)`` arrays."""
    v = np.asarray(v, dtype=np.float64)
    return v[..., None] if v.ndim else v


def sample_path_point(s: Schedule, x1, eps, t):
    """``x_t = alpha_t x1 + sigma_t eps``."""
    return _col(s.alpha(t)) * np.asarray(x1) + _col(s.sigma(t)) * np.asarray(eps)


def cond_velocity_target(s: Schedule, x_t, x1, t):
    """``alpha_dot x1 + (sigma_dot / sigma)(x_t - alpha x1)``."""
    sig = _positive_sigma(s, t)
    x_t, x1 = np.asarray(x_t, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    a = _col(s.alpha(t))
    return _col(s.alpha_dot(t)) * x1 + _col(s.sigma_dot(t) / sig) * (x_t - a * x1)


def cond_score_target(s: Schedule, x_t, x1, t):
    """``-(x_t - alpha x1) / sigma^2``."""
    sig = _positive_sigma(s, t)
    x_t, x1 = np.asarray(x_t, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    return -(x_t - _col(s.alpha(t)) * x1) / _col(sig ** 2)


def score_from_velocity(s: Schedule, u, x, t):
    """Recover the marginal score from the marginal velocity.

    Undefined where ``alpha_t = 0`` (the velocity drops out entirely) or where
    ``sigma_t (alpha_dot sigma_t - alpha_t sigma_dot)`` vanishes.
    """
    alpha = s.alpha(t)
    if np.any(alpha == 0.0):
        raise DomainError("score_from_velocity is degenerate at alpha_t = 0 (t = 0)")
    sig = s.sigma(t)
    denom = sig * (s.alpha_dot(t) * sig - alpha * s.sigma_dot(t))
    if np.any(denom == 0.0):
        raise DomainError(f"score_from_velocity has a zero denominator at t = {t}")
    u, x = np.asarray(u, dtype=np.float64), np.asarray(x, dtype=np.float64)
    return (_col(alpha) * u - _col(s.alpha_dot(t)) * x) / _col(denom)


def velocity_from_posterior_mean(s: Schedule, x, e_x1, t):
    """``[sigma_dot x + (alpha_dot sigma - alpha sigma_dot) E[x1 | x]] / sigma``."""
    sig = _positive_sigma(s, t)
    sd = s.sigma_dot(t)
    coef = s.alpha_dot(t) * sig - s.alpha(t) * sd
    x, e_x1 = np.asarray(x, dtype=np.float64), np.asarray(e_x1, dtype=np.float64)
    return (_col(sd) * x + _col(coef) * e_x1) / _col(sig)
