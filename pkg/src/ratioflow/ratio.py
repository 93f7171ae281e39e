"""Log-density ratios between two flows from a single augmented ODE solve.

Along a trajectory ``dx/dt = b_t(x)`` the log-ratio ``log p_t(x_t) / p'_t(x_t)``
of two paths generated by ``u_t`` and ``u'_t`` (common standard-normal prior)
evolves as::

    d/dt log r = div(u' - u) + (b - u) . grad log p + (u' - b) . grad log p'

Starting from ``log r = 0`` at ``t = 1`` and integrating down to ``t = 0``
accumulates ``-log r_1(x_1)``, so the estimate is the negated accumulator.
``S1`` simulates with ``b = u`` (numerator field), ``S2`` with the
unconditional field of the same model.

The naive baseline integrates the change-of-variables ODE once per density.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .fields import FieldProvider

METHODS = ("euler", "rk4")
VARIANTS = ("s1", "s2", "general")
LOG_2PI = float(np.log(2.0 * np.pi))
DEFAULT_CHUNK = 1000


@dataclass(frozen=True)
class SolverConfig:
    """Fixed-step solver from ``t_start = 1 - t_eps`` down to ``t_end = t_eps``."""

    method: str = "rk4"
    steps: int = 200
    t_eps: float = 1e-3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown solver method {self.method!r}")
        if int(self.steps) < 1:
            raise ConfigurationError("solver needs at least one step")
        if not 0.0 <= self.t_eps < 0.5:
            raise ConfigurationError(f"t_eps must lie in [0, 0.5), got {self.t_eps}")

    @property
    def t_start(self) -> float:
        return 1.0 - self.t_eps

    @property
    def t_end(self) -> float:
        return self.t_eps

    def to_dict(self):
        return {"method": self.method, "steps": int(self.steps), "t_eps": float(self.t_eps)}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("method", "rk4"), int(d.get("steps", 200)), float(d.get("t_eps", 1e-3)))


@dataclass
class RatioResult:
    """Per-point output of one batch solve."""

    values: np.ndarray
    converged: np.ndarray
    max_norm: np.ndarray
    runtime_seconds: float = 0.0
    final_points: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_failed(self) -> int:
        return int(np.count_nonzero(~self.converged))

    def records(self):
        return [
            {"index": i, "log_ratio": float(v), "converged": bool(c), "max_norm": float(m)}
            for i, (v, c, m) in enumerate(zip(self.values, self.converged, self.max_norm))
        ]


# -- fixed-step integration of (x, acc) ---------------------------------------

Rhs = Callable[[np.ndarray, float], tuple]


def integrate(rhs: Rhs, x0, solver: SolverConfig, bound: float = 1e6,
              chunk_size: Optional[int] = DEFAULT_CHUNK):
    """Integrate ``dx/dt, dacc/dt = rhs(x, t)`` from ``t_start`` to ``t_end``.

    A point whose state leaves the ball of radius ``bound`` or turns
    non-finite is frozen and flagged; the rest of the batch carries on.
    Points are solved in chunks of ``chunk_size`` rows to bound memory.
    Returns ``(x_end, acc, converged, max_norm)``.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    if x.ndim != 2:
        raise ConfigurationError("points must be an (n, d) array")
    if chunk_size is not None and x.shape[0] > chunk_size:
        parts = [_integrate_batch(rhs, x[i:i + chunk_size], solver, bound)
                 for i in range(0, x.shape[0], chunk_size)]
        return tuple(np.concatenate(col) for col in zip(*parts))
    return _integrate_batch(rhs, x, solver, bound)


def _integrate_batch(rhs: Rhs, x, solver: SolverConfig, bound: float):
    n = x.shape[0]
    acc = np.zeros(n)
    ok = np.ones(n, dtype=bool)
    max_norm = np.linalg.norm(x, axis=1)
    t0, t1, steps = solver.t_start, solver.t_end, int(solver.steps)
    h = (t1 - t0) / steps
    for k in range(steps):
        t = t0 + k * h
        idx = None if ok.all() else np.flatnonzero(ok)
        if idx is not None and idx.size == 0:
            break
        xs = x if idx is None else x[idx]
        if solver.method == "euler":
            dx, da = rhs(xs, t)
            x_new = xs + h * dx
            a_inc = h * da
        else:
            k1x, k1a = rhs(xs, t)
            k2x, k2a = rhs(xs + 0.5 * h * k1x, t + 0.5 * h)
            k3x, k3a = rhs(xs + 0.5 * h * k2x, t + 0.5 * h)
            k4x, k4a = rhs(xs + h * k3x, t + h)
            x_new = xs + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
            a_inc = (h / 6.0) * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
        with np.errstate(invalid="ignore", over="ignore"):
            norms = np.linalg.norm(x_new, axis=1)
            good = np.isfinite(norms) & (norms <= bound) & np.isfinite(a_inc)
        if idx is None:
            x = np.where(good[:, None], x_new, x)
            acc = np.where(good, acc + a_inc, np.nan)
            max_norm = np.where(good, np.maximum(max_norm, norms), max_norm)
            ok = good
        else:
            keep = idx[good]
            x[keep] = x_new[good]
            acc[keep] += a_inc[good]
            max_norm[keep] = np.maximum(max_norm[keep], norms[good])
            acc[idx[~good]] = np.nan
            ok[idx[~good]] = False
    return x, acc, ok, max_norm


# -- right-hand side of the ratio ODE -----------------------------------------

def _dot(a, b):
    return np.einsum("ij,ij->i", a, b)


def ratio_rhs(num: FieldProvider, den: FieldProvider, sim: FieldProvider, x, t,
              specialize: bool = True):
    """Return ``(dx/dt, d log r / dt)`` at ``(x, t)``.

    With ``specialize`` the correction term belonging to whichever provider
    *is* the simulation field is skipped (it is identically zero); without it
    all three terms are evaluated.
    """
    x = np.asarray(x, dtype=np.float64)
    if specialize and _fusable(num, den, sim):
        return _model_ratio_rhs(num, den, sim, x, t)
    vn = num.velocity(x, t)
    vd = den.velocity(x, t)
    if specialize and sim is num:
        vs = vn
    elif specialize and sim is den:
        vs = vd
    else:
        vs = sim.velocity(x, t)
    dlogr = den.divergence(x, t) - num.divergence(x, t)
    if not (specialize and sim is num):
        dlogr = dlogr + _dot(vs - vn, num.score(x, t))
    if not (specialize and sim is den):
        dlogr = dlogr + _dot(vd - vs, den.score(x, t))
    return vs, dlogr


def s1_rhs(num: FieldProvider, den: FieldProvider, x, t):
    """The two-term integrand obtained with the numerator as simulation field."""
    vn = num.velocity(x, t)
    vd = den.velocity(x, t)
    return vn, den.divergence(x, t) - num.divergence(x, t) + _dot(vd - vn, den.score(x, t))


def _fusable(*providers) -> bool:
    model = providers[0].model
    return model is not None and all(p.model is model for p in providers)


def _model_ratio_rhs(num, den, sim, x, t):
    """Same arithmetic as the generic path, sharing the condition-free trunk."""
    model = num.model
    s_is_num, s_is_den = sim is num, sim is den
    vel_labels = [num.labels, den.labels]
    div_flags = [True, True]
    if not (s_is_num or s_is_den):
        vel_labels.append(sim.labels)
        div_flags.append(False)
    score_labels = []
    if not s_is_num:
        score_labels.append(num.labels)
    if not s_is_den:
        score_labels.append(den.labels)
    vels, divs, scores = model.multi_eval(x, t, vel_labels, div_flags, score_labels)
    vn, vd = vels[0], vels[1]
    vs = vn if s_is_num else (vd if s_is_den else vels[2])
    dlogr = divs[1] - divs[0]
    k = 0
    if not s_is_num:
        dlogr = dlogr + _dot(vs - vn, scores[k])
        k += 1
    if not s_is_den:
        dlogr = dlogr + _dot(vd - vs, scores[k])
    return vs, dlogr


# -- estimators ---------------------------------------------------------------

def estimate_log_ratio(points, num: FieldProvider, den: FieldProvider,
                       sim: Optional[FieldProvider] = None,
                       solver: Optional[SolverConfig] = None, bound: float = 1e6,
                       specialize: bool = True) -> RatioResult:
    """``log p_num(x1) - log p_den(x1)`` for each row of ``points``.

    ``sim=None`` means S1 (simulate with the numerator field).
    """
    solver = SolverConfig() if solver is None else solver
    sim = num if sim is None else sim
    start = time.perf_counter()
    x_end, acc, ok, max_norm = integrate(
        lambda x, t: ratio_rhs(num, den, sim, x, t, specialize=specialize),
        _points(points), solver, bound)
    return RatioResult(-acc, ok, max_norm, time.perf_counter() - start, x_end)


def _velocity_and_divergence(field: FieldProvider):
    if field.model is not None:
        def rhs(x, t):
            vels, divs, _ = field.model.multi_eval(x, t, [field.labels], [True], [])
            return vels[0], divs[0]
        return rhs
    return lambda x, t: (field.velocity(x, t), field.divergence(x, t))


def naive_log_likelihood(field: FieldProvider, points, solver: Optional[SolverConfig] = None,
                         bound: float = 1e6) -> RatioResult:
    """Change-of-variables log-likelihood, one backward solve per batch.

    ``log p_1(x_1) = log N(x_0; 0, I) + int_1^0 div u_t(x_t) dt``; the prior is
    evaluated at ``t_end`` in place of ``t = 0``.
    """
    solver = SolverConfig() if solver is None else solver
    start = time.perf_counter()
    x_end, acc, ok, max_norm = integrate(_velocity_and_divergence(field), _points(points),
                                         solver, bound)
    d = x_end.shape[1]
    prior = -0.5 * (np.sum(x_end * x_end, axis=1) + d * LOG_2PI)
    return RatioResult(prior + acc, ok, max_norm, time.perf_counter() - start, x_end)


def naive_log_ratio(num: FieldProvider, den: FieldProvider, points,
                    solver: Optional[SolverConfig] = None, bound: float = 1e6) -> RatioResult:
    """Two independent likelihood solves, subtracted."""
    a = naive_log_likelihood(num, points, solver, bound)
    b = naive_log_likelihood(den, points, solver, bound)
    return RatioResult(a.values - b.values, a.converged & b.converged,
                       np.maximum(a.max_norm, b.max_norm),
                       a.runtime_seconds + b.runtime_seconds)


def _points(points):
    x = np.asarray(points, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


# -- requests against a trained model -----------------------------------------

@dataclass(frozen=True)
class RatioRequest:
    points: np.ndarray
    numerator: tuple
    denominator: tuple
    variant: str = "s1"
    solver: SolverConfig = SolverConfig()
    simulation: Optional[tuple] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if tuple(self.numerator) == tuple(self.denominator):
            raise ConfigurationError("numerator and denominator conditions must differ")
        if self.variant == "general" and self.simulation is None:
            raise ConfigurationError("the general variant needs simulation labels")


def run_request(request: RatioRequest, model, bound: float = 1e6) -> RatioResult:
    from .flow_model import model_field_provider

    num = model_field_provider(model, request.numerator)
    den = model_field_provider(model, request.denominator)
    if request.variant == "s1":
        sim = num
    elif request.variant == "s2":
        sim = model_field_provider(model, model.condition_spec.null_labels())
    else:
        sim = model_field_provider(model, request.simulation)
    return estimate_log_ratio(request.points, num, den, sim, request.solver, bound)


def convergence_order(coarse_error: float, fine_error: float) -> float:
    """Observed order from errors at step sizes ``h`` and ``h/2``."""
    return float(np.log2(abs(coarse_error) / abs(fine_error)))


def self_convergence_orders(estimate: Callable[[int], np.ndarray],
                            steps: Sequence[int]) -> list:
    """Orders from successive differences of estimates at doubling step counts.

    ``estimate(n)`` returns the estimate with ``n`` steps; ``steps`` must
    double each time.  Needs no exact solution.
    """
    vals = [np.asarray(estimate(n), dtype=np.float64) for n in steps]
    diffs = [np.max(np.abs(b - a)) for a, b in zip(vals[:-1], vals[1:])]
    return [convergence_order(a, b) for a, b in zip(diffs[:-1], diffs[1:])]
