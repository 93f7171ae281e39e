import numpy as np
import pytest

from ratioflow.errors import ConfigurationError, DomainError
from ratioflow.schedules import (Schedule, cond_score_target, cond_velocity_target,
                                 sample_path_point, score_from_velocity,
                                 velocity_from_posterior_mean)

ALL = [Schedule("I"), Schedule("II", sigma_min=0.1), Schedule("II", sigma_min=1.0),
       Schedule("III", lam=0.25), Schedule("III", lam=1.0)]


def test_validation():
    with pytest.raises(ConfigurationError):
        Schedule("IV")
    with pytest.raises(ConfigurationError):
        Schedule("II", sigma_min=-0.1)
    with pytest.raises(ConfigurationError):
        Schedule("III", lam=1.5)
    assert Schedule("ii").kind == "II"


@pytest.mark.parametrize("s", ALL, ids=lambda s: f"{s.kind}-{s.sigma_min}-{s.lam}")
def test_endpoints_and_sigma_dot_fd(s):
    assert s.alpha(0.0) == 0.0 and s.alpha(1.0) == 1.0
    assert s.sigma(0.0) == pytest.approx(1.0)
    assert s.sigma(1.0) == pytest.approx(s.endpoint_sigma()[1])
    t = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    fd = (s.sigma(t + h) - s.sigma(t - h)) / (2 * h)
    assert np.allclose(s.sigma_dot(t), fd, atol=1e-7)
    assert np.allclose(s.sigma_sigma_dot(t), s.sigma(t) * s.sigma_dot(t), atol=1e-12)


def test_schedule_three_sigma_dot_singular_at_one():
    with pytest.raises(DomainError):
        Schedule("III", lam=0.25).sigma_dot(1.0)
    assert np.isfinite(Schedule("III", lam=0.25).sigma_sigma_dot(1.0))


def test_schedule_three_lambda_zero_is_schedule_one():
    t = np.linspace(0, 0.999, 500)
    a, b = Schedule("III", lam=0.0), Schedule("I")
    assert np.allclose(a.sigma(t), b.sigma(t), atol=1e-15)
    assert np.allclose(a.sigma_dot(t), b.sigma_dot(t), atol=1e-12)


def test_roundtrip_dict():
    s = Schedule("III", lam=0.3)
    assert Schedule.from_dict(s.to_dict()) == s


def test_conditional_velocity_is_path_derivative(rng):
    # d/dt (alpha x1 + sigma eps) with eps fixed equals the conditional target
    for s in ALL:
        x1, eps = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        t, h = 0.37, 1e-6
        xt = sample_path_point(s, x1, eps, t)
        fd = (sample_path_point(s, x1, eps, t + h) - sample_path_point(s, x1, eps, t - h)) / (2 * h)
        assert np.allclose(cond_velocity_target(s, xt, x1, t), fd, atol=1e-7)


def test_conditional_score_of_gaussian(rng):
    s = Schedule("II", sigma_min=0.1)
    x1, xt = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    t = 0.6
    expected = -(xt - t * x1) / s.sigma(t) ** 2
    assert np.allclose(cond_score_target(s, xt, x1, t), expected)


def test_per_row_times(rng):
    s = Schedule("I")
    x1, eps = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    t = np.array([0.1, 0.5, 0.9])
    xt = sample_path_point(s, x1, eps, t)
    for i in range(3):
        assert np.allclose(xt[i], sample_path_point(s, x1[i], eps[i], t[i]))


def test_targets_refuse_zero_sigma(rng):
    with pytest.raises(DomainError):
        cond_velocity_target(Schedule("I"), np.zeros(2), np.zeros(2), 1.0)


def test_score_velocity_reparameterisation_roundtrip(rng):
    # velocity built from a posterior mean, mapped back to a score, equals -(x - alpha E)/sigma^2
    for s in ALL:
        for t in (0.01, 0.3, 0.8, 0.99):
            x, e = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
            u = velocity_from_posterior_mean(s, x, e, t)
            score = score_from_velocity(s, u, x, t)
            expect = -(x - s.alpha(t) * e) / s.sigma_sq(t)
            assert np.allclose(score, expect, rtol=1e-10, atol=1e-10)


def test_score_from_velocity_singular_at_zero():
    with pytest.raises(DomainError):
        score_from_velocity(Schedule("I"), np.ones(2), np.ones(2), 0.0)
