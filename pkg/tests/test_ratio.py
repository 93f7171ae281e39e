import numpy as np
import pytest

from ratioflow.errors import ConfigurationError
from ratioflow.fields import FieldProvider
from ratioflow.flow_model import ConditionSpec, FlowScoreModel, ModelConfig, model_field_provider
from ratioflow.oracles import (analytic_log_ratio, oracle_field_provider, pooled_gaussian,
                               shifted_gaussian, standard_gaussian)
from ratioflow.ratio import (RatioRequest, SolverConfig, convergence_order, estimate_log_ratio,
                             integrate, naive_log_likelihood, naive_log_ratio, ratio_rhs,
                             run_request, self_convergence_orders)
from ratioflow.schedules import Schedule

EXACT = SolverConfig("rk4", 200, 0.0)
SCH = Schedule("I")


def _pair(s=1.0, d=2):
    q, q0 = shifted_gaussian(s, d), standard_gaussian(d)
    return q, q0, oracle_field_provider(q, SCH), oracle_field_provider(q0, SCH)


def test_solver_config_validation():
    with pytest.raises(ConfigurationError):
        SolverConfig("midpoint")
    with pytest.raises(ConfigurationError):
        SolverConfig(steps=0)
    with pytest.raises(ConfigurationError):
        SolverConfig(t_eps=0.5)
    s = SolverConfig("euler", 50, 0.01)
    assert SolverConfig.from_dict(s.to_dict()) == s
    assert s.t_start == 0.99 and s.t_end == 0.01


def test_single_point_worked_example():
    _, _, num, den = _pair()
    r = estimate_log_ratio(np.array([1.0, 1.0]), num, den, solver=EXACT)
    assert r.values[0] == pytest.approx(1.0, abs=1e-3)
    assert r.converged.all()


def test_naive_likelihood_at_mean():
    _, _, num, _ = _pair()
    r = naive_log_likelihood(num, np.array([[1.0, 1.0]]), EXACT)
    assert r.values[0] == pytest.approx(-np.log(2 * np.pi), abs=1e-3)


def test_s1_s2_general_and_antisymmetry(rng):
    q, q0, num, den = _pair(2.0, 3)
    x = q.sample(50, rng)
    truth = analytic_log_ratio(q, q0, x)
    sim = oracle_field_provider(pooled_gaussian([q, q0]), SCH)
    other = oracle_field_provider(shifted_gaussian(-0.5, 3), SCH)
    for s in (None, sim, other):
        r = estimate_log_ratio(x, num, den, sim=s, solver=EXACT)
        assert np.max(np.abs(r.values - truth)) < 1e-3
    fwd = estimate_log_ratio(x, num, den, sim=sim, solver=EXACT).values
    back = estimate_log_ratio(x, den, num, sim=sim, solver=EXACT).values
    assert np.allclose(fwd, -back, atol=1e-9)


def test_specialised_matches_three_term_rhs(rng):
    _, _, num, den = _pair()
    x = rng.standard_normal((8, 2))
    a = ratio_rhs(num, den, num, x, 0.4, specialize=True)
    b = ratio_rhs(num, den, num, x, 0.4, specialize=False)
    assert np.allclose(a[0], b[0]) and np.allclose(a[1], b[1], atol=1e-12)


def test_naive_matches_single_solve(rng):
    q, _, num, den = _pair()
    x = q.sample(30, rng)
    a = estimate_log_ratio(x, num, den, solver=EXACT).values
    b = naive_log_ratio(num, den, x, EXACT).values
    assert np.max(np.abs(a - b)) < 2e-3


def test_chunking_does_not_change_results(rng):
    _, _, num, den = _pair()
    x = rng.standard_normal((25, 2))
    rhs = lambda z, t: ratio_rhs(num, den, num, z, t)  # noqa: E731
    solver = SolverConfig("rk4", 20, 0.0)
    whole = integrate(rhs, x, solver, chunk_size=None)
    parts = integrate(rhs, x, solver, chunk_size=7)
    for a, b in zip(whole, parts):
        assert np.array_equal(a, b)


def test_failure_is_isolated_per_point():
    def vel(x, t):
        v = np.zeros_like(x)
        v[x[:, 0] > 5.0] = 1e12  # blows up only for the flagged rows
        return v
    zero_div = lambda x, t: np.zeros(x.shape[0])  # noqa: E731
    zero = FieldProvider(vel, lambda x, t: np.zeros_like(x), zero_div)
    calm = FieldProvider(lambda x, t: np.zeros_like(x), lambda x, t: np.zeros_like(x), zero_div)
    x = np.array([[0.0, 0.0], [10.0, 0.0], [1.0, 1.0]])
    r = estimate_log_ratio(x, zero, calm, solver=SolverConfig("rk4", 10))
    assert list(r.converged) == [True, False, True]
    assert np.isnan(r.values[1]) and np.all(np.isfinite(r.values[[0, 2]]))
    assert r.n_failed == 1
    assert len(r.records()) == 3


def test_points_must_be_2d():
    with pytest.raises(ConfigurationError):
        integrate(lambda x, t: (x, x[:, 0]), np.zeros((2, 2, 2)), EXACT)


def test_convergence_helpers():
    assert convergence_order(1e-2, 2.5e-3) == pytest.approx(2.0)
    # an estimate with error C h^2 has observed order 2
    orders = self_convergence_orders(lambda n: np.array([1.0 + 3.0 / n ** 2]), [10, 20, 40, 80])
    assert np.allclose(orders, 2.0)


@pytest.fixture(scope="module")
def tiny_model():
    spec = ConditionSpec((("label", 2),))
    cfg = ModelConfig(latent_dim=16, time_embed_dim=8, time_hidden=8, cond_embed_dim=4,
                      head_width=8)
    return FlowScoreModel.create(2, spec, SCH, cfg, np.random.default_rng(0))


def test_fused_model_path_matches_generic(tiny_model, rng):
    m = tiny_model
    num, den = model_field_provider(m, (1,)), model_field_provider(m, (0,))
    null = model_field_provider(m, (None,))
    detached = [FieldProvider(p.velocity, p.score, p.divergence) for p in (num, den, null)]
    x = rng.standard_normal((6, 2))
    solver = SolverConfig("rk4", 10)
    for sim, dsim in ((num, detached[0]), (null, detached[2])):
        a = estimate_log_ratio(x, num, den, sim=sim, solver=solver).values
        b = estimate_log_ratio(x, detached[0], detached[1], sim=dsim, solver=solver).values
        assert np.allclose(a, b, atol=1e-10)


def test_ratio_request(tiny_model, rng):
    x = rng.standard_normal((4, 2))
    solver = SolverConfig("rk4", 10)
    with pytest.raises(ConfigurationError):
        RatioRequest(x, (1,), (1,))
    with pytest.raises(ConfigurationError):
        RatioRequest(x, (1,), (0,), variant="general")
    with pytest.raises(ConfigurationError):
        RatioRequest(x, (1,), (0,), variant="s3")
    s1 = run_request(RatioRequest(x, (1,), (0,), "s1", solver), tiny_model)
    gen = run_request(RatioRequest(x, (1,), (0,), "general", solver, simulation=(1,)), tiny_model)
    assert np.allclose(s1.values, gen.values)
    s2 = run_request(RatioRequest(x, (1,), (0,), "s2", solver), tiny_model)
    assert s2.values.shape == (4,) and s2.converged.all()
