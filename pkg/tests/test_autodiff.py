import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ratioflow import autodiff as ad
from ratioflow.errors import ConfigurationError
from ratioflow.kernels import SELU_ALPHA, SELU_LAMBDA


def _mlp(rng, widths=(3, 8, 8, 3), **kw):
    cfg = ad.MlpConfig(widths, **kw)
    return cfg, ad.init_mlp(cfg, rng)


def test_parameter_store_roundtrip(rng):
    cfg, p = _mlp(rng)
    blob = p.to_bytes()
    q = ad.ParameterStore.from_bytes(p.manifest(), blob)
    assert q == p
    assert q.size == sum(v.size for _, v in p.items())
    assert p.manifest()[0] == {"name": "W0", "shape": [3, 8], "offset": 0}


def test_parameter_store_rejects_duplicates(rng):
    _, p = _mlp(rng)
    with pytest.raises(ConfigurationError):
        p.add("W0", np.zeros((3, 8)))


def test_mlp_config_validation():
    with pytest.raises(ConfigurationError):
        ad.MlpConfig((3,))
    with pytest.raises(ConfigurationError):
        ad.MlpConfig((3, 0, 2))
    with pytest.raises(ConfigurationError):
        ad.MlpConfig((3, 2), activation="relu")
    cfg = ad.MlpConfig((3, 2), prefix="a.", activate_output=True)
    assert ad.MlpConfig.from_dict(cfg.to_dict()) == cfg


def test_lecun_init_statistics():
    cfg = ad.MlpConfig((400, 300, 2))
    p = ad.init_mlp(cfg, np.random.default_rng(0))
    assert abs(p["W0"].std() - 1 / np.sqrt(400)) < 2e-3
    assert not p["b0"].any()


def test_selu_values():
    assert ad.selu(1.0) == pytest.approx(SELU_LAMBDA)
    assert ad.selu(0.0) == 0.0
    assert ad.selu(-1.0) == pytest.approx(SELU_LAMBDA * SELU_ALPHA * (np.exp(-1) - 1))
    big_neg = ad.selu(-50.0)
    assert big_neg == pytest.approx(-SELU_LAMBDA * SELU_ALPHA)


def test_sinusoidal_embedding():
    e = ad.sinusoidal_time_embed(0.0, 6)
    assert np.array_equal(e, [0, 1, 0, 1, 0, 1])
    e = ad.sinusoidal_time_embed(np.array([0.3, 0.7]), 4)
    assert e.shape == (2, 4)
    assert e[1, 0] == pytest.approx(np.sin(0.7))
    assert e[1, 3] == pytest.approx(np.cos(0.7 * 10000 ** (-2 / 4)))
    with pytest.raises(ConfigurationError):
        ad.sinusoidal_time_embed(0.1, 5)


def test_network_input_concatenation():
    inp = ad.NetworkInput(np.array([1.0, 2.0]), 0.5, np.array([3.0, 4.0]))
    assert np.array_equal(inp.vector(), [1, 2, 0.5, 3, 4])
    assert inp.state_dim == 2


def test_forward_shape_checks(rng):
    cfg, p = _mlp(rng)
    with pytest.raises(ConfigurationError):
        ad.mlp_forward(p, cfg, np.zeros((2, 4)))
    assert ad.mlp_forward(p, cfg, np.zeros(3)).shape == (3,)


def test_directional_derivative_matches_fd(rng):
    cfg, p = _mlp(rng)
    x, v = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    _, jvp = ad.directional_derivative(p, cfg, x, v)
    h = 1e-6
    fd = (ad.mlp_forward(p, cfg, x + h * v) - ad.mlp_forward(p, cfg, x - h * v)) / (2 * h)
    assert np.allclose(jvp, fd, atol=1e-8)


def test_divergence_of_state_block_only(rng):
    # input = [state(2), extra(3)], output width 2: extra features are not traced
    cfg, p = _mlp(rng, (5, 10, 2))
    x = rng.standard_normal((4, 5))
    exact = ad.divergence_exact(p, cfg, x)
    h = 1e-6
    fd = np.zeros(4)
    for i in range(2):
        e = np.zeros(5)
        e[i] = h
        fd += (ad.mlp_forward(p, cfg, x + e)[:, i] - ad.mlp_forward(p, cfg, x - e)[:, i]) / (2 * h)
    assert np.allclose(exact, fd, atol=1e-7)


def test_hutchinson_is_unbiased(rng):
    cfg, p = _mlp(rng, (4, 16, 4))
    x = rng.standard_normal((3, 4))
    exact = ad.divergence_exact(p, cfg, x)
    # every Rademacher sign pattern once: the average is exact
    signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * 4)).reshape(4, -1).T
    probes = np.broadcast_to(signs, (3,) + signs.shape)
    assert np.allclose(ad.divergence_hutchinson(p, cfg, x, probes=probes), exact, atol=1e-12)
    est = ad.divergence_hutchinson(p, cfg, x, n_probes=4000, rng=rng)
    assert np.allclose(est, exact, atol=0.15)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_divergence_of_linear_map_is_trace(d, seed):
    r = np.random.default_rng(seed)
    cfg = ad.MlpConfig((d, d))
    p = ad.init_mlp(cfg, r)
    x = r.standard_normal((3, d))
    assert np.allclose(ad.divergence_exact(p, cfg, x), np.trace(p["W0"]), atol=1e-12)


def test_loss_and_grad_matches_fd(rng):
    cfg, p = _mlp(rng, (3, 6, 6, 2), activate_output=False)
    x, y = rng.standard_normal((7, 3)), rng.standard_normal((7, 2))
    loss, grads = ad.loss_and_grad(p, cfg, x, y)
    assert loss == pytest.approx(np.mean((ad.mlp_forward(p, cfg, x) - y) ** 2))
    h = 1e-6
    for name in p:
        flat = p[name].reshape(-1)
        for j in range(0, flat.size, 7):
            old = flat[j]
            flat[j] = old + h
            lp, _ = ad.loss_and_grad(p, cfg, x, y)
            flat[j] = old - h
            lm, _ = ad.loss_and_grad(p, cfg, x, y)
            flat[j] = old
            assert grads[name].reshape(-1)[j] == pytest.approx((lp - lm) / (2 * h), abs=1e-7)


def test_backward_with_activated_output(rng):
    cfg, p = _mlp(rng, (3, 5, 4), activate_output=True)
    x = rng.standard_normal((6, 3))
    out, cache = ad.forward_with_cache(p, cfg, x)
    g_out = rng.standard_normal(out.shape)
    grads, g_in = ad.backward(p, cfg, cache, g_out)
    h = 1e-6
    e = np.zeros(3)
    e[1] = h
    fd = np.sum(g_out * (ad.mlp_forward(p, cfg, x + e) - ad.mlp_forward(p, cfg, x - e))) / (2 * h)
    assert np.sum(g_in[:, 1]) == pytest.approx(fd, rel=1e-6)


def test_empty_batch_rejected(rng):
    cfg, p = _mlp(rng)
    with pytest.raises(ConfigurationError):
        ad.loss_and_grad(p, cfg, np.zeros((0, 3)), np.zeros((0, 3)))


def test_adam_first_step_is_sign_times_lr(rng):
    cfg, p = _mlp(rng)
    before = p.copy()
    grads = p.zeros_like()
    grads["W0"][:] = rng.standard_normal(grads["W0"].shape)
    state = ad.AdamState.zeros_like(p)
    ad.adam_step(p, grads, state, lr=0.01)
    step = p["W0"] - before["W0"]
    g = grads["W0"]
    expect = -0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(step, expect, atol=1e-9)
    assert np.array_equal(p["b0"], before["b0"])
    assert state.step_count == 1
