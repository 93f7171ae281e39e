import struct

import numpy as np
import pytest

from ratioflow.errors import (CheckpointError, ChecksumError, ConfigurationError, DomainError,
                              TrainingDivergedError, VersionError)
from ratioflow.flow_model import (ConditionSpec, FlowScoreModel, LabeledDataset, ModelConfig,
                                  TrainConfig, checkpoint_bytes, checkpoint_hash, load_checkpoint,
                                  model_from_bytes, save_checkpoint, train)
from ratioflow.schedules import Schedule

SPEC = ConditionSpec((("label", 2), ("batch", 3)))
SMALL = ModelConfig(latent_dim=16, time_embed_dim=8, time_hidden=8, cond_embed_dim=4,
                    head_width=8)


def _model(seed=0, spec=SPEC, d=2):
    return FlowScoreModel.create(d, spec, Schedule("II", sigma_min=0.1), SMALL,
                                 np.random.default_rng(seed))


def _data(rng, n=200, spec=SPEC, d=2):
    cols = [rng.integers(0, c, n) for _, c in spec.variables]
    lab = np.stack(cols, axis=1)
    return LabeledDataset(rng.standard_normal((n, d)) + lab[:, :1], lab, spec)


def test_condition_spec_tokens():
    assert SPEC.normalize((1, "null")) == (1, None)
    assert SPEC.normalize(("∅", "-")) == (None, None)
    assert list(SPEC.indices((None, 2))) == [2, 2]
    assert SPEC.null_labels() == (None, None)
    assert ConditionSpec.from_list(SPEC.to_list()) == SPEC
    with pytest.raises(ConfigurationError, match="null"):
        SPEC.normalize((1, "bogus"))
    with pytest.raises(ConfigurationError):
        SPEC.normalize((2, 0))
    with pytest.raises(ConfigurationError):
        SPEC.normalize((1,))
    with pytest.raises(ConfigurationError):
        ConditionSpec((("a", 2), ("a", 3)))


def test_dataset_validation(rng):
    with pytest.raises(ConfigurationError):
        LabeledDataset(np.zeros((3, 2)), np.zeros((2, 2)), SPEC)
    with pytest.raises(ConfigurationError):
        LabeledDataset(np.zeros((1, 2)), np.array([[2, 0]]), SPEC)
    with pytest.raises(ConfigurationError):
        LabeledDataset(np.array([[np.nan, 0.0]]), np.array([[0, 0]]), SPEC)
    ds = _data(rng)
    assert ds.with_label((1, 0)).shape[1] == 2


def test_configs_validate():
    with pytest.raises(ConfigurationError):
        TrainConfig(dropout_beta=1.5)
    with pytest.raises(ConfigurationError):
        TrainConfig(t_window=(0.5, 0.2))
    with pytest.raises(ConfigurationError):
        ModelConfig(time_embed_dim=7)
    cfg = TrainConfig(steps=5, t_window=[0.01, 0.99])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_output_shapes_and_time_window(rng):
    m = _model()
    x = rng.standard_normal((5, 2))
    assert m.velocity(x, 0.5, (1, None)).shape == (5, 2)
    assert m.score(x, 0.5, (0, 2)).shape == (5, 2)
    assert m.divergence(x, 0.5, (None, None)).shape == (5,)
    with pytest.raises(DomainError):
        m.velocity(x, 1.0, (1, 1))


def test_divergence_matches_fd(rng):
    m = _model()
    x = rng.standard_normal((4, 2))
    h = 1e-6
    fd = sum((m.velocity(x + h * e, 0.3, (1, 0)) - m.velocity(x - h * e, 0.3, (1, 0))) @ e
             for e in np.eye(2)) / (2 * h)
    assert np.allclose(m.divergence(x, 0.3, (1, 0)), fd, atol=1e-7)


def test_multi_eval_agrees_with_single_calls(rng):
    m = _model()
    x = rng.standard_normal((3, 2))
    labs = [(1, 0), (None, 2)]
    vels, divs, scores = m.multi_eval(x, 0.4, labs, [True, False], labs)
    for i, lab in enumerate(labs):
        assert np.allclose(vels[i], m.velocity(x, 0.4, lab))
        assert np.allclose(scores[i], m.score(x, 0.4, lab))
    assert np.allclose(divs[0], m.divergence(x, 0.4, labs[0]))


@pytest.mark.parametrize("beta", [0.0, 1.0])
def test_dropout_extremes(rng, beta):
    seen = []
    m = _model()
    train(_data(rng), m, TrainConfig(steps=3, batch_size=16, dropout_beta=beta),
          on_batch=lambda step, lab: seen.append(lab.copy()))
    lab = np.vstack(seen)
    null = lab == np.array([2, 3])
    assert null.all() if beta == 1.0 else not null.any()
    assert m.dropout_beta == beta


def test_dropout_rate_is_per_variable(rng):
    seen = []
    train(_data(rng), _model(), TrainConfig(steps=40, batch_size=64, dropout_beta=0.3),
          on_batch=lambda step, lab: seen.append(lab.copy()))
    null = np.vstack(seen) == np.array([2, 3])
    assert np.allclose(null.mean(axis=0), 0.3, atol=0.04)
    # independent per variable: both-null rate is about beta^2
    assert abs(null.all(axis=1).mean() - 0.09) < 0.03


def test_training_reduces_loss_and_is_deterministic(rng):
    ds = _data(rng, 400)
    cfg = TrainConfig(learning_rate=3e-3, steps=150, batch_size=64, seed=4)
    m1, tr1 = train(ds, _model(1), cfg)
    m2, tr2 = train(ds, _model(1), cfg)
    assert np.array_equal(tr1, tr2) and m1.params == m2.params
    assert np.median(tr1[-20:]) < np.median(tr1[:20])


def test_non_finite_loss_aborts(rng):
    m = _model()
    for name, arr in m.params.items():
        if name.startswith("velocity."):
            arr[...] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train(_data(rng), m, TrainConfig(steps=2, batch_size=8))
    assert info.value.diagnostics["step"] == 0


def test_dimension_mismatch_rejected(rng):
    with pytest.raises(ConfigurationError, match="dimension"):
        train(_data(rng, d=3), _model(), TrainConfig(steps=1))


def test_checkpoint_roundtrip(tmp_path, rng):
    m = _model(3)
    m.dropout_beta = 0.2
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    r = load_checkpoint(path)
    assert checkpoint_bytes(r) == checkpoint_bytes(m)
    assert checkpoint_hash(r) == checkpoint_hash(m)
    assert r.dropout_beta == 0.2 and r.condition_spec == SPEC
    x = rng.standard_normal((4, 2))
    assert np.array_equal(r.velocity(x, 0.5, (1, 1)), m.velocity(x, 0.5, (1, 1)))


def test_checkpoint_corruption_detected():
    blob = checkpoint_bytes(_model())
    bad = bytearray(blob)
    bad[-20] ^= 0xFF
    with pytest.raises(ChecksumError):
        model_from_bytes(bytes(bad))
    with pytest.raises(CheckpointError):
        model_from_bytes(blob[:-9])
    with pytest.raises(CheckpointError):
        model_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        model_from_bytes(blob[:6])
    with pytest.raises(VersionError):
        model_from_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
