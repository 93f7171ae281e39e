import numpy as np
import pytest

from ratioflow.config import DEFAULTS, defaults_toml, from_dict, load_config
from ratioflow.errors import ConfigurationError
from ratioflow.flow_model import ConditionSpec
from ratioflow.io import read_dataset, read_labeled, write_dataset


def test_defaults_load():
    cfg = load_config(None)
    assert cfg.train.steps == DEFAULTS["train"]["steps"]
    assert cfg.schedule.kind == "II" and cfg.solver.method == "rk4"


def test_partial_override_keeps_defaults():
    cfg = from_dict({"train": {"steps": 7}, "seed": 3})
    assert cfg.train.steps == 7 and cfg.train.seed == 3
    assert cfg.train.batch_size == DEFAULTS["train"]["batch_size"]


@pytest.mark.parametrize("doc", [
    {"trian": {}},
    {"train": {"steps": "many"}},
    {"train": 5},
    {"solver": {"method": "midpoint"}},
    {"schedule": {"kind": "IV"}},
    {"assert": {"mse": {"below": 1}}},
])
def test_invalid_documents(doc):
    with pytest.raises(ConfigurationError):
        from_dict(doc)


def test_toml_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(defaults_toml() + "\n[assert.mi_mae]\nmax = 1.0\n")
    assert load_config(p).assertions == {"mi_mae": {"max": 1.0}}
    p.write_text("[train\n")
    with pytest.raises(ConfigurationError):
        load_config(p)
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.toml")


def test_dataset_roundtrip_is_lossless(tmp_path, rng):
    pts = rng.standard_normal((20, 3)) * 1e3
    lab = rng.integers(0, 3, (20, 2))
    path = tmp_path / "d.csv"
    write_dataset(path, pts, lab, ["a", "b"])
    p2, l2, names = read_dataset(path)
    assert np.array_equal(pts, p2) and np.array_equal(lab, l2) and names == ["a", "b"]
    ds = read_labeled(path)
    assert ds.condition_spec.variables == (("a", int(lab[:, 0].max()) + 1),
                                          ("b", int(lab[:, 1].max()) + 1))


def test_unlabelled_points(tmp_path):
    path = tmp_path / "p.csv"
    write_dataset(path, np.ones((2, 2)))
    pts, lab, names = read_dataset(path)
    assert pts.shape == (2, 2) and lab.shape == (2, 0) and names == []
    with pytest.raises(ConfigurationError):
        read_labeled(path)


@pytest.mark.parametrize("text", [
    "",
    "a,b\n1,2\n",
    "x0,x1\n1,2,3\n",
    "x0,label\n1.0,-1\n",
    "x0,label\nabc,0\n",
    "x0\nnan\n",
])
def test_malformed_csv(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ConfigurationError):
        read_dataset(path)


def test_condition_columns_must_match_spec(tmp_path):
    path = tmp_path / "d.csv"
    write_dataset(path, np.zeros((1, 2)), np.zeros((1, 1), int), ["batch"])
    with pytest.raises(ConfigurationError):
        read_labeled(path, ConditionSpec((("label", 2),)))
