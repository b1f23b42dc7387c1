import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phidvae import ad, config, storage
from phidvae.datagen import generate_dataset
from phidvae.elbo import AdamState
from phidvae.errors import CheckpointError, ConfigError


def test_episode_roundtrip(tmp_path):
    ep = generate_dataset("advection", ["N=6"], seed=2)
    storage.save_episode(ep, tmp_path / "ep")
    back = storage.load_episode(tmp_path / "ep")
    assert np.array_equal(back.y, ep.y) and np.array_equal(back.truth_u, ep.truth_u)
    assert back.frame_shape == (28, 28)
    man = json.loads((tmp_path / "ep" / "manifest.json").read_text())
    assert man["seed"] == 2 and man["gen_config"]["data.N"] == 6
    img = storage.read_pgm(tmp_path / "ep" / "frames" / "frame_0001.pgm")
    assert np.array_equal(img.ravel(), ep.y[0])
    raw = (tmp_path / "ep" / "y.f64").read_bytes()
    assert np.array_equal(np.frombuffer(raw, "<f8").reshape(6, 784), ep.y)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    theta = ad.ParamSet({"a": rng.standard_normal((2, 3)), "lam.mu": np.array([1.5])})
    adam = AdamState(theta.map(lambda v: v + 1), theta.map(lambda v: v * v), 7)
    rng.standard_normal(5)
    cfg = config.default_config("kdv")
    path = storage.save_checkpoint(tmp_path / "c.ckpt", theta, adam, rng, 7, [{"epoch": 0}], cfg)
    header, t2, a2, r2 = storage.load_checkpoint(path)
    assert header["epoch"] == 7 and header["config"]["experiment"] == "kdv" and header["seed"] == 0
    assert all(np.array_equal(theta[k], t2[k]) for k in theta)
    assert a2.t == 7 and np.array_equal(a2.v["a"], adam.v["a"])
    assert np.array_equal(r2.standard_normal(4), rng.standard_normal(4))


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        storage.load_checkpoint(tmp_path / "bad.ckpt")
    theta = ad.ParamSet({"a": np.zeros((2, 3))})
    storage.check_layout(theta, {"a": (2, 3)})
    with pytest.raises(CheckpointError):
        storage.check_layout(theta, {"a": (3, 2)})
    with pytest.raises(CheckpointError):
        storage.check_layout(theta, {"a": (2, 3), "b": (1,)})


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=6))
def test_csv_float_roundtrip(vals):
    text = storage.csv_text(["k"] * len(vals), [vals])
    rows = list(csv.reader(io.StringIO(text, newline="")))
    assert [float(v) for v in rows[1]] == vals
    assert text.endswith("\r\n")


def test_csv_quoting():
    text = storage.csv_text(["name", "v"], [['a,"b"', 1.5]])
    assert list(csv.reader(io.StringIO(text, newline="")))[1] == ['a,"b"', "1.5"]


def test_metrics_header():
    assert storage.metrics_header(["alpha"]) == ["epoch", "elbo", "nmse", "mu_lambda_alpha", "sigma_lambda_alpha",
                                                 "wallclock_s"]


def test_config_overrides_and_suffixes(tmp_path):
    cfg = config.build_config("advection", overrides=["n_u=32", "train.epochs=3"], seed=9)
    assert cfg["model.n_u"] == 32 and cfg["train.epochs"] == 3 and cfg["seed"] == 9
    with pytest.raises(ConfigError) as exc:
        config.build_config("advection", overrides=["nonsense=1", "n_u=abc"])
    assert set(exc.value.keys) == {"nonsense", "n_u"}
    with pytest.raises(ConfigError):
        config.build_config("advection", overrides=["lr=-1"])
    with pytest.raises(ConfigError):
        config.build_config("galaxy")


def test_config_file_text_and_json(tmp_path):
    (tmp_path / "a.txt").write_text("experiment = kdv\n# comment\ndata.N = 12\nmodel.free = alpha\n")
    cfg = config.build_config(path=tmp_path / "a.txt")
    assert cfg["experiment"] == "kdv" and cfg["data.N"] == 12
    (tmp_path / "b.json").write_text(json.dumps({"experiment": "lorenz", "train": {"epochs": 5}}))
    assert config.build_config(path=tmp_path / "b.json")["train.epochs"] == 5


@pytest.mark.parametrize("exp", config.EXPERIMENTS)
def test_config_dumps_loads_roundtrip(exp):
    cfg = config.build_config(exp, overrides=["seed=3"])
    assert config.loads(config.dumps(cfg)) == cfg


def test_kdv_prior_defaults():
    cfg = config.default_config("kdv")
    assert cfg["model.prior_mean"][0] == 1.5 and cfg["model.prior_sd"][0] == 0.3
    assert cfg["model.free"] == ["alpha"]
