import math

import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from vihmc.config import (ExperimentConfig, config_hash, dump_config, load_config, save_config,
                          shipped_config_path)
from vihmc.errors import ConfigurationError

SHIPPED = ("case1", "case2", "burgers_desk")


def _base():
    return load_config(shipped_config_path("case1")).to_dict()


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_load_and_round_trip(name, tmp_path):
    cfg = load_config(shipped_config_path(name))
    again = load_config(save_config(cfg, tmp_path / "c.yaml"))
    assert again == cfg and again.hash() == cfg.hash()


def test_case1_values():
    cfg = load_config(shipped_config_path("case1"))
    assert cfg.likelihood_variance == pytest.approx(1e-6)
    assert cfg.hmc.posterior_variance == pytest.approx(0.0679**2)
    assert (cfg.hmc.samples, cfg.hmc.burn_in, cfg.hmc.step_size) == (5000, 4000, 1e-5)


@given(epochs=st.integers(0, 10**6), lr=st.floats(1e-6, 1.0), tau=st.floats(0.01, 1.0),
       step=st.floats(1e-8, 1.0), chains=st.integers(1, 16), seed=st.integers(0, 2**31),
       mode=st.sampled_from(["full", "reduced"]), rule=st.sampled_from(["at_least", "at_most"]))
def test_round_trip_property(epochs, lr, tau, step, chains, seed, mode, rule):
    d = _base()
    d["vi"]["epochs"], d["vi"]["optimizer"]["lr"], d["vi"]["seed"] = epochs, lr, seed
    d["sensitivity"] = {"tau": tau, "rule": rule}
    d["hmc"].update(step_size=step, chains=chains, mode=mode, seed=seed)
    cfg = ExperimentConfig.from_dict(d)
    back = ExperimentConfig.from_dict(yaml.safe_load(dump_config(cfg)))
    assert back == cfg
    assert back.to_dict() == cfg.to_dict()


def test_hash_tracks_content():
    d = _base()
    h = config_hash(d)
    d["hmc"]["seed"] = 1
    assert config_hash(d) != h
    assert ExperimentConfig.from_dict(_base()).with_mode("full").hmc.mode == "full"


@pytest.mark.parametrize("text,value", [("(1e-3)**2", 1e-6), ("0.0679**2", 0.0679**2), ("-2*3", -6.0),
                                        ("1/4", 0.25), ("pi/2", math.pi / 2)])
def test_arithmetic_literals(tmp_path, text, value):
    d = _base()
    d["likelihood_variance"] = text if value > 0 else "1.0"
    d["prior_variance"] = text if value > 0 else 1.0
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(d))
    if value > 0:
        assert load_config(p).likelihood_variance == pytest.approx(value)


@pytest.mark.parametrize("text", ["__import__('os')", "2**", "[1]*3"])
def test_rejects_unsafe_literals(tmp_path, text):
    d = _base()
    d["likelihood_variance"] = text
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(d))
    with pytest.raises(ConfigurationError):
        load_config(p)


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: d.update(bogus=1), "unknown"),
    (lambda d: d["hmc"].update(colour="red"), "unknown"),
    (lambda d: d.pop("network"), "missing"),
    (lambda d: d.update(prior_variance=0), "positive"),
    (lambda d: d["hmc"].update(burn_in=6000), "burn_in"),
    (lambda d: d["hmc"].update(mode="sideways"), "mode"),
    (lambda d: d["hmc"].update(step_size=-1), "step_size"),
    (lambda d: d.update(sensitivity={"tau": 0.0}), "tau"),
    (lambda d: d.update(sensitivity=None), "partition_path"),
    (lambda d: d["data"].update(path="x.npz"), "exactly one"),
    (lambda d: d["hmc"].update(init={"kind": "zeros"}), "init"),
    (lambda d: d["vi"].update(n_mc=0), "n_mc"),
    (lambda d: d["report"].update(pairs=[["a"]]), "pairs"),
])
def test_validation_errors(mutate, msg):
    d = _base()
    mutate(d)
    with pytest.raises(ConfigurationError, match=msg):
        ExperimentConfig.from_dict(d)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "nope.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1, 2\n")
    with pytest.raises(ConfigurationError, match="YAML"):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ConfigurationError):
        shipped_config_path("case9")
