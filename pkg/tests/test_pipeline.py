import json
import math
import os

import numpy as np
import pytest

from vihmc.config import ExperimentConfig, load_config, shipped_config_path
from vihmc.errors import ConfigurationError, QualityGateError
from vihmc.hmc import Chain, ChainArchive
from vihmc.networks import case2_spec
from vihmc.pipeline import (RunManifest, artifact_hash, cmd_sample, cmd_sensitivity, cmd_train_vi, cost_compare,
                            load_posterior, read_history, run_data, run_lock, run_pipeline, save_posterior)
from vihmc.report import build_report, canonical_two_neuron, read_table
from vihmc.vi import VariationalPosterior


def tiny_config(**hmc) -> ExperimentConfig:
    d = load_config(shipped_config_path("case1")).to_dict()
    d["name"] = "tiny"
    d["likelihood_variance"] = 1e-2
    d["vi"]["epochs"] = 150
    d["hmc"].update({"step_size": 1e-3, "full_step_size": None, "n_steps": 5, "samples": 40, "burn_in": 10,
                     "chains": 2, "posterior_variance": None, **hmc})
    d["report"]["n_predictive"] = 50
    d["report"]["grid"] = [-1.0, 1.0, 11]
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    rd = tmp_path_factory.mktemp("run")
    tables = run_pipeline(tiny_config(), rd, ["reduced", "full"])
    return rd, tables


def test_pipeline_writes_everything(tiny_run):
    rd, tables = tiny_run
    for f in ("posterior.json", "history.csv", "partition.json", "sensitivity.csv", "sensitivity_hist.csv",
              "chains_reduced/manifest.json", "chains_full/chain_001/draws.csv", "report/param_summary.csv",
              "report/sampler_summary.csv", "report/bands_VI-HMC.csv", "manifest.json"):
        assert (rd / f).exists(), f
    assert len(read_history(rd / "history.csv")) == 150
    assert RunManifest.load(rd).verify(rd) == []
    assert {"param_summary", "sampler_summary", "bands_VI", "bands_HMC", "bands_VI-HMC"} <= set(tables)


def test_pipeline_is_bit_reproducible(tiny_run, tmp_path):
    rd, _ = tiny_run
    run_pipeline(tiny_config(), tmp_path, ["reduced", "full"])
    a, b = RunManifest.load(rd), RunManifest.load(tmp_path)
    assert a.artifacts == b.artifacts
    assert artifact_hash(rd / "report") == artifact_hash(tmp_path / "report")


def test_frozen_columns_equal_vi_means(tiny_run):
    rd, _ = tiny_run
    q, _ = load_posterior(rd / "posterior.json")
    arch = ChainArchive.load(rd / "chains_reduced")
    d = arch.full_draws()
    assert np.array_equal(d[:, arch.frozen_index], np.broadcast_to(q.mu[arch.frozen_index], (d.shape[0],
                                                                                          arch.frozen_index.size)))


def test_report_from_disk_matches_memory(tiny_run):
    rd, tables = tiny_run
    for stem in ("param_summary", "bands_VI-HMC"):
        header, rows = read_table(rd / "report" / f"{stem}.csv")
        assert header == tables[stem][0]
        np.testing.assert_array_equal(np.array(rows, dtype=object)[:, 2:].astype(float),
                                      np.array(tables[stem][1], dtype=object)[:, 2:].astype(float))


def test_manifest_detects_tampering(tiny_run, tmp_path):
    import shutil

    rd, _ = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(rd, copy)
    with (copy / "partition.json").open("a") as fh:
        fh.write(" ")
    assert RunManifest.load(copy).verify(copy) == ["partition"]


def test_posterior_spec_mismatch(tiny_run):
    rd, _ = tiny_run
    with pytest.raises(ConfigurationError, match="spec"):
        load_posterior(rd / "posterior.json", case2_spec())


def test_unknown_pair_lists_names(tiny_run):
    rd, _ = tiny_run
    q, net = load_posterior(rd / "posterior.json")
    _, val = run_data(tiny_config(), rd)
    arch = ChainArchive.load(rd / "chains_full")
    with pytest.raises(ConfigurationError, match=r"available: layer0.weight\[0,0\]"):
        build_report([arch], q, net, val, pairs=[("layer9.weight[0,0]", "layer0.bias[0]")])


def _fake_archive(draws, bad=False):
    n, dim = draws.shape
    z = np.zeros(n)
    c = Chain(draws, np.ones(n, dtype=bool), z, z, z.astype(bool), z, [0, 0], 1.0, bad, "x" if bad else "")
    return ChainArchive([c], np.arange(dim), [], [], {"provenance": {"mode": "full"}}, 0)


def test_iid_fake_archive_summary(tiny_run):
    rd, _ = tiny_run
    q, net = load_posterior(rd / "posterior.json")
    _, val = run_data(tiny_config(), rd)
    draws = np.random.default_rng(0).normal(size=(4000, 6))
    t1 = build_report([_fake_archive(draws)], q, net, val)["param_summary"]
    assert t1[0][4:6] == ["HMC_mean", "HMC_std"]
    means = np.array([r[4] for r in t1[1]])
    stds = np.array([r[5] for r in t1[1]])
    assert np.all(np.abs(means) < 0.05) and np.all(np.abs(stds - 1) < 0.05)


def test_empty_archive_is_an_error(tiny_run):
    rd, _ = tiny_run
    q, net = load_posterior(rd / "posterior.json")
    _, val = run_data(tiny_config(), rd)
    with pytest.raises(ConfigurationError, match="no kept draws"):
        build_report([_fake_archive(np.zeros((5, 6)), bad=True)], q, net, val)


def test_zero_epochs_returns_initial_posterior(tmp_path):
    d = tiny_config().to_dict()
    d["vi"]["epochs"] = 0
    q, hist = cmd_train_vi(ExperimentConfig.from_dict(d), tmp_path)
    assert hist == [] and read_history(tmp_path / "history.csv") == []
    assert np.allclose(q.sigma, d["vi"]["sigma0"])


def test_lock_conflict_and_stale_lock(tmp_path):
    (tmp_path / ".lock").write_text(str(os.getpid()))
    with pytest.raises(ConfigurationError, match="locked"):
        with run_lock(tmp_path):
            pass
    (tmp_path / ".lock").write_text("999999999")
    with run_lock(tmp_path):
        assert (tmp_path / ".lock").read_text() == str(os.getpid())
    assert not (tmp_path / ".lock").exists()


def test_all_bad_chains_hit_quality_gate(tiny_run, tmp_path):
    rd, _ = tiny_run
    cfg = tiny_config(step_size=50.0)
    for f in ("posterior.json", "partition.json"):
        (tmp_path / f).write_bytes((rd / f).read_bytes())
    with pytest.raises(QualityGateError):
        cmd_sample(cfg, tmp_path, mode="full")
    arch = ChainArchive.load(tmp_path / "chains_full")
    assert all(c.bad for c in arch.chains)


def test_sensitivity_override(tiny_run, tmp_path):
    rd, _ = tiny_run
    (tmp_path / "posterior.json").write_bytes((rd / "posterior.json").read_bytes())
    _, part = cmd_sensitivity(tiny_config(), tmp_path, tau=1.0)
    assert part.n_sensitive == 6 and part.tau == 1.0
    assert json.loads((tmp_path / "partition.json").read_text())["tau"] == 1.0


def test_cost_compare_rows(tiny_run):
    rd, _ = tiny_run
    from vihmc.hmc import DualAveraging
    from vihmc.sensitivity import ParameterPartition

    cfg = tiny_config()
    q, _ = load_posterior(rd / "posterior.json")
    train, val = run_data(cfg, rd)
    rows = cost_compare(cfg, q, ParameterPartition.load(rd / "partition.json"), train, val,
                        adapt=DualAveraging(n_warmup=50, probe=50, tolerance=1.0, max_attempts=1))
    assert [(r["mode"], r["experiment"]) for r in rows] == [
        ("full", "fixed"), ("full", "adapted@0.8"), ("reduced", "fixed"), ("reduced", "adapted@0.8")]
    assert all(math.isfinite(r["step_size"]) and r["step_size"] > 0 for r in rows)


def test_canonical_two_neuron_symmetries():
    th = np.array([4.0, -3.0, 0.1, 1.57, 0.4, 0.5])
    want = canonical_two_neuron(th)
    for alt in ([-4.0, -3.0, -0.1, 1.57, -0.4, 0.5],                      # flip neuron 1
                [-3.0, 4.0, 1.57, 0.1, 0.5, 0.4],                          # swap neurons
                [4.0, -3.0, 0.1 + 2 * math.pi, 1.57 - 2 * math.pi, 0.4, 0.5],
                [4.0, -3.0, 0.1 + math.pi, 1.57, -0.4, 0.5]):
        np.testing.assert_allclose(canonical_two_neuron(alt), want, atol=1e-12)


def test_posterior_round_trip(tmp_path):
    q = VariationalPosterior.from_sigma(np.arange(141.0), np.full(141, 0.1))
    save_posterior(q, case2_spec(), tmp_path / "p.json", 0.0025)
    back, net = load_posterior(tmp_path / "p.json", case2_spec())
    np.testing.assert_array_equal(back.mu, q.mu)
    np.testing.assert_allclose(back.sigma, q.sigma, rtol=1e-14)
