import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vihmc.datagen import CASE1, gen_sinusoid
from vihmc.datasets import FunctionDataset, OperatorDataset
from vihmc.errors import ConfigurationError
from vihmc.networks import case1_spec, case2_spec, deeponet, init_params, mlp, param_count
from vihmc.sensitivity import (ParameterPartition, SensitivityReport, compute_sensitivities, layer_sensitivity_map,
                               layer_totals, n_selected, select_partition, sensitivities_bruteforce)
from vihmc.vi import VariationalPosterior

LINEAR = mlp(1, [1], "identity")


def _report(scores):
    return SensitivityReport(np.asarray(scores, dtype=float))


def test_linear_hand_example():
    q = VariationalPosterior.from_sigma([0.7, -0.3], [0.1, 0.2])
    rep = compute_sensitivities(q, LINEAR, FunctionDataset([1.0, 2.0], [0.0, 0.0]))
    np.testing.assert_allclose(rep.scores, [0.025, 0.04], rtol=1e-12)


def test_zero_sigma_zero_score():
    q = VariationalPosterior.from_sigma([0.7, -0.3], [0.0, 0.2])
    rep = compute_sensitivities(q, LINEAR, FunctionDataset([1.0, 2.0], [0.0, 0.0]))
    assert rep.scores[0] == 0.0


def test_linear_in_theta_is_exact_variance():
    # y = w . x + b on 3 inputs: the first-order expansion is exact
    net = mlp(3, [1], "identity")
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3))
    q = VariationalPosterior.from_sigma(rng.normal(size=4), rng.uniform(0.1, 1.0, 4))
    rep = compute_sensitivities(q, net, FunctionDataset(x, np.zeros(6)))
    xb = np.column_stack([x, np.ones(6)])
    analytic = (xb**2 * q.variance).sum(axis=1)  # Var[F(x_j)] under q
    assert rep.total == pytest.approx(analytic.mean(), rel=1e-13)


def test_normalised_example_needs_three():
    rep = _report([0.5, 0.3, 0.2])
    assert n_selected(rep, 0.9) == 3
    assert n_selected(rep, 0.9, "at_most") == 2
    assert n_selected(rep, 0.8) == 2


def test_tau_one_selects_everything():
    rep = _report([3.0, 1.0, 0.0, 2.0])
    assert n_selected(rep, 1.0) == 4
    part = select_partition(rep, np.zeros(4), 1.0)
    assert part.n_sensitive == 4 and part.frozen.size == 0


def test_ties_break_by_flat_index():
    rep = _report([1.0, 2.0, 1.0, 2.0])
    assert rep.ranking.tolist() == [1, 3, 0, 2]
    part = select_partition(rep, np.arange(4.0), 0.3)
    assert part.sensitive.tolist() == [1] and part.frozen.tolist() == [0, 2, 3]
    np.testing.assert_array_equal(part.frozen_values, [0.0, 2.0, 3.0])


def test_all_zero_scores_warn():
    rep = _report(np.zeros(3))
    with pytest.warns(RuntimeWarning, match="zero"):
        part = select_partition(rep, np.zeros(3), 0.9)
    assert part.n_sensitive == 0 and part.status == "all-zero"


def test_tau_validation():
    with pytest.raises(ConfigurationError):
        n_selected(_report([1.0]), 0.0)
    with pytest.raises(ConfigurationError):
        n_selected(_report([1.0]), 0.5, "closest")


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=30), st.floats(0.01, 1.0),
       st.floats(0.01, 1.0))
def test_selection_properties(scores, t1, t2):
    rep = _report(scores)
    assert sorted(rep.ranking.tolist()) == list(range(len(scores)))
    if rep.total > 0:
        assert np.all(np.diff(rep.cumulative) >= -1e-15)
        assert rep.cumulative[-1] == pytest.approx(1.0)
        lo, hi = sorted((t1, t2))
        assert n_selected(rep, lo) <= n_selected(rep, hi)
        k = n_selected(rep, hi)
        assert k == len(scores) or rep.cumulative[k - 1] >= hi - 1e-12
        part = select_partition(rep, np.zeros(len(scores)), hi)
        if part.frozen.size and part.sensitive.size:
            assert rep.scores[part.sensitive].min() >= rep.scores[part.frozen].max()


@given(st.floats(0.1, 5.0))
def test_scaling_sigma_scales_scores(c):
    tr, _ = gen_sinusoid(CASE1)
    rng = np.random.default_rng(1)
    mu = init_params(case1_spec(), rng).values
    sig = rng.uniform(0.01, 0.1, 6)
    a = compute_sensitivities(VariationalPosterior.from_sigma(mu, sig), case1_spec(), tr)
    b = compute_sensitivities(VariationalPosterior.from_sigma(mu, c * sig), case1_spec(), tr)
    np.testing.assert_allclose(b.scores, c**2 * a.scores, rtol=1e-9)
    np.testing.assert_array_equal(a.ranking, b.ranking)
    assert n_selected(a, 0.9) == n_selected(b, 0.9)


@pytest.mark.parametrize("net", [case1_spec(), case2_spec()])
def test_fast_path_matches_bruteforce_mlp(net):
    tr, _ = gen_sinusoid(CASE1)
    rng = np.random.default_rng(2)
    q = VariationalPosterior.from_sigma(init_params(net, rng).values, rng.uniform(0.01, 0.2, param_count(net)))
    np.testing.assert_allclose(compute_sensitivities(q, net, tr, chunk=7).scores,
                               sensitivities_bruteforce(q, net, tr).scores, rtol=1e-12)


def test_fast_path_matches_bruteforce_deeponet():
    net = deeponet(6, 2, 5, 3, latent=4)
    rng = np.random.default_rng(3)
    data = OperatorDataset(rng.normal(size=(3, 6)), rng.uniform(size=(5, 2)), rng.normal(size=(3, 5)))
    q = VariationalPosterior.from_sigma(init_params(net, rng).values + 0.1, rng.uniform(0.01, 0.2, param_count(net)))
    np.testing.assert_allclose(compute_sensitivities(q, net, data).scores,
                               sensitivities_bruteforce(q, net, data).scores, rtol=1e-10, atol=1e-18)


def test_reference_case1_posterior_counts():
    # a reference mean-field fit whose scores sit right at the tau boundary
    mu = [-4.05, 2.94, -0.072, -1.61, -0.39, -0.48]
    sd = [0.068, 0.059, 0.030, 0.035, 0.019, 0.020]
    tr, _ = gen_sinusoid(CASE1)
    rep = compute_sensitivities(VariationalPosterior.from_sigma(mu, sd), case1_spec(), tr)
    assert n_selected(rep, 0.9, "at_least") == 5
    assert n_selected(rep, 0.9, "at_most") == 4


def test_layer_maps():
    rep = _report(np.arange(1.0, 7.0))
    maps = layer_sensitivity_map(rep, case1_spec())
    assert {k: v.shape for k, v in maps.items()} == {
        "layer0.weight": (2, 1), "layer0.bias": (2,), "layer1.weight": (1, 2)}
    assert sum(layer_totals(rep, case1_spec()).values()) == pytest.approx(rep.total)
    with pytest.raises(ConfigurationError):
        layer_sensitivity_map(_report([1.0]), case1_spec())


def test_report_csv_round_trip(tmp_path):
    rep = SensitivityReport(np.array([0.1, 0.3, 0.3, 1e-300]), ["a", "b", "c", "d"], ["L", "L", "M", "M"])
    back = SensitivityReport.from_csv(rep.to_csv(tmp_path / "s.csv"))
    np.testing.assert_array_equal(back.scores, rep.scores)
    assert back.labels == rep.labels and back.layers == rep.layers
    counts, edges = rep.histogram(bins=5)
    assert counts.sum() == 4 and edges.size == 6


def test_partition_validation_and_round_trip(tmp_path):
    p = ParameterPartition([0, 2], [1], [0.5], 0.9, 1.0, 3)
    back = ParameterPartition.load(p.save(tmp_path / "p.json"))
    np.testing.assert_array_equal(back.sensitive, p.sensitive)
    np.testing.assert_array_equal(back.frozen_values, p.frozen_values)
    np.testing.assert_array_equal(p.assemble(np.array([7.0, 9.0])), [7.0, 0.5, 9.0])
    for bad in (([0, 1], [1], [0.0]), ([0], [1], [0.0]), ([0, 1], [2], [])):
        with pytest.raises(ConfigurationError):
            ParameterPartition(*bad, 0.9, 0.0, 3)
    with pytest.raises(ConfigurationError):
        ParameterPartition.from_dict({**p.to_dict(), "version": 99})


def test_posterior_length_mismatch():
    with pytest.raises(ConfigurationError):
        compute_sensitivities(VariationalPosterior(np.zeros(5), np.zeros(5)), case1_spec(), gen_sinusoid(CASE1)[0])
