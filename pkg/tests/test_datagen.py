import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vihmc.datagen import (CASE1, CASE2, BurgersSpec, SinusoidSpec, build_operator_dataset, eval_fourier,
                           gen_burgers, gen_grf, gen_sinusoid, grf_coefficients, grid_t, grid_x, heat_solution,
                           solve_burgers, trunk_queries)
from vihmc.datasets import OperatorDataset, content_hash, load_dataset, save_dataset
from vihmc.errors import ConfigurationError, NumericalError


def test_case_specs():
    assert (CASE1.a, CASE1.b, CASE1.w1, CASE1.w2, CASE1.p1, CASE1.p2, CASE1.noise_std) == (0.4, 0.5, 4, -3, 0, 1.57, 1e-3)
    assert (CASE2.a, CASE2.b, CASE2.w1, CASE2.w2, CASE2.p1, CASE2.noise_std) == (4, 5, 4, -12, 0, 0.05)
    assert CASE2.p2 == pytest.approx(math.pi / 2)


def test_sinusoid_sizes_ranges_and_reproducibility():
    tr, va = gen_sinusoid(CASE1)
    assert tr.n_data == 20 and va.n_data == 300
    assert np.all((np.abs(tr.x) >= 0.2) & (np.abs(tr.x) <= 1.0))
    assert np.all(np.abs(va.x) <= 1.2)
    tr2, va2 = gen_sinusoid(CASE1)
    assert content_hash(tr.matrices()) == content_hash(tr2.matrices())
    assert content_hash(va.matrices()) == content_hash(va2.matrices())


def test_noise_free_points_lie_on_curve():
    spec = SinusoidSpec(**{**CASE2.__dict__, "noise_std": 0.0})
    tr, _ = gen_sinusoid(spec)
    np.testing.assert_array_equal(tr.y, spec.curve(tr.x))


@pytest.mark.parametrize("spec", [CASE1, CASE2])
def test_validation_mse_at_truth_is_noise_variance(spec):
    _, va = gen_sinusoid(spec)
    mse = np.mean((va.y - spec.curve(va.x)) ** 2)
    assert abs(mse / spec.noise_std**2 - 1) < 0.2


def test_sinusoid_validation():
    with pytest.raises(ConfigurationError):
        SinusoidSpec(1, 1, 1, 1, 0, 0, noise_std=-1)
    with pytest.raises(ConfigurationError):
        SinusoidSpec(1, 1, 1, 1, 0, 0, n_train=0)


def test_grf_zero_variance_is_zero():
    f = gen_grf(BurgersSpec(grf_variance=0.0, n_fields=3))
    np.testing.assert_array_equal(f, 0.0)


def test_grf_lag_zero_variance():
    spec = BurgersSpec(n_fields=10_000, seed=3)
    f = gen_grf(spec)
    assert abs(f.var() / spec.grf_variance - 1) < 0.05
    assert abs(f.mean()) < 0.02


def test_grf_periodic():
    coef = grf_coefficients(BurgersSpec(n_fields=4))
    np.testing.assert_allclose(eval_fourier(coef, 0.0), eval_fourier(coef, 1.0), atol=1e-12)


def test_grf_stationary():
    f = gen_grf(BurgersSpec(n_fields=4000, seed=1))
    v = f.var(axis=0)
    assert np.ptp(v) / v.mean() < 0.15


def test_heat_equation_matches_analytic():
    spec = BurgersSpec(n_x=64, n_t=9, refine=1)
    coef = grf_coefficients(spec, 1)[0]
    u0 = eval_fourier(coef, grid_x(64))
    got = solve_burgers(u0, spec, advection=False)
    xx, tt = np.meshgrid(grid_x(64), grid_t(9), indexing="ij")
    ref = heat_solution(coef, spec.nu, xx, tt)
    assert np.linalg.norm(got - ref) / np.linalg.norm(ref) < 1e-6


@given(st.floats(-2, 2))
def test_constant_state_is_stationary(c):
    spec = BurgersSpec(n_x=16, n_t=8)
    out = solve_burgers(np.full(16, c), spec)
    np.testing.assert_allclose(out, c, atol=1e-12)


def test_energy_nonincreasing():
    spec = BurgersSpec(n_x=64, n_t=8)
    log = []
    solve_burgers(gen_grf(spec, 1)[0], spec, energy_log=log)
    assert np.all(np.diff(log) <= 1e-14)


def test_spatial_convergence():
    # same smooth IC on 32 and 64 points against a 512-point reference at t=0.2
    u = lambda x: 0.5 * np.sin(2 * np.pi * x) + 0.2 * np.cos(4 * np.pi * x)
    times = np.array([0.2])

    def solve(n):
        return solve_burgers(u(grid_x(n)), BurgersSpec(n_x=n, n_t=8, refine=1), times=times)[:, 0]

    ref = solve(512)
    e32 = np.abs(solve(32) - ref[::16]).max()
    e64 = np.abs(solve(64) - ref[::8]).max()
    assert e32 / e64 >= 2.0


def test_cfl_failure_reports_diagnostics():
    spec = BurgersSpec(n_x=16, n_t=8, refine=1)
    with pytest.raises(NumericalError) as exc:
        solve_burgers(np.full(16, 1e6) + np.sin(2 * np.pi * grid_x(16)), spec, max_substeps=10)
    assert "substeps" in exc.value.diagnostics


def test_operator_split_is_a_partition():
    spec = BurgersSpec(n_x=8, n_t=8, n_fields=10)
    fields = np.arange(10.0)[:, None] * np.ones((10, 8))
    sols = np.arange(10.0)[:, None, None] * np.ones((10, 8, 8))
    tr, va = build_operator_dataset(fields, sols, spec)
    assert tr.n_data == 5 and va.n_data == 5
    assert not set(tr.meta["field_ids"]) & set(va.meta["field_ids"])
    assert tr.queries.shape == (64, 2)
    # targets follow the ij-flattened (x, t) query order
    np.testing.assert_array_equal(tr.u[:, 0], tr.v[:, 0])
    with pytest.raises(ConfigurationError):
        build_operator_dataset(fields[:3], sols, spec)


def test_periodic_trunk_features():
    spec = BurgersSpec(n_x=8, n_t=8, trunk_features="periodic")
    q = trunk_queries(spec)
    xt = trunk_queries(BurgersSpec(n_x=8, n_t=8))
    assert q.shape == (64, 5)
    np.testing.assert_array_equal(q[:, 0], xt[:, 1])
    np.testing.assert_allclose(q[:, 1], np.cos(2 * np.pi * xt[:, 0]), atol=1e-15)
    np.testing.assert_allclose(q[:, 1] ** 2 + q[:, 2] ** 2, 1.0)
    np.testing.assert_allclose(q[:, 4], np.sin(4 * np.pi * xt[:, 0]), atol=1e-15)


def test_desk_split_sizes_and_determinism(tmp_path):
    spec = BurgersSpec(n_fields=6, n_x=16, n_t=8)
    tr, va = gen_burgers(spec)
    assert (tr.n_data, va.n_data) == (3, 3)
    assert tr.v.shape == (3, 16 * 8)
    tr2, _ = gen_burgers(spec)
    assert content_hash(tr.matrices()) == content_hash(tr2.matrices())
    save_dataset(tr, tmp_path / "tr")
    back = load_dataset(tmp_path / "tr")
    assert isinstance(back, OperatorDataset)
    np.testing.assert_array_equal(back.v, tr.v)
    assert back.meta["grf"].startswith("periodic")


def test_dataset_tamper_detected(tmp_path):
    tr, _ = gen_sinusoid(CASE1)
    save_dataset(tr, tmp_path / "d")
    p = tmp_path / "d" / "y.csv"
    lines = p.read_text().splitlines()
    lines[0] = "1.0"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ConfigurationError, match="hash"):
        load_dataset(tmp_path / "d")


def test_burgers_spec_validation():
    for bad in ({"nu": 0.0}, {"n_x": 4}, {"split": 1.0}, {"grf_variance": -1.0}, {"trunk_features": "polar"}):
        with pytest.raises(ConfigurationError):
            BurgersSpec(**bad)
