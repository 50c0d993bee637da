import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import central_diff, rel_err
from vihmc import autodiff as ad
from vihmc.errors import ConfigurationError
from vihmc.networks import (DeepONetSpec, LayerSpec, MLPSpec, burgers_full_spec, case1_spec, case2_spec, deeponet,
                            evaluate, forward, init_params, layout_of, mlp, param_count, spec_from_dict,
                            spec_to_dict)
from vihmc.params import ParamVector, index_labels


def test_parameter_counts():
    assert param_count(case1_spec()) == 6
    assert param_count(case2_spec()) == 141
    assert param_count(burgers_full_spec()) == 172_401


def test_case1_layout_order():
    # weights (out, in), then bias: w1, w2, p1, p2, a, b
    assert index_labels(layout_of(case1_spec())) == [
        "layer0.weight[0,0]", "layer0.weight[1,0]", "layer0.bias[0]", "layer0.bias[1]",
        "layer1.weight[0,0]", "layer1.weight[0,1]"]


def test_case1_is_sum_of_sinusoids():
    theta = np.array([4.0, -3.0, 0.0, 1.57, 0.4, 0.5])
    x = np.linspace(-1, 1, 11)
    y, _ = forward(case1_spec(), theta, x)
    np.testing.assert_allclose(y[:, 0], 0.4 * np.sin(4 * x) + 0.5 * np.sin(-3 * x + 1.57), rtol=1e-14)


def test_deeponet_constant_nets():
    # zero weights, branch bias 2, trunk bias 3 (tanh(3) on trunk), c = 0
    spec = DeepONetSpec(mlp(3, [1], "identity"), mlp(2, [1], "identity"), True)
    lay = {e.name: e for e in layout_of(spec)}
    th = np.zeros(param_count(spec))
    th[lay["branch.layer0.bias"].offset] = 2.0
    th[lay["trunk.layer0.bias"].offset] = 3.0
    out, _ = forward(spec, th, (np.ones((2, 3)), np.ones((4, 2))))
    np.testing.assert_array_equal(out, np.full((2, 4), 6.0))


def test_deeponet_inner_product_plus_bias():
    rng = np.random.default_rng(0)
    spec = deeponet(4, 2, 5, 2, latent=3)
    th = init_params(spec, rng).values.copy()
    th[-1] = 0.7
    u, y = rng.normal(size=(3, 4)), rng.normal(size=(6, 2))
    nb = 4
    lay = layout_of(spec)
    B = evaluate(spec.branch, th[: lay[nb - 1].stop], u)
    T = evaluate(spec.trunk, th[lay[nb].offset : lay[-2].stop], y)
    np.testing.assert_allclose(evaluate(spec, th, (u, y)), B @ T.T + 0.7, rtol=1e-13)


@pytest.mark.parametrize("spec", [case1_spec(), case2_spec(), deeponet(5, 2, 4, 3)])
def test_evaluate_matches_tape_and_is_vectorised(spec):
    rng = np.random.default_rng(1)
    inputs = rng.normal(size=(7, 1)) if spec.kind == "mlp" else (rng.normal(size=(3, 5)), rng.normal(size=(4, 2)))
    thetas = np.stack([init_params(spec, rng).values for _ in range(3)])
    batch = evaluate(spec, thetas, inputs)
    for k in range(3):
        np.testing.assert_allclose(batch[k], forward(spec, thetas[k], inputs)[0], rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("spec", [case2_spec(), deeponet(5, 2, 4, 3)])
def test_output_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(2)
    inputs = rng.normal(size=(4, 1)) if spec.kind == "mlp" else (rng.normal(size=(2, 5)), rng.normal(size=(3, 2)))
    th = init_params(spec, rng).values.copy()
    _, tape = forward(spec, th, inputs)
    g = ad.grad_output(tape, 3)
    fd = central_diff(lambda t: float(evaluate(spec, t, inputs).ravel()[3]), th)
    assert rel_err(g, fd) < 1e-7
    J = ad.jacobian_output(tape)
    np.testing.assert_allclose(J[3], g, rtol=1e-12)


def test_init_params_bounds_and_determinism():
    spec = case2_spec()
    a = init_params(spec, np.random.default_rng(5)).values
    b = init_params(spec, np.random.default_rng(5)).values
    np.testing.assert_array_equal(a, b)
    for e in layout_of(spec):
        fan_in = e.shape[1] if e.role == "weight" else (1 if e.layer_id == "layer0" else 10)
        assert np.all(np.abs(a[e.offset : e.stop]) <= 1 / np.sqrt(fan_in))


def test_param_vector_blocks_round_trip():
    spec = case2_spec()
    pv = init_params(spec, np.random.default_rng(0))
    back = ParamVector.from_blocks(pv.to_blocks(), pv.layout)
    np.testing.assert_array_equal(back.values, pv.values)
    with pytest.raises(ValueError):
        pv.values[0] = 1.0


def test_input_shape_errors_name_the_layer():
    with pytest.raises(ConfigurationError, match="branch.layer0"):
        evaluate(deeponet(5, 2, 4, 2), np.zeros(param_count(deeponet(5, 2, 4, 2))), (np.zeros((1, 4)), np.zeros((2, 2))))
    with pytest.raises(ConfigurationError):
        evaluate(case1_spec(), np.zeros(5), np.zeros(3))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        LayerSpec(3, "relu")
    with pytest.raises(ConfigurationError):
        DeepONetSpec(mlp(2, [3], "tanh"), mlp(1, [4], "tanh"))
    with pytest.raises(ConfigurationError):
        MLPSpec(1, ())


@given(st.integers(1, 4), st.lists(st.integers(1, 5), min_size=1, max_size=3),
       st.sampled_from(["tanh", "sin", "identity"]), st.booleans())
def test_spec_dict_round_trip(inp, widths, act, bias):
    spec = mlp(inp, widths, act, bias)
    assert spec_from_dict(spec_to_dict(spec)) == spec
    d = DeepONetSpec(spec, mlp(2, widths[-1:], act), bias)
    assert spec_from_dict(spec_to_dict(d)) == d
    assert param_count(spec) == sum(e.size for e in layout_of(spec))
