"""Dense MLPs and branch/trunk DeepONets.

Weights are stored (out, in) row-major in the flat vector, so a layer with
``m`` inputs and ``n`` outputs owns an ``n x m`` weight block followed by an
``n``-vector bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError
from .params import LayoutEntry, ParamVector

ACTIVATIONS = ("sin", "tanh", "identity")


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str = "tanh"
    bias: bool = True

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.width < 1:
            raise ConfigurationError("layer width must be positive")


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    layers: tuple[LayerSpec, ...]
    kind: str = field(default="mlp", init=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_dim < 1 or not self.layers:
            raise ConfigurationError("an MLP needs a positive input size and at least one layer")

    @property
    def output_dim(self) -> int:
        return self.layers[-1].width

    def layout(self, prefix: str = "", offset: int = 0) -> list[LayoutEntry]:
        entries = []
        fan_in = self.input_dim
        for k, layer in enumerate(self.layers):
            lid = f"{prefix}layer{k}"
            entries.append(LayoutEntry(lid, "weight", (layer.width, fan_in), offset))
            offset += layer.width * fan_in
            if layer.bias:
                entries.append(LayoutEntry(lid, "bias", (layer.width,), offset))
                offset += layer.width
            fan_in = layer.width
        return entries


@dataclass(frozen=True)
class DeepONetSpec:
    """Branch and trunk MLPs whose final outputs are combined by an inner product."""

    branch: MLPSpec
    trunk: MLPSpec
    output_bias: bool = True
    kind: str = field(default="deeponet", init=False)

    def __post_init__(self):
        if self.branch.output_dim != self.trunk.output_dim:
            raise ConfigurationError(
                f"branch output {self.branch.output_dim} != trunk output {self.trunk.output_dim}"
            )

    @property
    def latent_dim(self) -> int:
        return self.branch.output_dim

    @property
    def output_dim(self) -> int:
        return 1

    def layout(self) -> list[LayoutEntry]:
        entries = self.branch.layout(prefix="branch.")
        offset = entries[-1].stop
        entries += self.trunk.layout(prefix="trunk.", offset=offset)
        if self.output_bias:
            entries.append(LayoutEntry("output", "bias", (), entries[-1].stop))
        return entries


NetworkSpec = MLPSpec | DeepONetSpec


@lru_cache(maxsize=64)
def layout_of(spec: NetworkSpec) -> tuple[LayoutEntry, ...]:
    return tuple(spec.layout())


def param_count(spec: NetworkSpec) -> int:
    lay = layout_of(spec)
    return lay[-1].stop if lay else 0


def mlp(input_dim: int, widths, activations, bias=True) -> MLPSpec:
    """Shorthand: ``mlp(1, [10, 10, 1], ["tanh", "tanh", "identity"])``."""
    if isinstance(activations, str):
        activations = [activations] * len(widths)
    if isinstance(bias, bool):
        bias = [bias] * len(widths)
    return MLPSpec(input_dim, tuple(LayerSpec(w, a, b) for w, a, b in zip(widths, activations, bias)))


def case1_spec() -> MLPSpec:
    """1 -> 2 (sin) -> 1 (linear, no output bias): six parameters."""
    return MLPSpec(1, (LayerSpec(2, "sin", True), LayerSpec(1, "identity", False)))


def case2_spec() -> MLPSpec:
    return mlp(1, [10, 10, 1], ["tanh", "tanh", "identity"])


def deeponet(branch_input: int, trunk_input: int, width: int, depth: int, latent: int | None = None,
             activation: str = "tanh", output_bias: bool = True) -> DeepONetSpec:
    """Branch and trunk of ``depth`` layers each; the last layer has ``latent`` units (default ``width``).

    The branch's last layer is linear, the trunk's keeps the activation.
    """
    latent = width if latent is None else latent
    widths = [width] * (depth - 1) + [latent]
    acts = [activation] * depth
    branch = mlp(branch_input, widths, acts[:-1] + ["identity"])
    trunk = mlp(trunk_input, widths, acts)
    return DeepONetSpec(branch, trunk, output_bias)


def burgers_full_spec() -> DeepONetSpec:
    """Full-scale Burgers operator network: 101 sensors, 5 trunk inputs, 9 x 100 each side."""
    return deeponet(101, 5, 100, 9)


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform fan-in initialisation: every block of a layer ~ U(-1/sqrt(m), 1/sqrt(m))."""
    layout = layout_of(spec)
    values = np.empty(sum(e.size for e in layout))
    for e in layout:
        if e.role == "weight":
            fan_in = e.shape[1]
        elif e.shape:
            fan_in = _fan_in_of_bias(layout, e)
        else:
            values[e.offset] = 0.0
            continue
        bound = 1.0 / np.sqrt(fan_in)
        values[e.offset : e.stop] = rng.uniform(-bound, bound, size=e.size)
    return ParamVector(values, layout)


def _fan_in_of_bias(layout, entry) -> int:
    for e in layout:
        if e.layer_id == entry.layer_id and e.role == "weight":
            return e.shape[1]
    raise ConfigurationError(f"bias {entry.name} has no matching weight")


# ---------------------------------------------------------------- tape graphs


def _act_var(name, h):
    if name == "sin":
        return ad.sin(h)
    if name == "tanh":
        return ad.tanh(h)
    return h


def _mlp_graph(spec: MLPSpec, theta: ad.Var, x, entries) -> ad.Var:
    h = x
    it = iter(entries)
    for layer in spec.layers:
        w = next(it)
        b = next(it) if layer.bias else None
        h = ad.affine(h, theta, w.offset, w.shape[0], w.shape[1], None if b is None else b.offset)
        h = _act_var(layer.activation, h)
    return h


def _check_inputs(spec: NetworkSpec, inputs, n_params):
    if n_params != param_count(spec):
        raise ConfigurationError(
            f"parameter vector has {n_params} entries, network expects {param_count(spec)}"
        )
    if spec.kind == "mlp":
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[-1] != spec.input_dim:
            raise ConfigurationError(f"layer0: input width {x.shape[-1]} != {spec.input_dim}")
        return x
    u, y = inputs
    u = np.asarray(u, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if u.ndim == 1:
        u = u[None, :]
    if y.ndim == 1:
        y = y[:, None]
    if u.shape[-1] != spec.branch.input_dim:
        raise ConfigurationError(
            f"branch.layer0: {u.shape[-1]} sensors supplied, branch expects {spec.branch.input_dim}"
        )
    if y.shape[-1] != spec.trunk.input_dim:
        raise ConfigurationError(
            f"trunk.layer0: query width {y.shape[-1]} != trunk input {spec.trunk.input_dim}"
        )
    return u, y


def network_graph(spec: NetworkSpec, theta: ad.Var, inputs) -> ad.Var:
    """Record the network on ``theta``'s tape and return the output node.

    MLP outputs have shape (batch, out); DeepONet outputs (n_functions, n_queries).
    """
    inputs = _check_inputs(spec, inputs, theta.value.size)
    layout = layout_of(spec)
    if spec.kind == "mlp":
        return _mlp_graph(spec, theta, inputs, layout)
    u, y = inputs
    nb = sum(1 + l.bias for l in spec.branch.layers)
    nt = sum(1 + l.bias for l in spec.trunk.layers)
    bvar = _mlp_graph(spec.branch, theta, u, layout[:nb])
    tvar = _mlp_graph(spec.trunk, theta, y, layout[nb : nb + nt])
    out = ad.matmul(bvar, ad.transpose(tvar))
    if spec.output_bias:
        c = layout[-1]
        out = out + ad.segment(theta, c.offset, ())
    return out


def forward(spec: NetworkSpec, theta, inputs):
    """Evaluate the network on a fresh tape.

    Returns ``(outputs, tape)``; ``tape.params`` is the parameter leaf and
    ``tape.output`` the output node, ready for :func:`autodiff.grad_output`.
    """
    values = theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)
    tape = ad.Tape()
    tvar = tape.variable(values)
    out = network_graph(spec, tvar, inputs)
    tape.params = tvar
    tape.output = out
    return out.value, tape


# ---------------------------------------------------------- numpy evaluation


def _act(name, h):
    if name == "sin":
        return np.sin(h)
    if name == "tanh":
        return np.tanh(h)
    return h


def _mlp_np(spec: MLPSpec, thetas, x, entries):
    # thetas: (S, N); h: (S, batch, width)
    h = np.broadcast_to(x, (thetas.shape[0],) + x.shape)
    it = iter(entries)
    for layer in spec.layers:
        w = next(it)
        W = thetas[:, w.offset : w.stop].reshape((-1,) + w.shape)
        h = np.matmul(h, np.swapaxes(W, 1, 2))
        if layer.bias:
            b = next(it)
            h = h + thetas[:, None, b.offset : b.stop]
        h = _act(layer.activation, h)
    return h


def evaluate(spec: NetworkSpec, theta, inputs) -> np.ndarray:
    """Plain numpy evaluation, vectorised over a stack of parameter vectors.

    ``theta`` of shape (N,) gives the same output shape as :func:`forward`;
    shape (S, N) prepends a sample axis.
    """
    th = theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)
    single = th.ndim == 1
    th = np.atleast_2d(th)
    inputs = _check_inputs(spec, inputs, th.shape[1])
    layout = layout_of(spec)
    if spec.kind == "mlp":
        out = _mlp_np(spec, th, inputs, layout)
    else:
        u, y = inputs
        nb = sum(1 + l.bias for l in spec.branch.layers)
        nt = sum(1 + l.bias for l in spec.trunk.layers)
        B = _mlp_np(spec.branch, th, u, layout[:nb])
        T = _mlp_np(spec.trunk, th, y, layout[nb : nb + nt])
        out = np.matmul(B, np.swapaxes(T, 1, 2))
        if spec.output_bias:
            out = out + th[:, -1][:, None, None]
    return out[0] if single else out


def mlp_eval(spec: MLPSpec, theta, x) -> np.ndarray:
    if spec.kind != "mlp":
        raise ConfigurationError("mlp_eval requires an MLP spec")
    return forward(spec, theta, x)[0]


def deeponet_eval(spec: DeepONetSpec, theta, u, y) -> np.ndarray:
    if spec.kind != "deeponet":
        raise ConfigurationError("deeponet_eval requires a DeepONet spec")
    return forward(spec, theta, (u, y))[0]


# ------------------------------------------------------------ serialisation


def spec_to_dict(spec: NetworkSpec) -> dict:
    def mlp_dict(s: MLPSpec):
        return {
            "input_dim": s.input_dim,
            "layers": [{"width": l.width, "activation": l.activation, "bias": l.bias} for l in s.layers],
        }

    if spec.kind == "mlp":
        return {"kind": "mlp", **mlp_dict(spec)}
    return {
        "kind": "deeponet",
        "branch": mlp_dict(spec.branch),
        "trunk": mlp_dict(spec.trunk),
        "output_bias": spec.output_bias,
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    def mlp_from(m):
        try:
            return MLPSpec(int(m["input_dim"]), tuple(LayerSpec(**l) for l in m["layers"]))
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed MLP spec: {exc}") from exc

    kind = d.get("kind", "mlp")
    if kind == "mlp":
        return mlp_from(d)
    if kind == "deeponet":
        return DeepONetSpec(mlp_from(d["branch"]), mlp_from(d["trunk"]), bool(d.get("output_bias", True)))
    raise ConfigurationError(f"unknown network kind {kind!r}")
