"""First-order variance sensitivities and the sensitive/frozen parameter split.

For a mean-field posterior ``q`` the score of parameter ``i`` is

    S_i^2 = sigma_i^2 / N_d * sum_j ||dF_mu(x_j) / dtheta_i||^2

i.e. the share of the linearised predictive variance carried by that
parameter. Multi-output networks sum over output components; operator
networks average over every (function, query) pair.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError
from .networks import MLPSpec, NetworkSpec, _check_inputs, _mlp_graph, layout_of, param_count
from .params import LayoutEntry, index_labels, layer_of_index

RULES = ("at_least", "at_most")
PARTITION_FORMAT = "vihmc-partition"
PARTITION_VERSION = 1


@dataclass
class SensitivityReport:
    scores: np.ndarray
    labels: list[str] = field(default_factory=list)
    layers: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        # stable sort on -S keeps ascending flat index among ties
        self.ranking = np.argsort(-self.scores, kind="stable")
        total = self.scores.sum()
        csum = np.cumsum(self.scores[self.ranking])
        self.cumulative = csum / total if total > 0 else np.zeros_like(csum)
        self.ranks = np.empty_like(self.ranking)
        self.ranks[self.ranking] = np.arange(self.ranking.size)

    @property
    def total(self) -> float:
        return float(self.scores.sum())

    def __len__(self):
        return self.scores.size

    def rows(self):
        """(rank, flat index, label, layer, S^2, cumulative fraction), best first."""
        for r, i in enumerate(self.ranking):
            yield (r + 1, int(i), self.labels[i] if self.labels else "", self.layers[i] if self.layers else "",
                   float(self.scores[i]), float(self.cumulative[r]))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "index", "label", "layer", "score", "cumulative"])
            for rank, i, lab, lay, s, c in self.rows():
                w.writerow([rank, i, lab, lay, repr(s), repr(c)])
        return path

    @classmethod
    def from_csv(cls, path) -> SensitivityReport:
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        n = len(rows)
        scores = np.zeros(n)
        labels = [""] * n
        layers = [""] * n
        for r in rows:
            i = int(r["index"])
            scores[i] = float(r["score"])
            labels[i] = r["label"]
            layers[i] = r["layer"]
        return cls(scores, labels, layers)

    def histogram(self, bins: int = 30):
        """Counts of log10(S^2) over the positive scores: (counts, edges)."""
        pos = self.scores[self.scores > 0]
        if pos.size == 0:
            return np.zeros(bins, dtype=int), np.linspace(0.0, 1.0, bins + 1)
        return np.histogram(np.log10(pos), bins=bins)


def _report_for(spec: NetworkSpec, scores) -> SensitivityReport:
    layout = layout_of(spec)
    return SensitivityReport(scores, index_labels(layout), layer_of_index(layout))


def _check(q, net):
    if len(q) != param_count(net):
        raise ConfigurationError(f"posterior has {len(q)} parameters, network expects {param_count(net)}")


def _sub_tape(spec: MLPSpec, entries, theta, x):
    """Tape for one MLP whose parameter leaf is only its own contiguous slice."""
    base = entries[0].offset
    stop = entries[-1].stop
    local = [LayoutEntry(e.layer_id, e.role, e.shape, e.offset - base) for e in entries]
    tape = ad.Tape()
    leaf = tape.variable(np.asarray(theta[base:stop], dtype=np.float64))
    out = _mlp_graph(spec, leaf, x, local)
    tape.params = leaf
    tape.output = out
    return tape, base, stop


def squared_gradient_sums(net: NetworkSpec, theta, data, chunk: int = 32) -> tuple[np.ndarray, int]:
    """Return ``(sum over outputs of (dF/dtheta)^2, number of averaged inputs)``.

    MLPs: one batched reverse sweep per chunk of data (seed rows = chunk x
    outputs). DeepONets use the inner-product structure: with branch
    Jacobians J_B(u_j) and trunk features T_q,

        sum_q (dF_jq/dtheta_branch)^2 = diag(J_B^T (sum_q T_q T_q^T) J_B)

    and symmetrically for the trunk, so no per-query reverse pass is needed.
    """
    theta = np.asarray(theta, dtype=np.float64)
    layout = layout_of(net)
    acc = np.zeros(theta.size)
    if net.kind == "mlp":
        x = _check_inputs(net, data.inputs, theta.size)
        for s in range(0, x.shape[0], chunk):
            tape, _, _ = _sub_tape(net, layout, theta, x[s : s + chunk])
            J = ad.jacobian_output(tape)
            acc += np.einsum("ri,ri->i", J, J)
        return acc, x.shape[0]
    u, y = _check_inputs(net, data.inputs, theta.size)
    nb = sum(1 + l.bias for l in net.branch.layers)
    nt = sum(1 + l.bias for l in net.trunk.layers)
    b_entries, t_entries = layout[:nb], layout[nb : nb + nt]
    p = net.latent_dim
    B = _mlp_feats(net.branch, b_entries, theta, u)
    T = _mlp_feats(net.trunk, t_entries, theta, y)
    G_T = T.T @ T
    G_B = B.T @ B
    for entries, spec, inputs, G in ((b_entries, net.branch, u, G_T), (t_entries, net.trunk, y, G_B)):
        for s in range(0, inputs.shape[0], chunk):
            tape, lo, hi = _sub_tape(spec, entries, theta, inputs[s : s + chunk])
            J = ad.jacobian_output(tape).reshape(-1, p, hi - lo)  # (chunk, p, n_sub)
            GJ = np.einsum("kl,cli->cki", G, J)
            acc[lo:hi] += np.einsum("cki,cki->i", J, GJ)
    if net.output_bias:
        acc[layout[-1].offset] = float(u.shape[0] * y.shape[0])
    return acc, u.shape[0] * y.shape[0]


def _mlp_feats(spec, entries, theta, x):
    tape, _, _ = _sub_tape(spec, entries, theta, x)
    return tape.output.value


def compute_sensitivities(q, net: NetworkSpec, data, chunk: int = 32) -> SensitivityReport:
    """Scores ``S_i^2`` with gradients evaluated at the posterior mean."""
    _check(q, net)
    sums, n = squared_gradient_sums(net, q.mu, data, chunk)
    return _report_for(net, q.variance * sums / n)


def sensitivities_bruteforce(q, net: NetworkSpec, data) -> SensitivityReport:
    """Reference implementation: one reverse pass per (datum, output component)."""
    from .networks import forward

    _check(q, net)
    _, tape = forward(net, q.mu, data.inputs)
    size = tape.output.value.size
    acc = np.zeros(len(q))
    for k in range(size):
        g = ad.grad_output(tape, k)
        acc += g * g
    n = data.n_data if net.kind == "mlp" else size
    return _report_for(net, q.variance * acc / n)


@dataclass
class ParameterPartition:
    sensitive: np.ndarray
    frozen: np.ndarray
    frozen_values: np.ndarray
    tau: float
    cutoff: float
    n_params: int
    rule: str = "at_least"
    status: str = "ok"

    def __post_init__(self):
        self.sensitive = np.asarray(self.sensitive, dtype=np.int64)
        self.frozen = np.asarray(self.frozen, dtype=np.int64)
        self.frozen_values = np.asarray(self.frozen_values, dtype=np.float64)
        both = np.concatenate([self.sensitive, self.frozen])
        if both.size != self.n_params or np.unique(both).size != self.n_params or (
            both.size and (both.min() < 0 or both.max() >= self.n_params)
        ):
            raise ConfigurationError("partition index sets must be disjoint and cover every parameter")
        if self.frozen_values.shape != self.frozen.shape:
            raise ConfigurationError("one frozen value per frozen index is required")

    @property
    def n_sensitive(self) -> int:
        return int(self.sensitive.size)

    @classmethod
    def full(cls, n_params: int) -> ParameterPartition:
        """Every parameter free (the full-space sampler)."""
        return cls(np.arange(n_params), np.array([], dtype=np.int64), np.array([]), 1.0, 0.0, n_params)

    def assemble(self, free: np.ndarray) -> np.ndarray:
        full = np.empty(free.shape[:-1] + (self.n_params,))
        full[..., self.sensitive] = free
        full[..., self.frozen] = self.frozen_values
        return full

    def to_dict(self) -> dict:
        return {
            "format": PARTITION_FORMAT,
            "version": PARTITION_VERSION,
            "n_params": self.n_params,
            "tau": self.tau,
            "rule": self.rule,
            "status": self.status,
            "cutoff": self.cutoff,
            "sensitive": self.sensitive.tolist(),
            "frozen": self.frozen.tolist(),
            "frozen_values": [float(v) for v in self.frozen_values],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ParameterPartition:
        if d.get("format") != PARTITION_FORMAT:
            raise ConfigurationError("not a partition artifact")
        if d["version"] > PARTITION_VERSION:
            raise ConfigurationError(f"partition format version {d['version']} is newer than supported")
        return cls(d["sensitive"], d["frozen"], d["frozen_values"], d["tau"], d["cutoff"], d["n_params"],
                   d.get("rule", "at_least"), d.get("status", "ok"))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> ParameterPartition:
        return cls.from_dict(json.loads(Path(path).read_text()))


def n_selected(report: SensitivityReport, tau: float, rule: str = "at_least") -> int:
    """Number of top-ranked parameters kept at threshold ``tau``.

    ``at_least``: smallest N whose cumulative fraction reaches tau.
    ``at_most``: largest N whose cumulative fraction does not exceed tau.
    """
    if not 0.0 < tau <= 1.0:
        raise ConfigurationError(f"tau must lie in (0, 1], got {tau}")
    if rule not in RULES:
        raise ConfigurationError(f"unknown selection rule {rule!r}; choose from {RULES}")
    n = len(report)
    if report.total <= 0:
        return 0
    if tau >= 1.0:
        return n
    c = report.cumulative
    if rule == "at_least":
        return int(np.searchsorted(c, tau, side="left")) + 1
    return int(np.searchsorted(c, tau, side="right"))


def select_partition(report: SensitivityReport, q, tau: float = 0.9, rule: str = "at_least") -> ParameterPartition:
    """Split parameters into the top-ranked sensitive set and the rest, frozen at ``q.mu``."""
    k = n_selected(report, tau, rule)
    n = len(report)
    status = "ok"
    if report.total <= 0:
        status = "all-zero"
        warnings.warn("every sensitivity score is zero; the sensitive set is empty", RuntimeWarning, stacklevel=2)
    elif k == 0:
        status = "empty"
        warnings.warn(f"no parameter fits under tau={tau} with rule {rule!r}", RuntimeWarning, stacklevel=2)
    sens = np.sort(report.ranking[:k])
    frozen = np.sort(report.ranking[k:])
    cutoff = float(report.scores[report.ranking[k - 1]]) if k else float("inf")
    mu = np.asarray(q.mu if hasattr(q, "mu") else q, dtype=np.float64)
    if mu.size != n:
        raise ConfigurationError(f"posterior has {mu.size} parameters, report has {n}")
    return ParameterPartition(sens, frozen, mu[frozen], float(tau), cutoff, n, rule, status)


def layer_sensitivity_map(report: SensitivityReport, net: NetworkSpec) -> dict[str, np.ndarray]:
    """Scores reshaped into the network's blocks, keyed ``"<layer>.<weight|bias>"``."""
    layout = layout_of(net)
    if len(report) != param_count(net):
        raise ConfigurationError(f"report has {len(report)} scores, network has {param_count(net)} parameters")
    return {e.name: report.scores[e.offset : e.stop].reshape(e.shape) for e in layout}


def layer_totals(report: SensitivityReport, net: NetworkSpec) -> dict[str, float]:
    return {k: float(v.sum()) for k, v in layer_sensitivity_map(report, net).items()}
