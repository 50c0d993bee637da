"""Summary tables and plot-ready CSVs from a VI posterior and chain archives.

Outputs (all CSV):

- ``param_summary.csv``: per-parameter mean and std for every method.
- ``sampler_summary.csv``: acceptance, posterior-mean MSE, time per proposal, ESS and R-hat.
- ``bands_<method>.csv``: predictive mean and ``+-k sigma`` band over an input grid
  (function data) or over the query grid of the first held-out field (operator data).
- ``joint_<a>__<b>.csv``: paired draws of two named parameters per method.
- ``rel_l2.csv``: mean relative L2 error over held-out fields (operator data).
"""

from __future__ import annotations

import csv
import math
import re
import warnings
from pathlib import Path

import numpy as np

from .config import ReportConfig
from .datasets import load_dataset
from .diagnostics import summarize
from .errors import ConfigurationError
from .hmc import ChainArchive
from .networks import NetworkSpec, evaluate, layout_of
from .params import index_labels
from .vi import VariationalPosterior

METHOD_NAMES = {"full": "HMC", "reduced": "VI-HMC"}


def thin(draws: np.ndarray, n: int) -> np.ndarray:
    """At most ``n`` rows, evenly spaced (first and last kept)."""
    if draws.shape[0] <= n:
        return draws
    return draws[np.unique(np.linspace(0, draws.shape[0] - 1, n).round().astype(int))]


def predictions(net: NetworkSpec, draws, inputs, chunk: int = 256) -> np.ndarray:
    draws = np.atleast_2d(draws)
    return np.concatenate([evaluate(net, draws[i : i + chunk], inputs) for i in range(0, draws.shape[0], chunk)])


def mean_and_std(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std over axis 0, shifted by the first row so identical rows give exactly zero spread."""
    d = samples - samples[0]
    m = d.mean(axis=0)
    return samples[0] + m, np.sqrt(np.mean((d - m) ** 2, axis=0))


def posterior_mean_prediction(net: NetworkSpec, draws, inputs, max_draws: int = 1000) -> np.ndarray:
    return predictions(net, thin(np.atleast_2d(draws), max_draws), inputs).mean(axis=0)


def relative_l2(pred, truth) -> float:
    """Mean over rows of ``||truth - pred|| / ||truth||``."""
    pred = np.atleast_2d(pred)
    truth = np.atleast_2d(truth)
    return float(np.mean(np.linalg.norm(truth - pred, axis=1) / np.linalg.norm(truth, axis=1)))


def canonical_two_neuron(theta) -> np.ndarray:
    """Representative of a one-hidden-layer sine network under its symmetries.

    Layout ``(w1, w2, p1, p2, a1, a2)`` for ``a1 sin(w1 x + p1) + a2 sin(w2 x + p2)``.
    Each neuron is mapped to ``w >= 0`` (``sin(-u) = -sin(u)``), then to
    ``a >= 0`` (shift ``p`` by pi), ``p`` is wrapped to ``(-pi, pi]`` and the
    neurons are ordered by decreasing ``w``. Works on (..., 6) arrays.
    """
    t = np.array(theta, dtype=np.float64)
    if t.shape[-1] != 6:
        raise ConfigurationError("expected 6 parameters (w1, w2, p1, p2, a1, a2)")
    w, p, a = t[..., 0:2].copy(), t[..., 2:4].copy(), t[..., 4:6].copy()
    neg = w < 0
    w[neg], p[neg], a[neg] = -w[neg], -p[neg], -a[neg]
    neg = a < 0
    a[neg], p[neg] = -a[neg], p[neg] + math.pi
    p = math.pi - np.mod(math.pi - p, 2 * math.pi)
    order = np.argsort(-w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, -1)
    p = np.take_along_axis(p, order, -1)
    a = np.take_along_axis(a, order, -1)
    return np.concatenate([w, p, a], axis=-1)


def _method_names(archives) -> list[str]:
    names, seen = [], {}
    for a in archives:
        mode = a.config.get("provenance", {}).get("mode", "full" if a.frozen_index.size == 0 else "reduced")
        base = METHOD_NAMES.get(mode, mode)
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}-{seen[base]}")
    return names


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _band_rows(mean, std, k, x_cols, truth=None):
    rows = []
    for i in range(mean.size):
        row = [*(c[i] for c in x_cols), mean[i], std[i], mean[i] - k * std[i], mean[i] + k * std[i]]
        if truth is not None:
            row.append(truth[i])
        rows.append(row)
    return rows


def build_report(archives, q: VariationalPosterior, net: NetworkSpec, data, cfg: ReportConfig = ReportConfig(),
                 pairs=None) -> dict[str, tuple[list, list]]:
    """All report tables as ``{file stem: (header, rows)}``.

    Raises :class:`ConfigurationError` for archives with no kept draws and
    for parameter names in ``pairs`` that the network does not have.
    """
    archives = list(archives)
    if not archives:
        raise ConfigurationError("report needs at least one chain archive")
    labels = index_labels(layout_of(net))
    n = len(labels)
    if len(q) != n:
        raise ConfigurationError(f"posterior has {len(q)} parameters, network has {n}")
    names = _method_names(archives)
    methods = {"VI": None}
    for name, a in zip(names, archives):
        if a.n_params != n:
            raise ConfigurationError(f"archive for {name} covers {a.n_params} parameters, network has {n}")
        d = a.full_draws()
        if d.shape[0] == 0:
            raise ConfigurationError(f"archive for {name} has no kept draws (all burn-in or all chains bad)")
        methods[name] = d
    rng = np.random.default_rng(cfg.seed)
    vi_draws = q.sample(rng, cfg.n_predictive)
    out: dict[str, tuple[list, list]] = {}

    # per-parameter summary
    header = ["index", "label"]
    cols = []
    for m, d in methods.items():
        header += [f"{m}_mean", f"{m}_std"]
        cols += [q.mu, q.sigma] if d is None else list(mean_and_std(d))
    out["param_summary"] = (header, [[i, labels[i], *(c[i] for c in cols)] for i in range(n)])

    # sampler summary
    rows = [["VI", math.nan, float(np.mean((evaluate(net, q.mu, data.inputs) - data.targets) ** 2)), math.nan,
             n, len(vi_draws), math.nan, math.nan]]
    for name, a in zip(names, archives):
        good = a.good_chains()
        kept = a.kept()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            diag = summarize(kept)
        ess = np.array(diag["ess"], dtype=float)
        rhat = np.array(diag["rhat"], dtype=float) if diag["rhat"] is not None else np.array([math.nan])
        acc = float(np.mean(np.concatenate([c.accepted[a.burn_in :] for c in good])))
        props = sum(c.accepted.size for c in good)
        tps = sum(c.wall_time for c in good) / max(1, props)
        mean_pred = posterior_mean_prediction(net, methods[name], data.inputs, cfg.n_predictive)
        rows.append([name, acc, float(np.mean((mean_pred - data.targets) ** 2)), tps, a.free_index.size,
                     methods[name].shape[0], float(np.nanmin(ess)) if np.any(np.isfinite(ess)) else math.nan,
                     float(np.nanmax(rhat)) if np.any(np.isfinite(rhat)) else math.nan])
    out["sampler_summary"] = (["method", "acceptance", "mse", "time_per_sample", "n_free", "n_kept", "ess_min",
                      "rhat_max"], rows)

    # prediction bands
    k = cfg.band_sigma
    if net.kind == "mlp":
        if net.input_dim != 1:
            grid_inputs = None
        else:
            lo, hi, pts = cfg.grid
            x = np.linspace(float(lo), float(hi), int(pts))
            grid_inputs, x_cols, truth, x_head = x[:, None], [x], None, ["x"]
    else:
        u, y = data.inputs
        grid_inputs = (u[:1], y)
        x_cols = [y[:, j] for j in range(y.shape[1])]
        x_head = [f"y{j}" for j in range(y.shape[1])]
        truth = data.targets[0]
    if grid_inputs is not None:
        for m, d in methods.items():
            draws = vi_draws if d is None else thin(d, cfg.n_predictive)
            p = predictions(net, draws, grid_inputs).reshape(draws.shape[0], -1)
            head = x_head + ["mean", "std", "lower", "upper"] + (["truth"] if truth is not None else [])
            mean, std = mean_and_std(p)
            out[f"bands_{m}"] = (head, _band_rows(mean, std, k, x_cols, truth))

    # joint scatter
    for a_name, b_name in (pairs if pairs is not None else cfg.pairs):
        ia, ib = _param_index(a_name, labels), _param_index(b_name, labels)
        rows = []
        for m, d in methods.items():
            src = vi_draws if d is None else d
            rows += [[m, s[ia], s[ib]] for s in src]
        out[f"joint_{_safe(a_name)}__{_safe(b_name)}"] = (["method", a_name, b_name], rows)

    # operator accuracy
    if net.kind == "deeponet":
        rows = [["VI", relative_l2(evaluate(net, q.mu, data.inputs), data.targets)]]
        for name in names:
            rows.append([name, relative_l2(posterior_mean_prediction(net, methods[name], data.inputs,
                                                                     cfg.n_predictive), data.targets)])
        out["rel_l2"] = (["method", "mean_rel_l2"], rows)
    return out


def _param_index(name, labels) -> int:
    if isinstance(name, int) or (isinstance(name, str) and name.isdigit()):
        i = int(name)
        if 0 <= i < len(labels):
            return i
    elif name in labels:
        return labels.index(name)
    shown = ", ".join(labels[:20]) + (" ..." if len(labels) > 20 else "")
    raise ConfigurationError(f"unknown parameter {name!r}; available: {shown}")


def _safe(name) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", str(name)).strip("_")


def write_report(tables: dict, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for stem, (header, rows) in tables.items():
        with (out / f"{stem}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
    return out


def read_table(path) -> tuple[list, list]:
    with Path(path).open() as fh:
        r = list(csv.reader(fh))
    return r[0], r[1:]


def cmd_report(archives, posterior, data, out, cfg: ReportConfig | None = None, pairs=None) -> dict:
    """Load artifacts from disk, build every table and write them under ``out``."""
    from .pipeline import load_posterior

    cfg = cfg or ReportConfig()
    q, net = load_posterior(posterior)
    arch = []
    for a in archives:
        if not (Path(a) / "manifest.json").exists():
            raise ConfigurationError(f"no chain archive at {a}")
        arch.append(ChainArchive.load(a))
    ds = load_dataset(data)
    tables = build_report(arch, q, net, ds, cfg, pairs)
    write_report(tables, out)
    return tables
