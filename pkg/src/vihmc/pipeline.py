"""Pipeline stages behind the command line: data, VI, sensitivity, sampling, cost comparison.

A run directory holds every artifact of one experiment plus ``manifest.json``
(config hash, artifact hashes, per-stage wall clock). One process owns a run
directory at a time through ``.lock``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_hash
from .datagen import gen_burgers, gen_sinusoid
from .datasets import load_dataset, save_dataset
from .errors import ConfigurationError, QualityGateError
from .hmc import (TIMING_FILE, BNNPosterior, ChainArchive, DualAveraging, HmcConfig, ReducedTarget,
                  adapt_step_size, leapfrog_step_count, sample_chains)
from .networks import NetworkSpec, param_count, spec_from_dict, spec_to_dict
from .sensitivity import (ParameterPartition, SensitivityReport, compute_sensitivities, layer_sensitivity_map,
                          select_partition)
from .vi import (HISTORY_COLUMNS, LikelihoodSpec, PriorSpec, TrainingDiverged, VariationalPosterior, init_posterior,
                 mse_at_mean, train_vi)

log = logging.getLogger(__name__)

POSTERIOR_FORMAT = "vihmc-posterior"
POSTERIOR_VERSION = 1
MANIFEST_FORMAT = "vihmc-run"
MANIFEST_VERSION = 1
# files carrying wall-clock numbers; excluded from artifact hashes
VOLATILE_FILES = frozenset({TIMING_FILE, "sampler_summary.csv", "cost_compare.csv"})


# ------------------------------------------------------------------ hashing


def spec_hash(net: NetworkSpec) -> str:
    return config_hash(spec_to_dict(net))[:16]


def artifact_hash(path) -> str:
    """sha256 over a file, or over a directory's files (sorted, volatile ones skipped)."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_file():
        h.update(path.read_bytes())
        return h.hexdigest()
    if not path.is_dir():
        raise ConfigurationError(f"artifact {path} does not exist")
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        if f.name in VOLATILE_FILES or f.name.startswith("."):
            continue
        h.update(str(f.relative_to(path)).encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


# ------------------------------------------------------------------ run directory


@contextmanager
def run_lock(run_dir):
    """Exclusive ownership of ``run_dir``; a lock left by a dead process is taken over."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise ConfigurationError(f"run directory {run_dir} is locked by process {pid}") from None
            lock.unlink(missing_ok=True)
            continue
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        break
    else:
        raise ConfigurationError(f"could not lock {run_dir}")
    try:
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@dataclass
class RunManifest:
    config_hash: str
    artifacts: dict = field(default_factory=dict)  # name -> {"path", "sha256"}
    stages: dict = field(default_factory=dict)  # name -> wall seconds
    tool_version: str = __version__

    @classmethod
    def load(cls, run_dir) -> RunManifest | None:
        p = Path(run_dir) / "manifest.json"
        if not p.exists():
            return None
        d = json.loads(p.read_text())
        if d.get("format") != MANIFEST_FORMAT:
            raise ConfigurationError(f"{p} is not a run manifest")
        return cls(d["config_hash"], d["artifacts"], d["stages"], d.get("tool_version", ""))

    def record(self, run_dir, name: str, path, stage: str | None = None, seconds: float | None = None):
        rel = os.path.relpath(Path(path), Path(run_dir))
        self.artifacts[name] = {"path": rel, "sha256": artifact_hash(path)}
        if stage is not None and seconds is not None:
            self.stages[stage] = seconds

    def save(self, run_dir) -> Path:
        p = Path(run_dir) / "manifest.json"
        d = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "config_hash": self.config_hash,
             "tool_version": self.tool_version, "artifacts": self.artifacts, "stages": self.stages}
        p.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
        return p

    def verify(self, run_dir) -> list[str]:
        """Names of artifacts that are missing or whose content changed."""
        bad = []
        for name, a in self.artifacts.items():
            p = Path(run_dir) / a["path"]
            if not p.exists() or artifact_hash(p) != a["sha256"]:
                bad.append(name)
        return bad


def _manifest_for(cfg: ExperimentConfig, run_dir) -> RunManifest:
    m = RunManifest.load(run_dir)
    h = cfg.hash()
    if m is None or m.config_hash != h:
        if m is not None:
            log.warning("config changed since the run directory was created; starting a new manifest")
        m = RunManifest(h)
    return m


# ------------------------------------------------------------------ posterior artifact


def save_posterior(q: VariationalPosterior, net: NetworkSpec, path, likelihood_variance: float | None = None) -> Path:
    path = Path(path)
    d = {
        "format": POSTERIOR_FORMAT,
        "version": POSTERIOR_VERSION,
        "network": spec_to_dict(net),
        "spec_hash": spec_hash(net),
        "prior_variance": q.prior.variance,
        "likelihood_variance": likelihood_variance,
        "mu": [float(v) for v in q.mu],
        "rho": [float(v) for v in q.rho],
    }
    path.write_text(json.dumps(d, indent=1) + "\n")
    return path


def load_posterior(path, net: NetworkSpec | None = None) -> tuple[VariationalPosterior, NetworkSpec]:
    """Read a posterior artifact; with ``net`` given, check it was trained for that network."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"posterior artifact not found: {path}") from exc
    if d.get("format") != POSTERIOR_FORMAT:
        raise ConfigurationError(f"{path} is not a posterior artifact")
    if d["version"] > POSTERIOR_VERSION:
        raise ConfigurationError(f"posterior format version {d['version']} is newer than supported")
    stored = spec_from_dict(d["network"])
    if net is not None and spec_hash(net) != spec_hash(stored):
        raise ConfigurationError(
            f"posterior network (spec {spec_hash(stored)}) does not match the config network (spec {spec_hash(net)})"
        )
    q = VariationalPosterior(d["mu"], d["rho"], PriorSpec(d["prior_variance"]))
    if len(q) != param_count(stored):
        raise ConfigurationError(f"posterior has {len(q)} parameters, its network has {param_count(stored)}")
    return q, stored


# ------------------------------------------------------------------ data


def make_data(cfg: ExperimentConfig):
    """(train, val) from the config's single data source."""
    src = cfg.data
    if src.sinusoid is not None:
        return gen_sinusoid(src.sinusoid)
    if src.burgers is not None:
        return gen_burgers(src.burgers)
    root = Path(src.path)
    return load_dataset(root / "train"), load_dataset(root / "val")


def cmd_gen_data(cfg: ExperimentConfig, out) -> Path:
    if cfg.data.path is not None:
        raise ConfigurationError("gen-data needs a generator data source, not a path")
    out = Path(out)
    train, val = make_data(cfg)
    save_dataset(train, out / "train")
    save_dataset(val, out / "val")
    return out


def run_data(cfg: ExperimentConfig, run_dir):
    """Materialise the data under ``run_dir/data`` once, then reuse it."""
    d = Path(run_dir) / "data"
    if (d / "train" / "manifest.json").exists() and (d / "val" / "manifest.json").exists():
        return load_dataset(d / "train"), load_dataset(d / "val")
    train, val = make_data(cfg)
    save_dataset(train, d / "train")
    save_dataset(val, d / "val")
    return train, val


# ------------------------------------------------------------------ stages


def write_history(history, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return path


def read_history(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def cmd_train_vi(cfg: ExperimentConfig, run_dir) -> tuple[VariationalPosterior, list[dict]]:
    """Train the mean-field posterior; writes ``posterior.json`` and ``history.csv``.

    On divergence the partial history is still written before the error propagates.
    """
    with run_lock(run_dir) as rd:
        t0 = time.perf_counter()
        train, val = run_data(cfg, rd)
        man = _manifest_for(cfg, rd)
        man.record(rd, "data", rd / "data")
        v = cfg.vi
        prior = PriorSpec(cfg.prior_variance)
        q0 = init_posterior(cfg.network, prior, np.random.default_rng([v.seed, 0]), v.sigma0)
        try:
            res = train_vi(q0, cfg.network, train, val, v.optimizer, v.scheduler, v.epochs,
                           np.random.default_rng([v.seed, 1]), LikelihoodSpec(cfg.likelihood_variance), v.n_mc,
                           v.batch_size)
        except TrainingDiverged as exc:
            write_history(exc.history, rd / "history.csv")
            raise
        save_posterior(res.posterior, cfg.network, rd / "posterior.json", cfg.likelihood_variance)
        write_history(res.history, rd / "history.csv")
        dt = time.perf_counter() - t0
        man.record(rd, "posterior", rd / "posterior.json", "train-vi", dt)
        man.record(rd, "history", rd / "history.csv")
        man.save(rd)
        log.info("train-vi: %d epochs in %.1fs, train mse %.3g, val mse %.3g", v.epochs, dt,
                 mse_at_mean(res.posterior, cfg.network, train), mse_at_mean(res.posterior, cfg.network, val))
        return res.posterior, res.history


def _write_matrix_csv(path: Path, a: np.ndarray):
    a = np.atleast_2d(a)
    path.write_text("\n".join(",".join(repr(float(x)) for x in row) for row in a) + "\n")


def cmd_sensitivity(cfg: ExperimentConfig, run_dir, posterior=None, tau: float | None = None,
                    rule: str | None = None) -> tuple[SensitivityReport, ParameterPartition]:
    """Rank parameters and split them; writes the ranking CSV, histogram, layer maps and partition."""
    with run_lock(run_dir) as rd:
        t0 = time.perf_counter()
        q, _ = load_posterior(posterior or rd / "posterior.json", cfg.network)
        train, _ = run_data(cfg, rd)
        sc = cfg.sensitivity
        tau = tau if tau is not None else (sc.tau if sc else 0.9)
        rule = rule or (sc.rule if sc else "at_least")
        rep = compute_sensitivities(q, cfg.network, train)
        part = select_partition(rep, q, tau, rule)
        rep.to_csv(rd / "sensitivity.csv")
        counts, edges = rep.histogram()
        with (rd / "sensitivity_hist.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["log10_lo", "log10_hi", "count"])
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        layers = rd / "layers"
        layers.mkdir(exist_ok=True)
        for name, mat in layer_sensitivity_map(rep, cfg.network).items():
            _write_matrix_csv(layers / f"{name}.csv", mat)
        part.save(rd / "partition.json")
        man = _manifest_for(cfg, rd)
        for name, p in (("sensitivity", "sensitivity.csv"), ("histogram", "sensitivity_hist.csv"),
                        ("layers", "layers"), ("partition", "partition.json")):
            man.record(rd, name, rd / p)
        man.stages["sensitivity"] = time.perf_counter() - t0
        man.save(rd)
        log.info("sensitivity: %d of %d parameters selected at tau=%g (%s)", part.n_sensitive, part.n_params,
                 tau, rule)
        return rep, part


# ------------------------------------------------------------------ sampling


@dataclass
class SamplerSetup:
    target: object
    hmc: HmcConfig
    n_steps: object  # int or callable step size -> L
    inits: np.ndarray
    partition: ParameterPartition
    provenance: dict


def _free_variance(q: VariationalPosterior, part: ParameterPartition) -> np.ndarray:
    return q.variance[part.sensitive]


def sampler_setup(cfg: ExperimentConfig, q: VariationalPosterior, data, partition: ParameterPartition | None,
                  mode: str | None = None, step_size: float | None = None) -> SamplerSetup:
    """Target, chain settings, L rule and starting points for one sampling mode.

    ``step_size`` overrides the configured (initial) step size for this mode.
    """
    h = cfg.hmc
    mode = mode or h.mode
    eps = step_size if step_size is not None else h.step_for(mode)
    n = param_count(cfg.network)
    if mode == "full":
        part = ParameterPartition.full(n)
    else:
        if partition is None:
            raise ConfigurationError("reduced mode needs a partition artifact")
        part = partition
    if part.n_params != n:
        raise ConfigurationError(f"partition covers {part.n_params} parameters, network has {n}")
    if part.n_sensitive == 0:
        raise ConfigurationError("the sensitive set is empty; nothing to sample")
    full = BNNPosterior(cfg.network, data, cfg.prior_variance, cfg.likelihood_variance, q.mu)
    target = full if mode == "full" else ReducedTarget(full, part)
    var = _free_variance(q, part)
    if h.n_steps is not None:
        n_steps, l_prov = h.n_steps, {"kind": "fixed", "n_steps": h.n_steps}
    else:
        if h.posterior_variance is not None:
            v, src = h.posterior_variance, "config"
        else:
            v = float(np.max(var) if h.variance_choice == "max" else np.median(var))
            src = f"vi-{h.variance_choice}"
        if h.adapt is not None:
            n_steps = _TrajectoryLength(v, h.use_std)
        else:
            n_steps = leapfrog_step_count(v, eps, h.use_std)
        l_prov = {"kind": "heuristic", "variance": v, "variance_source": src, "use_std": h.use_std,
                  "n_steps_at_initial_step": leapfrog_step_count(v, eps, h.use_std)}
    mass = None if h.mass == "identity" else tuple(1.0 / var)
    hc = HmcConfig(eps, n_steps if isinstance(n_steps, int) else 1, h.chains, h.samples, h.burn_in,
                   h.seed, mass, h.adapt, h.max_steps)
    rng = np.random.default_rng([h.seed, 10_000])
    z = rng.standard_normal((h.chains, part.n_sensitive))
    if h.init.kind == "prior":
        inits = math.sqrt(cfg.prior_variance) * z
    else:
        inits = q.mu[part.sensitive] + h.init.scale * np.sqrt(var) * z
    prov = {
        "mode": mode,
        "step_size": {"kind": "adapted" if h.adapt is not None else "fixed", "initial": eps},
        "n_steps": l_prov,
        "init": {"kind": h.init.kind, "scale": h.init.scale},
        "mass": h.mass,
        "n_free": part.n_sensitive,
        "n_params": n,
    }
    return SamplerSetup(target, hc, n_steps, inits, part, prov)


class _TrajectoryLength:
    """L from the current step size at a constant trajectory length (picklable)."""

    def __init__(self, v: float, use_std: bool):
        self.v, self.use_std = v, use_std

    def __call__(self, eps: float) -> int:
        return leapfrog_step_count(self.v, eps, self.use_std)


def cmd_sample(cfg: ExperimentConfig, run_dir, posterior=None, partition=None, mode: str | None = None,
               out=None) -> ChainArchive:
    """Run the chains for ``mode`` (default: the config's) and save the archive.

    Raises :class:`QualityGateError` when every chain is flagged bad.
    """
    mode = mode or cfg.hmc.mode
    with run_lock(run_dir) as rd:
        t0 = time.perf_counter()
        q, _ = load_posterior(posterior or rd / "posterior.json", cfg.network)
        part = None
        if mode == "reduced":
            ppath = partition or cfg.partition_path or rd / "partition.json"
            if not Path(ppath).exists():
                raise ConfigurationError(f"reduced mode needs a partition; {ppath} does not exist")
            part = ParameterPartition.load(ppath)
        train, _ = run_data(cfg, rd)
        s = sampler_setup(cfg, q, train, part, mode)
        snapshot = {"config": cfg.to_dict(), "config_hash": cfg.hash(), "provenance": s.provenance}
        arch = sample_chains(s.target, s.hmc, s.inits, s.n_steps, s.partition.sensitive, s.partition.frozen,
                             s.partition.frozen_values, snapshot=snapshot)
        out = Path(out) if out is not None else rd / f"chains_{mode}"
        arch.save(out)
        man = _manifest_for(cfg, rd)
        man.record(rd, f"chains_{mode}", out, f"sample-{mode}", time.perf_counter() - t0)
        man.save(rd)
        if not arch.good_chains():
            raise QualityGateError(
                f"all {len(arch.chains)} chains flagged bad: " + "; ".join(c.bad_reason for c in arch.chains)
            )
        rates = [c.acceptance_rate(arch.burn_in) for c in arch.chains]
        log.info("sample (%s): acceptance %s in %.1fs", mode, ", ".join(f"{r:.3f}" for r in rates),
                 time.perf_counter() - t0)
        return arch


# ------------------------------------------------------------------ cost comparison


COST_COLUMNS = ("mode", "experiment", "n_free", "step_size", "n_steps", "acceptance", "probe_acceptance",
                "within_tolerance", "mse", "time_per_sample")


def cost_compare(cfg: ExperimentConfig, q: VariationalPosterior, partition: ParameterPartition, train, val,
                 modes=("full", "reduced"), adapt: DualAveraging | None = None) -> list[dict]:
    """Both modes at the configured fixed step size, then both at adapted step size.

    The fixed-step rows report acceptance, posterior-mean MSE on ``val`` and
    time per proposal; the adapted rows report the step size the dual
    averaging settles on for ``adapt.target_accept``.
    """
    from .report import posterior_mean_prediction

    adapt = adapt or cfg.hmc.adapt or DualAveraging()
    rows = []
    for mode in modes:
        s = sampler_setup(cfg, q, train, partition, mode, cfg.hmc.step_size)
        fixed_cfg = HmcConfig(**{**s.hmc.__dict__, "adapt": None})
        steps = s.n_steps if isinstance(s.n_steps, int) else s.n_steps(cfg.hmc.step_size)
        t0 = time.perf_counter()
        arch = sample_chains(s.target, fixed_cfg, s.inits, steps, s.partition.sensitive, s.partition.frozen,
                             s.partition.frozen_values)
        wall = time.perf_counter() - t0
        acc = float(np.mean([c.acceptance_rate(arch.burn_in) for c in arch.chains]))
        draws = arch.full_draws(include_bad=True)
        mse = float(np.mean((posterior_mean_prediction(cfg.network, draws, val.inputs) - val.targets) ** 2))
        rows.append({"mode": mode, "experiment": "fixed", "n_free": s.partition.n_sensitive,
                     "step_size": cfg.hmc.step_size, "n_steps": steps, "acceptance": acc,
                     "probe_acceptance": math.nan, "within_tolerance": "", "mse": mse,
                     "time_per_sample": wall / (fixed_cfg.n_chains * fixed_cfg.n_samples)})
        rng = np.random.default_rng([cfg.hmc.seed, 20_000])
        res = adapt_step_size(s.target, s.inits[0], rng, adapt, s.n_steps, None if s.hmc.mass is None else
                              np.asarray(s.hmc.mass), eps0=cfg.hmc.step_size, max_steps=cfg.hmc.max_steps)
        L = s.n_steps if isinstance(s.n_steps, int) else s.n_steps(res.step_size)
        rows.append({"mode": mode, "experiment": f"adapted@{adapt.target_accept:g}",
                     "n_free": s.partition.n_sensitive, "step_size": res.step_size, "n_steps": L,
                     "acceptance": math.nan, "probe_acceptance": res.probe_acceptance,
                     "within_tolerance": res.within_tolerance, "mse": math.nan, "time_per_sample": math.nan})
    return rows


def write_rows(rows: list[dict], path, columns=None) -> Path:
    path = Path(path)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (r[c] for c in columns)])
    return path


def cmd_cost_compare(cfg: ExperimentConfig, run_dir) -> list[dict]:
    """Cost comparison for one config; trains VI and ranks parameters first if not already done."""
    rd = Path(run_dir)
    if not (rd / "posterior.json").exists():
        cmd_train_vi(cfg, rd)
    if not (rd / "partition.json").exists():
        cmd_sensitivity(cfg, rd)
    with run_lock(rd):
        q, _ = load_posterior(rd / "posterior.json", cfg.network)
        part = ParameterPartition.load(cfg.partition_path or rd / "partition.json")
        train, val = run_data(cfg, rd)
        rows = cost_compare(cfg, q, part, train, val)
        write_rows(rows, rd / "cost_compare.csv", list(COST_COLUMNS))
        return rows


# ------------------------------------------------------------------ whole pipeline


def run_pipeline(cfg: ExperimentConfig, run_dir, modes=None) -> dict:
    """train-vi, sensitivity, sample (each mode), report; returns the report tables."""
    from .report import cmd_report

    rd = Path(run_dir)
    modes = list(modes or [cfg.hmc.mode])
    cmd_train_vi(cfg, rd)
    if cfg.sensitivity is not None:
        cmd_sensitivity(cfg, rd)
    for m in modes:
        cmd_sample(cfg, rd, mode=m)
    return cmd_report([rd / f"chains_{m}" for m in modes], rd / "posterior.json", rd / "data" / "val",
                      rd / "report", cfg.report)
