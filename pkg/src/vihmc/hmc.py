"""Hamiltonian Monte Carlo over the full or the sensitivity-reduced posterior.

The Hamiltonian is ``H(theta, p) = -log pi(theta) + p^T M^{-1} p / 2`` with a
diagonal mass matrix ``M``. One proposal is a leapfrog trajectory followed by
a Metropolis-Hastings test; the reduced sampler integrates only the free
coordinates and evaluates the density at the vector reassembled with the
frozen values.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, NumericalError
from .networks import NetworkSpec, network_graph, param_count

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
DIVERGENCE_THRESHOLD = 1000.0
BAD_ACCEPTANCE = 0.01
ARCHIVE_FORMAT = "vihmc-chains"
ARCHIVE_VERSION = 1
TIMING_FILE = "timing.json"


# ------------------------------------------------------------------ targets


class Target:
    """Unnormalised log density over ``dim`` free coordinates.

    Subclasses implement :meth:`value_and_grad`; :meth:`log_prob` defaults to
    its first component.
    """

    dim: int

    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def log_prob(self, theta: np.ndarray) -> float:
        return self.value_and_grad(theta)[0]


class FunctionTarget(Target):
    """Target from plain callables, for tests and toy problems."""

    def __init__(self, log_prob, grad, dim: int):
        self._lp = log_prob
        self._grad = grad
        self.dim = int(dim)

    def value_and_grad(self, theta):
        return float(self._lp(theta)), np.asarray(self._grad(theta), dtype=np.float64)


class GaussianTarget(Target):
    """``N(mean, cov)`` with the normalising constant included."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        self.dim = self.mean.size
        self.precision = np.linalg.inv(self.cov)
        _, logdet = np.linalg.slogdet(self.cov)
        self._const = -0.5 * (self.dim * LOG_2PI + logdet)

    def value_and_grad(self, theta):
        d = np.asarray(theta, dtype=np.float64) - self.mean
        pd = self.precision @ d
        return float(self._const - 0.5 * d @ pd), -pd


class BNNPosterior(Target):
    """Gaussian likelihood times isotropic Gaussian prior for a network.

    ``log p(theta | D) = log N(y | F_theta(x), s_d^2) + log N(theta | 0, s_p^2)``
    including both normalising constants. The likelihood graph is recorded
    once and replayed; the prior is added in closed form.
    """

    def __init__(self, net: NetworkSpec, data, prior_variance: float, noise_variance: float, theta0=None):
        if not prior_variance > 0 or not noise_variance > 0:
            raise ConfigurationError("prior and likelihood variances must be positive")
        self.net = net
        self.data = data
        self.dim = param_count(net)
        self.prior_variance = float(prior_variance)
        self.noise_variance = float(noise_variance)
        self._prior_const = -0.5 * self.dim * (LOG_2PI + math.log(self.prior_variance))
        self._tape = None
        if data is not None and data.n_data > 0:
            theta0 = np.zeros(self.dim) if theta0 is None else np.asarray(theta0, dtype=np.float64)
            tape = ad.Tape()
            leaf = tape.variable(theta0)
            out = network_graph(net, leaf, data.inputs)
            y = np.asarray(data.targets, dtype=np.float64).reshape(out.value.shape)
            n_obs = y.size
            # residual sum of squares; the -1/(2 s_d^2) factor is applied as the seed
            tape.root = ad.sumsq(out - y)
            self._scale = -0.5 / self.noise_variance
            tape.params = leaf
            tape.output = out
            self._tape = tape
            self._leaf = leaf.idx
            self._lik_const = -0.5 * n_obs * (LOG_2PI + math.log(self.noise_variance))

    def log_prior(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return float(self._prior_const - 0.5 * theta @ theta / self.prior_variance)

    def prior_terms(self, values) -> float:
        """Prior log density of a subset of coordinates (own normalisation)."""
        v = np.asarray(values, dtype=np.float64)
        return float(-0.5 * v.size * (LOG_2PI + math.log(self.prior_variance)) - 0.5 * v @ v / self.prior_variance)

    def log_likelihood_and_grad(self, theta):
        if self._tape is None:
            return 0.0, np.zeros(self.dim)
        tape = self._tape
        tape.replay({self._leaf: theta})
        val = self._scale * float(tape.values[-1])
        if not math.isfinite(val):
            return -math.inf, np.full(self.dim, np.nan)
        tape.backward(tape.root, np.asarray(self._scale))
        return val + self._lik_const, tape.adjoint(tape.params)

    def value_and_grad(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        ll, g = self.log_likelihood_and_grad(theta)
        lp = ll + self._prior_const - 0.5 * (theta @ theta) / self.prior_variance
        return lp, g - theta / self.prior_variance


class ReducedTarget(Target):
    """Conditional target over ``partition.sensitive`` with the rest frozen.

    Every call assembles the full vector. When the full target exposes
    ``prior_terms``, the frozen coordinates' prior factor is removed so the
    prior is over the free coordinates only.
    """

    def __init__(self, full: Target, partition):
        if partition.n_params != full.dim:
            raise ConfigurationError(f"partition covers {partition.n_params} parameters, target has {full.dim}")
        if np.intersect1d(partition.sensitive, partition.frozen).size:
            raise ConfigurationError("sensitive and frozen index sets overlap")
        self.full = full
        self.partition = partition
        self.dim = partition.n_sensitive
        self._free = partition.sensitive
        self._base = np.empty(full.dim)
        self._base[partition.frozen] = partition.frozen_values
        self._frozen_prior = 0.0
        if hasattr(full, "prior_terms") and partition.frozen.size:
            self._frozen_prior = full.prior_terms(partition.frozen_values)

    def assemble(self, theta_free) -> np.ndarray:
        x = self._base.copy()
        x[self._free] = theta_free
        return x

    def value_and_grad(self, theta):
        lp, g = self.full.value_and_grad(self.assemble(theta))
        return lp - self._frozen_prior, g[self._free]


def reduced_target(full: Target, partition) -> ReducedTarget:
    return ReducedTarget(full, partition)


def log_posterior(target: Target, theta) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (target.dim,):
        raise ConfigurationError(f"expected {target.dim} free parameters, got shape {theta.shape}")
    return target.log_prob(theta)


# ------------------------------------------------------------------ integrator


def leapfrog(target: Target, theta, p, step_size: float, n_steps: int, inv_mass=None, grad0=None):
    """Leapfrog integration of Hamilton's equations.

    Half momentum step, ``n_steps`` position steps interleaved with full
    momentum steps, closing half step. The final momentum is not negated.

    Returns ``(theta, p, log_prob, grad, divergent)``. ``divergent`` is set
    when a non-finite value appears; the caller rejects such proposals.
    ``grad0`` is the gradient at the starting point, if already known.
    """
    theta = np.array(theta, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    if n_steps <= 0:
        lp, g = target.value_and_grad(theta) if grad0 is None else (math.nan, grad0)
        return theta, p, lp, g, False
    if grad0 is None:
        _, grad0 = target.value_and_grad(theta)
    eps = float(step_size)
    p += (0.5 * eps) * grad0
    lp, g = math.nan, grad0
    for i in range(n_steps):
        theta += eps * p if inv_mass is None else eps * (inv_mass * p)
        lp, g = target.value_and_grad(theta)
        if not math.isfinite(lp):
            return theta, p, lp, g, True
        if i + 1 < n_steps:
            p += eps * g
    p += (0.5 * eps) * g
    divergent = not (np.all(np.isfinite(p)) and np.all(np.isfinite(theta)))
    return theta, p, lp, g, divergent


def kinetic(p, inv_mass=None) -> float:
    if inv_mass is None:
        return 0.5 * float(p @ p)
    return 0.5 * float(p @ (inv_mass * p))


def leapfrog_step_count(posterior_variance: float, step_size: float, use_std: bool = False) -> int:
    """``max(1, round(pi * v / (2 eps)))``; ``use_std`` puts sqrt(v) in place of v."""
    if not step_size > 0:
        raise ConfigurationError("step size must be positive")
    v = math.sqrt(posterior_variance) if use_std else posterior_variance
    return max(1, int(round(math.pi * v / (2.0 * step_size))))


# ------------------------------------------------------------------ MH step


@dataclass
class State:
    theta: np.ndarray
    log_prob: float
    grad: np.ndarray

    @classmethod
    def at(cls, target: Target, theta) -> State:
        theta = np.array(theta, dtype=np.float64)
        lp, g = target.value_and_grad(theta)
        if not (math.isfinite(lp) and np.all(np.isfinite(g))):
            raise NumericalError("log density or gradient is not finite at the initial point")
        return cls(theta, lp, np.array(g))


@dataclass
class Proposal:
    accepted: bool
    hamiltonian: float  # H at the proposed point
    delta_h: float
    accept_prob: float
    divergent: bool


def mh_step(target: Target, state: State, rng: np.random.Generator, step_size: float, n_steps: int,
            mass=None) -> tuple[State, Proposal]:
    """One HMC transition: fresh momentum, leapfrog, Metropolis-Hastings test.

    Accept iff ``r > u`` with ``r = exp(H_0 - H_1)`` and ``u ~ U[0, 1)``.
    Divergent trajectories (non-finite state, or ``|dH|`` above the
    threshold) count as ``r = 0``.
    """
    d = state.theta.size
    z = rng.standard_normal(d)
    if mass is None:
        p0, inv_mass = z, None
    else:
        p0, inv_mass = np.sqrt(mass) * z, 1.0 / mass
    h0 = -state.log_prob + kinetic(p0, inv_mass)
    theta, p, lp, g, divergent = leapfrog(target, state.theta, p0, step_size, n_steps, inv_mass, state.grad)
    if n_steps <= 0:
        lp = state.log_prob
    h1 = -lp + kinetic(p, inv_mass) if not divergent else math.inf
    dh = h1 - h0
    if not math.isfinite(dh) or abs(dh) > DIVERGENCE_THRESHOLD:
        divergent = True
    r = 0.0 if divergent else math.exp(min(0.0, -dh))
    u = rng.uniform()
    if r > u:
        return State(theta, lp, np.array(g)), Proposal(True, h1, dh, r, divergent)
    return state, Proposal(False, h1, dh, r, divergent)


# ------------------------------------------------------------------ adaptation


@dataclass(frozen=True)
class DualAveraging:
    """Step-size adaptation settings (gamma, t0, kappa with their customary defaults)."""

    target_accept: float = 0.8
    n_warmup: int = 500
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    probe: int = 500
    tolerance: float = 0.07
    max_attempts: int = 3

    def __post_init__(self):
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigurationError("target acceptance must lie in (0, 1)")
        if self.n_warmup < 1:
            raise ConfigurationError("adaptation needs at least one warm-up proposal")


class _DualAverager:
    def __init__(self, eps0: float, cfg: DualAveraging):
        self.cfg = cfg
        self.mu = math.log(10.0 * eps0)
        self.h_bar = 0.0
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.m = 0

    def update(self, accept_prob: float) -> float:
        c = self.cfg
        self.m += 1
        m = self.m
        w = 1.0 / (m + c.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (c.target_accept - accept_prob)
        self.log_eps = self.mu - math.sqrt(m) / c.gamma * self.h_bar
        eta = m ** (-c.kappa)
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


def _steps_for(n_steps, eps: float, max_steps: int) -> int:
    """Fixed L, or L recomputed from a trajectory-length rule ``callable(eps)``."""
    L = n_steps(eps) if callable(n_steps) else int(n_steps)
    return min(L, max_steps)


def find_reasonable_step_size(target: Target, state: State, rng, n_steps=1, mass=None,
                              eps0: float = 1.0, max_iter: int = 60, max_steps: int = 10_000) -> float:
    """Double or halve ``eps0`` until the one-proposal acceptance crosses 1/2."""
    eps = float(eps0)

    def prob(e):
        z = rng.standard_normal(state.theta.size)
        p0, inv_m = (z, None) if mass is None else (np.sqrt(mass) * z, 1.0 / mass)
        h0 = -state.log_prob + kinetic(p0, inv_m)
        _, p, lp, _, div = leapfrog(target, state.theta, p0, e, _steps_for(n_steps, e, max_steps), inv_m, state.grad)
        if div:
            return 0.0
        dh = -lp + kinetic(p, inv_m) - h0
        return math.exp(min(0.0, -dh)) if math.isfinite(dh) else 0.0

    a = prob(eps)
    direction = 1.0 if a > 0.5 else -1.0
    for _ in range(max_iter):
        if (a > 0.5) != (direction > 0):
            return eps
        eps *= 2.0**direction
        a = prob(eps)
    raise NumericalError("could not bracket a step size with acceptance near 1/2",
                         last_step_size=eps, last_accept_prob=a)


@dataclass
class AdaptResult:
    step_size: float
    probe_acceptance: float
    within_tolerance: bool
    attempts: int
    trace: list = field(default_factory=list)
    state: State | None = None


def adapt_step_size(target: Target, init, rng: np.random.Generator, cfg: DualAveraging = DualAveraging(),
                    n_steps=1, mass=None, eps0: float | None = None, max_steps: int = 10_000) -> AdaptResult:
    """Dual-averaging warm-up followed by a fixed-step acceptance probe.

    ``n_steps`` is a fixed L or a callable mapping a step size to L (constant
    trajectory length). If the probe misses ``target_accept +- tolerance``
    the warm-up is repeated from the last state, up to ``max_attempts``.
    Raises :class:`NumericalError` if acceptance is stuck at 0 or 1.
    """
    state = init if isinstance(init, State) else State.at(target, init)
    if eps0 is None:
        eps0 = find_reasonable_step_size(target, state, rng, n_steps, mass, max_steps=max_steps)
    trace = []
    eps = float(eps0)
    probe_rate = math.nan
    for attempt in range(1, cfg.max_attempts + 1):
        da = _DualAverager(eps, cfg)
        stats = []
        for _ in range(cfg.n_warmup):
            state, prop = mh_step(target, state, rng, eps, _steps_for(n_steps, eps, max_steps), mass)
            stats.append(prop.accept_prob)
            eps = da.update(prop.accept_prob)
            trace.append(eps)
            if not math.isfinite(eps) or eps <= 0.0:
                raise NumericalError("step size left the representable range", attempt=attempt)
        eps = da.final
        tail = np.asarray(stats[-max(10, cfg.n_warmup // 5):])
        if np.all(tail == 0.0) or np.all(tail >= 1.0):
            if attempt == cfg.max_attempts:
                raise NumericalError("acceptance stuck during adaptation", step_size=eps,
                                     mean_accept=float(tail.mean()), attempt=attempt)
        acc = 0
        L = _steps_for(n_steps, eps, max_steps)
        for _ in range(cfg.probe):
            state, prop = mh_step(target, state, rng, eps, L, mass)
            acc += prop.accepted
        probe_rate = acc / cfg.probe
        if abs(probe_rate - cfg.target_accept) <= cfg.tolerance:
            return AdaptResult(eps, probe_rate, True, attempt, trace, state)
        log.info("probe acceptance %.3f misses %.2f at eps=%.3g; repeating warm-up", probe_rate,
                 cfg.target_accept, eps)
    return AdaptResult(eps, probe_rate, False, cfg.max_attempts, trace, state)


# ------------------------------------------------------------------ chains


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 1e-3
    n_steps: int = 10
    n_chains: int = 1
    n_samples: int = 1000
    burn_in: int = 100
    seed: int = 0
    mass: tuple | None = None  # diagonal of M over the free coordinates
    adapt: DualAveraging | None = None
    max_steps: int = 10_000

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigurationError("step size must be positive")
        if self.n_steps < 1:
            raise ConfigurationError("leapfrog steps must be at least 1")
        if self.n_chains < 1 or self.n_samples < 1:
            raise ConfigurationError("need at least one chain and one sample")
        if not 0 <= self.burn_in < self.n_samples:
            raise ConfigurationError("burn-in must be non-negative and below samples per chain")
        if self.mass is not None:
            m = np.asarray(self.mass, dtype=np.float64)
            if np.any(~(m > 0)):
                raise ConfigurationError("mass matrix entries must be positive")
            object.__setattr__(self, "mass", tuple(float(v) for v in m))
        if self.adapt is not None and self.adapt.n_warmup > self.burn_in:
            raise ConfigurationError("adaptation warm-up must fit inside burn-in")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mass"] = list(self.mass) if self.mass is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> HmcConfig:
        d = dict(d)
        if d.get("adapt") is not None:
            d["adapt"] = DualAveraging(**d["adapt"])
        if d.get("mass") is not None:
            d["mass"] = tuple(d["mass"])
        return cls(**d)


@dataclass
class Chain:
    draws: np.ndarray  # (n_samples - burn_in, dim)
    accepted: np.ndarray  # (n_samples,) bool
    hamiltonian: np.ndarray  # (n_samples,) H at each proposal
    delta_h: np.ndarray
    divergent: np.ndarray
    step_sizes: np.ndarray  # (n_samples,) step size used for each proposal
    seed: list
    wall_time: float = 0.0
    bad: bool = False
    bad_reason: str = ""

    def acceptance_rate(self, burn_in: int = 0) -> float:
        a = self.accepted[burn_in:]
        return float(a.mean()) if a.size else 0.0


def chain_seed(seed: int, chain: int) -> list:
    return [int(seed), int(chain)]


def run_chain(target: Target, cfg: HmcConfig, init, chain_index: int, n_steps=None) -> Chain:
    """One chain of ``cfg.n_samples`` proposals; the first ``burn_in`` are discarded.

    With ``cfg.adapt`` the step size follows dual averaging for the first
    ``adapt.n_warmup`` proposals and is then frozen at the averaged value.
    ``n_steps`` may be a callable giving L from the current step size.
    """
    t0 = time.perf_counter()
    seed = chain_seed(cfg.seed, chain_index)
    rng = np.random.default_rng(seed)
    mass = None if cfg.mass is None else np.asarray(cfg.mass, dtype=np.float64)
    if mass is not None and mass.size != target.dim:
        raise ConfigurationError(f"mass matrix has {mass.size} entries, target has {target.dim}")
    steps = cfg.n_steps if n_steps is None else n_steps
    state = State.at(target, init)
    n, b = cfg.n_samples, cfg.burn_in
    draws = np.empty((n - b, target.dim))
    accepted = np.zeros(n, dtype=bool)
    ham = np.empty(n)
    dh = np.empty(n)
    div = np.zeros(n, dtype=bool)
    eps_trace = np.empty(n)
    eps = cfg.step_size
    da = _DualAverager(eps, cfg.adapt) if cfg.adapt is not None else None
    for k in range(n):
        L = _steps_for(steps, eps, cfg.max_steps)
        eps_trace[k] = eps
        state, prop = mh_step(target, state, rng, eps, L, mass)
        accepted[k] = prop.accepted
        ham[k] = prop.hamiltonian
        dh[k] = prop.delta_h
        div[k] = prop.divergent
        if da is not None and k < cfg.adapt.n_warmup:
            eps = da.update(prop.accept_prob)
            if k + 1 == cfg.adapt.n_warmup:
                eps = da.final
        if k >= b:
            draws[k - b] = state.theta
    chain = Chain(draws, accepted, ham, dh, div, eps_trace, seed, time.perf_counter() - t0)
    rate = chain.acceptance_rate(b)
    if not np.all(np.isfinite(draws)):
        chain.bad, chain.bad_reason = True, "non-finite draw"
    elif rate < BAD_ACCEPTANCE:
        chain.bad, chain.bad_reason = True, f"acceptance {rate:.3g} after burn-in"
    return chain


_POOL_JOB = None


def _pool_run(k):
    target, cfg, inits, n_steps = _POOL_JOB
    return run_chain(target, cfg, inits[k], k, n_steps)


def worker_count(n_chains: int) -> int:
    env = os.environ.get("VIHMC_THREADS")
    cap = int(env) if env else 1
    return max(1, min(cap, n_chains))


def sample_chains(target: Target, cfg: HmcConfig, inits, n_steps=None, free_index=None, frozen_index=None,
                  frozen_values=None, workers: int | None = None, snapshot: dict | None = None) -> ChainArchive:
    """Run ``cfg.n_chains`` independent chains and collect them in an archive.

    Chain ``k`` draws from ``default_rng([seed, k])`` so results do not
    depend on how many chains run or in which order. ``workers > 1`` forks
    processes (capped by ``VIHMC_THREADS`` when not given).
    """
    inits = np.atleast_2d(np.asarray(inits, dtype=np.float64))
    if inits.shape != (cfg.n_chains, target.dim):
        raise ConfigurationError(f"need {cfg.n_chains} initial points of length {target.dim}, got {inits.shape}")
    workers = worker_count(cfg.n_chains) if workers is None else max(1, min(workers, cfg.n_chains))
    if workers > 1:
        import multiprocessing as mp

        global _POOL_JOB
        _POOL_JOB = (target, cfg, inits, n_steps)
        try:
            with mp.get_context("fork").Pool(workers) as pool:
                chains = pool.map(_pool_run, range(cfg.n_chains))
        finally:
            _POOL_JOB = None
    else:
        chains = [run_chain(target, cfg, inits[k], k, n_steps) for k in range(cfg.n_chains)]
    free_index = np.arange(target.dim) if free_index is None else np.asarray(free_index)
    return ChainArchive(
        chains,
        free_index=free_index,
        frozen_index=np.array([], dtype=np.int64) if frozen_index is None else np.asarray(frozen_index),
        frozen_values=np.array([]) if frozen_values is None else np.asarray(frozen_values, dtype=np.float64),
        config={"hmc": cfg.to_dict(), **(snapshot or {})},
        burn_in=cfg.burn_in,
    )


@dataclass
class ChainArchive:
    chains: list[Chain]
    free_index: np.ndarray
    frozen_index: np.ndarray
    frozen_values: np.ndarray
    config: dict
    burn_in: int = 0

    def __post_init__(self):
        self.free_index = np.asarray(self.free_index, dtype=np.int64)
        self.frozen_index = np.asarray(self.frozen_index, dtype=np.int64)
        self.frozen_values = np.asarray(self.frozen_values, dtype=np.float64)

    @property
    def n_params(self) -> int:
        return int(self.free_index.size + self.frozen_index.size)

    def good_chains(self) -> list[Chain]:
        return [c for c in self.chains if not c.bad]

    def kept(self, include_bad: bool = False) -> np.ndarray:
        """Kept draws stacked over chains, shape (chains, draws, dim)."""
        chains = self.chains if include_bad else self.good_chains()
        if not chains:
            return np.empty((0, 0, self.free_index.size))
        return np.stack([c.draws for c in chains])

    def full_draws(self, include_bad: bool = False) -> np.ndarray:
        """Kept draws with frozen coordinates filled in, shape (total draws, n_params)."""
        k = self.kept(include_bad)
        flat = k.reshape(-1, self.free_index.size)
        out = np.empty((flat.shape[0], self.n_params))
        out[:, self.free_index] = flat
        out[:, self.frozen_index] = self.frozen_values
        return out

    # -------------------------------------------------------------- persistence

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "config.snapshot").write_text(json.dumps(self.config, indent=1, sort_keys=True) + "\n")
        chains_meta = []
        for k, c in enumerate(self.chains):
            d = path / f"chain_{k:03d}"
            d.mkdir(exist_ok=True)
            _write_matrix(d / "draws.csv", c.draws, [str(i) for i in self.free_index])
            trace = np.column_stack([c.accepted.astype(float), c.hamiltonian, c.delta_h, c.divergent.astype(float),
                                     c.step_sizes])
            _write_matrix(d / "trace.csv", trace, ["accepted", "hamiltonian", "delta_h", "divergent", "step_size"])
            chains_meta.append({
                "seed": c.seed,
                "acceptance": c.acceptance_rate(self.burn_in),
                "bad": c.bad,
                "bad_reason": c.bad_reason,
                "n_kept": int(c.draws.shape[0]),
                "n_proposals": int(c.accepted.size),
            })
        manifest = {
            "format": ARCHIVE_FORMAT,
            "version": ARCHIVE_VERSION,
            "burn_in": self.burn_in,
            "free_index": self.free_index.tolist(),
            "frozen_index": self.frozen_index.tolist(),
            "frozen_values": [float(v) for v in self.frozen_values],
            "chains": chains_meta,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
        # wall-clock lives apart so the rest of the archive is hash-stable
        (path / TIMING_FILE).write_text(json.dumps({"wall_time": [c.wall_time for c in self.chains]}) + "\n")
        return path

    @classmethod
    def load(cls, path) -> ChainArchive:
        path = Path(path)
        m = json.loads((path / "manifest.json").read_text())
        if m.get("format") != ARCHIVE_FORMAT:
            raise ConfigurationError(f"{path} is not a chain archive")
        if m["version"] > ARCHIVE_VERSION:
            raise ConfigurationError(f"archive version {m['version']} is newer than supported")
        config = json.loads((path / "config.snapshot").read_text())
        dim = len(m["free_index"])
        timing = path / TIMING_FILE
        walls = json.loads(timing.read_text())["wall_time"] if timing.exists() else [0.0] * len(m["chains"])
        chains = []
        for k, cm in enumerate(m["chains"]):
            d = path / f"chain_{k:03d}"
            draws = _read_matrix(d / "draws.csv", dim)
            tr = _read_matrix(d / "trace.csv", 5)
            chains.append(Chain(draws, tr[:, 0] > 0.5, tr[:, 1], tr[:, 2], tr[:, 3] > 0.5, tr[:, 4], cm["seed"],
                                walls[k], cm["bad"], cm.get("bad_reason", "")))
        return cls(chains, m["free_index"], m["frozen_index"], m["frozen_values"], config, m["burn_in"])


def _write_matrix(path: Path, a: np.ndarray, header: list[str]):
    lines = [",".join(header)]
    lines += [",".join(repr(float(v)) for v in row) for row in a]
    path.write_text("\n".join(lines) + "\n")


def _read_matrix(path: Path, ncols: int) -> np.ndarray:
    rows = path.read_text().splitlines()[1:]
    if not rows:
        return np.empty((0, ncols))
    return np.array([[float(v) for v in r.split(",")] for r in rows]).reshape(len(rows), ncols)
