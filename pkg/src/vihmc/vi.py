"""Mean-field Gaussian variational inference (Bayes by backprop).

Each parameter gets an independent ``N(mu_i, sigma_i^2)`` with
``sigma_i = softplus(rho_i)``. Training minimises

    KL(q || prior) - E_q[log p(D | theta)]

with reparameterised samples ``theta = mu + sigma * eps``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, NumericalError
from .networks import NetworkSpec, evaluate, network_graph, param_count

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    """Zero-mean isotropic Gaussian prior."""

    variance: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ConfigurationError("prior variance must be positive")


@dataclass(frozen=True)
class LikelihoodSpec:
    """Gaussian observation noise with variance ``noise_variance``."""

    noise_variance: float = 1.0

    def __post_init__(self):
        if not self.noise_variance > 0:
            raise ConfigurationError("likelihood variance must be positive")


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    # log(expm1(y)) written to stay finite for large y; y = 0 maps to -inf
    with np.errstate(divide="ignore"):
        return y + np.log(-np.expm1(-y))


@dataclass
class VariationalPosterior:
    mu: np.ndarray
    rho: np.ndarray
    prior: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=np.float64)
        self.rho = np.array(self.rho, dtype=np.float64)
        if self.mu.shape != self.rho.shape or self.mu.ndim != 1:
            raise ConfigurationError("mu and rho must be flat vectors of equal length")

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    @property
    def variance(self) -> np.ndarray:
        return self.sigma**2

    def __len__(self):
        return self.mu.size

    def copy(self) -> VariationalPosterior:
        return VariationalPosterior(self.mu.copy(), self.rho.copy(), self.prior)

    @classmethod
    def from_sigma(cls, mu, sigma, prior: PriorSpec | None = None) -> VariationalPosterior:
        return cls(mu, inverse_softplus(sigma), prior or PriorSpec())

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shape = self.mu.shape if n is None else (n,) + self.mu.shape
        return self.mu + self.sigma * rng.standard_normal(shape)


def init_posterior(spec: NetworkSpec, prior: PriorSpec, rng, sigma0: float = 0.05) -> VariationalPosterior:
    """Means from the network's fan-in initialisation, all sigmas at ``sigma0``."""
    from .networks import init_params

    mu = init_params(spec, rng).values.copy()
    return VariationalPosterior(mu, np.full(mu.size, float(inverse_softplus(sigma0))), prior)


def kl_gaussian(q: VariationalPosterior) -> float:
    """Closed-form KL(q || N(0, s^2 I)), summed over parameters."""
    s2 = q.prior.variance
    sig = q.sigma
    return float(np.sum(0.5 * math.log(s2) - np.log(sig) + (sig**2 + q.mu**2) / (2.0 * s2) - 0.5))


def gaussian_nll(residual_sq_sum: float, n: int, noise_variance: float) -> float:
    return 0.5 * residual_sq_sum / noise_variance + 0.5 * n * (LOG_2PI + math.log(noise_variance))


class ElboGraph:
    """Reusable tape for the negative ELBO on a fixed dataset.

    Leaves are ``mu``, ``rho`` and one noise draw per Monte-Carlo sample; the
    graph is recorded once and replayed for every new draw.
    """

    def __init__(self, q: VariationalPosterior, net: NetworkSpec, data, likelihood: LikelihoodSpec,
                 n_mc: int = 1, kl_weight: float = 1.0):
        if n_mc < 1:
            raise ConfigurationError("n_mc must be at least 1")
        if data.n_data == 0:
            raise ConfigurationError("empty dataset")
        if len(q) != param_count(net):
            raise ConfigurationError(f"posterior has {len(q)} parameters, network needs {param_count(net)}")
        self.n_mc = n_mc
        tape = ad.Tape()
        mu = tape.variable(q.mu)
        rho = tape.variable(q.rho)
        eps = [tape.variable(np.zeros_like(q.mu)) for _ in range(n_mc)]
        sigma = ad.softplus(rho)
        s2 = q.prior.variance
        kl_terms = (
            (0.5 * math.log(s2) - 0.5)
            - ad.log(sigma)
            + (ad.square(sigma) + ad.square(mu)) * (1.0 / (2.0 * s2))
        )
        kl = ad.sum(kl_terms)
        y = data.targets
        n_obs = y.size
        nv = likelihood.noise_variance
        const = 0.5 * n_obs * (LOG_2PI + math.log(nv))
        nll = None
        for e in eps:
            theta = mu + sigma * e
            out = network_graph(net, theta, data.inputs)
            term = ad.sum(ad.square(out - y)) * (0.5 / nv / n_mc)
            nll = term if nll is None else nll + term
        loss = kl * kl_weight + nll + const
        tape.root = loss
        tape.params = mu
        self.tape = tape
        self.mu, self.rho, self.eps = mu, rho, eps
        self.kl = kl
        self.loss = loss

    def evaluate(self, mu, rho, eps) -> tuple[float, np.ndarray, np.ndarray]:
        """Loss and gradients w.r.t. (mu, rho) for the given noise draws."""
        leaves = {self.mu.idx: mu, self.rho.idx: rho}
        for var, e in zip(self.eps, eps):
            leaves[var.idx] = e
        self.tape.replay(leaves)
        self.tape.backward(self.loss)
        return (
            float(self.loss.value),
            self.tape.adjoint(self.mu).copy(),
            self.tape.adjoint(self.rho).copy(),
        )


def elbo_loss(q: VariationalPosterior, net: NetworkSpec, data, likelihood: LikelihoodSpec,
              n_mc: int = 1, rng: np.random.Generator | None = None, eps=None):
    """Single-sample-average estimate of the negative ELBO.

    Returns ``(loss, tape)``; ``tape.root`` is the loss node and
    ``tape.leaves`` maps ``"mu"``/``"rho"`` to the variational leaves, so
    ``ad.grad_scalar(tape, wrt=tape.leaves["rho"])`` gives the rho-gradient.
    Pass ``eps`` (shape (n_mc, N)) to fix the noise draws.
    """
    g = ElboGraph(q, net, data, likelihood, n_mc)
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        eps = rng.standard_normal((n_mc, len(q)))
    eps = np.asarray(eps, dtype=np.float64).reshape(n_mc, len(q))
    leaves = {g.mu.idx: q.mu, g.rho.idx: q.rho}
    leaves.update({v.idx: e for v, e in zip(g.eps, eps)})
    g.tape.replay(leaves)
    g.tape.leaves = {"mu": g.mu, "rho": g.rho}
    return float(g.loss.value), g.tape


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rho_lr_scale: float = 1.0  # learning rate for rho is lr * rho_lr_scale

    def __post_init__(self):
        if self.lr < 0 or self.rho_lr_scale < 0:
            raise ConfigurationError("learning rates must be non-negative")


@dataclass(frozen=True)
class PlateauConfig:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without
    a relative improvement of ``threshold`` in the validation loss."""

    factor: float = 0.1
    patience: int = 50
    threshold: float = 1e-4
    min_lr: float = 0.0
    enabled: bool = True


class Adam:
    def __init__(self, cfg: AdamConfig, shapes, scales=None):
        self.cfg = cfg
        self.lr = cfg.lr
        self.scales = list(scales) if scales is not None else [1.0] * len(shapes)
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.beta1**self.t
        b2t = 1.0 - c.beta2**self.t
        out = []
        for p, g, m, v, k in zip(params, grads, self.m, self.v, self.scales):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            out.append(p - k * self.lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps))
        return out


class Plateau:
    def __init__(self, cfg: PlateauConfig):
        self.cfg = cfg
        self.best = math.inf
        self.bad = 0

    def update(self, metric: float, lr: float) -> float:
        c = self.cfg
        if not c.enabled:
            return lr
        if not math.isfinite(self.best) or metric < self.best - c.threshold * abs(self.best):
            self.best = metric
            self.bad = 0
            return lr
        self.bad += 1
        if self.bad > c.patience:
            self.bad = 0
            return max(lr * c.factor, c.min_lr)
        return lr


HISTORY_COLUMNS = ("epoch", "train_elbo", "val_elbo", "train_mse", "val_mse", "lr")


@dataclass
class TrainResult:
    posterior: VariationalPosterior
    history: list[dict]

    def history_array(self) -> np.ndarray:
        return np.array([[row[c] for c in HISTORY_COLUMNS] for row in self.history])


class TrainingDiverged(NumericalError):
    def __init__(self, message, epoch, posterior, history):
        super().__init__(message, epoch=epoch)
        self.epoch = epoch
        self.posterior = posterior
        self.history = history


def mse_at_mean(q: VariationalPosterior, net: NetworkSpec, data) -> float:
    pred = evaluate(net, q.mu, data.inputs)
    return float(np.mean((pred - data.targets) ** 2))


def _batches(n, batch_size, rng):
    if batch_size is None or batch_size >= n:
        return [None]
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_vi(q0: VariationalPosterior, net: NetworkSpec, train, val, opt: AdamConfig = AdamConfig(),
             schedule: PlateauConfig = PlateauConfig(), epochs: int = 1000,
             rng: np.random.Generator | None = None, likelihood: LikelihoodSpec = LikelihoodSpec(),
             n_mc: int = 1, batch_size: int | None = None, log_every: int = 0) -> TrainResult:
    """Adam on the negative ELBO with a reduce-on-plateau learning-rate schedule.

    Full-batch by default. With ``batch_size`` the data are shuffled each epoch
    and the KL term is weighted by the batch fraction, so the per-epoch sum of
    batch losses estimates the full objective.

    Raises :class:`TrainingDiverged` (carrying the last finite posterior and
    the history so far) when the loss stops being finite.
    """
    if epochs < 0:
        raise ConfigurationError("epochs must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(0)
    q = q0.copy()
    adam = Adam(opt, [q.mu.shape, q.rho.shape], [1.0, opt.rho_lr_scale])
    plateau = Plateau(schedule)
    n = train.n_data
    full_graph = ElboGraph(q, net, train, likelihood, n_mc) if batch_size is None or batch_size >= n else None
    val_graph = ElboGraph(q, net, val, likelihood, 1)
    history: list[dict] = []
    for epoch in range(epochs):
        total = 0.0
        for idx in _batches(n, batch_size, rng):
            if idx is None:
                graph = full_graph
            else:
                graph = ElboGraph(q, net, train.subset(idx), likelihood, n_mc, kl_weight=len(idx) / n)
            eps = rng.standard_normal((n_mc, len(q)))
            loss, g_mu, g_rho = graph.evaluate(q.mu, q.rho, eps)
            if not (math.isfinite(loss) and np.all(np.isfinite(g_mu)) and np.all(np.isfinite(g_rho))):
                raise TrainingDiverged(f"non-finite ELBO at epoch {epoch}", epoch, q, history)
            total += loss
            q.mu, q.rho = adam.step([q.mu, q.rho], [g_mu, g_rho])
        val_loss = val_graph.evaluate(q.mu, q.rho, [rng.standard_normal(len(q))])[0]
        row = {
            "epoch": epoch,
            "train_elbo": total,
            "val_elbo": val_loss,
            "train_mse": mse_at_mean(q, net, train),
            "val_mse": mse_at_mean(q, net, val),
            "lr": adam.lr,
        }
        history.append(row)
        adam.lr = plateau.update(val_loss, adam.lr)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d elbo %.4g val %.4g mse %.3g lr %.2g", epoch, total, val_loss,
                     row["train_mse"], row["lr"])
    return TrainResult(q, history)


def predictive_samples(q: VariationalPosterior, net: NetworkSpec, inputs, n_samples: int,
                       rng: np.random.Generator, chunk: int = 2048) -> np.ndarray:
    """Network outputs for ``n_samples`` parameter draws from q.

    Returns an array of shape (n_samples, *output_shape).
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be at least 1")
    out = []
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        out.append(evaluate(net, q.sample(rng, k), inputs))
        done += k
    return np.concatenate(out, axis=0)


def with_prior(q: VariationalPosterior, prior: PriorSpec) -> VariationalPosterior:
    return replace(q, prior=prior)
