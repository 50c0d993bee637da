"""Multi-chain convergence diagnostics: rank-normalised split-R-hat and ESS.

Inputs are arrays of shape (chains, draws) for one coordinate or
(chains, draws, dim) for many.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT, lags 0..n-1."""
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=-1)
    return np.fft.irfft(f * np.conj(f), n=size, axis=-1)[..., :n] / n


def ess(chains) -> float:
    """Effective sample size of one coordinate from (chains, draws).

    Multi-chain autocorrelation combined with Geyer's initial monotone
    sequence. The integrated time is floored at ``1/log10(N)`` rather than 1,
    so anticorrelated chains report ESS above the draw count.
    """
    x = np.atleast_2d(np.asarray(chains, dtype=np.float64))
    m, n = x.shape
    if n < 4:
        return float("nan")
    if np.ptp(x) == 0.0:
        return float("nan")
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = chain_var.mean()
    var_plus = w * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # initial positive sequence over pairs, then made monotone
    total = 0.0
    prev = math.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0.0 and t > 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / math.log10(m * n))
    return float(m * n / tau)


def _split(x: np.ndarray) -> np.ndarray:
    m, n = x.shape
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half :]], axis=0)


def _rhat_basic(x: np.ndarray) -> float:
    m, n = x.shape
    w = x.var(axis=1, ddof=1).mean()
    b = n * x.mean(axis=1).var(ddof=1)
    if w == 0.0:
        return float("nan")
    var_plus = (n - 1.0) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def _rank_normalise(x: np.ndarray) -> np.ndarray:
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def split_rhat(chains) -> float:
    """Rank-normalised split-R-hat (max of bulk and folded-tail versions)."""
    x = np.atleast_2d(np.asarray(chains, dtype=np.float64))
    if x.shape[1] < 4:
        return float("nan")
    s = _split(x)
    bulk = _rhat_basic(_rank_normalise(s))
    tail = _rhat_basic(_rank_normalise(np.abs(s - np.median(s))))
    return float(np.nanmax([bulk, tail])) if not (math.isnan(bulk) and math.isnan(tail)) else float("nan")


def summarize(draws, accepted=None, wall_time: float | None = None) -> dict:
    """Per-coordinate R-hat and ESS plus acceptance and time per sample.

    ``draws`` has shape (chains, kept draws, dim). R-hat is omitted (None)
    with a warning when there is a single chain.
    """
    d = np.asarray(draws, dtype=np.float64)
    if d.ndim == 2:
        d = d[:, :, None]
    m, n, dim = d.shape
    if n == 0:
        raise ValueError("no kept draws to diagnose")
    out = {
        "n_chains": m,
        "n_draws": n,
        "ess": [ess(d[:, :, j]) for j in range(dim)],
        "rhat": None,
    }
    if m >= 2:
        out["rhat"] = [split_rhat(d[:, :, j]) for j in range(dim)]
    else:
        warnings.warn("R-hat needs at least two chains; omitted", RuntimeWarning, stacklevel=2)
    if accepted is not None:
        a = np.asarray(accepted, dtype=float)
        out["acceptance_rate"] = float(a.mean()) if a.size else 0.0
    if wall_time is not None:
        out["time_per_sample"] = wall_time / max(1, m * n)
    return out


def archive_diagnostics(archive, include_bad: bool = False) -> dict:
    """:func:`summarize` applied to a chain archive's kept draws."""
    chains = archive.chains if include_bad else archive.good_chains()
    if not chains:
        raise ValueError("archive has no usable chains")
    draws = np.stack([c.draws for c in chains])
    acc = np.concatenate([c.accepted[archive.burn_in :] for c in chains])
    total_props = sum(c.accepted.size for c in chains)
    wall = sum(c.wall_time for c in chains)
    out = summarize(draws, acc)
    out["time_per_sample"] = wall / max(1, total_props)
    out["bad_chains"] = [k for k, c in enumerate(archive.chains) if c.bad]
    return out
