"""Synthetic datasets: noisy two-sinusoid regression and periodic Burgers operator data."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .datasets import FunctionDataset, OperatorDataset
from .errors import ConfigurationError, NumericalError

TRUNK_FEATURES = ("xt", "periodic")


@dataclass(frozen=True)
class SinusoidSpec:
    """``y = a sin(w1 x + p1) + b sin(w2 x + p2) + N(0, noise_std^2)``."""

    a: float
    b: float
    w1: float
    w2: float
    p1: float
    p2: float
    noise_std: float = 1e-3
    train_ranges: tuple = ((-1.0, -0.2), (0.2, 1.0))
    n_train: int = 20
    val_range: tuple = (-1.2, 1.2)
    n_val: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be non-negative")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigurationError("sample counts must be positive")
        object.__setattr__(self, "train_ranges", tuple(tuple(map(float, r)) for r in self.train_ranges))
        object.__setattr__(self, "val_range", tuple(map(float, self.val_range)))

    def curve(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.a * np.sin(self.w1 * x + self.p1) + self.b * np.sin(self.w2 * x + self.p2)


CASE1 = SinusoidSpec(a=0.4, b=0.5, w1=4.0, w2=-3.0, p1=0.0, p2=1.57, noise_std=1e-3)
CASE2 = SinusoidSpec(a=4.0, b=5.0, w1=4.0, w2=-12.0, p1=0.0, p2=math.pi / 2, noise_std=0.05)


def _uniform_union(ranges, n, rng):
    lengths = np.array([hi - lo for lo, hi in ranges])
    u = rng.uniform(0.0, lengths.sum(), size=n)
    edges = np.concatenate([[0.0], np.cumsum(lengths)])
    k = np.clip(np.searchsorted(edges, u, side="right") - 1, 0, len(ranges) - 1)
    lows = np.array([lo for lo, _ in ranges])
    return lows[k] + (u - edges[k])


def gen_sinusoid(spec: SinusoidSpec) -> tuple[FunctionDataset, FunctionDataset]:
    rng = np.random.default_rng(spec.seed)
    x_tr = _uniform_union(spec.train_ranges, spec.n_train, rng)
    y_tr = spec.curve(x_tr) + spec.noise_std * rng.standard_normal(spec.n_train)
    x_va = rng.uniform(*spec.val_range, size=spec.n_val)
    y_va = spec.curve(x_va) + spec.noise_std * rng.standard_normal(spec.n_val)
    meta = {"generator": "sinusoid", **asdict(spec)}
    return FunctionDataset(x_tr, y_tr, {**meta, "split": "train"}), FunctionDataset(x_va, y_va, {**meta, "split": "val"})


# ---------------------------------------------------------------- random fields


@dataclass(frozen=True)
class BurgersSpec:
    """Desk-scale periodic Burgers operator data.

    Initial conditions come from a zero-mean periodic Gaussian random field with
    squared-exponential spectral decay (``length_scale``) and pointwise
    variance ``grf_variance``; this stands in for the benchmark's own field.
    """

    nu: float = 0.01
    n_x: int = 64
    n_t: int = 33
    length_scale: float = 0.1
    grf_variance: float = 0.25
    n_fields: int = 200
    split: float = 0.5
    seed: int = 0
    refine: int = 2
    cfl: float = 0.4
    trunk_features: str = "xt"  # "xt" or "periodic"

    def __post_init__(self):
        if not self.nu > 0:
            raise ConfigurationError("viscosity must be positive")
        if self.n_x < 8 or self.n_t < 8:
            raise ConfigurationError("grid needs at least 8 points per axis")
        if not 0.0 < self.split < 1.0:
            raise ConfigurationError("split fraction must lie in (0, 1)")
        if self.grf_variance < 0:
            raise ConfigurationError("GRF variance must be non-negative")
        if self.trunk_features not in TRUNK_FEATURES:
            raise ConfigurationError(f"trunk_features must be one of {TRUNK_FEATURES}")


def grf_spectrum(n_x: int, length_scale: float, variance: float) -> np.ndarray:
    """Per-mode variances for wavenumbers 1..n_x//2, summing to ``variance``."""
    k = np.arange(1, n_x // 2 + 1)
    lam = np.exp(-2.0 * (math.pi * k * length_scale) ** 2)
    total = lam.sum()
    if total == 0.0:
        return np.zeros_like(lam)
    return variance * lam / total


def grf_coefficients(spec: BurgersSpec, n_fields: int | None = None, rng=None) -> np.ndarray:
    """Fourier coefficients, shape (n_fields, n_modes, 2) for (cos, sin) pairs."""
    n = spec.n_fields if n_fields is None else n_fields
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    lam = grf_spectrum(spec.n_x, spec.length_scale, spec.grf_variance)
    z = rng.standard_normal((n, lam.size, 2))
    coef = z * np.sqrt(lam)[None, :, None]
    # the Nyquist sine vanishes on the grid; keep the variance on the cosine
    if spec.n_x % 2 == 0:
        coef[:, -1, 1] = 0.0
        coef[:, -1, 0] = z[:, -1, 0] * math.sqrt(lam[-1])
    return coef


def eval_fourier(coef: np.ndarray, x) -> np.ndarray:
    """Evaluate the periodic series at points ``x`` (period 1)."""
    x = np.asarray(x, dtype=np.float64)
    k = np.arange(1, coef.shape[-2] + 1)
    arg = 2.0 * math.pi * np.multiply.outer(k, x)
    return np.tensordot(coef[..., 0], np.cos(arg), axes=1) + np.tensordot(coef[..., 1], np.sin(arg), axes=1)


def grid_x(n_x: int) -> np.ndarray:
    return np.arange(n_x) / n_x


def grid_t(n_t: int) -> np.ndarray:
    return np.arange(1, n_t + 1) / n_t


def gen_grf(spec: BurgersSpec, n_fields: int | None = None) -> np.ndarray:
    """Random initial conditions on the periodic grid, shape (n_fields, n_x)."""
    coef = grf_coefficients(spec, n_fields)
    if spec.grf_variance == 0:
        return np.zeros((coef.shape[0], spec.n_x))
    return eval_fourier(coef, grid_x(spec.n_x))


# ---------------------------------------------------------------- Burgers solver


def _minmod(a, b):
    return np.where(a * b > 0.0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


def _advection_rhs(u, dx):
    """-(u^2/2)_x with MUSCL/minmod reconstruction and a Rusanov flux (periodic)."""
    du = _minmod(u - np.roll(u, 1, axis=-1), np.roll(u, -1, axis=-1) - u)
    ul = u + 0.5 * du
    ur = np.roll(u - 0.5 * du, -1, axis=-1)
    a = np.maximum(np.abs(ul), np.abs(ur))
    flux = 0.25 * (ul * ul + ur * ur) - 0.5 * a * (ur - ul)
    return -(flux - np.roll(flux, 1, axis=-1)) / dx


def _advect(u, dt, dx):
    # SSP-RK2 (Heun)
    u1 = u + dt * _advection_rhs(u, dx)
    return 0.5 * (u + u1 + dt * _advection_rhs(u1, dx))


def solve_burgers(u0, spec: BurgersSpec, advection: bool = True, times=None,
                  max_substeps: int = 200_000, energy_log: list | None = None) -> np.ndarray:
    """Integrate ``s_t + s s_x = nu s_xx`` on the unit periodic interval.

    Strang splitting: half-step diffusion solved exactly in Fourier space
    around an explicit conservative advection step, with the step size set
    by the CFL number. ``u0`` lives on ``grid_x(n_x)`` (or on a grid
    ``refine`` times finer, in which case the output is subsampled).

    Returns the solution at ``times`` (default ``grid_t(n_t)``), shape
    (n_x, n_t). ``advection=False`` gives the heat equation.
    """
    u = np.array(u0, dtype=np.float64)
    if u.ndim != 1:
        raise ConfigurationError("solve_burgers takes a single initial condition")
    n_in = u.size
    r = max(int(spec.refine), 1)
    if n_in == spec.n_x and r > 1:
        # spectral interpolation onto the finer working grid
        uh = np.fft.rfft(u) * r
        if spec.n_x % 2 == 0:
            uh[-1] *= 0.5  # the coarse Nyquist mode splits across +-k on the fine grid
        u = np.fft.irfft(uh, n=spec.n_x * r)
    elif n_in != spec.n_x * r and n_in != spec.n_x:
        raise ConfigurationError(f"initial condition has {n_in} points, grid has {spec.n_x}")
    n = u.size
    step_out = n // spec.n_x
    dx = 1.0 / n
    k = 2.0 * math.pi * np.fft.rfftfreq(n, d=dx)
    times = grid_t(spec.n_t) if times is None else np.asarray(times, dtype=np.float64)
    out = np.empty((spec.n_x, times.size))
    t = 0.0
    if energy_log is not None:
        energy_log.append(0.5 * np.sum(u * u) * dx)
    for j, t_next in enumerate(times):
        span = t_next - t
        if span < 0:
            raise ConfigurationError("output times must be increasing")
        if span > 0:
            umax = float(np.max(np.abs(u))) if advection else 0.0
            if not math.isfinite(umax):
                raise NumericalError("non-finite solution", time=t)
            dt_cfl = spec.cfl * dx / umax if umax > 0 else span
            # diffusion is exact; cap the step so splitting error stays small
            dt_cfl = min(dt_cfl, 0.25 * dx) if advection else span
            m = max(1, math.ceil(span / dt_cfl - 1e-12))
            if m > max_substeps:
                raise NumericalError(
                    f"CFL limit needs {m} substeps (max {max_substeps}); max|u|={umax:.3g}, dx={dx:.3g}",
                    time=t, substeps=m,
                )
            dt = span / m
            half = np.exp(-spec.nu * k * k * dt * 0.5)
            for _ in range(m):
                u = np.fft.irfft(np.fft.rfft(u) * half, n=n)
                if advection:
                    u = _advect(u, dt, dx)
                u = np.fft.irfft(np.fft.rfft(u) * half, n=n)
                if energy_log is not None:
                    energy_log.append(0.5 * np.sum(u * u) * dx)
            if not np.all(np.isfinite(u)):
                raise NumericalError("solution blew up", time=t_next)
        out[:, j] = u[::step_out]
        t = t_next
    return out


def heat_solution(coef: np.ndarray, nu: float, x, t) -> np.ndarray:
    """Exact periodic heat-equation solution for a Fourier-series initial condition."""
    k = np.arange(1, coef.shape[-2] + 1)
    x, t = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(t, dtype=np.float64))
    arg = 2.0 * math.pi * np.multiply.outer(k, x)
    decay = np.exp(-nu * np.multiply.outer((2.0 * math.pi * k) ** 2, t))
    return np.tensordot(coef[..., 0], np.cos(arg) * decay, axes=1) + np.tensordot(coef[..., 1], np.sin(arg) * decay, axes=1)


def trunk_queries(spec: BurgersSpec) -> np.ndarray:
    """Trunk inputs for every (x, t) grid point, x-major.

    ``"xt"`` gives the raw pair. ``"periodic"`` gives
    ``(t, cos 2pi x, sin 2pi x, cos 4pi x, sin 4pi x)``, which builds the
    periodic boundary condition into the trunk.
    """
    xx, tt = np.meshgrid(grid_x(spec.n_x), grid_t(spec.n_t), indexing="ij")
    x, t = xx.ravel(), tt.ravel()
    if spec.trunk_features == "xt":
        return np.column_stack([x, t])
    w = 2.0 * math.pi * x
    return np.column_stack([t, np.cos(w), np.sin(w), np.cos(2 * w), np.sin(2 * w)])


def build_operator_dataset(fields, solutions, spec: BurgersSpec) -> tuple[OperatorDataset, OperatorDataset]:
    """Branch inputs = initial fields, trunk queries from the (x, t) grid, targets = solutions.

    Fields are split by a seeded permutation; the first ``split`` fraction trains.
    """
    fields = np.asarray(fields, dtype=np.float64)
    solutions = np.asarray(solutions, dtype=np.float64)
    if fields.shape[0] != solutions.shape[0]:
        raise ConfigurationError(f"{fields.shape[0]} fields but {solutions.shape[0]} solutions")
    n = fields.shape[0]
    queries = trunk_queries(spec)
    targets = solutions.reshape(n, -1)
    order = np.random.default_rng([spec.seed, 1]).permutation(n)
    n_train = int(round(spec.split * n))
    tr, va = np.sort(order[:n_train]), np.sort(order[n_train:])
    meta = {"generator": "burgers", "grf": "periodic squared-exponential spectral stand-in", **asdict(spec)}
    return (
        OperatorDataset(fields[tr], queries, targets[tr], {**meta, "split": "train", "field_ids": tr.tolist()}),
        OperatorDataset(fields[va], queries, targets[va], {**meta, "split": "val", "field_ids": va.tolist()}),
    )


def gen_burgers(spec: BurgersSpec) -> tuple[OperatorDataset, OperatorDataset]:
    fields = gen_grf(spec)
    sols = np.stack([solve_burgers(f, spec) for f in fields])
    return build_operator_dataset(fields, sols, spec)
