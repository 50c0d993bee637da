"""Finite-difference oracles and small fixtures shared by the test modules."""

import numpy as np

from vihmc import autodiff as ad

# criterion number -> (passed, detail); filled by test_acceptance, printed by conftest
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def central_diff(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(x.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), 1e-12))


def _unary(op, lo=-2.0, hi=2.0):
    def make(rng):
        return [rng.uniform(lo, hi, size=(3, 4))], lambda t, v: getattr(ad, op)(v[0])
    return make


def _binary(op):
    def make(rng):
        return [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], lambda t, v: getattr(ad, op)(v[0], v[1])
    return make


def _matmul(rng):
    return [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], lambda t, v: ad.matmul(v[0], v[1])


def _dot(rng):
    return [rng.normal(size=(3, 5)), rng.normal(size=(3, 5))], lambda t, v: ad.dot(v[0], v[1])


def _sum(rng):
    return [rng.normal(size=(3, 4))], lambda t, v: ad.sum(v[0], axis=0)


def _segment(rng):
    return [rng.normal(size=10)], lambda t, v: ad.segment(v[0], 2, (2, 3), transpose=True)


def _transpose(rng):
    return [rng.normal(size=(3, 4))], lambda t, v: ad.transpose(v[0])


def _affine(rng):
    # x (5, 3), theta holds W (2, 3) at 1 and b (2,) at 7
    return [rng.normal(size=(5, 3)), rng.normal(size=10)], lambda t, v: ad.affine(v[0], v[1], 1, 2, 3, 7)


def _sumsq(rng):
    return [rng.normal(size=(3, 4))], lambda t, v: ad.sumsq(v[0])


# one input generator per primitive; ``log`` gets positive inputs
PRIMITIVE_CASES = {
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "neg": _unary("neg"),
    "sin": _unary("sin"),
    "tanh": _unary("tanh"),
    "softplus": _unary("softplus"),
    "square": _unary("square"),
    "log": _unary("log", 0.3, 3.0),
    "exp": _unary("exp"),
    "sum": _sum,
    "sumsq": _sumsq,
    "matmul": _matmul,
    "dot": _dot,
    "segment": _segment,
    "affine": _affine,
    "transpose": _transpose,
}


def primitive_fd_error(name, rng):
    """Max relative error between tape gradients and central differences for one random trial.

    The scalar objective is ``sum(w * op(inputs))`` with random weights ``w``.
    """
    inputs, build = PRIMITIVE_CASES[name](rng)
    tape = ad.Tape()
    leaves = [tape.variable(x) for x in inputs]
    out = build(tape, leaves)
    w = rng.normal(size=out.value.shape)
    tape.backward(out, w)
    grads = [tape.adjoint(v).copy() for v in leaves]
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(xk, k=k):
            t = ad.Tape()
            vs = [t.variable(xk if j == k else inputs[j]) for j in range(len(inputs))]
            return float(np.sum(w * build(t, vs).value))
        worst = max(worst, rel_err(grads[k], central_diff(f, x)))
    return worst


def log_posterior_fd_error(target, theta, h=1e-6):
    _, g = target.value_and_grad(theta)
    fd = central_diff(lambda th: target.value_and_grad(th)[0], theta, h)
    return rel_err(g, fd)


# ---------------------------------------------------------------- sampler oracles


def conjugate_regression(dim=3, n=60, noise=0.5, prior_var=4.0, seed=0):
    """Bayesian linear regression as a linear network (weights then bias).

    Returns ``(target, mean, cov)`` with the closed-form Gaussian posterior.
    """
    from vihmc.datasets import FunctionDataset
    from vihmc.hmc import BNNPosterior
    from vihmc.networks import mlp

    rng = np.random.default_rng(seed)
    # correlated design so the posterior covariance has real off-diagonal terms
    x = rng.normal(size=(n, dim - 1)) @ np.linalg.cholesky(0.5 * np.eye(dim - 1) + 0.5)
    beta = np.linspace(1.0, 2.0, dim)
    X = np.column_stack([x, np.ones(n)])
    y = X @ beta + noise * rng.normal(size=n)
    prec = X.T @ X / noise**2 + np.eye(dim) / prior_var
    cov = np.linalg.inv(prec)
    mean = cov @ (X.T @ y) / noise**2
    target = BNNPosterior(mlp(dim - 1, [1], "identity"), FunctionDataset(x, y), prior_var, noise**2)
    return target, mean, cov


def gaussian_conditional(mean, cov, free, frozen, values):
    prec = np.linalg.inv(cov)
    p_ss = prec[np.ix_(free, free)]
    c = np.linalg.inv(p_ss)
    m = mean[free] - c @ prec[np.ix_(free, frozen)] @ (np.asarray(values) - mean[frozen])
    return m, c


def cov_within(est, ref, tol):
    """Entrywise check scaled by ``sqrt(ref_ii ref_jj)`` so near-zero off-diagonals are judged on a sane scale."""
    s = np.sqrt(np.outer(np.diag(ref), np.diag(ref)))
    return bool(np.all(np.abs(est - ref) <= tol * s))


def max_energy_error(eps, n_traj=100, dim=2, seed=0, length=2.0):
    """Max |dH| over random leapfrog trajectories of fixed time on an anisotropic quadratic."""
    from vihmc.hmc import GaussianTarget, kinetic, leapfrog

    target = GaussianTarget(np.zeros(dim), np.diag(np.linspace(1.0, 3.0, dim)))
    rng = np.random.default_rng(seed)
    worst = 0.0
    L = int(round(length / eps))
    for _ in range(n_traj):
        th, p = rng.normal(size=dim), rng.normal(size=dim)
        lp0, _ = target.value_and_grad(th)
        th1, p1, lp1, _, _ = leapfrog(target, th, p, eps, L)
        worst = max(worst, abs((-lp1 + kinetic(p1)) - (-lp0 + kinetic(p))))
    return worst


def reversibility_residual(target, theta, p, eps, L):
    from vihmc.hmc import leapfrog

    th1, p1, *_ = leapfrog(target, theta, p, eps, L)
    th2, p2, *_ = leapfrog(target, th1, -p1, eps, L)
    return float(max(np.max(np.abs(th2 - theta)), np.max(np.abs(-p2 - p))))


def oracle_hmc_config(cov, n_kept=10_000, burn_in=500, seed=0, n_chains=1):
    """HMC settings for a known Gaussian: small step, and a trajectory length
    that avoids (half-)periods of every eigen-direction so draws decorrelate."""
    from vihmc.hmc import HmcConfig

    s = np.sqrt(np.linalg.eigvalsh(np.atleast_2d(cov)))
    eps = 0.2 * s.min()
    best = min(range(2, 60), key=lambda L: np.max(np.abs(np.cos(L * eps / s))))
    return HmcConfig(step_size=float(eps), n_steps=best, n_chains=n_chains, n_samples=n_kept + burn_in,
                     burn_in=burn_in, seed=seed)
