"""Exact and marginal-likelihood-optimized GP regression with a squared-exponential kernel."""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from ..errors import InvalidArgumentError, NumericalError
from ..simulators import SqExpKernelParams, TimeGrid, TimeSeries, jittered_cholesky, sq_exp_kernel

DEFAULT_LENGTH_STARTS = (0.05, 0.15, 0.5)
DEFAULT_NOISE_STARTS = (0.1, 1.0)


def _values(observed):
    return observed.values if isinstance(observed, TimeSeries) else np.asarray(observed, dtype=np.float64)


def _factor(grid, kernel, noise_std):
    if not noise_std > 0:
        raise InvalidArgumentError("noise_std must be positive")
    K = sq_exp_kernel(grid.times, kernel)
    A = K + noise_std ** 2 * np.eye(grid.n)
    scale = max(kernel.amplitude ** 2, noise_std ** 2)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        L = jittered_cholesky(A, scale=scale)
    return K, L


def gp_posterior_mean(observed, grid: TimeGrid, kernel: SqExpKernelParams, noise_std: float) -> TimeSeries:
    y = _values(observed)
    K, L = _factor(grid, kernel, noise_std)
    return TimeSeries(K @ cho_solve((L, True), y), grid.dt)


def gp_log_marginal_likelihood(observed, grid, kernel, noise_std) -> float:
    y = _values(observed)
    _, L = _factor(grid, kernel, noise_std)
    alpha = cho_solve((L, True), y)
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * grid.n * math.log(2 * math.pi))


def gp_lml_and_grad(log_params, observed, grid):
    """Log marginal likelihood and its gradient w.r.t. (log length, log amplitude, log noise)."""
    y = _values(observed)
    length, amp, noise = np.exp(log_params)
    kernel = SqExpKernelParams(float(length), float(amp))
    K, L = _factor(grid, kernel, float(noise))
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * grid.n * math.log(2 * math.pi)
    Ainv = cho_solve((L, True), np.eye(grid.n))
    W = np.outer(alpha, alpha) - Ainv
    diff = grid.times[:, None] - grid.times[None, :]
    dK_dlength = K * (diff / length) ** 2
    grad = 0.5 * np.array([
        np.sum(W * dK_dlength),
        np.sum(W * 2.0 * K),
        2.0 * noise ** 2 * np.trace(W),
    ])
    return float(lml), grad


def default_starts(observed):
    y = _values(observed)
    amp = float(np.std(y)) or 1.0
    return [(ls, amp, nz) for ls in DEFAULT_LENGTH_STARTS for nz in DEFAULT_NOISE_STARTS]


def gp_optimize_hyperparams(observed, grid: TimeGrid, init_grid=None, gtol=1e-6, max_iter=500):
    """Multi-start maximization of the log marginal likelihood over log-parameters.

    ``init_grid`` is a list of ``(length_scale, amplitude, noise_std)`` starting points.
    Returns the ``(SqExpKernelParams, noise_std)`` of the best optimum found.
    """
    starts = default_starts(observed) if init_grid is None else list(init_grid)
    if not starts:
        raise InvalidArgumentError("need at least one starting point")
    y = _values(observed)
    spread = max(float(np.std(y)), 1e-3)
    bounds = [(math.log(grid.dt / 10), math.log(10 * grid.duration)),
              (math.log(spread * 1e-3), math.log(spread * 1e2)),
              (math.log(spread * 1e-4), math.log(spread * 1e2))]

    def objective(theta):
        try:
            lml, grad = gp_lml_and_grad(theta, y, grid)
        except NumericalError:
            return 1e300, np.zeros(3)
        return -lml, -grad

    best = None
    for start in starts:
        theta0 = np.log(np.asarray(start, dtype=np.float64))
        theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
        try:
            start_val = -objective(theta0)[0]
            res = minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"gtol": gtol, "maxiter": max_iter})
        except (NumericalError, np.linalg.LinAlgError, ValueError):
            continue
        theta, val = (res.x, -res.fun) if -res.fun >= start_val else (theta0, start_val)
        if not np.isfinite(val):
            continue
        if best is None or val > best[1]:
            best = (theta, val)
    if best is None:
        raise NumericalError("marginal likelihood optimization failed from every start")
    length, amp, noise = np.exp(best[0])
    return SqExpKernelParams(float(length), float(amp)), float(noise)
