"""Kalman/RTS, extended and unscented Kalman smoothers.

State at index 0 has prior ``N(initial_mean, initial_cov)`` and is observed
directly; transitions are applied between consecutive observations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import EstimationDivergedError, InvalidArgumentError, NumericalError
from ..simulators import OscillatorParams


@dataclass
class LinearGaussianModel:
    transition_matrix: np.ndarray
    process_cov: np.ndarray
    observation_matrix: np.ndarray
    observation_cov: np.ndarray
    initial_mean: np.ndarray
    initial_cov: np.ndarray

    def __post_init__(self):
        for name in ("transition_matrix", "process_cov", "observation_matrix", "observation_cov",
                     "initial_mean", "initial_cov"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        self.observation_matrix = np.atleast_2d(self.observation_matrix)
        self.observation_cov = np.atleast_2d(self.observation_cov)
        d = len(self.initial_mean)
        if (self.transition_matrix.shape != (d, d) or self.process_cov.shape != (d, d)
                or self.initial_cov.shape != (d, d) or self.observation_matrix.shape[1] != d):
            raise InvalidArgumentError("inconsistent model dimensions")

    def as_nonlinear(self):
        F, H = self.transition_matrix, self.observation_matrix
        return NonlinearModel(lambda x: F @ x, lambda x: F, self.process_cov,
                              lambda x: H @ x, lambda x: H, self.observation_cov,
                              self.initial_mean, self.initial_cov)


@dataclass
class NonlinearModel:
    transition_fn: Callable
    transition_jacobian: Callable
    process_cov: np.ndarray
    observation_fn: Callable
    observation_jacobian: Callable
    observation_cov: np.ndarray
    initial_mean: np.ndarray
    initial_cov: np.ndarray


@dataclass
class SmootherOutput:
    means: np.ndarray
    covariances: np.ndarray
    filtered_means: np.ndarray | None = None
    filtered_covariances: np.ndarray | None = None


@dataclass(frozen=True)
class SigmaParams:
    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 0.0


def _obs_matrix(observations, dim_obs):
    z = np.asarray(observations, dtype=np.float64)
    return z.reshape(len(z), dim_obs)


def _fd_jacobian(fn, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    f0 = np.atleast_1d(fn(x))
    J = np.empty((len(f0), len(x)))
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h * max(1.0, abs(x[i]))
        J[:, i] = (np.atleast_1d(fn(x + e)) - np.atleast_1d(fn(x - e))) / (2 * e[i])
    return J


def validate_jacobians(model: NonlinearModel, points, rtol=1e-5):
    """Raise if either Jacobian disagrees with central differences at any of ``points``."""
    for x in points:
        for fn, jac, label in ((model.transition_fn, model.transition_jacobian, "transition"),
                               (model.observation_fn, model.observation_jacobian, "observation")):
            J = np.atleast_2d(jac(np.asarray(x, dtype=np.float64)))
            J_fd = _fd_jacobian(fn, x)
            err = np.max(np.abs(J - J_fd)) / max(1.0, np.max(np.abs(J_fd)))
            if err > rtol:
                raise InvalidArgumentError(f"{label} Jacobian mismatch at {x}: relative error {err:.2e}")


def _update(m, P, z, h_val, H, R, step):
    S = H @ P @ H.T + R
    S = 0.5 * (S + S.T)
    innov = z - h_val
    try:
        L = np.linalg.cholesky(S)
        K = np.linalg.solve(L.T, np.linalg.solve(L, H @ P)).T
    except np.linalg.LinAlgError:
        S_pinv = np.linalg.pinv(S)
        if np.max(np.abs(S @ S_pinv @ innov - innov)) > 1e-9 * (1 + np.max(np.abs(innov))):
            raise NumericalError(f"singular innovation covariance at step {step}") from None
        K = P @ H.T @ S_pinv
    m_new = m + K @ innov
    P_new = P - K @ S @ K.T
    return m_new, 0.5 * (P_new + P_new.T)


def _smoother_gain(P_filt, cross, P_pred):
    try:
        return np.linalg.solve(P_pred.T, cross.T).T if np.linalg.cond(P_pred) < 1e12 else cross @ np.linalg.pinv(P_pred)
    except np.linalg.LinAlgError:
        return cross @ np.linalg.pinv(P_pred)


def _rts_backward(mf, Pf, mp, Pp, crosses):
    """Generic backward pass; ``crosses[k]`` is Cov(x_k, x_{k+1}) under the filter at k."""
    T = len(mf)
    ms, Ps = mf.copy(), Pf.copy()
    for k in range(T - 2, -1, -1):
        G = _smoother_gain(Pf[k], crosses[k], Pp[k + 1])
        ms[k] = mf[k] + G @ (ms[k + 1] - mp[k + 1])
        P = Pf[k] + G @ (Ps[k + 1] - Pp[k + 1]) @ G.T
        Ps[k] = 0.5 * (P + P.T)
    return ms, Ps


def _check_finite(m, P, step):
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(P))):
        raise EstimationDivergedError(f"state estimate became non-finite at step {step}", step=step)


def kalman_rts_smoother(model: LinearGaussianModel, observations) -> SmootherOutput:
    F, Q, H, R = model.transition_matrix, model.process_cov, model.observation_matrix, model.observation_cov
    z = _obs_matrix(observations, H.shape[0])
    T, d = len(z), len(model.initial_mean)
    mf, Pf = np.empty((T, d)), np.empty((T, d, d))
    mp, Pp = np.empty((T, d)), np.empty((T, d, d))
    crosses = np.empty((T, d, d))
    m, P = model.initial_mean.copy(), model.initial_cov.copy()
    for k in range(T):
        if k > 0:
            m, P = F @ m, F @ P @ F.T + Q
        mp[k], Pp[k] = m, P
        m, P = _update(m, P, z[k], H @ m, H, R, k)
        _check_finite(m, P, k)
        mf[k], Pf[k] = m, P
        crosses[k] = P @ F.T
    ms, Ps = _rts_backward(mf, Pf, mp, Pp, crosses)
    return SmootherOutput(ms, Ps, mf, Pf)


def extended_kalman_smoother(model: NonlinearModel, observations) -> SmootherOutput:
    Q, R = np.atleast_2d(model.process_cov), np.atleast_2d(model.observation_cov)
    z = _obs_matrix(observations, R.shape[0])
    m, P = np.asarray(model.initial_mean, dtype=float).copy(), np.asarray(model.initial_cov, dtype=float).copy()
    T, d = len(z), len(m)
    mf, Pf = np.empty((T, d)), np.empty((T, d, d))
    mp, Pp = np.empty((T, d)), np.empty((T, d, d))
    crosses = np.empty((T, d, d))
    for k in range(T):
        if k > 0:
            F = np.atleast_2d(model.transition_jacobian(m))
            m, P = np.asarray(model.transition_fn(m), dtype=float), F @ P @ F.T + Q
        mp[k], Pp[k] = m, P
        H = np.atleast_2d(model.observation_jacobian(m))
        m, P = _update(m, P, z[k], np.atleast_1d(model.observation_fn(m)), H, R, k)
        _check_finite(m, P, k)
        mf[k], Pf[k] = m, P
        crosses[k] = P @ np.atleast_2d(model.transition_jacobian(m)).T
    ms, Ps = _rts_backward(mf, Pf, mp, Pp, crosses)
    return SmootherOutput(ms, Ps, mf, Pf)


def sigma_points(mean, cov, params: SigmaParams = SigmaParams(), step=None):
    """Merwe scaled sigma points and their mean/covariance weights."""
    d = len(mean)
    lam = params.alpha ** 2 * (d + params.kappa) - d
    if lam + d <= 0:
        raise InvalidArgumentError("sigma parameters need lambda + d > 0")
    try:
        L = np.linalg.cholesky((lam + d) * cov)
    except np.linalg.LinAlgError:
        # PSD but singular covariances are legitimate (e.g. noise-free models)
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        if np.min(w) < -1e-9 * max(1.0, np.max(np.abs(w))):
            where = "" if step is None else f" at step {step}"
            raise NumericalError(f"covariance lost positive definiteness{where}") from None
        L = V * np.sqrt(np.clip(w, 0, None) * (lam + d))
    pts = np.vstack([mean, mean + L.T, mean - L.T])
    wm = np.full(2 * d + 1, 0.5 / (lam + d))
    wc = wm.copy()
    wm[0] = lam / (lam + d)
    wc[0] = lam / (lam + d) + 1 - params.alpha ** 2 + params.beta
    return pts, wm, wc


def unscented_transform(fn, mean, cov, params: SigmaParams = SigmaParams()):
    pts, wm, wc = sigma_points(np.atleast_1d(np.asarray(mean, dtype=float)), np.atleast_2d(cov), params)
    Y = np.array([np.atleast_1d(fn(p)) for p in pts])
    mu = wm @ Y
    dY = Y - mu
    return mu, (wc[:, None] * dY).T @ dY


def unscented_kalman_smoother(model: NonlinearModel, observations, sigma_params: SigmaParams = SigmaParams()
                              ) -> SmootherOutput:
    Q, R = np.atleast_2d(model.process_cov), np.atleast_2d(model.observation_cov)
    z = _obs_matrix(observations, R.shape[0])
    m, P = np.asarray(model.initial_mean, dtype=float).copy(), np.asarray(model.initial_cov, dtype=float).copy()
    T, d = len(z), len(m)
    mf, Pf = np.empty((T, d)), np.empty((T, d, d))
    mp, Pp = np.empty((T, d)), np.empty((T, d, d))
    crosses = np.zeros((T, d, d))
    for k in range(T):
        if k > 0:
            X, wm, wc = sigma_points(m, P, sigma_params, step=k)
            Y = np.array([model.transition_fn(x) for x in X])
            m_pred = wm @ Y
            crosses[k - 1] = (wc[:, None] * (X - m)).T @ (Y - m_pred)
            P = (wc[:, None] * (Y - m_pred)).T @ (Y - m_pred) + Q
            m = m_pred
        mp[k], Pp[k] = m, P
        X, wm, wc = sigma_points(m, P, sigma_params, step=k)
        Z = np.array([np.atleast_1d(model.observation_fn(x)) for x in X])
        z_pred = wm @ Z
        S = (wc[:, None] * (Z - z_pred)).T @ (Z - z_pred) + R
        C = (wc[:, None] * (X - m)).T @ (Z - z_pred)
        innov = z[k] - z_pred
        try:
            K = np.linalg.solve(S.T, C.T).T
        except np.linalg.LinAlgError:
            S_pinv = np.linalg.pinv(S)
            if np.max(np.abs(S @ S_pinv @ innov - innov)) > 1e-9 * (1 + np.max(np.abs(innov))):
                raise NumericalError(f"singular innovation covariance at step {k}") from None
            K = C @ S_pinv
        m = m + K @ innov
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
        _check_finite(m, P, k)
        mf[k], Pf[k] = m, P
    ms, Ps = _rts_backward(mf, Pf, mp, Pp, crosses)
    return SmootherOutput(ms, Ps, mf, Pf)


def oscillator_model(params: OscillatorParams, dt: float, obs_noise_std: float) -> NonlinearModel:
    """State (x, v) under one noise-free step of the simulator's integration scheme; observe x."""
    w2, b, k2, k3 = params.omega0 ** 2, params.beta, params.k2, params.k3
    semi = params.scheme == "semi_implicit"

    def f(s):
        x, v = s
        a = -w2 * x - b * v + k2 * x * x + k3 * x ** 3
        v_new = v + a * dt
        return np.array([x + (v_new if semi else v) * dt, v_new])

    def F(s):
        x, _ = s
        ax = -w2 + 2 * k2 * x + 3 * k3 * x * x
        dv = np.array([ax * dt, 1 - b * dt])
        # semi-implicit: x_new = x + v_new*dt, so its row is [1, 0] + dt * d(v_new)
        dx = np.array([1.0, 0.0]) + dt * dv if semi else np.array([1.0, dt])
        return np.array([dx, dv])

    q = params.dyn_noise_std ** 2 * dt
    Q = q * np.array([[dt * dt, dt], [dt, 1.0]]) if semi else np.diag([0.0, q])
    H = np.array([[1.0, 0.0]])
    x0_var = 1.0 if params.x0 is None else 0.0
    v0_var = params.omega0 ** 2 if params.v0 is None else 0.0
    return NonlinearModel(f, F, Q, lambda s: H @ s, lambda s: H, np.array([[obs_noise_std ** 2]]),
                          np.array([params.x0 or 0.0, params.v0 or 0.0]), np.diag([x0_var, v0_var]))
