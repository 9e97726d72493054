import math

import numpy as np
import pytest
import scipy.signal
from hypothesis import given, settings
from hypothesis import strategies as st

from convsmoother import simulators as sim
from convsmoother.baselines import (LinearGaussianModel, SigmaParams, butterworth_bandpass_twopass,
                                    design_butterworth_bandpass, extended_kalman_smoother, filter_twopass,
                                    gp_lml_and_grad, gp_log_marginal_likelihood, gp_optimize_hyperparams,
                                    gp_posterior_mean, kalman_rts_smoother, oscillator_model, unscented_kalman_smoother,
                                    unscented_transform, validate_jacobians)
from convsmoother.errors import InvalidArgumentError, NumericalError
from convsmoother.simulators import OscillatorParams, SqExpKernelParams, TimeGrid, TimeSeries


# ---------------------------------------------------------------- GP regression

def dense_posterior_mean(t, y, length, amp, noise):
    K = amp ** 2 * np.exp(-0.5 * ((t[:, None] - t[None, :]) / length) ** 2)
    return K @ np.linalg.inv(K + noise ** 2 * np.eye(len(t))) @ y


def eig_lml(t, y, length, amp, noise):
    K = amp ** 2 * np.exp(-0.5 * ((t[:, None] - t[None, :]) / length) ** 2)
    w, V = np.linalg.eigh(K + noise ** 2 * np.eye(len(t)))
    proj = V.T @ y
    return -0.5 * np.sum(proj ** 2 / w) - 0.5 * np.sum(np.log(w)) - 0.5 * len(t) * math.log(2 * math.pi)


def test_gp_posterior_limits():
    grid = TimeGrid(30, 0.01)
    y = np.random.default_rng(0).normal(size=30)
    k = SqExpKernelParams(0.05, 1.0)
    assert np.max(np.abs(gp_posterior_mean(y, grid, k, 1e6).values)) < 1e-9
    # noiseless interpolation of a draw from the same prior
    smooth_y = sim.sample_gp(grid, k, np.random.default_rng(1)).values
    assert np.max(np.abs(gp_posterior_mean(smooth_y, grid, k, 1e-6).values - smooth_y)) < 1e-3
    rough = SqExpKernelParams(0.004, 1.0)
    assert np.max(np.abs(gp_posterior_mean(y, grid, rough, 1e-6).values - y)) < 1e-3
    with pytest.raises(InvalidArgumentError):
        gp_posterior_mean(y, grid, k, 0.0)


def test_gp_posterior_five_point_oracle():
    grid = TimeGrid(5, 0.1)
    y = np.array([0.3, -1.2, 0.8, 2.0, -0.5])
    out = gp_posterior_mean(y, grid, SqExpKernelParams(0.15, 1.3), 0.4).values
    np.testing.assert_allclose(out, dense_posterior_mean(grid.times, y, 0.15, 1.3, 0.4), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 10), seed=st.integers(0, 2 ** 31), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_gp_dense_oracles_and_linearity(n, seed, a, b):
    rng = np.random.default_rng(seed)
    grid = TimeGrid(n, 0.02)
    length, amp, noise = np.exp(rng.normal([-1.9, 0, -0.9], [0.5, 0.3, 0.3]))
    k = SqExpKernelParams(length, amp)
    y1, y2 = rng.normal(size=n), rng.normal(size=n)
    mean = lambda y: gp_posterior_mean(y, grid, k, noise).values
    np.testing.assert_allclose(mean(y1), dense_posterior_mean(grid.times, y1, length, amp, noise), atol=1e-8)
    assert gp_log_marginal_likelihood(y1, grid, k, noise) == pytest.approx(
        eig_lml(grid.times, y1, length, amp, noise), abs=1e-8)
    np.testing.assert_allclose(mean(a * y1 + b * y2), a * mean(y1) + b * mean(y2), atol=1e-10)


def test_lml_univariate_standard_normal():
    # K = 0 via zero amplitude, unit noise, y = 0
    val = gp_log_marginal_likelihood(np.zeros(1), TimeGrid(1), SqExpKernelParams(1.0, 0.0), 1.0)
    assert val == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert val == pytest.approx(-0.918939, abs=1e-6)


def test_lml_data_fit_term_decreases_with_noise():
    grid = TimeGrid(6, 0.05)
    y = np.array([1.0, -0.4, 0.2, 0.9, -1.1, 0.3])
    k = SqExpKernelParams(0.1, 1.0)
    fits = []
    for s in (0.1, 0.3, 1.0, 3.0):
        A = sim.sq_exp_kernel(grid.times, k) + s ** 2 * np.eye(6)
        fits.append(-0.5 * y @ np.linalg.solve(A, y))
        # full value still matches the eigen oracle on the 6-point instance
        assert gp_log_marginal_likelihood(y, grid, k, s) == pytest.approx(eig_lml(grid.times, y, 0.1, 1.0, s), abs=1e-8)
    assert all(b > a for a, b in zip(fits, fits[1:]))  # misfit penalty shrinks towards zero


@pytest.mark.parametrize("seed", range(5))
def test_lml_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    grid = TimeGrid(15, 0.02)
    y = rng.normal(size=15)
    theta = rng.normal([-2.0, 0.0, -1.0], 0.3)
    _, grad = gp_lml_and_grad(theta, y, grid)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (gp_lml_and_grad(theta + e, y, grid)[0] - gp_lml_and_grad(theta - e, y, grid)[0]) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-5 * max(1.0, abs(fd))


def test_optimizer_never_worse_than_start():
    grid = TimeGrid(60, 0.01)
    rng = np.random.default_rng(3)
    y = rng.normal(size=60)
    start = (0.3, 2.0, 0.5)
    k, s = gp_optimize_hyperparams(y, grid, init_grid=[start])
    assert gp_log_marginal_likelihood(y, grid, k, s) >= gp_log_marginal_likelihood(
        y, grid, SqExpKernelParams(0.3, 2.0), 0.5)
    with pytest.raises(InvalidArgumentError):
        gp_optimize_hyperparams(y, grid, init_grid=[])


def test_optimizer_recovers_parameters():
    grid = TimeGrid(200, 0.01)
    errs = []
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        k = SqExpKernelParams(0.15, 1.0)
        noise = 0.4
        y = sim.observe_gaussian(sim.sample_gp(grid, k, rng), noise, rng)
        kh, nh = gp_optimize_hyperparams(y, grid)
        errs.append(np.abs(np.log([kh.length_scale, kh.amplitude, nh]) - np.log([0.15, 1.0, 0.4])))
    assert np.all(np.median(errs, axis=0) < 0.5)


# ---------------------------------------------------------------- Kalman family

def random_stable_model(rng, d=2, p=1):
    A = rng.normal(size=(d, d))
    F = 0.95 * A / max(1.0, np.max(np.abs(np.linalg.eigvals(A))))
    B = rng.normal(size=(d, d))
    Q = 0.3 * B @ B.T + 0.05 * np.eye(d)
    H = rng.normal(size=(p, d))
    C = rng.normal(size=(p, p))
    R = C @ C.T + 0.1 * np.eye(p)
    P0 = np.eye(d) * 0.7
    return LinearGaussianModel(F, Q, H, R, rng.normal(size=d), P0)


def joint_gaussian_smoother(model, z):
    """Condition the stacked state vector on all observations with one dense solve."""
    F, Q, H, R = model.transition_matrix, model.process_cov, model.observation_matrix, model.observation_cov
    T, d, p = len(z), len(model.initial_mean), H.shape[0]
    mu = np.empty((T, d))
    marg = [model.initial_cov]
    mu[0] = model.initial_mean
    for k in range(1, T):
        mu[k] = F @ mu[k - 1]
        marg.append(F @ marg[-1] @ F.T + Q)
    S = np.zeros((T * d, T * d))
    for i in range(T):
        S[i * d:(i + 1) * d, i * d:(i + 1) * d] = marg[i]
        block = marg[i]
        for j in range(i + 1, T):
            block = block @ F.T  # Cov(x_i, x_j) = P_i (F^T)^(j-i)
            S[i * d:(i + 1) * d, j * d:(j + 1) * d] = block
            S[j * d:(j + 1) * d, i * d:(i + 1) * d] = block.T
    Hb = np.kron(np.eye(T), H)
    Szz = Hb @ S @ Hb.T + np.kron(np.eye(T), R)
    gain = S @ Hb.T @ np.linalg.inv(Szz)
    mean = mu.ravel() + gain @ (z.ravel() - Hb @ mu.ravel())
    cov = S - gain @ Hb @ S
    return mean.reshape(T, d), cov


@pytest.mark.parametrize("seed", range(10))
def test_rts_matches_joint_gaussian(seed):
    rng = np.random.default_rng(seed)
    model = random_stable_model(rng, d=2 + seed % 2, p=1 + seed % 2)
    z = rng.normal(size=(20, model.observation_matrix.shape[0]))
    out = kalman_rts_smoother(model, z)
    mean, cov = joint_gaussian_smoother(model, z)
    assert np.max(np.abs(out.means - mean)) < 1e-8
    d = len(model.initial_mean)
    for k in range(20):
        np.testing.assert_allclose(out.covariances[k], cov[k * d:(k + 1) * d, k * d:(k + 1) * d], atol=1e-8)
    assert np.all(np.diagonal(out.covariances, axis1=1, axis2=2) <=
                  np.diagonal(out.filtered_covariances, axis1=1, axis2=2) + 1e-12)


def test_rts_noise_free_identity():
    # without any noise the state is constant, so consistent observations are constant too
    z = np.full((15, 1), 1.7)
    model = LinearGaussianModel([[1.0]], [[0.0]], [[1.0]], [[0.0]], [0.0], [[1.0]])
    np.testing.assert_allclose(kalman_rts_smoother(model, z).means, z, atol=1e-12)
    two_d = LinearGaussianModel(np.eye(2), np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)), [0.0, 0.0], np.eye(2))
    zz = np.tile([[0.4, -2.0]], (10, 1))
    np.testing.assert_allclose(kalman_rts_smoother(two_d, zz).means, zz, atol=1e-12)


def test_rts_time_reversal_symmetric_variance():
    a, s = 0.8, 2.0
    model = LinearGaussianModel([[a]], [[(1 - a * a) * s]], [[1.0]], [[0.5]], [0.0], [[s]])
    var = kalman_rts_smoother(model, np.zeros((21, 1))).covariances[:, 0, 0]
    np.testing.assert_allclose(var, var[::-1], atol=1e-8)


def test_singular_innovation_raises():
    model = LinearGaussianModel([[1.0]], [[0.0]], [[1.0]], [[0.0]], [0.0], [[0.0]])
    with pytest.raises(NumericalError):
        kalman_rts_smoother(model, np.array([[1.0]]))


@pytest.mark.parametrize("seed", range(5))
def test_eks_uks_reduce_to_rts(seed):
    rng = np.random.default_rng(100 + seed)
    model = random_stable_model(rng)
    z = rng.normal(size=(20, 1))
    ref = kalman_rts_smoother(model, z)
    eks = extended_kalman_smoother(model.as_nonlinear(), z)
    uks = unscented_kalman_smoother(model.as_nonlinear(), z)
    assert np.max(np.abs(eks.means - ref.means)) < 1e-8
    assert np.sqrt(np.mean((uks.means - ref.means) ** 2)) < 1e-6
    np.testing.assert_allclose(uks.covariances, ref.covariances, atol=1e-6)


def test_unscented_transform_quadratic_exact():
    mu, var = unscented_transform(lambda x: x ** 2, np.zeros(1), np.eye(1))
    assert mu[0] == pytest.approx(1.0, abs=1e-14)
    mu2, _ = unscented_transform(lambda x: x ** 2, np.array([0.5]), np.array([[2.0]]), SigmaParams(0.5, 2.0, 1.0))
    assert mu2[0] == pytest.approx(0.25 + 2.0, abs=1e-12)


def test_sigma_params_constraint():
    with pytest.raises(InvalidArgumentError):
        unscented_transform(lambda x: x, np.zeros(2), np.eye(2), SigmaParams(alpha=1.0, kappa=-2.0))


def test_oscillator_jacobians_valid():
    for scheme in ("semi_implicit", "explicit"):
        model = oscillator_model(OscillatorParams(scheme=scheme), 0.01, 20.0)
        validate_jacobians(model, [np.array([0.3, -2.0]), np.array([5.0, 10.0]), np.array([28.0, 0.0])])
    broken = oscillator_model(OscillatorParams(), 0.01, 20.0)
    broken.transition_jacobian = lambda s: np.eye(2)
    with pytest.raises(InvalidArgumentError):
        validate_jacobians(broken, [np.array([1.0, 1.0])])


def oscillator_trials(count, seed0=0):
    spec = sim.GeneratorSpec("oscillator-gaussian")
    for i in range(count):
        yield sim.generate_trial(spec, seed0 + i)


def test_eks_beats_raw_observations():
    model = oscillator_model(OscillatorParams(), 0.01, 20.0)
    wins = 0
    for pair in oscillator_trials(200):
        est = extended_kalman_smoother(model, pair.observed.values).means[:, 0]
        rmse = np.sqrt(np.mean((est - pair.latent.values) ** 2))
        raw = np.sqrt(np.mean((pair.observed.values - pair.latent.values) ** 2))
        wins += rmse < raw
    assert wins >= 190


def test_eks_small_noise_tracks_observations():
    model = oscillator_model(OscillatorParams(), 0.01, 1e-6)
    pair = next(oscillator_trials(1, 7))
    est = extended_kalman_smoother(model, pair.latent.values).means[:, 0]
    assert np.max(np.abs(est - pair.latent.values)) < 1e-3


def test_uks_finite_on_many_trials():
    model = oscillator_model(OscillatorParams(), 0.01, 20.0)
    for pair in oscillator_trials(1000, 5000):
        out = unscented_kalman_smoother(model, pair.observed.values)
        assert np.all(np.isfinite(out.means))
        assert np.all(np.diagonal(out.covariances, axis1=1, axis2=2) >= 0)


# ---------------------------------------------------------------- Butterworth

def test_design_matches_reference_implementation():
    d = design_butterworth_bandpass()
    b, a = scipy.signal.butter(4, [8, 12], btype="bandpass", fs=100)
    np.testing.assert_allclose(d.numerator, b, atol=1e-12)
    np.testing.assert_allclose(d.denominator, a, atol=1e-12)
    assert d.denominator[0] == pytest.approx(1.0, abs=1e-15)
    assert np.all(np.abs(d.poles()) < 1)
    assert len(d.denominator) == 9


@pytest.mark.parametrize("order,low,high,fs", [(2, 1.0, 5.0, 50.0), (3, 20.0, 30.0, 250.0), (6, 8.0, 13.0, 200.0)])
def test_design_other_bands(order, low, high, fs):
    d = design_butterworth_bandpass(order, low, high, fs)
    b, a = scipy.signal.butter(order, [low, high], btype="bandpass", fs=fs)
    np.testing.assert_allclose(d.denominator, a, atol=1e-10)
    np.testing.assert_allclose(d.numerator, b, atol=1e-10)
    # -3 dB at the band edges; transfer-function form loses digits as the order grows
    assert abs(abs(d.frequency_response([low])[0]) - 1 / math.sqrt(2)) < 1e-4


def test_design_rejects_nyquist():
    with pytest.raises(InvalidArgumentError):
        design_butterworth_bandpass(4, 8.0, 50.0, 100.0)


def steady_state(freq, seconds=20.0):
    t = np.arange(int(seconds * 100)) / 100.0
    x = np.sin(2 * np.pi * freq * t)
    y = butterworth_bandpass_twopass(TimeSeries(x, 0.01)).values
    mid = slice(len(t) // 4, 3 * len(t) // 4)
    return x[mid], y[mid]


def test_passband_amplitude_and_phase():
    x, y = steady_state(10.0)
    gain = np.sqrt(np.mean(y ** 2) / np.mean(x ** 2))
    assert abs(gain - 1) < 0.05
    phase = math.degrees(math.acos(np.clip(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)), -1, 1)))
    assert phase < 1.0
    # frequency-response view: two passes give |H|^2 with zero phase
    h = design_butterworth_bandpass().frequency_response([10.0])[0]
    assert abs(abs(h) ** 2 - 1) < 0.05


def test_stopband_attenuation():
    x, y = steady_state(2.0)
    assert 20 * math.log10(np.sqrt(np.mean(y ** 2) / np.mean(x ** 2))) < -40
    h = design_butterworth_bandpass().frequency_response([2.0])[0]
    assert 20 * math.log10(abs(h) ** 2) < -40


def test_zero_in_zero_out_and_length():
    assert np.all(butterworth_bandpass_twopass(TimeSeries(np.zeros(100))).values == 0)
    assert len(butterworth_bandpass_twopass(TimeSeries(np.ones(37))).values) == 37


def test_twopass_matches_reference_filtfilt():
    x = np.random.default_rng(0).normal(size=300)
    d = design_butterworth_bandpass()
    ref = scipy.signal.filtfilt(d.numerator, d.denominator, x, padtype="odd", padlen=24)
    np.testing.assert_allclose(filter_twopass(x, d.numerator, d.denominator), ref, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_twopass_time_reversal(seed):
    x = np.random.default_rng(seed).normal(size=2000)
    d = design_butterworth_bandpass()
    fwd = filter_twopass(x, d.numerator, d.denominator)
    rev = filter_twopass(x[::-1], d.numerator, d.denominator)[::-1]
    # edge transients of the narrow band decay below 1e-8 within a few hundred samples
    np.testing.assert_allclose(fwd[600:-600], rev[600:-600], atol=1e-8)
