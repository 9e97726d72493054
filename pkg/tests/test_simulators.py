import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convsmoother import simulators as sim
from convsmoother.errors import ConfigurationError, FormatError, InvalidArgumentError, NumericalError
from convsmoother.simulators import (ConditionalNoiseParams, GeneratorSpec, OscillatorParams, SqExpKernelParams,
                                     TimeGrid, TimeSeries)


def test_time_grid():
    g = TimeGrid(5, 0.25)
    np.testing.assert_array_equal(g.times, [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(InvalidArgumentError):
        TimeGrid(0, 0.1)
    with pytest.raises(InvalidArgumentError):
        TimeGrid(3, 0.0)


def test_gp_pointwise_variance():
    grid = TimeGrid(10, 0.05)
    rng = np.random.default_rng(0)
    params = SqExpKernelParams(0.1, 1.7)
    draws = np.stack([sim.sample_gp(grid, params, rng).values for _ in range(10000)])
    np.testing.assert_allclose(draws.var(axis=0), params.amplitude ** 2, rtol=0.05)


def test_gp_far_points_uncorrelated():
    grid = TimeGrid(11, 0.1)
    rng = np.random.default_rng(1)
    draws = np.stack([sim.sample_gp(grid, SqExpKernelParams(0.1, 1.0), rng).values for _ in range(10000)])
    assert abs(np.corrcoef(draws[:, 0], draws[:, 10])[0, 1]) < 0.05


def test_gp_empirical_covariance_matches_kernel():
    grid = TimeGrid(10, 0.05)
    params = SqExpKernelParams(0.12, 1.3)
    rng = np.random.default_rng(2)
    m = 10000
    draws = np.stack([sim.sample_gp(grid, params, rng).values for _ in range(m)])
    emp = draws.T @ draws / m  # zero-mean process
    K = sim.sq_exp_kernel(grid.times, params)
    # standard error of a product of jointly Gaussian variables
    se = np.sqrt((K * K + np.outer(np.diag(K), np.diag(K))) / m)
    assert np.all(np.abs(emp - K) <= 3 * se + 1e-12)


def test_gp_zero_amplitude():
    out = sim.sample_gp(TimeGrid(20), SqExpKernelParams(0.1, 0.0), np.random.default_rng(0))
    assert np.all(out.values == 0)


def test_jitter_ladder_failure():
    with pytest.raises(NumericalError):
        sim.jittered_cholesky(-np.eye(3))


def test_gp_hyperparameter_medians():
    rng = np.random.default_rng(3)
    draws = [sim.sample_gp_hyperparams(rng) for _ in range(20000)]
    ls = np.array([k.length_scale for k, _ in draws])
    amp = np.array([k.amplitude for k, _ in draws])
    noise = np.array([s for _, s in draws])
    assert min(ls.min(), amp.min(), noise.min()) > 0
    assert np.median(ls) == pytest.approx(math.exp(-1.9), rel=0.03)
    assert np.median(amp) == pytest.approx(1.0, rel=0.03)
    assert np.median(noise) == pytest.approx(math.exp(-0.9), rel=0.03)
    assert np.log(ls).std() == pytest.approx(0.8, rel=0.03)


def test_oscillator_fixed_point():
    p = OscillatorParams(dyn_noise_std=0.0, x0=0.0, v0=0.0)
    assert np.all(sim.simulate_oscillator(TimeGrid(200), p, np.random.default_rng(0)).values == 0)


def harmonic_error(dt, beta=0.0):
    n = int(round(2.0 / dt))
    p = OscillatorParams(omega0=5.0, beta=beta, k2=0.0, k3=0.0, dyn_noise_std=0.0, x0=1.0, v0=0.0)
    x = sim.simulate_oscillator(TimeGrid(n, dt), p, np.random.default_rng(0)).values
    t = np.arange(n) * dt
    wd = math.sqrt(25.0 - beta ** 2 / 4)
    exact = np.exp(-beta * t / 2) * (np.cos(wd * t) + beta / (2 * wd) * np.sin(wd * t))
    return np.max(np.abs(x - exact))


@pytest.mark.parametrize("scheme", ["semi_implicit", "explicit"])
def test_harmonic_limit_first_order(scheme):
    errs = []
    for dt in (0.01, 0.005):
        n = int(round(2.0 / dt))
        p = OscillatorParams(omega0=5.0, beta=0.0, k2=0.0, k3=0.0, dyn_noise_std=0.0, x0=1.0, v0=0.0, scheme=scheme)
        x = sim.simulate_oscillator(TimeGrid(n, dt), p, np.random.default_rng(0)).values
        errs.append(np.max(np.abs(x - np.cos(5.0 * np.arange(n) * dt))))
    assert errs[0] <= 25.0 * 2.0 * 0.01  # C*dt with C = omega0**2 * horizon
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.15)


def test_damped_convergence_order():
    dts = [0.01, 0.005, 0.0025, 0.00125]
    errs = [harmonic_error(dt, beta=0.2) for dt in dts]
    order = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert abs(order - 1.0) <= 0.2


def test_oscillator_finite_at_default_parameters():
    grid, p = TimeGrid(200, 0.01), OscillatorParams()
    for seed in range(1000):
        assert np.all(np.isfinite(sim.simulate_oscillator(grid, p, np.random.default_rng(seed)).values))


def test_explicit_scheme_divergence_is_reported():
    p = OscillatorParams(x0=40.0, v0=0.0, dyn_noise_std=0.0, scheme="explicit")
    with pytest.raises(sim.SimulationDivergedError) as info:
        sim.simulate_oscillator(TimeGrid(2000, 0.05), p, np.random.default_rng(0))
    assert info.value.step > 0


def test_observe_gaussian():
    rng = np.random.default_rng(4)
    x = TimeSeries(np.sin(np.arange(100000) * 0.01))
    assert np.array_equal(sim.observe_gaussian(x, 0.0, rng).values, x.values)
    e = sim.observe_gaussian(x, 20.0, rng).values - x.values
    assert e.std() == pytest.approx(20.0, rel=0.01)
    assert abs(np.corrcoef(e[:-1], e[1:])[0, 1]) < 0.02
    with pytest.raises(InvalidArgumentError):
        sim.observe_gaussian(x, -1.0, rng)


def test_jump_process_count_and_shape():
    grid = TimeGrid(200, 0.01)
    params = ConditionalNoiseParams()
    rng = np.random.default_rng(5)
    counts = [len(sim.sample_jump_times(grid.duration, 0.5, rng)) for _ in range(10000)]
    assert np.mean(counts) == pytest.approx(4.0, rel=0.1)
    path = sim.sample_jump_process(grid, params, rng).values
    assert path[0] == 0.0


def test_jump_path_starts_at_zero_and_is_piecewise_constant():
    grid = TimeGrid(200, 0.01)
    for seed in range(50):
        rng = np.random.default_rng(seed)
        jumps = sim.sample_jump_times(grid.duration, 0.5, np.random.default_rng(seed))
        path = sim.sample_jump_process(grid, ConditionalNoiseParams(), rng).values
        assert path[0] == 0.0
        changes = np.flatnonzero(np.diff(path) != 0)
        assert len(changes) <= len(jumps)


def test_jump_intervals_and_heavy_tails():
    rng = np.random.default_rng(6)
    t = sim.sample_jump_times(20000.0, 0.5, rng)
    assert np.diff(t).mean() == pytest.approx(0.5, rel=0.02)
    c = sim.standard_cauchy(np.random.default_rng(7), 10 ** 6)
    assert np.median(np.abs(c)) == pytest.approx(1.0, rel=0.01)  # quartiles of the standard Cauchy are -1, 1
    assert np.var(c[:10 ** 6]) > 10 * np.var(c[:10 ** 3])
    assert np.mean(np.abs(c) > 10) > 100 * math.erfc(10 / math.sqrt(2))


def test_observe_conditional_degenerate():
    grid = TimeGrid(50)
    x = TimeSeries(np.arange(50.0))
    off = ConditionalNoiseParams(trend_slope_std=0.0, jump_mean_interval=math.inf, t_scale_gamma_scale=0.0)
    assert np.array_equal(sim.observe_conditional(x, grid, off, np.random.default_rng(0)).values, x.values)
    with pytest.raises(InvalidArgumentError):
        sim.observe_conditional(TimeSeries(np.zeros(49)), grid, off, np.random.default_rng(0))


def test_observe_conditional_components_sum_exactly():
    grid = TimeGrid(200)
    x = TimeSeries(np.cos(grid.times))
    for seed in range(20):
        y, parts = sim.observe_conditional(x, grid, ConditionalNoiseParams(), np.random.default_rng(seed),
                                           return_components=True)
        assert np.array_equal(y.values, x.values + parts["trend"] + parts["jumps"] + parts["t_noise"])
        assert 2 <= parts["df"] <= 21


def test_conditional_slope_std():
    grid = TimeGrid(20, 0.1)
    x = TimeSeries(np.zeros(20))
    params = ConditionalNoiseParams(jump_mean_interval=math.inf, t_scale_gamma_scale=0.0)
    rng = np.random.default_rng(8)
    slopes = [np.polyfit(grid.times, sim.observe_conditional(x, grid, params, rng).values, 1)[0]
              for _ in range(10000)]
    assert np.std(slopes) == pytest.approx(10.0, rel=0.05)


def test_student_t_kurtosis():
    rng = np.random.default_rng(9)
    kurt = lambda x: np.mean(x ** 4) / np.mean(x ** 2) ** 2 - 3
    for df, expected in [(10, 1.0), (8, 1.5)]:
        x = 0.3 * sim.student_t(rng, df, 10 ** 6)
        assert kurt(x) == pytest.approx(6 / (df - 4), rel=0.25)
        assert np.var(x) == pytest.approx(0.09 * df / (df - 2), rel=0.02)
    heavy = [kurt(sim.student_t(np.random.default_rng(s), 5, 10 ** 5)) for s in range(5)]
    assert np.median(heavy) > kurt(sim.student_t(rng, 10, 10 ** 5))
    assert kurt(sim.student_t(rng, 3, 10 ** 5)) > 6


def test_alpha_waveform_special_cases():
    t = np.arange(200) * 0.01
    zero = sim.alpha_waveform(t, np.ones(200), np.full(200, 20 * np.pi), 0.3, np.zeros(5))
    assert np.all(zero == 0)
    cosine = sim.alpha_waveform(t, np.ones(200), np.full(200, 2 * np.pi * 10), 0.0, [1, 0, 0, 0, 0])
    np.testing.assert_allclose(cosine, np.cos(2 * np.pi * 10 * t), atol=1e-12)
    # the integral phase mode agrees for a constant frequency
    integral = sim.alpha_waveform(t, np.ones(200), np.full(200, 2 * np.pi * 10), 0.0, [1, 0, 0, 0, 0], "integral")
    np.testing.assert_allclose(integral, cosine, atol=1e-9)


def test_taylor_truncation():
    rng = np.random.default_rng(10)
    w = np.stack([sim.sample_taylor_coeffs(3, rng) for _ in range(10000)])
    assert np.all(w[:, [0, 2, 4]] >= 0)
    assert (w[:, [1, 3]] < 0).mean() == pytest.approx(0.5, abs=0.02)


def test_alpha_absent_half():
    grid = TimeGrid(100, 0.01)
    for side, sl in (("first", slice(0, 50)), ("second", slice(50, 100))):
        pair = sim.generate_alpha_trial(grid, sim.AlphaGenParams(), np.random.default_rng(0), absent_half=side)
        assert np.all(pair.latent.values[sl] == 0)
        assert np.any(pair.latent.values != 0)


@pytest.mark.parametrize("name", sim.GENERATORS)
def test_generate_trial_reproducible(name):
    spec = GeneratorSpec(name, n=100)
    a, b = sim.generate_trial(spec, 1234), sim.generate_trial(spec, 1234)
    assert np.array_equal(a.latent.values, b.latent.values)
    assert np.array_equal(a.observed.values, b.observed.values)
    assert len(a.latent) == len(a.observed) == 100
    if name == "gp-identity":
        assert np.array_equal(a.latent.values, a.observed.values)


def test_unknown_generator():
    with pytest.raises(ConfigurationError):
        GeneratorSpec("brownian")


@settings(max_examples=10, deadline=None)
@given(master=st.integers(0, 2 ** 32), index=st.integers(0, 30))
def test_single_trial_regenerates_from_dataset(master, index):
    spec = GeneratorSpec("oscillator-conditional", n=40)
    ds = sim.build_dataset(spec, index + 1, master)
    pair = sim.generate_trial(spec, int(ds.seeds[index]))
    assert np.array_equal(pair.observed.values, ds.observed[index])
    assert int(ds.seeds[index]) == sim.trial_seed(master, index)


def test_build_dataset_deterministic_and_thread_independent():
    spec = GeneratorSpec("alpha", n=100)
    a = sim.build_dataset(spec, 30, 9)
    b = sim.build_dataset(spec, 30, 9, threads=4)
    assert a.content_hash() == b.content_hash()
    assert a.manifest()["generator"] == spec.to_dict()
    assert sim.build_dataset(spec, 30, 10).content_hash() != a.content_hash()
    with pytest.raises(InvalidArgumentError):
        sim.build_dataset(spec, 0, 9)


def test_dataset_round_trip(tmp_path):
    ds = sim.build_dataset(GeneratorSpec("gp", n=50), 12, 3)
    sim.save_dataset(tmp_path / "a.npz", ds)
    sim.save_dataset(tmp_path / "b.npz", ds)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = sim.load_dataset(tmp_path / "a.npz")
    assert back.content_hash() == ds.content_hash()
    assert back.meta == ds.meta
    (tmp_path / "bad.npz").write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        sim.load_dataset(tmp_path / "bad.npz")
    with pytest.raises(FileNotFoundError):
        sim.load_dataset(tmp_path / "missing.npz")


def test_csv_export(tmp_path):
    ds = sim.build_dataset(GeneratorSpec("oscillator-gaussian", n=20), 3, 1)
    sim.export_csv(tmp_path / "d.csv", ds)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].startswith(sim.CSV_MAGIC)
    assert lines[1] == "trial,index,t,latent,observed"
    assert len(lines) == 2 + 60
    rows = np.loadtxt(tmp_path / "d.csv", delimiter=",", skiprows=2)
    np.testing.assert_array_equal(rows[:, 4].reshape(3, 20), ds.observed)
