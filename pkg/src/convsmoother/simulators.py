"""Generative models for (latent, observation) training pairs.

Every generator is a pure function of a ``numpy.random.Generator``; datasets
derive one seed per trial from ``(master_seed, index)`` so that any trial can be
regenerated on its own.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .containers import read_header, write_npz
from .errors import ConfigurationError, FormatError, InvalidArgumentError, NumericalError, SimulationDivergedError

DATASET_FORMAT = "convsmoother-dataset"
DATASET_VERSION = 1
CSV_MAGIC = "# convsmoother-dataset-csv v1"


@dataclass(frozen=True)
class TimeGrid:
    n: int = 200
    dt: float = 0.01

    def __post_init__(self):
        if self.n < 1 or not self.dt > 0:
            raise InvalidArgumentError("TimeGrid needs n >= 1 and dt > 0")

    @property
    def times(self):
        return np.arange(self.n) * self.dt

    @property
    def duration(self):
        return self.n * self.dt


@dataclass
class TimeSeries:
    values: np.ndarray
    dt: float = 0.01

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def __len__(self):
        return len(self.values)

    @property
    def times(self):
        return np.arange(len(self.values)) * self.dt


@dataclass(frozen=True)
class SqExpKernelParams:
    length_scale: float = 0.15
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.length_scale > 0 or self.amplitude < 0:
            raise InvalidArgumentError("length scale must be positive, amplitude non-negative")


@dataclass(frozen=True)
class OscillatorParams:
    omega0: float = 5.0
    beta: float = 0.2
    k2: float = 15.0
    k3: float = -0.5
    dyn_noise_std: float = 10.0
    x0: float | None = None  # None: draw N(0, 1)
    v0: float | None = None  # None: draw N(0, omega0**2)
    scheme: str = "semi_implicit"

    def __post_init__(self):
        if self.dyn_noise_std < 0:
            raise InvalidArgumentError("dyn_noise_std must be non-negative")
        if self.scheme not in ("semi_implicit", "explicit"):
            raise InvalidArgumentError(f"unknown integration scheme {self.scheme!r}")

    def drift(self, x, v):
        return -self.omega0 ** 2 * x - self.beta * v + self.k2 * x * x + self.k3 * x ** 3


@dataclass(frozen=True)
class ConditionalNoiseParams:
    trend_slope_std: float = 10.0
    jump_mean_interval: float = 0.5
    jump_scale: float = 1.5
    t_scale_gamma_scale: float = 0.3
    t_scale_gamma_shape: float = 2.0
    t_df_range: tuple = (2, 21)

    def __post_init__(self):
        lo, hi = self.t_df_range
        if lo > hi or lo < 1:
            raise InvalidArgumentError("t_df_range must be a non-empty range of positive integers")


def _alpha_noise_default():
    return ConditionalNoiseParams(trend_slope_std=0.5, jump_mean_interval=1.0, jump_scale=0.2,
                                  t_scale_gamma_scale=0.3, t_scale_gamma_shape=2.0, t_df_range=(2, 21))


@dataclass(frozen=True)
class AlphaGenParams:
    envelope_gp: SqExpKernelParams = SqExpKernelParams(0.5, 1.0)
    freq_gp: SqExpKernelParams = SqExpKernelParams(1.0, 2 * math.pi)
    freq_mean: float = 2 * math.pi * 10.0
    taylor_df: int = 3
    phase_mode: str = "literal"  # or "integral": phase = cumulative integral of omega
    noise: ConditionalNoiseParams = field(default_factory=_alpha_noise_default)
    absent_half_prob: float = 0.25

    def __post_init__(self):
        if self.phase_mode not in ("literal", "integral"):
            raise InvalidArgumentError(f"unknown phase mode {self.phase_mode!r}")


@dataclass
class TrialPair:
    latent: TimeSeries
    observed: TimeSeries
    generator_seed: int
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------- primitives

def sq_exp_kernel(times, params: SqExpKernelParams):
    diff = times[:, None] - times[None, :]
    return params.amplitude ** 2 * np.exp(-0.5 * (diff / params.length_scale) ** 2)


def jittered_cholesky(K, scale=1.0, start=1e-10, stop=1e-4):
    """Cholesky factor of ``K + jitter*scale*I`` for the smallest jitter on the ladder that works."""
    jitter = start
    eye = np.eye(K.shape[0])
    while jitter <= stop * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * scale * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError(f"Cholesky failed with jitter up to {stop:g}")


def sample_gp(grid: TimeGrid, params: SqExpKernelParams, rng: np.random.Generator) -> TimeSeries:
    if params.amplitude == 0:
        rng.standard_normal(grid.n)
        return TimeSeries(np.zeros(grid.n), grid.dt)
    L = jittered_cholesky(sq_exp_kernel(grid.times, params), scale=params.amplitude ** 2)
    return TimeSeries(L @ rng.standard_normal(grid.n), grid.dt)


def sample_gp_hyperparams(rng: np.random.Generator):
    """Log-normal draws: length scale (mu -1.9, sigma 0.8), amplitude (0, 0.5), noise std (-0.9, 0.5)."""
    length = float(np.exp(rng.normal(-1.9, 0.8)))
    amp = float(np.exp(rng.normal(0.0, 0.5)))
    noise = float(np.exp(rng.normal(-0.9, 0.5)))
    return SqExpKernelParams(length, amp), noise


def sample_initial_state(params: OscillatorParams, rng):
    x0 = rng.normal() if params.x0 is None else params.x0
    v0 = rng.normal() * params.omega0 if params.v0 is None else params.v0
    return float(x0), float(v0)


def oscillator_step(x, v, params: OscillatorParams, dt, noise):
    """One Euler-Maruyama step; ``noise`` is the standard-normal increment driver."""
    a = params.drift(x, v)
    if params.scheme == "explicit":
        return x + v * dt, v + a * dt + params.dyn_noise_std * math.sqrt(dt) * noise
    v_new = v + a * dt + params.dyn_noise_std * math.sqrt(dt) * noise
    return x + v_new * dt, v_new


def simulate_oscillator(grid: TimeGrid, params: OscillatorParams, rng: np.random.Generator) -> TimeSeries:
    x, v = sample_initial_state(params, rng)
    xi = rng.standard_normal(grid.n)
    out = np.empty(grid.n)
    with np.errstate(over="ignore", invalid="ignore"):  # overflow surfaces as the divergence error below
        for j in range(grid.n):
            if not (math.isfinite(x) and math.isfinite(v)):
                raise SimulationDivergedError(f"oscillator state became non-finite at step {j}", step=j)
            out[j] = x
            x, v = oscillator_step(x, v, params, grid.dt, xi[j])
    return TimeSeries(out, grid.dt)


def observe_gaussian(latent: TimeSeries, noise_std: float, rng) -> TimeSeries:
    if noise_std < 0:
        raise InvalidArgumentError("noise_std must be non-negative")
    return TimeSeries(latent.values + noise_std * rng.standard_normal(len(latent)), latent.dt)


def standard_cauchy(rng, size):
    return np.tan(np.pi * (rng.uniform(size=size) - 0.5))


def student_t(rng, df, size):
    return rng.standard_normal(size) / np.sqrt(rng.chisquare(df, size=size) / df)


def sample_jump_times(duration, mean_interval, rng):
    if not math.isfinite(mean_interval):
        return np.empty(0)
    times = []
    t = rng.exponential(mean_interval)
    while t < duration:
        times.append(t)
        t += rng.exponential(mean_interval)
    return np.asarray(times)


def sample_jump_process(grid: TimeGrid, params: ConditionalNoiseParams, rng) -> TimeSeries:
    """Piecewise-constant path from 0 with exponential waiting times and Cauchy increments."""
    jumps = sample_jump_times(grid.duration, params.jump_mean_interval, rng)
    sizes = params.jump_scale * standard_cauchy(rng, len(jumps))
    # level at t_j includes every jump with time <= t_j
    counts = np.searchsorted(jumps, grid.times, side="right")
    levels = np.concatenate([[0.0], np.cumsum(sizes)])
    return TimeSeries(levels[counts], grid.dt)


def observe_conditional(latent: TimeSeries, grid: TimeGrid, params: ConditionalNoiseParams, rng,
                        return_components=False):
    """``y = x + slope*t + jumps + scaled Student-t noise`` with all noise parameters redrawn per call."""
    if len(latent) != grid.n:
        raise InvalidArgumentError(f"latent has {len(latent)} samples, grid has {grid.n}")
    slope = rng.normal(0.0, params.trend_slope_std) if params.trend_slope_std > 0 else 0.0
    trend = slope * grid.times
    jumps = sample_jump_process(grid, params, rng).values
    scale = rng.gamma(params.t_scale_gamma_shape, params.t_scale_gamma_scale) if params.t_scale_gamma_scale > 0 else 0.0
    df = int(rng.integers(params.t_df_range[0], params.t_df_range[1] + 1))
    noise = scale * student_t(rng, df, grid.n)
    y = TimeSeries(latent.values + trend + jumps + noise, grid.dt)
    if return_components:
        return y, {"trend": trend, "jumps": jumps, "t_noise": noise, "slope": slope, "t_scale": scale, "df": df}
    return y


def taylor_waveform(a, coeffs):
    """``w1*a + w2*a**2 + ... + w5*a**5``."""
    return sum(w * a ** (k + 1) for k, w in enumerate(coeffs))


def alpha_waveform(times, envelope, omega, phi0, coeffs, phase_mode="literal"):
    if phase_mode == "literal":
        phase = omega * times + phi0
    else:
        dt = times[1] - times[0] if len(times) > 1 else 1.0
        phase = phi0 + np.concatenate([[0.0], np.cumsum(omega[:-1]) * dt])
    return envelope * taylor_waveform(np.cos(phase), coeffs)


def sample_taylor_coeffs(df, rng):
    w = rng.standard_t(df, size=5)
    w[[0, 2, 4]] = np.abs(w[[0, 2, 4]])  # odd orders: t truncated to [0, inf)
    return w


def generate_alpha_trial(grid: TimeGrid, params: AlphaGenParams, rng, absent_half=None) -> TrialPair:
    """Synthetic alpha-band trial.

    ``absent_half`` forces the envelope to zero on the first (``"first"``) or
    second (``"second"``) half; ``None`` draws it with ``params.absent_half_prob``.
    """
    envelope = sample_gp(grid, params.envelope_gp, rng).values
    omega = params.freq_mean + sample_gp(grid, params.freq_gp, rng).values
    phi0 = rng.uniform(0.0, 2 * np.pi)
    coeffs = sample_taylor_coeffs(params.taylor_df, rng)
    choice = rng.uniform()
    side = rng.integers(2)
    if absent_half is None and choice < params.absent_half_prob:
        absent_half = ("first", "second")[side]
    if absent_half is not None:
        half = grid.n // 2
        if absent_half == "first":
            envelope[:half] = 0.0
        else:
            envelope[half:] = 0.0
    latent = TimeSeries(alpha_waveform(grid.times, envelope, omega, phi0, coeffs, params.phase_mode), grid.dt)
    observed = observe_conditional(latent, grid, params.noise, rng)
    meta = {"absent_half": absent_half, "coeffs": coeffs.tolist(), "phi0": float(phi0)}
    return TrialPair(latent, observed, generator_seed=-1, meta=meta)


# ---------------------------------------------------------------- datasets

GENERATORS = ("gp", "gp-identity", "oscillator-gaussian", "oscillator-conditional", "alpha")


@dataclass
class GeneratorSpec:
    """Names a generator family plus its grid and overrides.

    ``options`` accepts: ``obs_noise_std`` (oscillator-gaussian), ``dyn_noise_std``,
    ``absent_half`` (alpha), ``absent_half_prob`` (alpha).
    """

    name: str
    n: int = 200
    dt: float = 0.01
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in GENERATORS:
            raise ConfigurationError(f"unknown generator {self.name!r}; choose from {', '.join(GENERATORS)}")

    @property
    def grid(self):
        return TimeGrid(self.n, self.dt)

    def to_dict(self):
        return {"name": self.name, "n": self.n, "dt": self.dt, "options": dict(self.options)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], int(d["n"]), float(d["dt"]), dict(d.get("options", {})))


def _oscillator_params(spec):
    return OscillatorParams(dyn_noise_std=float(spec.options.get("dyn_noise_std", 10.0)))


def generate_trial(spec: GeneratorSpec, seed: int) -> TrialPair:
    rng = np.random.default_rng(seed)
    grid = spec.grid
    if spec.name in ("gp", "gp-identity"):
        kernel, noise = sample_gp_hyperparams(rng)
        latent = sample_gp(grid, kernel, rng)
        if spec.name == "gp-identity":
            observed = TimeSeries(latent.values.copy(), grid.dt)
        else:
            observed = observe_gaussian(latent, noise, rng)
        meta = {"length_scale": kernel.length_scale, "amplitude": kernel.amplitude, "noise_std": noise}
    elif spec.name == "oscillator-gaussian":
        latent = simulate_oscillator(grid, _oscillator_params(spec), rng)
        noise = float(spec.options.get("obs_noise_std", 20.0))
        observed = observe_gaussian(latent, noise, rng)
        meta = {"noise_std": noise}
    elif spec.name == "oscillator-conditional":
        latent = simulate_oscillator(grid, _oscillator_params(spec), rng)
        observed, parts = observe_conditional(latent, grid, ConditionalNoiseParams(), rng, return_components=True)
        meta = {"slope": float(parts["slope"]), "t_scale": float(parts["t_scale"]), "df": parts["df"]}
    else:
        params = AlphaGenParams(absent_half_prob=float(spec.options.get("absent_half_prob", 0.25)))
        pair = generate_alpha_trial(grid, params, rng, absent_half=spec.options.get("absent_half"))
        latent, observed, meta = pair.latent, pair.observed, pair.meta
    return TrialPair(latent, observed, int(seed), meta)


def trial_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class Dataset:
    spec: GeneratorSpec
    master_seed: int
    latent: np.ndarray
    observed: np.ndarray
    seeds: np.ndarray
    meta: list

    def __len__(self):
        return len(self.seeds)

    @property
    def count(self):
        return len(self.seeds)

    def trial(self, i) -> TrialPair:
        return TrialPair(TimeSeries(self.latent[i], self.spec.dt), TimeSeries(self.observed[i], self.spec.dt),
                         int(self.seeds[i]), self.meta[i])

    def manifest(self):
        return {"format": DATASET_FORMAT, "version": DATASET_VERSION, "generator": self.spec.to_dict(),
                "master_seed": int(self.master_seed), "count": self.count,
                "grid": {"n": self.spec.n, "dt": self.spec.dt}}

    def content_hash(self):
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode())
        h.update(self.latent.tobytes())
        h.update(self.observed.tobytes())
        return h.hexdigest()


def build_dataset(spec: GeneratorSpec, count: int, master_seed: int, threads: int = 1) -> Dataset:
    if isinstance(spec, str):
        spec = GeneratorSpec(spec)
    if count < 1:
        raise InvalidArgumentError("count must be >= 1")
    seeds = [trial_seed(master_seed, i) for i in range(count)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            trials = list(pool.map(lambda s: generate_trial(spec, s), seeds))
    else:
        trials = [generate_trial(spec, s) for s in seeds]
    return Dataset(spec, int(master_seed),
                   np.stack([t.latent.values for t in trials]),
                   np.stack([t.observed.values for t in trials]),
                   np.asarray(seeds, dtype=np.uint64), [t.meta for t in trials])


def save_dataset(path, ds: Dataset):
    header = dict(ds.manifest(), meta=ds.meta)
    write_npz(path, header, {"latent": ds.latent, "observed": ds.observed, "seeds": ds.seeds},
              header_key="__manifest__")


def load_dataset(path) -> Dataset:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = read_header(z, "__manifest__")
            latent, observed, seeds = z["latent"], z["observed"], z["seeds"]
    except (zipfile.BadZipFile, OSError, EOFError, KeyError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"{path}: unreadable dataset container ({exc})") from exc
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset format/version")
    return Dataset(GeneratorSpec.from_dict(header["generator"]), header["master_seed"], latent, observed, seeds,
                   header["meta"])


def export_csv(path, ds: Dataset):
    """Columns ``trial,index,t,latent,observed``; first line carries the manifest as JSON."""
    t = np.arange(ds.spec.n) * ds.spec.dt
    with open(path, "w") as fh:
        fh.write(f"{CSV_MAGIC} {json.dumps(ds.manifest(), sort_keys=True)}\n")
        fh.write("trial,index,t,latent,observed\n")
        for i in range(ds.count):
            for j in range(ds.spec.n):
                fh.write(f"{i},{j},{float(t[j])!r},{float(ds.latent[i, j])!r},{float(ds.observed[i, j])!r}\n")


def describe(obj):
    """JSON-ready dict of a (possibly nested) params dataclass."""
    return dataclasses.asdict(obj)
