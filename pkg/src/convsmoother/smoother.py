"""The ConvNet smoother: dilated conv stack + dense readout, trained on simulated pairs."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, GradientTape, NetworkWeights, Tensor
from .errors import ArchitectureMismatchError, FormatError, InvalidArgumentError, TrainingDivergedError
from .simulators import Dataset, TimeSeries

log = logging.getLogger(__name__)

DEFAULT_CHANNELS = 60
NORMALIZATION = {"method": "robust", "center": "median", "scale": "iqr", "min_scale": 1e-8}


@dataclass
class ArchitectureSpec:
    signal_length: int
    conv_layers: int
    channels: int = DEFAULT_CHANNELS
    kernel_length: int = 3
    dilation_schedule: list = field(default_factory=list)

    def __post_init__(self):
        if not self.dilation_schedule:
            self.dilation_schedule = ad.dilation_schedule(self.conv_layers)
        if len(self.dilation_schedule) != self.conv_layers:
            raise InvalidArgumentError("dilation schedule length must equal conv_layers")

    @property
    def receptive_field(self):
        return ad.receptive_field(self.dilation_schedule, self.kernel_length)

    def param_shapes(self):
        shapes, names = [], []
        c_in = 1
        for i in range(self.conv_layers):
            shapes += [(self.channels, c_in, self.kernel_length), (self.channels,)]
            names += [f"conv{i}.kernel", f"conv{i}.bias"]
            c_in = self.channels
        n = self.signal_length
        shapes += [(n, self.channels * n), (n,)]
        names += ["dense.weight", "dense.bias"]
        return names, shapes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["signal_length"]), int(d["conv_layers"]), int(d["channels"]), int(d["kernel_length"]),
                   [int(x) for x in d["dilation_schedule"]])


def build_network(n: int, seed=0, channels: int = DEFAULT_CHANNELS):
    """Architecture for signal length ``n`` with He-initialized kernels and zero biases."""
    spec = ArchitectureSpec(n, ad.layer_count_for_signal(n), channels)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    names, shapes = spec.param_shapes()
    params = []
    for name, shape in zip(names, shapes):
        if name.endswith("bias"):
            t = Tensor(np.zeros(shape), requires_grad=True)
        else:
            t = ad.he_init(shape, rng)
        t.name = name
        params.append(t)
    return spec, NetworkWeights(spec.to_dict(), names, params)


def forward(spec: ArchitectureSpec, weights: NetworkWeights, x) -> Tensor:
    """Network output for normalized input of shape ``(n,)`` or ``(batch, n)``."""
    x = np.asarray(x, dtype=np.float64)
    h = Tensor(x[..., None, :])
    p = weights.params
    for i, d in enumerate(spec.dilation_schedule):
        h = ad.relu(ad.conv1d_dilated(h, p[2 * i], p[2 * i + 1], d))
    return ad.dense_readout(h, p[-2], p[-1])


def conv_features(spec, weights, x) -> np.ndarray:
    """Final conv-stack feature map (before the readout)."""
    h = Tensor(np.asarray(x, dtype=np.float64)[..., None, :])
    p = weights.params
    for i, d in enumerate(spec.dilation_schedule):
        h = ad.relu(ad.conv1d_dilated(h, p[2 * i], p[2 * i + 1], d))
    return h.data


def robust_scaling(observed):
    """Per-trial (median, IQR) of each row; IQR floored to keep the transform invertible."""
    y = np.atleast_2d(observed)
    q25, med, q75 = np.percentile(y, [25, 50, 75], axis=-1)
    scale = np.maximum(q75 - q25, NORMALIZATION["min_scale"])
    return med, scale


@dataclass
class TrainConfig:
    batch_size: int = 100
    epochs: int = 2000
    epoch_unit: str = "batch_step"  # or "full_pass"
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 0
    checkpoint_path: str | None = None
    microbatch: int = 0  # 0: whole batch in one chunk
    threads: int = 1
    channels: int = DEFAULT_CHANNELS

    def __post_init__(self):
        if self.epoch_unit not in ("batch_step", "full_pass"):
            raise InvalidArgumentError(f"unknown epoch unit {self.epoch_unit!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgumentError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        """Settings that determine the result; ``threads`` is left out because it does not."""
        d = asdict(self)
        d.pop("threads")
        return d


@dataclass
class TrainedSmoother:
    spec: ArchitectureSpec
    weights: NetworkWeights
    normalization: dict = field(default_factory=lambda: dict(NORMALIZATION))
    provenance: dict = field(default_factory=dict)

    def predict(self, observed):
        """Batched inference on an array of shape ``(n,)`` or ``(batch, n)``."""
        y = np.asarray(observed, dtype=np.float64)
        if y.shape[-1] != self.spec.signal_length:
            raise InvalidArgumentError(
                f"expected {self.spec.signal_length} samples, got {y.shape[-1]}")
        med, scale = robust_scaling(y)
        z = (np.atleast_2d(y) - med[:, None]) / scale[:, None]
        out = forward(self.spec, self.weights, z).data * scale[:, None] + med[:, None]
        return out.reshape(y.shape)


def smooth(model: TrainedSmoother, observed) -> TimeSeries:
    if isinstance(observed, TimeSeries):
        return TimeSeries(model.predict(observed.values), observed.dt)
    return TimeSeries(model.predict(observed))


def _batch_loss_and_grads(spec, weights, y, x, chunk, threads):
    """Sum of per-trial pseudo-Huber losses and its gradients, reduced in fixed chunk order."""
    bounds = [(s, min(s + chunk, len(y))) for s in range(0, len(y), chunk)]

    def work(b):
        with GradientTape() as tape:
            out = forward(spec, weights, y[b[0]:b[1]])
            loss = ad.pseudo_huber_loss(out, x[b[0]:b[1]])
        return loss.data.item(), ad.backward(tape, loss, weights.params)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    total = parts[0][0]
    grads = [g.copy() for g in parts[0][1]]
    for loss, gs in parts[1:]:
        total += loss
        for acc, g in zip(grads, gs):
            acc += g
    return total, grads


def _normalized_pairs(dataset: Dataset):
    med, scale = robust_scaling(dataset.observed)
    y = (dataset.observed - med[:, None]) / scale[:, None]
    x = (dataset.latent - med[:, None]) / scale[:, None]
    return y, x


def _save_checkpoint(path, model, adam, rng, unit, history, config, perm_state):
    perm = perm_state["perm"]
    extra = {
        "kind": "checkpoint",
        "spec": model.spec.to_dict(),
        "normalization": model.normalization,
        "provenance": model.provenance,
        "adam": {"step_count": adam.step_count, "alpha": adam.alpha, "beta1": adam.beta1,
                 "beta2": adam.beta2, "epsilon": adam.epsilon},
        "rng_state": rng.bit_generator.state,
        "unit": unit,
        "history": history,
        "config": config.to_dict(),
        "perm": None if perm is None else [int(i) for i in perm],
        "perm_pos": int(perm_state["pos"]),
    }
    moments = NetworkWeights({}, [f"m{i}" for i in range(len(adam.first_moment))] +
                             [f"v{i}" for i in range(len(adam.second_moment))],
                             [Tensor(a) for a in adam.first_moment + adam.second_moment])
    combined = NetworkWeights(model.weights.architecture, model.weights.names + moments.names,
                              model.weights.params + moments.params)
    ad.save_weights(path, combined, extra)


def initial_network(n, config: TrainConfig):
    """Initialization used by :func:`train` for this config (the "init" seed sub-stream)."""
    init_seq = np.random.SeedSequence(config.seed).spawn(2)[0]
    return build_network(n, np.random.default_rng(init_seq), config.channels)


def train(dataset: Dataset, config: TrainConfig, resume_from=None, progress=None):
    """Minimize the mean per-trial pseudo-Huber loss with Adam.

    Returns ``(TrainedSmoother, loss_history)``; ``loss_history[k]`` is the mean
    batch loss over epoch ``k`` (one mini-batch step or one full pass, per
    ``config.epoch_unit``).
    """
    n = dataset.spec.n
    if config.batch_size > len(dataset):
        raise InvalidArgumentError(f"batch_size {config.batch_size} exceeds dataset size {len(dataset)}")
    spec, weights = initial_network(n, config)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    provenance = {"dataset_hash": dataset.content_hash(), "dataset_manifest": dataset.manifest(),
                  "config": config.to_dict()}
    model = TrainedSmoother(spec, weights, dict(NORMALIZATION), provenance)
    adam = AdamState.for_params(weights.params, alpha=config.alpha, beta1=config.beta1,
                                beta2=config.beta2, epsilon=config.epsilon)
    history: list[float] = []
    start_unit = 0
    count, bsz = len(dataset), config.batch_size
    # one permutation is consumed batch by batch; a fresh one is drawn when exhausted
    perm_state = {"perm": None, "pos": count}
    if resume_from is not None:
        start_unit, history, saved_perm = _restore(resume_from, model, adam, shuffle_rng)
        perm_state.update(saved_perm)

    y, x = _normalized_pairs(dataset)
    steps_per_unit = 1 if config.epoch_unit == "batch_step" else math.ceil(count / bsz)
    chunk = config.microbatch or bsz

    def next_batch():
        if perm_state["pos"] + bsz > count:
            perm_state["perm"] = shuffle_rng.permutation(count)
            perm_state["pos"] = 0
        idx = perm_state["perm"][perm_state["pos"]:perm_state["pos"] + bsz]
        perm_state["pos"] += bsz
        return np.sort(idx)

    for unit in range(start_unit, config.epochs):
        losses = []
        for _ in range(steps_per_unit):
            idx = next_batch()
            total, grads = _batch_loss_and_grads(spec, weights, y[idx], x[idx], chunk, config.threads)
            mean_loss = total / len(idx)
            if not math.isfinite(mean_loss):
                if config.checkpoint_path:
                    _save_checkpoint(config.checkpoint_path, model, adam, shuffle_rng, unit, history, config,
                                     perm_state)
                err = TrainingDivergedError(f"non-finite loss at epoch {unit}")
                err.model = model
                raise err
            for g in grads:
                g /= len(idx)
            ad.adam_step(weights.params, grads, adam)
            losses.append(mean_loss)
        history.append(float(np.mean(losses)))
        if progress is not None:
            progress(unit, history[-1])
        if config.checkpoint_interval and config.checkpoint_path and (unit + 1) % config.checkpoint_interval == 0:
            _save_checkpoint(config.checkpoint_path, model, adam, shuffle_rng, unit + 1, history, config,
                             perm_state)
    model.provenance["final_loss"] = history[-1] if history else None
    model.provenance["epochs_completed"] = len(history)
    return model, history


def _restore(path, model, adam, rng):
    combined, extra = ad.load_weights(path)
    if extra.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a training checkpoint")
    nparams = len(model.weights.params)
    if ArchitectureSpec.from_dict(extra["spec"]) != model.spec:
        raise ArchitectureMismatchError(f"{path}: checkpoint architecture differs from the dataset's")
    for p, src in zip(model.weights.params, combined.params[:nparams]):
        p.data[...] = src.data
    moments = combined.params[nparams:]
    adam.first_moment = [t.data.copy() for t in moments[:nparams]]
    adam.second_moment = [t.data.copy() for t in moments[nparams:]]
    adam.step_count = extra["adam"]["step_count"]
    rng.bit_generator.state = extra["rng_state"]
    perm = extra["perm"]
    perm_state = {"perm": None if perm is None else np.asarray(perm, dtype=np.int64), "pos": extra["perm_pos"]}
    return extra["unit"], list(extra["history"]), perm_state


MODEL_KIND = "trained-smoother"


def save_model(model: TrainedSmoother, path):
    extra = {"kind": MODEL_KIND, "spec": model.spec.to_dict(), "normalization": model.normalization,
             "provenance": model.provenance}
    ad.save_weights(path, model.weights, extra)


def load_model(path, expected_n: int | None = None) -> TrainedSmoother:
    weights, extra = ad.load_weights(path)
    if extra.get("kind") != MODEL_KIND:
        raise FormatError(f"{path}: not a trained smoother container")
    spec = ArchitectureSpec.from_dict(extra["spec"])
    if expected_n is not None and spec.signal_length != expected_n:
        raise ArchitectureMismatchError(
            f"{path}: model expects signal length {spec.signal_length}, requested {expected_n}")
    names, shapes = spec.param_shapes()
    if [tuple(p.shape) for p in weights.params] != [tuple(s) for s in shapes]:
        raise FormatError(f"{path}: parameter shapes do not match the stored architecture")
    return TrainedSmoother(spec, weights, extra["normalization"], extra["provenance"])


def write_loss_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])
