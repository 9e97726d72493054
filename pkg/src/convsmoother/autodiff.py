"""Minimal reverse-mode differentiation engine and network primitives.

Operations work on :class:`Tensor` objects holding float64 numpy arrays. While a
:class:`GradientTape` is active every primitive appends a record to it, and
:func:`backward` replays those records in reverse to accumulate gradients.

The convolution and readout primitives accept either a single example with
shape ``(channels, n)`` or a batch with shape ``(batch, channels, n)``.
"""

from __future__ import annotations

import threading
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .containers import read_header, write_npz
from .errors import FormatError, InvalidArgumentError, StateError, TrainingDivergedError

WEIGHTS_FORMAT = "convsmoother-weights"
WEIGHTS_VERSION = 1


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple
    backward_fn: Callable[[np.ndarray], tuple]


class GradientTape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives executed inside the ``with`` block are
    recorded. Tapes do not nest; each thread has its own active tape.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[_Record] = []

    @classmethod
    def active(cls):
        return getattr(cls._local, "tape", None)

    def __enter__(self):
        if GradientTape.active() is not None:
            raise StateError("a gradient tape is already recording")
        GradientTape._local.tape = self
        return self

    def __exit__(self, *exc):
        GradientTape._local.tape = None
        return False

    def __len__(self):
        return len(self.records)


def _record(output, inputs, backward_fn):
    tape = GradientTape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.records.append(_Record(output, tuple(inputs), backward_fn))
    return output


def _batched(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x[None], False
    if x.ndim == 3:
        return x, True
    raise InvalidArgumentError(f"{what} must have shape (ch, n) or (batch, ch, n), got {x.shape}")


def conv1d_dilated(input, kernels, bias, dilation: int) -> Tensor:
    """Same-length dilated 1-D convolution with zero padding.

    ``out[c, t] = bias[c] + sum_{c', k} kernels[c, c', k] * input[c', t + (k - h) * dilation]``
    where ``h = (kernel_length - 1) // 2``, so a length-3 kernel taps offsets
    ``-dilation, 0, +dilation``.
    """
    input, kernels, bias = as_tensor(input), as_tensor(kernels), as_tensor(bias)
    x, batched = _batched(input.data, "input")
    w, b = kernels.data, bias.data
    if w.ndim != 3:
        raise InvalidArgumentError(f"kernels must be (out_ch, in_ch, k), got {w.shape}")
    out_ch, in_ch, klen = w.shape
    if klen % 2 != 1:
        raise InvalidArgumentError("kernel length must be odd")
    if x.shape[1] != in_ch:
        raise InvalidArgumentError(f"kernels expect {in_ch} input channels, input has {x.shape[1]}")
    if b.shape != (out_ch,):
        raise InvalidArgumentError(f"bias must have shape ({out_ch},), got {b.shape}")
    if int(dilation) < 1:
        raise InvalidArgumentError("dilation must be >= 1")
    d = int(dilation)
    bsz, _, n = x.shape
    pad = (klen - 1) // 2 * d
    width = n + 2 * pad
    # Channel-major padded layout: every example owns a zero-padded block of
    # `width` columns, so each tap is one 2-D matmul on a shifted column window.
    span = bsz * width - 2 * pad
    xp = np.zeros((in_ch, bsz, width))
    xp[:, :, pad:pad + n] = x.transpose(1, 0, 2)
    xf = xp.reshape(in_ch, bsz * width)
    taps = [np.ascontiguousarray(w[:, :, k]) for k in range(klen)]
    acc = np.zeros((out_ch, bsz * width))
    tmp = np.empty((out_ch, span))
    for k in range(klen):
        np.matmul(taps[k], xf[:, k * d:k * d + span], out=tmp)
        acc[:, pad:pad + span] += tmp
    out = np.empty((bsz, out_ch, n))
    out[...] = acc.reshape(out_ch, bsz, width)[:, :, pad:pad + n].transpose(1, 0, 2)
    out += b[:, None]
    result = Tensor(out if batched else out[0])

    def backward_fn(g):
        g3 = g if batched else g[None]
        gp = np.zeros((out_ch, bsz, width))
        gp[:, :, pad:pad + n] = g3.transpose(1, 0, 2)
        gf = gp.reshape(out_ch, bsz * width)[:, pad:pad + span]
        gw = np.empty_like(w)
        gxf = np.zeros((in_ch, bsz * width))
        tmp = np.empty((in_ch, span))
        for k in range(klen):
            window = xf[:, k * d:k * d + span]
            gw[:, :, k] = gf @ window.T
            np.matmul(taps[k].T, gf, out=tmp)
            gxf[:, k * d:k * d + span] += tmp
        gx = np.empty((bsz, in_ch, n))
        gx[...] = gxf.reshape(in_ch, bsz, width)[:, :, pad:pad + n].transpose(1, 0, 2)
        gb = g3.sum(axis=(0, 2))
        return (gx if batched else gx[0]), gw, gb

    return _record(result, (input, kernels, bias), backward_fn)


def relu(input) -> Tensor:
    input = as_tensor(input)
    mask = input.data > 0
    result = Tensor(np.maximum(input.data, 0.0))
    return _record(result, (input,), lambda g: (np.multiply(g, mask),))


def dense_readout(input, weights, bias) -> Tensor:
    """Fully connected map from the flattened ``(ch, n)`` feature map to ``bias``'s length."""
    input, weights, bias = as_tensor(input), as_tensor(weights), as_tensor(bias)
    x, batched = _batched(input.data, "input")
    bsz = x.shape[0]
    flat = x.reshape(bsz, -1)
    w, b = weights.data, bias.data
    if w.ndim != 2 or w.shape[1] != flat.shape[1]:
        raise InvalidArgumentError(
            f"weights must have {flat.shape[1]} columns to match the flattened input, got {w.shape}")
    if b.shape != (w.shape[0],):
        raise InvalidArgumentError(f"bias must have shape ({w.shape[0]},), got {b.shape}")
    out = flat @ w.T + b
    result = Tensor(out if batched else out[0])

    def backward_fn(g):
        g2 = g if batched else g[None]
        gx = (g2 @ w).reshape(x.shape)
        return (gx if batched else gx[0]), g2.T @ flat, g2.sum(axis=0)

    return _record(result, (input, weights, bias), backward_fn)


def pseudo_huber_loss(prediction, target, mean_over_batch=False) -> Tensor:
    """Sum of ``sqrt(1 + r**2) - 1`` over all residuals ``r = target - prediction``.

    With ``mean_over_batch`` the sum is divided by the leading (batch) extent.
    """
    prediction = as_tensor(prediction)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise InvalidArgumentError(f"length mismatch: {prediction.shape} vs {target.shape}")
    r = target - prediction.data
    root = np.hypot(1.0, r)  # no overflow for huge residuals
    small = np.abs(r) < 1.0
    # r^2 / (root + 1) == root - 1 without cancellation near zero
    terms = np.where(small, np.where(small, r, 0.0) ** 2 / (root + 1.0), root - 1.0)
    scale = 1.0 / prediction.shape[0] if (mean_over_batch and prediction.data.ndim > 1) else 1.0
    result = Tensor(scale * float(np.sum(terms)))

    def grad(g):
        with np.errstate(invalid="ignore"):  # infinite residuals: non-finite loss is reported by the caller
            return (g * scale * (-r / root),)

    return _record(result, (prediction,), grad)


def backward(tape: GradientTape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Replay ``tape`` in reverse and return d(loss)/d(param) for each of ``params``.

    Parameters that do not influence ``loss`` receive an exactly-zero gradient.
    The ``grad`` attribute of each parameter is set as a side effect.
    """
    if not tape.records:
        raise StateError("backward called before any forward pass was recorded")
    if loss.data.size != 1:
        raise InvalidArgumentError("loss must be a scalar")
    if not any(rec.output is loss for rec in tape.records):
        raise StateError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward_fn(g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = []
    for p in params:
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        p.grad = g
        result.append(g)
    return result


@dataclass
class AdamState:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        state.first_moment = [np.zeros(p.shape) for p in params]
        state.second_moment = [np.zeros(p.shape) for p in params]
        return state


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads):
        raise InvalidArgumentError("params and grads differ in length")
    if not state.first_moment:
        state.first_moment = [np.zeros(p.shape) for p in params]
        state.second_moment = [np.zeros(p.shape) for p in params]
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for parameter {i}")
        if g.shape != params[i].shape or state.first_moment[i].shape != g.shape:
            raise InvalidArgumentError(f"shape mismatch for parameter {i}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        denom = np.sqrt(v / c2)
        denom += state.epsilon
        step = m * (state.alpha / c1)
        step /= denom
        p.data -= step
    return params, state


def he_init(shape, rng: np.random.Generator, fan_in=None) -> Tensor:
    """Zero-mean Gaussian with std ``sqrt(2 / fan_in)``; fan-in defaults to ``prod(shape[1:])``."""
    shape = tuple(int(s) for s in shape)
    if fan_in is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    if fan_in < 1:
        raise InvalidArgumentError("fan-in must be positive")
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)


def receptive_field(dilations: Sequence[int], kernel_length: int = 3) -> int:
    return 1 + (kernel_length - 1) * int(sum(dilations))


def dilation_schedule(m: int) -> list[int]:
    """``(1, 1, 2, 4, ..., 2**(m-2))``."""
    if m < 1:
        raise InvalidArgumentError("need at least one layer")
    return [1] + [2 ** i for i in range(m - 1)]


def layer_count_for_signal(n: int) -> int:
    """Largest layer count whose receptive field stays below ``n``."""
    n = int(n)
    if n < 6:
        raise InvalidArgumentError(f"signal length {n} too short for two dilated layers")
    m = 2
    while receptive_field(dilation_schedule(m + 1)) < n:
        m += 1
    return m


@dataclass
class NetworkWeights:
    """Parameter tensors plus the architecture that gives them meaning."""

    architecture: dict
    names: list
    params: list

    def arrays(self):
        return [p.data for p in self.params]

    def copy(self):
        return NetworkWeights(dict(self.architecture), list(self.names),
                              [Tensor(p.data.copy(), requires_grad=True, name=p.name) for p in self.params])


def save_weights(path, weights: NetworkWeights, extra: dict | None = None):
    header = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "architecture": weights.architecture,
        "names": list(weights.names),
        "extra": extra or {},
    }
    write_npz(path, header, {f"p{i:03d}": p.data for i, p in enumerate(weights.params)})


def load_weights(path) -> tuple[NetworkWeights, dict]:
    """Inverse of :func:`save_weights`; returns the weights and the ``extra`` block."""
    try:
        with np.load(path, allow_pickle=False) as z:
            header = read_header(z)
            arrays = [z[f"p{i:03d}"] for i in range(len(header["names"]))]
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, OSError, EOFError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable weights container ({exc})") from exc
    if header.get("format") != WEIGHTS_FORMAT:
        raise FormatError(f"{path}: not a weights container")
    if header.get("version") != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported container version {header.get('version')}")
    params = [Tensor(a, requires_grad=True, name=nm) for a, nm in zip(arrays, header["names"])]
    return NetworkWeights(header["architecture"], list(header["names"]), params), header["extra"]
