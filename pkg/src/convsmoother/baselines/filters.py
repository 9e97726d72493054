"""Butterworth band-pass design (bilinear transform) and two-pass zero-phase filtering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter, lfilter_zi

from ..errors import InvalidArgumentError
from ..simulators import TimeSeries


@dataclass
class ButterworthDesign:
    order: int
    low_hz: float
    high_hz: float
    sample_rate_hz: float
    numerator: np.ndarray
    denominator: np.ndarray

    def poles(self):
        return np.roots(self.denominator)

    def frequency_response(self, freqs_hz):
        z = np.exp(2j * np.pi * np.asarray(freqs_hz, dtype=float) / self.sample_rate_hz)
        return np.polyval(self.numerator[::-1], 1 / z) / np.polyval(self.denominator[::-1], 1 / z)

    def to_text(self):
        lines = [f"# butterworth bandpass order={self.order} low_hz={self.low_hz!r} "
                 f"high_hz={self.high_hz!r} fs={self.sample_rate_hz!r}"]
        lines.append("b " + " ".join(repr(float(c)) for c in self.numerator))
        lines.append("a " + " ".join(repr(float(c)) for c in self.denominator))
        return "\n".join(lines) + "\n"


def design_butterworth_bandpass(order=4, low_hz=8.0, high_hz=12.0, sample_rate_hz=100.0) -> ButterworthDesign:
    """Analog prototype -> low-pass to band-pass -> bilinear transform with prewarped edges.

    A prototype of ``order`` poles yields a digital filter with ``2*order`` poles.
    """
    if order < 1:
        raise InvalidArgumentError("order must be positive")
    nyq = sample_rate_hz / 2
    if not 0 < low_hz < high_hz:
        raise InvalidArgumentError("need 0 < low_hz < high_hz")
    if high_hz >= nyq:
        raise InvalidArgumentError(f"band edge {high_hz} Hz at or above Nyquist ({nyq} Hz)")
    fs2 = 2.0 * sample_rate_hz
    w1 = fs2 * np.tan(np.pi * low_hz / sample_rate_hz)
    w2 = fs2 * np.tan(np.pi * high_hz / sample_rate_hz)
    bw, w0 = w2 - w1, np.sqrt(w1 * w2)

    k = np.arange(1, order + 1)
    proto = np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))
    # each prototype pole p maps to the roots of s^2 - p*bw*s + w0^2
    disc = np.sqrt((proto * bw) ** 2 - 4 * w0 ** 2 + 0j)
    poles_a = np.concatenate([(proto * bw + disc) / 2, (proto * bw - disc) / 2])
    gain_a = bw ** order  # zeros: `order` at s=0, `order` at infinity

    poles_d = (fs2 + poles_a) / (fs2 - poles_a)
    zeros_d = np.concatenate([np.ones(order), -np.ones(order)])
    gain_d = gain_a * np.real(fs2 ** order / np.prod(fs2 - poles_a))
    b = gain_d * np.real(np.poly(zeros_d))
    a = np.real(np.poly(poles_d))
    return ButterworthDesign(order, float(low_hz), float(high_hz), float(sample_rate_hz), b, a)


def _odd_extend(x, padlen):
    left = 2 * x[0] - x[padlen:0:-1]
    right = 2 * x[-1] - x[-2:-padlen - 2:-1]
    return np.concatenate([left, x, right])


def filter_twopass(x, b, a, padlen=None):
    """Forward-backward filtering with odd-reflection edge padding."""
    x = np.asarray(x, dtype=np.float64)
    if padlen is None:
        padlen = 3 * (max(len(a), len(b)) - 1)
    padlen = min(padlen, len(x) - 1)
    ext = _odd_extend(x, padlen) if padlen > 0 else x
    zi = lfilter_zi(b, a)
    y, _ = lfilter(b, a, ext, zi=zi * ext[0])
    y = y[::-1]
    y, _ = lfilter(b, a, y, zi=zi * y[0])
    y = y[::-1]
    return y[padlen:len(y) - padlen] if padlen > 0 else y


def butterworth_bandpass_twopass(signal, design: ButterworthDesign | None = None) -> TimeSeries:
    if isinstance(signal, TimeSeries):
        values, dt = signal.values, signal.dt
    else:
        values = np.asarray(signal, dtype=np.float64)
        dt = 1.0 / design.sample_rate_hz if design else 0.01
    if design is None:
        design = design_butterworth_bandpass(sample_rate_hz=1.0 / dt)
    return TimeSeries(filter_twopass(values, design.numerator, design.denominator), dt)
