"""Filtering and resampling primitives for polysomnography channels.

Butterworth filters are designed from scratch: analog prototype poles,
a lowpass-to-bandpass transform when needed, then the bilinear transform
with frequency prewarping, factored into second-order sections. Only the
order-2 difference equation itself is delegated to scipy.signal.lfilter;
design and the zero-phase (forward-backward) assembly live here.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter


@dataclass(frozen=True)
class FilterSpec:
    """What to filter: a band and an even Butterworth order.

    ``kind`` is 'bandpass' or 'lowpass'. For lowpass, ``high_hz`` is the
    cutoff and ``low_hz`` must be 0. ``order`` is the analog prototype
    order; a bandpass realization has twice as many poles.
    """

    kind: str
    low_hz: float
    high_hz: float
    order: int = 4
    zero_phase: bool = True

    def __post_init__(self):
        if self.kind not in ("bandpass", "lowpass"):
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if self.order < 2 or self.order % 2 != 0:
            raise ValueError(f"order must be a positive even integer, got {self.order}")
        if self.high_hz <= self.low_hz:
            raise ValueError(f"band edges out of order: {self.low_hz}..{self.high_hz}")
        if self.kind == "bandpass" and self.low_hz <= 0:
            raise ValueError("bandpass requires low_hz > 0")
        if self.kind == "lowpass" and self.low_hz != 0:
            raise ValueError("lowpass uses high_hz as cutoff; low_hz must be 0")


@dataclass
class BiquadCascade:
    """Second-order sections (b0, b1, b2, a1, a2), a0 normalized to 1."""

    sections: list[tuple[float, float, float, float, float]]
    gain: float = 1.0
    padlen: int = field(init=False)

    def __post_init__(self):
        for b0, b1, b2, a1, a2 in self.sections:
            if not (abs(a2) < 1.0 and abs(a1) < 1.0 + a2):
                raise ValueError(f"unstable biquad section a1={a1}, a2={a2}")
        self.padlen = 3 * 2 * len(self.sections)

    def response(self, freqs_hz, sample_rate_hz: float) -> np.ndarray:
        """Complex frequency response of one (forward) pass."""
        z = np.exp(2j * np.pi * np.asarray(freqs_hz, dtype=np.float64) / sample_rate_hz)
        h = np.full(z.shape, self.gain, dtype=np.complex128)
        zi1 = 1.0 / z
        zi2 = zi1 * zi1
        for b0, b1, b2, a1, a2 in self.sections:
            h *= (b0 + b1 * zi1 + b2 * zi2) / (1.0 + a1 * zi1 + a2 * zi2)
        return h


def _prototype_poles(order: int) -> list[complex]:
    """Poles of the unit-cutoff analog Butterworth lowpass, upper half plane."""
    poles = []
    for k in range(order):
        p = cmath.exp(1j * math.pi * (2 * k + order + 1) / (2 * order))
        if p.imag > 1e-12:
            poles.append(p)
    return poles


def _bilinear_pole(p: complex, fs: float) -> complex:
    return (2.0 * fs + p) / (2.0 * fs - p)


def _prewarp(f_hz: float, fs: float) -> float:
    return 2.0 * fs * math.tan(math.pi * f_hz / fs)


def design_butterworth(spec: FilterSpec, sample_rate_hz: float) -> BiquadCascade:
    """Realize a FilterSpec as a stable cascade at the given rate.

    Poles come from the analog prototype (lowpass-to-bandpass transformed
    for bandpass), mapped with the bilinear transform after prewarping
    the band edges so the digital cutoffs land exactly on the requested
    frequencies. Each section is gain-normalized: lowpass sections at DC,
    bandpass sections at the (digital) geometric center frequency.
    """
    fs = float(sample_rate_hz)
    if fs <= 0:
        raise ValueError(f"sample rate must be positive, got {fs}")
    nyq = fs / 2.0
    if spec.high_hz >= nyq:
        raise ValueError(
            f"cutoff {spec.high_hz} Hz is at or above Nyquist ({nyq} Hz) for rate {fs} Hz")

    proto = _prototype_poles(spec.order)
    sections: list[tuple[float, float, float, float, float]] = []

    if spec.kind == "lowpass":
        wc = _prewarp(spec.high_hz, fs)
        for p in proto:
            zp = _bilinear_pole(wc * p, fs)
            a1 = -2.0 * zp.real
            a2 = abs(zp) ** 2
            # two zeros at z = -1; normalize this section to unit DC gain
            g = (1.0 + a1 + a2) / 4.0
            sections.append((g, 2.0 * g, g, a1, a2))
        return BiquadCascade(sections)

    w_lo = _prewarp(spec.low_hz, fs)
    w_hi = _prewarp(spec.high_hz, fs)
    w0 = math.sqrt(w_lo * w_hi)
    bw = w_hi - w_lo
    # digital frequency the analog center maps to; used for normalization
    f_center = fs / math.pi * math.atan(w0 / (2.0 * fs))

    # Each upper-half prototype pole maps to two bandpass poles; their
    # conjugates come from the mirrored prototype pole, so every mapped
    # pole pairs with its own conjugate to form one real section.
    bp_poles: list[complex] = []
    for p in proto:
        s = bw * p
        disc = cmath.sqrt(s * s - 4.0 * w0 * w0)
        bp_poles.extend(((s + disc) / 2.0, (s - disc) / 2.0))

    zc = cmath.exp(2j * math.pi * f_center / fs)
    for p in bp_poles:
        zp = _bilinear_pole(p, fs)
        a1 = -2.0 * zp.real
        a2 = abs(zp) ** 2
        # one zero at z=1 (from s=0), one at z=-1 (from s=inf): b = (1, 0, -1)
        num = 1.0 - zc ** -2
        den = 1.0 + a1 / zc + a2 / zc ** 2
        g = 1.0 / abs(num / den)
        sections.append((g, 0.0, -g, a1, a2))
    return BiquadCascade(sections)


def _lfilter_zi(b0: float, b1: float, b2: float, a1: float, a2: float) -> np.ndarray:
    """Steady-state DF2T state for unit step input (scales by x[0] at use)."""
    h1 = (b0 + b1 + b2) / (1.0 + a1 + a2)
    z2 = b2 - a2 * h1
    z1 = b1 - a1 * h1 + z2
    return np.array([z1, z2], dtype=np.float64)


def _one_pass(cascade: BiquadCascade, x: np.ndarray) -> np.ndarray:
    y = x
    for b0, b1, b2, a1, a2 in cascade.sections:
        zi = _lfilter_zi(b0, b1, b2, a1, a2) * y[0]
        y, _ = lfilter([b0, b1, b2], [1.0, a1, a2], y, zi=zi)
    return y * cascade.gain


def filtfilt(cascade: BiquadCascade, x: np.ndarray) -> np.ndarray:
    """Forward-backward filtering: zero phase, squared magnitude response.

    Edges are handled with odd reflection (as in sosfiltfilt) and each
    section starts from its steady-state response to the first sample.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"filtfilt expects a 1D signal, got shape {x.shape}")
    pad = cascade.padlen
    if len(x) <= pad:
        raise ValueError(f"signal too short to filter: {len(x)} samples, need > {pad}")
    ext = np.concatenate([
        2.0 * x[0] - x[pad:0:-1],
        x,
        2.0 * x[-1] - x[-2:-pad - 2:-1],
    ])
    y = _one_pass(cascade, ext)
    y = _one_pass(cascade, y[::-1])[::-1]
    return y[pad:pad + len(x)]


def apply_filter(spec: FilterSpec, x: np.ndarray, sample_rate_hz: float) -> np.ndarray:
    """Design-and-apply convenience; single forward pass if not zero_phase."""
    cascade = design_butterworth(spec, sample_rate_hz)
    if spec.zero_phase:
        return filtfilt(cascade, x)
    return _one_pass(cascade, np.asarray(x, dtype=np.float64))


def resample_linear(x: np.ndarray, from_hz: float, to_hz: float) -> np.ndarray:
    """Linear interpolation onto a uniform grid at ``to_hz``.

    Output length is floor(duration * to_hz) with duration = n/from_hz.
    Target times past the final input sample hold its value.
    """
    if from_hz <= 0 or to_hz <= 0:
        raise ValueError(f"rates must be positive, got {from_hz} -> {to_hz}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"resample_linear expects a 1D signal, got shape {x.shape}")
    if from_hz == to_hz:
        return x.copy()
    n_out = int(math.floor(len(x) * to_hz / from_hz + 1e-9))
    t_out = np.arange(n_out, dtype=np.float64) / to_hz
    t_in = np.arange(len(x), dtype=np.float64) / from_hz
    return np.interp(t_out, t_in, x)
