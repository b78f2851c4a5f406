"""Butterworth band-pass design as a biquad cascade, and forward-backward filtering."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections ``(b0, b1, b2, a1, a2)`` with ``a0 = 1``; input scaled by ``overall_gain``."""

    sections: np.ndarray
    overall_gain: float

    @property
    def section_count(self) -> int:
        return int(self.sections.shape[0])

    def poles(self) -> np.ndarray:
        out = []
        for _, _, _, a1, a2 in self.sections:
            out.extend(np.roots([1.0, a1, a2]))
        return np.array(out)

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def response(self, freqs_hz, fs: float) -> np.ndarray:
        """Complex frequency response at ``freqs_hz``."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs)
        return self.evaluate(z)

    def evaluate(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.complex128)
        zi = 1.0 / z
        h = np.full(z.shape, self.overall_gain, dtype=np.complex128)
        for b0, b1, b2, a1, a2 in self.sections:
            h *= (b0 + b1 * zi + b2 * zi * zi) / (1.0 + a1 * zi + a2 * zi * zi)
        return h

    def to_text(self) -> str:
        """One section per line: ``b0 b1 b2 a1 a2`` at 17 significant digits."""
        lines = [f"# overall_gain {self.overall_gain:.17g}"]
        for row in self.sections:
            lines.append(" ".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BiquadCascade":
        gain = 1.0
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition(" ")
                if key == "overall_gain":
                    gain = float(val)
                continue
            rows.append([float(v) for v in line.split()])
        return cls(np.array(rows, dtype=np.float64).reshape(-1, 5), gain)


def _butter_prototype_poles(order: int) -> np.ndarray:
    k = np.arange(1, order + 1)
    return np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))


def _pair_poles(poles: np.ndarray, tol: float = 1e-10) -> list[tuple[complex, complex]]:
    upper = sorted((p for p in poles if p.imag > tol), key=lambda p: abs(p))
    real = sorted((p.real for p in poles if abs(p.imag) <= tol), key=abs)
    if len(real) % 2:
        raise ValueError("odd number of real poles; cannot form second-order sections")
    pairs = [(complex(real[i]), complex(real[i + 1])) for i in range(0, len(real), 2)]
    pairs += [(p, p.conjugate()) for p in upper]
    # sections with poles nearest the unit circle go last
    return sorted(pairs, key=lambda pr: max(abs(pr[0]), abs(pr[1])))


def design_bandpass(order: int, lo_hz: float, hi_hz: float, fs: float) -> BiquadCascade:
    """Digital Butterworth band-pass with ``2 * order`` poles.

    Analog low-pass prototype, low-pass to band-pass transform around the
    prewarped edges, then the bilinear transform. Each section carries one
    zero at DC and one at Nyquist, so ``b = (1, 0, -1)`` throughout.
    """
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if fs <= 0 or not 0 < lo_hz < hi_hz < fs / 2:
        raise ValueError(f"band edges must satisfy 0 < lo < hi < fs/2; got lo={lo_hz}, hi={hi_hz}, fs={fs}")
    fs2 = 2.0 * fs
    w_lo = fs2 * np.tan(np.pi * lo_hz / fs)
    w_hi = fs2 * np.tan(np.pi * hi_hz / fs)
    bw = w_hi - w_lo
    w0 = np.sqrt(w_lo * w_hi)

    proto = _butter_prototype_poles(order)
    scaled = proto * bw / 2
    root = np.sqrt(scaled ** 2 - w0 ** 2)
    analog = np.concatenate([scaled + root, scaled - root])
    # prototype gain 1 -> bw**order, with `order` zeros at s = 0
    k_analog = bw ** order

    digital = (fs2 + analog) / (fs2 - analog)
    gain = k_analog * np.real(fs2 ** order / np.prod(fs2 - analog))

    sections = []
    for p, q in _pair_poles(digital):
        a1 = float(np.real(-(p + q)))
        a2 = float(np.real(p * q))
        sections.append((1.0, 0.0, -1.0, a1, a2))
    cascade = BiquadCascade(np.array(sections, dtype=np.float64), float(gain))
    if not cascade.is_stable():
        raise ArithmeticError(f"designed band-pass {lo_hz}-{hi_hz} Hz at fs={fs} is unstable")
    return cascade


@numba.njit(cache=True)
def _sos_run(sections, x, zi):
    # transposed direct form II, one section after another per sample
    n = x.shape[0]
    y = np.empty(n)
    z = zi.copy()
    ns = sections.shape[0]
    for i in range(n):
        v = x[i]
        for s in range(ns):
            b0 = sections[s, 0]
            b1 = sections[s, 1]
            b2 = sections[s, 2]
            a1 = sections[s, 3]
            a2 = sections[s, 4]
            out = b0 * v + z[s, 0]
            z[s, 0] = b1 * v - a1 * out + z[s, 1]
            z[s, 1] = b2 * v - a2 * out
            v = out
        y[i] = v
    return y


def steady_state(filt: BiquadCascade) -> np.ndarray:
    """Section states that make a unit constant input (before the gain) a steady state."""
    zi = np.zeros((filt.section_count, 2))
    level = filt.overall_gain
    for s, (b0, b1, b2, a1, a2) in enumerate(filt.sections):
        dc = (b0 + b1 + b2) / (1.0 + a1 + a2)
        out = dc * level
        zi[s, 0] = out - b0 * level
        zi[s, 1] = b2 * level - a2 * out
        level = out
    return zi


def sos_filter(x: np.ndarray, filt: BiquadCascade, zi: np.ndarray | None = None) -> np.ndarray:
    """Single causal pass over a 1-D signal."""
    x = np.ascontiguousarray(x, dtype=np.float64) * filt.overall_gain
    if zi is None:
        zi = np.zeros((filt.section_count, 2))
    return _sos_run(np.ascontiguousarray(filt.sections), x, np.ascontiguousarray(zi, dtype=np.float64))


def pad_length(filt: BiquadCascade) -> int:
    return 3 * (2 * filt.section_count)


def zero_phase_filter(signal, filt: BiquadCascade) -> np.ndarray:
    """Forward-backward filtering with odd-reflection padding.

    Each pass starts from the steady state for its first padded sample,
    so constant inputs produce no start-up transient.
    """
    x = np.asarray(signal)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D signal, got shape {x.shape}")
    pad = pad_length(filt)
    if x.shape[0] <= pad:
        raise ValueError(f"signal of length {x.shape[0]} too short; must exceed padding length {pad}")
    x64 = x.astype(np.float64)
    ext = np.concatenate([2 * x64[0] - x64[pad:0:-1], x64, 2 * x64[-1] - x64[-2:-pad - 2:-1]])
    zi = steady_state(filt)
    y = sos_filter(ext, filt, zi * ext[0])
    y = y[::-1]
    y = sos_filter(y, filt, zi * y[0])[::-1]
    out = y[pad:-pad]
    return out.astype(x.dtype) if np.issubdtype(x.dtype, np.floating) else out
