"""Rational-ratio polyphase resampling with a Kaiser-windowed sinc kernel."""
from __future__ import annotations

from math import gcd

import numpy as np

TAPS = 64
BETA = 8.6
CUTOFF = 0.9
_BLOCK = 4096


def rational_ratio(fs_in: float, fs_out: float) -> tuple[int, int]:
    """``(up, down)`` from rates quantised to millihertz, reduced."""
    if not (fs_in > 0 and fs_out > 0):
        raise ValueError(f"sampling rates must be positive, got fs_in={fs_in}, fs_out={fs_out}")
    up, down = round(fs_out * 1000), round(fs_in * 1000)
    if up < 1 or down < 1:
        raise ValueError(f"sampling rates below 1 mHz: fs_in={fs_in}, fs_out={fs_out}")
    g = gcd(up, down)
    return up // g, down // g


def output_length(n_in: int, up: int, down: int) -> int:
    # round half up, in integers
    return (2 * n_in * up + down) // (2 * down)


def map_index(index: int, up: int, down: int) -> int:
    """Sample index in the resampled signal closest to input ``index``."""
    return (2 * index * up + down) // (2 * down)


def polyphase_bank(up: int, down: int, taps: int = TAPS, beta: float = BETA,
                   cutoff: float = CUTOFF) -> np.ndarray:
    """``(up, taps)`` filter bank; row ``phase`` serves outputs at fractional offset ``phase / up``.

    Tap ``j`` multiplies input sample ``base - (taps//2 - 1) + j``. Each row is
    normalised to unit DC gain.
    """
    half = taps // 2
    # cutoff in cycles per input sample: 0.9 * min(fs_in, fs_out) / 2 / fs_in
    fc = cutoff * min(1.0, up / down) / 2.0
    phase = np.arange(up)[:, None] / up
    tau = phase + (half - 1) - np.arange(taps)[None, :]
    h = 2 * fc * np.sinc(2 * fc * tau)
    arg = np.clip(1.0 - (tau / half) ** 2, 0.0, None)
    h *= np.i0(beta * np.sqrt(arg)) / np.i0(beta)
    return h / h.sum(axis=1, keepdims=True)


def resample(signal, fs_in: float, fs_out: float) -> np.ndarray:
    """Resample along the last axis. Samples outside the signal are taken as zero."""
    x = np.asarray(signal)
    up, down = rational_ratio(fs_in, fs_out)
    if up == down:
        return x.copy()
    n_in = x.shape[-1]
    n_out = output_length(n_in, up, down)
    bank = polyphase_bank(up, down)
    taps = bank.shape[1]
    lead = taps // 2 - 1
    xp = np.zeros(x.shape[:-1] + (n_in + taps + 1,), dtype=np.float64)
    xp[..., lead:lead + n_in] = x
    out = np.empty(x.shape[:-1] + (n_out,), dtype=np.float64)
    offsets = np.arange(taps)
    for start in range(0, n_out, _BLOCK):
        n = np.arange(start, min(start + _BLOCK, n_out), dtype=np.int64)
        base = (n * down) // up
        phase = (n * down) % up
        idx = base[:, None] + offsets[None, :]
        out[..., start:start + len(n)] = np.sum(xp[..., idx] * bank[phase], axis=-1)
    return out.astype(x.dtype) if np.issubdtype(x.dtype, np.floating) else out
