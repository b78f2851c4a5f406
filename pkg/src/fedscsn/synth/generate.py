"""Synthetic motor-imagery EEG.

Each channel is pink noise plus, on the two motor groups, a mu-band
sinusoid. Imagery classes attenuate the mu amplitude on one or both groups
(event-related desynchronisation), which is the only class information.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..nn.rng import Rng
from .packed import DatasetManifest, TrialSet, make_manifest

CLASS_NAMES = ("left_hand", "right_hand", "feet", "tongue", "rest")
LEFT_GROUP = ("C1", "C3", "C5", "CP3")
RIGHT_GROUP = ("C2", "C4", "C6", "CP4")

# 22-channel 10-20 subset: the 17 shared channels plus frontal/parietal extras
DEFAULT_MONTAGE = ("Fz", "FC3", "FC1", "FCz", "FC2", "FC4", "C5", "C3", "C1", "Cz", "C2", "C4", "C6",
                   "CP3", "CP1", "CPz", "CP2", "CP4", "P1", "Pz", "P2", "POz")


@dataclass
class SynthDatasetSpec:
    name: str
    class_set: list[str]
    channels: list[str] = field(default_factory=lambda: list(DEFAULT_MONTAGE))
    fs: float = 250.0
    trials_per_class: int = 72
    erd_ratio: float = 0.4
    mu_freq: float = 10.0
    noise_sigma: float = 1.0
    amplitude: float = 1.5
    window_s: float = 3.0
    subjects: int = 5
    seed: int = 42

    def __post_init__(self):
        unknown = [c for c in self.class_set if c not in CLASS_NAMES]
        if unknown:
            raise ValueError(f"unknown classes {unknown}; allowed {CLASS_NAMES}")
        if len(set(self.class_set)) != len(self.class_set) or not self.class_set:
            raise ValueError(f"class_set must be non-empty and unique: {self.class_set}")
        if self.trials_per_class < 1:
            raise ValueError("trials_per_class must be >= 1")
        if not 0 < self.erd_ratio <= 1:
            raise ValueError(f"erd_ratio must lie in (0, 1], got {self.erd_ratio}")
        if self.fs < 100:
            raise ValueError(f"fs must be >= 100 Hz, got {self.fs}")
        missing = [c for c in LEFT_GROUP + RIGHT_GROUP if c not in self.channels]
        if missing:
            raise ValueError(f"montage lacks motor channels {missing}")

    @property
    def samples(self) -> int:
        return round(self.window_s * self.fs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthDatasetSpec":
        return cls(**d)


def load_specs(path) -> list[SynthDatasetSpec]:
    """A JSON file holding one spec object or a list of them."""
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, dict):
        raw = raw.get("datasets", [raw])
    return [SynthDatasetSpec.from_dict(d) for d in raw]


def group_gains(cls: str, r: float) -> tuple[float, float]:
    """Mu amplitude multipliers ``(left group, right group)`` for a class."""
    return {
        "left_hand": (1.0, r),
        "right_hand": (r, 1.0),
        "feet": (r, r),
        "tongue": (math.sqrt(r), math.sqrt(r)),
        "rest": (1.0, 1.0),
    }[cls]


PINK_ROWS = 16


def pink_noise(n_channels: int, n: int, rng: Rng) -> np.ndarray:
    """Voss-McCartney pink noise with unit variance per channel.

    Row ``k`` is redrawn every ``2**(k+1)`` samples, staggered so that at
    most one row changes per sample; a white row is added on top. Variance
    is normalised over the ensemble, so rows slower than the trial length
    contribute a per-trial offset.
    """
    rows = PINK_ROWS
    i = np.arange(n)
    out = rng.normal((n_channels, n))
    for k in range(rows):
        draws = rng.normal((n_channels, (n >> (k + 1)) + 2))
        out += draws[:, (i + (1 << k)) >> (k + 1)]
    return out / math.sqrt(rows + 1)


def trial_rng(spec: SynthDatasetSpec, index: int) -> Rng:
    return Rng(spec.seed, f"synth/{spec.name}/trial/{index}")


def generate_trial(cls: str, spec: SynthDatasetSpec, rng: Rng) -> np.ndarray:
    """``(channels, round(window_s * fs))`` float32 trial for class ``cls``."""
    if cls not in spec.class_set:
        raise ValueError(f"class {cls!r} not in dataset class set {spec.class_set}")
    n = spec.samples
    data = spec.noise_sigma * pink_noise(len(spec.channels), n, rng.substream("noise"))
    t = np.arange(n) / spec.fs
    phases = rng.substream("phase").uniform(0.0, 2 * np.pi, 2)
    gains = group_gains(cls, spec.erd_ratio)
    index = {c: i for i, c in enumerate(spec.channels)}
    for group, gain, phi in zip((LEFT_GROUP, RIGHT_GROUP), gains, phases):
        wave = spec.amplitude * gain * np.sin(2 * np.pi * spec.mu_freq * t + phi)
        for ch in group:
            data[index[ch]] += wave
    return data.astype(np.float32)


def generate_dataset(spec: SynthDatasetSpec) -> tuple[DatasetManifest, TrialSet]:
    """Classes interleaved trial by trial; subjects cycle ``1..spec.subjects`` per class round."""
    k = len(spec.class_set)
    total = k * spec.trials_per_class
    data = np.empty((total, len(spec.channels), spec.samples), dtype=np.float32)
    labels = np.arange(total) % k
    subjects = (np.arange(total) // k) % spec.subjects + 1
    for i in range(total):
        data[i] = generate_trial(spec.class_set[labels[i]], spec, trial_rng(spec, i))
    trials = TrialSet(data, labels, subjects)
    return make_manifest(spec.name, spec.channels, spec.fs, spec.class_set, trials), trials


def band_power(signal, fs: float, lo: float, hi: float) -> float:
    """Welch estimate (1 s Hann segments, 50 % overlap) integrated over ``[lo, hi]`` Hz."""
    x = np.asarray(signal, dtype=np.float64)
    if not 0 <= lo < hi <= fs / 2:
        raise ValueError(f"band [{lo}, {hi}] Hz outside [0, {fs / 2}]")
    nseg = int(round(fs))
    if x.shape[-1] < nseg:
        raise ValueError(f"signal of {x.shape[-1]} samples shorter than one 1 s segment ({nseg})")
    hop = nseg // 2
    win = np.hanning(nseg + 1)[:-1]  # periodic Hann
    starts = range(0, x.shape[-1] - nseg + 1, hop)
    segs = np.stack([x[s:s + nseg] for s in starts])
    spec = np.abs(np.fft.rfft(segs * win, axis=-1)) ** 2 / (fs * np.sum(win ** 2))
    spec[:, 1:] *= 2
    if nseg % 2 == 0:
        spec[:, -1] /= 2
    psd = spec.mean(axis=0)
    freqs = np.fft.rfftfreq(nseg, 1.0 / fs)
    sel = (freqs >= lo) & (freqs <= hi)
    return float(psd[sel].sum() * (freqs[1] - freqs[0]))


def balance_indices(n: int, target_n: int, rng: Rng) -> np.ndarray:
    if n < 1:
        raise ValueError("cannot balance an empty trial set")
    if target_n < 1:
        raise ValueError(f"target_n must be >= 1, got {target_n}")
    if n == target_n:
        return np.arange(n)
    if n > target_n:
        return np.sort(rng.permutation(n)[:target_n])
    return np.concatenate([np.arange(n), rng.integers(n, target_n - n)])


def balance_dataset(trials: TrialSet, target_n: int, rng: Rng, jitter: float = 0.0) -> TrialSet:
    """Subsample without replacement, or keep everything and duplicate at random."""
    idx = balance_indices(len(trials), target_n, rng)
    out = trials.take(idx)
    if jitter and len(trials) < target_n:
        dup = slice(len(trials), None)
        noise = rng.substream("jitter").normal(out.data[dup].shape)
        out.data[dup] += (jitter * noise).astype(np.float32)
    return out


def benchmark_specs(seed: int = 42, target_trials_per_class: int = 30, source_trials_per_class: int = 40,
                    test_trials_per_class: int = 50, target_noise: float = 2.0) -> dict[str, SynthDatasetSpec]:
    """Standard cross-dataset benchmark: three sources with heterogeneous label sets,
    rates and montages, plus a small hard target and its held-out test set."""
    four = ["left_hand", "right_hand", "feet", "rest"]
    physio = [c for c in DEFAULT_MONTAGE if c not in ("FC3", "FC4", "POz")] + ["T7", "T8", "Oz"]
    return {
        "source_a": SynthDatasetSpec("source_a", ["left_hand", "right_hand", "feet", "tongue"], fs=250,
                                     trials_per_class=source_trials_per_class, erd_ratio=0.4, seed=seed + 1),
        "source_b": SynthDatasetSpec("source_b", ["left_hand", "right_hand"], fs=500,
                                     trials_per_class=2 * source_trials_per_class, erd_ratio=0.5, seed=seed + 2),
        "source_c": SynthDatasetSpec("source_c", four, channels=physio, fs=160,
                                     trials_per_class=source_trials_per_class, erd_ratio=0.45, seed=seed + 3),
        "target": SynthDatasetSpec("target", four, fs=250, trials_per_class=target_trials_per_class,
                                   erd_ratio=0.7, noise_sigma=target_noise, subjects=5, seed=seed + 4),
        "target_test": SynthDatasetSpec("target", four, fs=250, trials_per_class=test_trials_per_class,
                                        erd_ratio=0.7, noise_sigma=target_noise, subjects=5, seed=seed + 5),
    }
