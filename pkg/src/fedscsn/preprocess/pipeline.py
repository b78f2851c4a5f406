"""Recording -> aligned, normalised trial windows."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..synth.packed import DatasetManifest, TrialSet, make_manifest
from .filters import design_bandpass, zero_phase_filter
from .resample import map_index, rational_ratio, resample

DEFAULT_CHANNELS = ("Fz", "FC1", "FC2", "C1", "C2", "C3", "C4", "C5", "C6",
                    "CP3", "CP1", "CPz", "CP2", "CP4", "P1", "P2", "Pz")
STD_GUARD = 1e-8


class ChannelError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass
class RawRecording:
    channel_names: list[str]
    fs: float
    data: np.ndarray
    onsets: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.channel_names = list(self.channel_names)
        if self.data.ndim != 2 or self.data.shape[0] != len(self.channel_names):
            raise ValueError(f"data shape {self.data.shape} does not match {len(self.channel_names)} channel names")
        if not self.fs > 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        n = self.data.shape[1]
        for sample, _ in self.onsets:
            if not 0 <= sample < n:
                raise ValueError(f"onset {sample} outside recording of {n} samples")

    @property
    def samples(self) -> int:
        return int(self.data.shape[1])


@dataclass
class TrialWindow:
    data: np.ndarray
    label: int
    subject_id: int = 0
    dataset_id: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    channels: tuple[str, ...] = DEFAULT_CHANNELS
    fs_out: float = 200.0
    order: int = 5
    band: tuple[float, float] = (4.0, 32.0)
    window_s: float = 3.0
    offset_s: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        if "band" in d:
            d["band"] = tuple(d["band"])
        return cls(**d)


def _key(name: str) -> str:
    return name.strip().casefold()


def select_channels(rec: RawRecording, wanted: Sequence[str] = DEFAULT_CHANNELS) -> RawRecording:
    """Reorder rows to ``wanted``; names match case-insensitively after trimming."""
    index = {_key(n): i for i, n in enumerate(rec.channel_names)}
    missing = [w for w in wanted if _key(w) not in index]
    if missing:
        raise ChannelError(f"recording lacks channels: {', '.join(missing)}")
    rows = [index[_key(w)] for w in wanted]
    return replace(rec, channel_names=[rec.channel_names[r] for r in rows], data=rec.data[rows])


def resample_recording(rec: RawRecording, fs_out: float) -> RawRecording:
    up, down = rational_ratio(rec.fs, fs_out)
    if up == down:
        return replace(rec, fs=float(fs_out), data=rec.data.copy())
    data = resample(rec.data, rec.fs, fs_out)
    onsets = [(map_index(s, up, down), label) for s, label in rec.onsets]
    onsets = [(min(s, data.shape[1] - 1), label) for s, label in onsets]
    return RawRecording(rec.channel_names, float(fs_out), data, onsets)


def bandpass_recording(rec: RawRecording, order: int, lo: float, hi: float) -> RawRecording:
    filt = design_bandpass(order, lo, hi, rec.fs)
    data = np.stack([zero_phase_filter(row.astype(np.float64), filt) for row in rec.data]).astype(np.float32)
    return replace(rec, data=data)


def extract_windows(rec: RawRecording, window_s: float = 3.0, offset_s: float = 0.0,
                    subject_id: int = 0, dataset_id: int = 0) -> list[TrialWindow]:
    n = round(window_s * rec.fs)
    shift = round(offset_s * rec.fs)
    out = []
    for k, (onset, label) in enumerate(rec.onsets):
        start = onset + shift
        if start < 0 or start + n > rec.samples:
            raise ValueError(f"onset #{k} at sample {onset} (label {label}): window "
                             f"[{start}, {start + n}) overruns recording of {rec.samples} samples")
        out.append(TrialWindow(rec.data[:, start:start + n].copy(), int(label), subject_id, dataset_id))
    return out


def _zscore(x: np.ndarray, axis: int) -> np.ndarray:
    mu = x.mean(axis=axis, keepdims=True)
    sd = x.std(axis=axis, keepdims=True)
    sd = np.where(sd < STD_GUARD, 1.0, sd)
    return (x - mu) / sd


def normalize_trial(trial: TrialWindow) -> TrialWindow:
    """Per-channel z-score over time, then per-time-step z-score over channels."""
    x = trial.data.astype(np.float64)
    x = _zscore(x, axis=1)
    x = _zscore(x, axis=0)
    return replace(trial, data=x.astype(np.float32))


def run_pipeline(rec: RawRecording, cfg: PipelineConfig = PipelineConfig(),
                 subject_id: int = 0, dataset_id: int = 0) -> list[TrialWindow]:
    """select -> resample -> band-pass (zero phase) -> windows -> normalise."""
    rec = select_channels(rec, cfg.channels)
    rec = resample_recording(rec, cfg.fs_out)
    rec = bandpass_recording(rec, cfg.order, *cfg.band)
    windows = extract_windows(rec, cfg.window_s, cfg.offset_s, subject_id, dataset_id)
    return [normalize_trial(w) for w in windows]


def preprocess_trials(manifest: DatasetManifest, trials: TrialSet, cfg: PipelineConfig = PipelineConfig(),
                      dataset_id: int = 0) -> tuple[DatasetManifest, TrialSet]:
    """Run the pipeline on each stored trial as a one-onset recording starting at sample 0."""
    out = []
    for data, label, subject in zip(trials.data, trials.labels, trials.subjects):
        rec = RawRecording(manifest.channels, manifest.fs, data, [(0, int(label))])
        (win,) = run_pipeline(rec, cfg, int(subject), dataset_id)
        out.append(win.data)
    n = round(cfg.window_s * cfg.fs_out)
    data = np.stack(out) if out else np.empty((0, len(cfg.channels), n), dtype=np.float32)
    result = TrialSet(data, trials.labels.copy(), trials.subjects.copy())
    return make_manifest(manifest.name, cfg.channels, cfg.fs_out, manifest.classes, result), result


def windows_to_trialset(windows: Sequence[TrialWindow]) -> TrialSet:
    return TrialSet(np.stack([w.data for w in windows]), [w.label for w in windows],
                    [w.subject_id for w in windows])
