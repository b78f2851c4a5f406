"""Packed trial files (``EEGT``) and their JSON manifests.

Binary layout, little-endian: magic ``b"EEGT"``, version u32, channels u32,
samples u32, trials u32, then per trial ``label u16, subject u16`` followed
by ``channels * samples`` float32 values (channel-major).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EEGT"
VERSION = 1
HEADER = struct.Struct("<4sIIII")


class PackedFormatError(ValueError):
    pass


class BadMagic(PackedFormatError):
    pass


class TruncatedFile(PackedFormatError):
    pass


class VersionMismatch(PackedFormatError):
    pass


@dataclass
class TrialSet:
    """Trials stacked as ``(n, channels, samples)`` float32 with per-trial label and subject."""

    data: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if self.data.ndim != 3 or not len(self.data) == len(self.labels) == len(self.subjects):
            raise ValueError(f"inconsistent trial set: data {self.data.shape}, "
                             f"{len(self.labels)} labels, {len(self.subjects)} subjects")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "TrialSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TrialSet(self.data[idx], self.labels[idx], self.subjects[idx])


@dataclass
class DatasetManifest:
    name: str
    channels: list[str]
    fs: float
    classes: list[str]
    trial_count: int
    samples: int
    trials: list[tuple[int, int]] = field(default_factory=list)
    format_version: int = VERSION

    def class_counts(self) -> dict[int, int]:
        counts = {i: 0 for i in range(len(self.classes))}
        for label, _ in self.trials:
            counts[label] += 1
        return counts

    def to_json(self) -> str:
        d = asdict(self)
        d["classes"] = {str(i): c for i, c in enumerate(self.classes)}
        d["trials"] = [list(t) for t in self.trials]
        return json.dumps(d, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        classes = d["classes"]
        if isinstance(classes, dict):
            ids = sorted(int(k) for k in classes)
            if ids != list(range(len(ids))):
                raise ValueError(f"class ids must be dense from 0, got {ids}")
            classes = [classes[str(i)] for i in ids]
        return cls(name=d["name"], channels=list(d["channels"]), fs=float(d["fs"]), classes=list(classes),
                   trial_count=int(d["trial_count"]), samples=int(d["samples"]),
                   trials=[(int(a), int(b)) for a, b in d.get("trials", [])],
                   format_version=int(d.get("format_version", VERSION)))


def make_manifest(name, channels, fs, classes, trials: TrialSet) -> DatasetManifest:
    return DatasetManifest(name=name, channels=list(channels), fs=float(fs), classes=list(classes),
                           trial_count=len(trials), samples=int(trials.data.shape[2]),
                           trials=[(int(a), int(b)) for a, b in zip(trials.labels, trials.subjects)])


def packed_size(channels: int, samples: int, trials: int) -> int:
    return HEADER.size + trials * (4 + 4 * channels * samples)


def encode_packed(trials: TrialSet) -> bytes:
    n, c, s = trials.data.shape
    if trials.labels.size and (trials.labels.min() < 0 or trials.labels.max() > 0xFFFF):
        raise ValueError("labels must fit in u16")
    if trials.subjects.size and (trials.subjects.min() < 0 or trials.subjects.max() > 0xFFFF):
        raise ValueError("subject ids must fit in u16")
    rec = np.dtype([("label", "<u2"), ("subject", "<u2"), ("data", "<f4", (c * s,))])
    body = np.empty(n, dtype=rec)
    body["label"] = trials.labels
    body["subject"] = trials.subjects
    body["data"] = trials.data.reshape(n, c * s)
    return HEADER.pack(MAGIC, VERSION, c, s, n) + body.tobytes()


def decode_packed(buf: bytes) -> TrialSet:
    if len(buf) < HEADER.size:
        raise TruncatedFile(f"packed file truncated: expected at least {HEADER.size} header bytes, got {len(buf)}")
    magic, version, c, s, n = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatch(f"packed format version {version}, expected {VERSION}")
    expected = packed_size(c, s, n)
    if len(buf) != expected:
        raise TruncatedFile(f"packed file length mismatch: expected {expected} bytes, got {len(buf)}")
    rec = np.dtype([("label", "<u2"), ("subject", "<u2"), ("data", "<f4", (c * s,))])
    body = np.frombuffer(buf, dtype=rec, offset=HEADER.size, count=n)
    return TrialSet(body["data"].reshape(n, c, s).astype(np.float32), body["label"].astype(np.int64),
                    body["subject"].astype(np.int64))


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_packed(path, manifest: DatasetManifest, trials: TrialSet) -> None:
    """Write the packed file and its manifest sidecar (same stem, ``.json``)."""
    if manifest.trial_count != len(trials):
        raise ValueError(f"manifest says {manifest.trial_count} trials, got {len(trials)}")
    Path(path).write_bytes(encode_packed(trials))
    manifest_path(path).write_text(manifest.to_json())


def read_packed(path) -> tuple[DatasetManifest, TrialSet]:
    trials = decode_packed(Path(path).read_bytes())
    side = manifest_path(path)
    if side.exists():
        manifest = DatasetManifest.from_json(side.read_text())
        if manifest.trial_count != len(trials):
            raise PackedFormatError(f"manifest lists {manifest.trial_count} trials, file holds {len(trials)}")
    else:
        n_classes = int(trials.labels.max()) + 1 if len(trials) else 0
        manifest = make_manifest(Path(path).stem, [f"ch{i}" for i in range(trials.data.shape[1])], 0.0,
                                 [str(i) for i in range(n_classes)], trials)
    return manifest, trials
