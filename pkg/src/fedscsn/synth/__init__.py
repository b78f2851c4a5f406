"""Synthetic multi-dataset EEG, packed trial files and balancing."""
from .generate import (CLASS_NAMES, DEFAULT_MONTAGE, LEFT_GROUP, RIGHT_GROUP, SynthDatasetSpec, balance_dataset,
                       balance_indices, band_power, benchmark_specs, generate_dataset, generate_trial, load_specs, pink_noise,
                       trial_rng)
from .packed import (BadMagic, DatasetManifest, PackedFormatError, TrialSet, TruncatedFile, VersionMismatch,
                     decode_packed, encode_packed, make_manifest, packed_size, read_packed, write_packed)
