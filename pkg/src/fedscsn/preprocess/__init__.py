"""EEG signal chain: channel selection, resampling, band-pass, epoching, normalisation."""
from .filters import BiquadCascade, design_bandpass, sos_filter, steady_state, zero_phase_filter
from .pipeline import (DEFAULT_CHANNELS, ChannelError, PipelineConfig, RawRecording, TrialWindow,
                       extract_windows, normalize_trial, preprocess_trials, run_pipeline, select_channels,
                       windows_to_trialset)
from .resample import polyphase_bank, rational_ratio, resample
