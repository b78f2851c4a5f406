"""Federated separate-common-separate networks for EEG motor-imagery decoding."""

__version__ = "0.1.0"
