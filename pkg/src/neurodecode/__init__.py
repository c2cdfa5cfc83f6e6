"""Two-class EEG trial decoding: CSP channel selection, db4 subband features,
a small batch-normalised MLP with per-channel majority voting, and a
trial-grouped cross-validation harness."""

__version__ = "0.1.0"
