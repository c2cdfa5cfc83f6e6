"""Synthetic two-class trial sets with a known spatial variance contrast.

Every channel carries unit-variance band-limited Gaussian noise plus white
sensor noise. Channels ``0..p-1`` ("group A") have their band-limited
variance multiplied by ``r`` in class 0 and by ``1/r`` in class 1; channels
``p..2p-1`` ("group B", clipped to the channel count) get the reverse. CSP
should therefore pick group A for the maximising filter and group B for the
minimising one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import Recording, Trial, TrialSet
from .dsp import design_butterworth_bandpass, filter_array

WARMUP = 512
BAND_ORDER = 4


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    channels: int = 16
    trials_per_class: int = 100
    epoch_samples: int = 512
    rate_hz: float = 256.0
    informative_pairs: int = 9
    variance_ratio: float = 4.0
    band_hz: tuple[float, float] = (8.0, 30.0)
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.channels < 2:
            raise SynthError("need at least 2 channels")
        if not 1 <= self.informative_pairs < self.channels:
            raise SynthError(
                f"informative_pairs must satisfy 1 <= p < channels ({self.channels}), got {self.informative_pairs}"
            )
        if not self.variance_ratio > 1:
            raise SynthError(f"variance_ratio must be > 1, got {self.variance_ratio}")
        lo, hi = self.band_hz
        if not 0 < lo < hi < self.rate_hz / 2:
            raise SynthError(f"band {self.band_hz} must lie inside (0, {self.rate_hz / 2}) Hz")
        if self.epoch_samples < 16 or self.epoch_samples % 16:
            raise SynthError(f"epoch_samples must be a positive multiple of 16, got {self.epoch_samples}")
        if self.trials_per_class < 1:
            raise SynthError("trials_per_class must be positive")
        if self.noise_sigma < 0:
            raise SynthError("noise_sigma must be non-negative")

    @property
    def group_a(self) -> list[int]:
        return list(range(self.informative_pairs))

    @property
    def group_b(self) -> list[int]:
        p = self.informative_pairs
        return list(range(p, min(2 * p, self.channels)))

    def variance_factors(self, label: int) -> np.ndarray:
        """Per-channel multiplier on the band-limited variance for a class."""
        f = np.ones(self.channels)
        r = self.variance_ratio
        hi, lo = (r, 1.0 / r) if label == 0 else (1.0 / r, r)
        f[self.group_a] = hi
        f[self.group_b] = lo
        return f

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band_hz"] = list(self.band_hz)
        return d


def _band_noise_gain(spec: SynthSpec) -> float:
    filt = design_butterworth_bandpass(BAND_ORDER, *spec.band_hz, spec.rate_hz)
    impulse = np.zeros(1 << 15)
    impulse[0] = 1.0
    return float(np.sqrt(np.sum(filter_array(filt, impulse) ** 2)))


def generate(spec: SynthSpec) -> TrialSet:
    filt = design_butterworth_bandpass(BAND_ORDER, *spec.band_hz, spec.rate_hz)
    gain = _band_noise_gain(spec)
    n = spec.trials_per_class * 2
    names = tuple(f"ch{i:02d}" for i in range(spec.channels))
    trials = []
    for tid, ss in enumerate(np.random.SeedSequence(spec.seed).spawn(n)):
        rng = np.random.default_rng(ss)
        label = tid % 2
        white = rng.standard_normal((spec.channels, WARMUP + spec.epoch_samples))
        band = filter_array(filt, white, axis=1)[:, WARMUP:] / gain
        x = band * np.sqrt(spec.variance_factors(label))[:, None]
        x += spec.noise_sigma * rng.standard_normal(x.shape)
        trials.append(Trial(tid, label, Recording(x, spec.rate_hz, names)))
    return TrialSet(tuple(trials), {0: "class0", 1: "class1"}, spec.rate_hz, spec.epoch_samples, names)


def permute_labels(ts: TrialSet, seed: int) -> TrialSet:
    """Same trials with labels shuffled (class counts preserved)."""
    labels = np.random.default_rng(seed).permutation(ts.labels)
    return ts.replace_trials([Trial(t.trial_id, int(lab), t.epoch) for t, lab in zip(ts.trials, labels)])
