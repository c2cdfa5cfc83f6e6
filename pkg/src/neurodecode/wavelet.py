"""Periodised db4 wavelet transform and per-channel subband features."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb
from typing import Sequence

import numpy as np

from ._io import atomic_write_text
from .csp import CspModel
from .dataset import Trial



def daubechies_lowpass(moments: int) -> np.ndarray:
    """Minimum-phase Daubechies scaling filter with ``moments`` vanishing moments.

    Spectral factorisation of the half-band polynomial
    ``P(y) = sum_k C(N-1+k, k) y^k`` with ``y = sin^2(w/2)``; each root in
    ``y`` yields a reciprocal pair in ``z`` of which the inner one is kept.
    """
    n = moments
    ys = np.roots([comb(n - 1 + k, k) for k in range(n)][::-1]) if n > 1 else []
    poly = np.array([1.0 + 0j])
    for _ in range(n):
        poly = np.convolve(poly, [1.0, 1.0])
    for y in ys:
        r = np.roots([1.0, -(2.0 - 4.0 * y), 1.0])
        poly = np.convolve(poly, [1.0, -r[np.argmin(np.abs(r))]])
    h = poly.real
    return h * (np.sqrt(2.0) / h.sum())


DB4_LO = daubechies_lowpass(4)
DB4_HI = np.array([(-1) ** n * DB4_LO[len(DB4_LO) - 1 - n] for n in range(len(DB4_LO))])

LEVELS = 4
FEATURES_PER_CHANNEL = 3 * LEVELS


class WaveletError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class WaveletDecomposition:
    details: tuple[np.ndarray, ...]  # level 1 (finest) .. level J
    approximation: np.ndarray
    original_length: int

    @property
    def levels(self) -> int:
        return len(self.details)

    def coefficients(self) -> list[np.ndarray]:
        return [*self.details, self.approximation]

    def energy(self) -> float:
        return float(sum(np.sum(c * c) for c in self.coefficients()))


@lru_cache(maxsize=64)
def _taps_index(n: int) -> np.ndarray:
    # row k reads x[(2k + m) mod n] for m = 0..7
    idx = (2 * np.arange(n // 2)[:, None] + np.arange(DB4_LO.size)[None, :]) % n
    idx.flags.writeable = False
    return idx


def _analysis_step(x: np.ndarray):
    gathered = x[..., _taps_index(x.shape[-1])]
    return gathered @ DB4_LO, gathered @ DB4_HI


def _synthesis_step(approx: np.ndarray, detail: np.ndarray) -> np.ndarray:
    # adjoint of _analysis_step; equals its inverse because the bank is orthonormal
    n = 2 * approx.size
    out = np.zeros(n)
    np.add.at(out, _taps_index(n), approx[:, None] * DB4_LO + detail[:, None] * DB4_HI)
    return out


def dwt_db4(x, levels: int = LEVELS) -> WaveletDecomposition:
    """Multilevel db4 analysis with periodic extension.

    ``len(x)`` must be a positive multiple of ``2**levels``; level ``j``
    then has ``len(x) / 2**j`` detail coefficients.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise WaveletError(f"expected a 1-D signal, got shape {x.shape}")
    if levels < 1:
        raise WaveletError("levels must be positive")
    n = x.size
    block = 2 ** levels
    if n < block:
        raise WaveletError(f"signal of length {n} is too short for {levels} levels (need >= {block})")
    if n % block:
        raise WaveletError(f"length {n} is not divisible by 2**{levels} = {block}")
    details = []
    a = x
    for _ in range(levels):
        a, d = _analysis_step(a)
        details.append(d)
    return WaveletDecomposition(tuple(details), a, n)


def idwt_db4(decomp: WaveletDecomposition) -> np.ndarray:
    a = np.asarray(decomp.approximation, dtype=np.float64)
    for d in reversed(decomp.details):
        d = np.asarray(d, dtype=np.float64)
        if d.shape != a.shape:
            raise WaveletError(f"detail length {d.size} does not match approximation length {a.size}")
        a = _synthesis_step(a, d)
    if a.size != decomp.original_length:
        raise WaveletError(f"reconstructed length {a.size} != original_length {decomp.original_length}")
    return a


def energy_entropy(c: np.ndarray) -> float:
    """Shannon entropy (bits) of the normalised squared coefficients."""
    c = np.asarray(c, dtype=np.float64)
    peak = np.abs(c).max() if c.size else 0.0
    if peak == 0.0:
        return 0.0
    e = (c / peak) ** 2  # scaled so squares neither overflow nor all underflow
    p = e / e.sum()
    p = p[p > 0]
    return float(max(-np.sum(p * np.log2(p)), 0.0))


def subband_stats(c: np.ndarray) -> tuple[float, float, float]:
    c = np.asarray(c, dtype=np.float64)
    rms = float(np.sqrt(np.mean(c * c)))
    var = float(np.var(c))
    return rms, var, energy_entropy(c)


def subband_features(decomp: WaveletDecomposition) -> np.ndarray:
    """[RMS, variance, entropy] for each detail level, finest first."""
    return np.array([v for d in decomp.details for v in subband_stats(d)])


def usable_length(n: int, levels: int = LEVELS) -> int:
    return n - n % (2 ** levels)


def channel_features(samples: np.ndarray, levels: int = LEVELS) -> np.ndarray:
    """Subband features for every row of a ``[channels, time]`` array.

    Rows are truncated to the largest length divisible by ``2**levels``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = usable_length(samples.shape[-1], levels)
    if n == 0:
        raise WaveletError(f"epoch of {samples.shape[-1]} samples is shorter than 2**{levels}")
    return np.stack([subband_features(dwt_db4(row[:n], levels)) for row in samples])


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray  # 24 = 12 from the w_max channel, then 12 from the w_min channel
    trial_id: int
    rank: int  # 1-based channel-pair rank
    label: int


def pair_features(chan_feats: np.ndarray, model: CspModel) -> np.ndarray:
    """``[k, 24]`` rows from a ``[channels, 12]`` table, paired by CSP rank."""
    if chan_feats.shape[0] != model.n_channels:
        raise WaveletError(f"{chan_feats.shape[0]} channels but CSP model has {model.n_channels}")
    return np.hstack([chan_feats[list(model.selected_max)], chan_feats[list(model.selected_min)]])


def trial_features(trial: Trial, model: CspModel) -> list[FeatureVector]:
    rows = pair_features(channel_features(trial.epoch.samples), model)
    return [
        FeatureVector(row, trial.trial_id, rank, trial.label)
        for rank, row in enumerate(rows, start=1)
    ]


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Stacked feature vectors with their trial ids, ranks, and labels."""

    X: np.ndarray
    trial_ids: np.ndarray
    ranks: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector]) -> "FeatureMatrix":
        if not vectors:
            return cls(np.zeros((0, 2 * FEATURES_PER_CHANNEL)), *(np.zeros(0, dtype=int),) * 3)
        return cls(
            np.stack([v.values for v in vectors]),
            np.array([v.trial_id for v in vectors]),
            np.array([v.rank for v in vectors]),
            np.array([v.label for v in vectors]),
        )

    def select(self, mask) -> "FeatureMatrix":
        return FeatureMatrix(self.X[mask], self.trial_ids[mask], self.ranks[mask], self.labels[mask])

    def concat(self, other: "FeatureMatrix") -> "FeatureMatrix":
        return FeatureMatrix(
            np.vstack([self.X, other.X]),
            np.concatenate([self.trial_ids, other.trial_ids]),
            np.concatenate([self.ranks, other.ranks]),
            np.concatenate([self.labels, other.labels]),
        )

    def to_csv(self) -> str:
        lines = []
        for tid, rank, lab, row in zip(self.trial_ids, self.ranks, self.labels, self.X):
            lines.append(",".join([str(int(tid)), str(int(rank)), str(int(lab))] + [repr(float(v)) for v in row]))
        return "\n".join(lines) + ("\n" if lines else "")

    def save_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())
