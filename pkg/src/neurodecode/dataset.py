"""In-memory trial types and the JSON manifest + per-trial CSV format.

A manifest looks like::

    {
      "rate_hz": 256.0,
      "epoch_samples": 512,
      "channel_names": ["Fp1", "Fp2", ...],
      "class_names": {"0": "in", "1": "cooperate"},
      "trials": [{"id": 0, "label": 0, "file": "trials/trial_00000.csv"}, ...]
    }

Each trial file holds one row per channel and ``epoch_samples`` columns, no
header. Values are written with ``repr`` so a save/load cycle is exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._io import atomic_write_json, atomic_write_text


class DatasetError(ValueError):
    """Base class for manifest and trial validation failures."""


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class NonFiniteError(DatasetError):
    pass


class DuplicateTrialError(DatasetError):
    pass


class LabelError(DatasetError):
    pass


class ManifestFormatError(DatasetError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Recording:
    """Multichannel samples ``[channels, time]`` with rate and channel names."""

    samples: np.ndarray
    rate_hz: float
    channel_names: tuple[str, ...]

    def __post_init__(self):
        samples = _frozen(self.samples)
        if samples.ndim != 2:
            raise ShapeMismatchError(f"samples must be 2-D [channels, time], got shape {samples.shape}")
        n_ch, n_t = samples.shape
        if n_ch < 2:
            raise ShapeMismatchError(f"need at least 2 channels, got {n_ch}")
        if n_t < 1:
            raise ShapeMismatchError("recording has no samples")
        if not np.all(np.isfinite(samples)):
            raise NonFiniteError("recording contains NaN or Inf samples")
        if not (np.isfinite(self.rate_hz) and self.rate_hz > 0):
            raise DatasetError(f"rate_hz must be positive, got {self.rate_hz}")
        names = tuple(str(c) for c in self.channel_names)
        if len(names) != n_ch:
            raise ShapeMismatchError(f"{len(names)} channel names for {n_ch} channels")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "rate_hz", float(self.rate_hz))
        object.__setattr__(self, "channel_names", names)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def with_samples(self, samples, rate_hz: float | None = None) -> "Recording":
        return Recording(samples, self.rate_hz if rate_hz is None else rate_hz, self.channel_names)

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.rate_hz == other.rate_hz
            and self.channel_names == other.channel_names
            and self.samples.shape == other.samples.shape
            and bool(np.array_equal(self.samples, other.samples))
        )


@dataclass(frozen=True)
class Trial:
    trial_id: int
    label: int
    epoch: Recording

    def __post_init__(self):
        if int(self.trial_id) != self.trial_id or self.trial_id < 0:
            raise DatasetError(f"trial_id must be a non-negative integer, got {self.trial_id!r}")
        if self.label not in (0, 1):
            raise LabelError(f"trial {self.trial_id}: label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "trial_id", int(self.trial_id))
        object.__setattr__(self, "label", int(self.label))


@dataclass(frozen=True)
class TrialSet:
    """Validated, immutable collection of equally shaped trials."""

    trials: tuple[Trial, ...]
    class_names: Mapping[int, str]
    rate_hz: float
    epoch_samples: int
    channel_names: tuple[str, ...]
    preprocessing: tuple[str, ...] = field(default=())

    def __post_init__(self):
        trials = tuple(self.trials)
        names = tuple(str(c) for c in self.channel_names)
        class_names = {int(k): str(v) for k, v in dict(self.class_names).items()}
        if set(class_names) != {0, 1}:
            raise LabelError(f"class_names must map exactly 0 and 1, got keys {sorted(class_names)}")
        if int(self.epoch_samples) != self.epoch_samples or self.epoch_samples < 1:
            raise ShapeMismatchError(f"epoch_samples must be a positive integer, got {self.epoch_samples}")
        if not (np.isfinite(self.rate_hz) and self.rate_hz > 0):
            raise DatasetError(f"rate_hz must be positive, got {self.rate_hz}")
        if len(names) < 2:
            raise ShapeMismatchError(f"need at least 2 channels, got {len(names)}")
        seen = set()
        for t in trials:
            if t.trial_id in seen:
                raise DuplicateTrialError(f"duplicate trial_id {t.trial_id}")
            seen.add(t.trial_id)
            ep = t.epoch
            if ep.samples.shape != (len(names), self.epoch_samples):
                raise ShapeMismatchError(
                    f"trial {t.trial_id}: shape {ep.samples.shape}, "
                    f"expected ({len(names)}, {self.epoch_samples})"
                )
            if ep.rate_hz != float(self.rate_hz):
                raise ShapeMismatchError(f"trial {t.trial_id}: rate {ep.rate_hz} != {self.rate_hz}")
            if ep.channel_names != names:
                raise ShapeMismatchError(f"trial {t.trial_id}: channel names differ from the set's")
        object.__setattr__(self, "trials", trials)
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "class_names", class_names)
        object.__setattr__(self, "rate_hz", float(self.rate_hz))
        object.__setattr__(self, "epoch_samples", int(self.epoch_samples))
        object.__setattr__(self, "preprocessing", tuple(self.preprocessing))

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=int)

    @property
    def trial_ids(self) -> np.ndarray:
        return np.array([t.trial_id for t in self.trials], dtype=int)

    def class_counts(self) -> tuple[int, int]:
        labels = self.labels
        return int(np.sum(labels == 0)), int(np.sum(labels == 1))

    def require_both_classes(self) -> None:
        n0, n1 = self.class_counts()
        if n0 == 0 or n1 == 0:
            raise LabelError(f"both classes must be present (class 0: {n0}, class 1: {n1})")

    def subset(self, trial_ids: Iterable[int]) -> "TrialSet":
        """Trials whose id is in ``trial_ids``, in the set's original order."""
        wanted = set(int(i) for i in trial_ids)
        return self.replace_trials([t for t in self.trials if t.trial_id in wanted])

    def replace_trials(self, trials: Sequence[Trial], **changes) -> "TrialSet":
        kw = dict(
            class_names=self.class_names,
            rate_hz=self.rate_hz,
            epoch_samples=self.epoch_samples,
            channel_names=self.channel_names,
            preprocessing=self.preprocessing,
        )
        kw.update(changes)
        return TrialSet(trials=tuple(trials), **kw)

    @classmethod
    def from_arrays(
        cls,
        data,
        labels,
        rate_hz: float,
        trial_ids=None,
        channel_names=None,
        class_names=None,
    ) -> "TrialSet":
        """Build a set from a ``[trials, channels, time]`` array."""
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeMismatchError(f"expected [trials, channels, time], got shape {data.shape}")
        n_tr, n_ch, n_t = data.shape
        if trial_ids is None:
            trial_ids = range(n_tr)
        if channel_names is None:
            channel_names = [f"ch{i:02d}" for i in range(n_ch)]
        if class_names is None:
            class_names = {0: "class0", 1: "class1"}
        trials = [
            Trial(int(tid), int(lab), Recording(x, rate_hz, channel_names))
            for tid, lab, x in zip(trial_ids, labels, data)
        ]
        return cls(tuple(trials), class_names, rate_hz, n_t, tuple(channel_names))


def _format_row(row) -> str:
    return ",".join(repr(float(v)) for v in row)


def trial_csv_text(samples: np.ndarray) -> str:
    return "\n".join(_format_row(r) for r in samples) + "\n"


def _read_trial_csv(path: Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ManifestFormatError(f"{path}:{lineno}: {exc}") from None
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ShapeMismatchError(f"{path}: ragged rows (widths {sorted(widths)})")
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1)


def _require(d: Mapping, key: str, path):
    if key not in d:
        raise ManifestFormatError(f"{path}: manifest missing field {key!r}")
    return d[key]


def load_manifest(path) -> TrialSet:
    """Load and validate a manifest and all trial files it references."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestFormatError(f"{path}: invalid JSON ({exc})") from None

    rate_hz = float(_require(doc, "rate_hz", path))
    epoch_samples = _require(doc, "epoch_samples", path)
    channel_names = list(_require(doc, "channel_names", path))
    raw_classes = _require(doc, "class_names", path)
    try:
        class_names = {int(k): v for k, v in raw_classes.items()}
    except (ValueError, AttributeError):
        raise LabelError(f"{path}: class_names keys must be '0' and '1'") from None
    entries = _require(doc, "trials", path)
    n_ch = len(channel_names)

    trials = []
    seen = set()
    for entry in entries:
        tid = entry.get("id")
        label = entry.get("label")
        rel = entry.get("file")
        if not isinstance(tid, int) or isinstance(tid, bool):
            raise ManifestFormatError(f"{path}: trial id must be an integer, got {tid!r}")
        if tid in seen:
            raise DuplicateTrialError(f"{path}: duplicate trial id {tid}")
        seen.add(tid)
        if label not in (0, 1) or isinstance(label, bool):
            raise LabelError(f"{path}: trial {tid} has unknown label {label!r}")
        if rel is None:
            raise ManifestFormatError(f"{path}: trial {tid} has no 'file'")
        fpath = path.parent / rel
        if not fpath.is_file():
            raise MissingFileError(f"trial {tid}: file not found: {fpath}")
        samples = _read_trial_csv(fpath)
        if samples.shape != (n_ch, epoch_samples):
            raise ShapeMismatchError(
                f"trial {tid} ({fpath.name}): shape {samples.shape}, "
                f"manifest declares ({n_ch}, {epoch_samples})"
            )
        if not np.all(np.isfinite(samples)):
            raise NonFiniteError(f"trial {tid} ({fpath.name}) contains non-finite samples")
        trials.append(Trial(tid, label, Recording(samples, rate_hz, channel_names)))

    return TrialSet(
        trials=tuple(trials),
        class_names=class_names,
        rate_hz=rate_hz,
        epoch_samples=epoch_samples,
        channel_names=tuple(channel_names),
        preprocessing=tuple(doc.get("preprocessing", ())),
    )


def trial_filename(trial_id: int) -> str:
    return f"trials/trial_{trial_id:05d}.csv"


def manifest_document(ts: TrialSet) -> dict:
    doc = {
        "rate_hz": ts.rate_hz,
        "epoch_samples": ts.epoch_samples,
        "channel_names": list(ts.channel_names),
        "class_names": {str(k): v for k, v in sorted(ts.class_names.items())},
        "trials": [
            {"id": t.trial_id, "label": t.label, "file": trial_filename(t.trial_id)}
            for t in ts.trials
        ],
    }
    if ts.preprocessing:
        doc["preprocessing"] = list(ts.preprocessing)
    return doc


def save_manifest(ts: TrialSet, path) -> None:
    """Write ``ts`` as a manifest at ``path`` plus ``trials/*.csv`` beside it."""
    # Recording construction already rejects non-finite data; re-check in case
    # the caller bypassed it through object.__setattr__ or a view.
    for t in ts.trials:
        if not np.all(np.isfinite(t.epoch.samples)):
            raise NonFiniteError(f"trial {t.trial_id} contains non-finite samples; refusing to write")
    path = Path(path)
    for t in ts.trials:
        atomic_write_text(path.parent / trial_filename(t.trial_id), trial_csv_text(t.epoch.samples))
    atomic_write_json(path, manifest_document(ts))

