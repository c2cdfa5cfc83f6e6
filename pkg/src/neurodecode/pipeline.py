"""Trial-grouped cross-validation of the CSP -> wavelet -> MLP -> vote chain."""

from __future__ import annotations

import dataclasses
import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nnet
from ._io import atomic_write_json, atomic_write_text
from .csp import CspModel, fit_csp_trials
from .dataset import TrialSet
from .wavelet import FeatureMatrix, channel_features, pair_features

Predictor = Callable[[FeatureMatrix], np.ndarray]
Trainer = Callable[[FeatureMatrix, nnet.TrainConfig, int], Predictor]


class PipelineError(ValueError):
    pass


class LeakageError(PipelineError):
    pass


class VoteError(PipelineError):
    pass


def sub_seed(seed: int, name: str, *index: int) -> int:
    """Deterministic child seed for a named purpose (fold shuffle, init, ...)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode()), *index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass(frozen=True)
class FoldAssignment:
    fold_of_trial: dict[int, int]
    n_folds: int

    def test_ids(self, fold: int) -> list[int]:
        return sorted(t for t, f in self.fold_of_trial.items() if f == fold)

    def train_ids(self, fold: int) -> list[int]:
        return sorted(t for t, f in self.fold_of_trial.items() if f != fold)


def make_folds(ts: TrialSet, n_folds: int, seed: int, stratify: bool = True) -> FoldAssignment:
    """Partition trial ids into ``n_folds`` folds.

    With ``stratify`` each class is shuffled and dealt round-robin, class 1
    starting where class 0 stopped, so per-class and total fold sizes both
    differ by at most one. Without it all ids are shuffled and dealt together.
    """
    if n_folds < 1:
        raise PipelineError("n_folds must be positive")
    rng = np.random.default_rng(sub_seed(seed, "folds"))
    groups = [[t.trial_id for t in ts.trials if t.label == label] for label in (0, 1)]
    if not stratify:
        groups = [[t.trial_id for t in ts.trials]]
    fold_of = {}
    start = 0
    for ids in groups:
        if len(ids) < n_folds:
            raise PipelineError(f"{len(ids)} trials cannot fill {n_folds} folds")
        for j, tid in enumerate(rng.permutation(ids)):
            fold_of[int(tid)] = (start + j) % n_folds
        start = (start + len(ids)) % n_folds
    return FoldAssignment(fold_of, n_folds)


def majority_vote(votes: Sequence[int], probs: Sequence[float] | None = None, expected: int | None = None) -> int:
    """Hard vote over per-channel predictions.

    Even-length ties fall back to the mean probability when ``probs`` is
    given and are an error otherwise.
    """
    votes = [int(v) for v in votes]
    if expected is not None and len(votes) != expected:
        raise VoteError(f"expected {expected} votes, got {len(votes)}")
    if not votes or any(v not in (0, 1) for v in votes):
        raise VoteError("votes must be a non-empty sequence of 0/1")
    ones = sum(votes)
    if 2 * ones != len(votes):
        return int(2 * ones > len(votes))
    if probs is None:
        raise VoteError(f"tied vote ({ones} of {len(votes)}) and no probabilities to break it")
    return int(float(np.mean(probs)) >= 0.5)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-12))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def feature_table(ts: TrialSet) -> dict[int, np.ndarray]:
    """Per-trial ``[channels, 12]`` subband features; no fitted state involved."""
    return {t.trial_id: channel_features(t.epoch.samples) for t in ts.trials}


def build_features(ts: TrialSet, model: CspModel, table: dict[int, np.ndarray] | None = None) -> FeatureMatrix:
    rows, tids, ranks, labels = [], [], [], []
    for t in ts.trials:
        feats = table[t.trial_id] if table is not None else channel_features(t.epoch.samples)
        pairs = pair_features(feats, model)
        rows.append(pairs)
        tids += [t.trial_id] * len(pairs)
        ranks += list(range(1, len(pairs) + 1))
        labels += [t.label] * len(pairs)
    if not rows:
        return FeatureMatrix.from_vectors([])
    return FeatureMatrix(np.vstack(rows), np.array(tids), np.array(ranks), np.array(labels))


def audit_split(train: FeatureMatrix, test: FeatureMatrix, test_ids: Sequence[int]) -> None:
    """Raise if any training row belongs to a held-out trial."""
    held_out = set(int(i) for i in test_ids)
    leaked = sorted(held_out.intersection(int(i) for i in train.trial_ids))
    if leaked:
        raise LeakageError(f"training features include held-out trials {leaked}")
    strays = sorted(set(int(i) for i in test.trial_ids) - held_out)
    if strays:
        raise LeakageError(f"test features include trials outside the held-out fold: {strays}")


def mlp_trainer(train: FeatureMatrix, config: nnet.TrainConfig, init_seed: int) -> Predictor:
    model = nnet.train(nnet.build_model(init_seed, input_width=train.X.shape[1]), train, config)

    def predict(fm: FeatureMatrix) -> np.ndarray:
        return nnet.predict_proba(model, fm.X)

    return predict


@dataclass
class TrialRecord:
    trial_id: int
    label: int
    votes: list[int]
    prediction: int
    fold: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    records: list[TrialRecord]
    selected_max: list[int]
    selected_min: list[int]


def run_fold(
    ts: TrialSet,
    assignment: FoldAssignment,
    fold: int,
    k: int = 9,
    train_config: nnet.TrainConfig | None = None,
    seed: int = 0,
    standardize: bool = True,
    ridge: float = 1e-8,
    trainer: Trainer | None = None,
    table: dict[int, np.ndarray] | None = None,
) -> FoldResult:
    train_config = train_config or nnet.TrainConfig()
    trainer = trainer or mlp_trainer
    test_ids = assignment.test_ids(fold)
    train_ids = assignment.train_ids(fold)
    if not test_ids:
        raise PipelineError(f"fold {fold} is empty")
    if set(train_ids) & set(test_ids):
        raise LeakageError(f"fold {fold}: trial ids appear on both sides of the split")

    train_set = ts.subset(train_ids)
    test_set = ts.subset(test_ids)
    if not train_set.trials:
        # n_folds == 1 smoke runs have no held-out data: fit and score on the same trials
        train_set = test_set
    csp_model = fit_csp_trials(train_set.trials, k, ridge)
    train = build_features(train_set, csp_model, table)
    test = build_features(test_set, csp_model, table)
    if train_set is not test_set:
        audit_split(train, test, test_ids)

    if standardize:
        scaler = Standardizer.fit(train.X)
        train = dataclasses.replace(train, X=scaler.transform(train.X))
        test = dataclasses.replace(test, X=scaler.transform(test.X))

    cfg = dataclasses.replace(train_config, seed=sub_seed(seed, "train", fold))
    predictor = trainer(train, cfg, sub_seed(seed, "init", fold))
    probs = np.asarray(predictor(test), dtype=np.float64)

    records = []
    for t in test_set.trials:
        rows = np.flatnonzero(test.trial_ids == t.trial_id)
        rows = rows[np.argsort(test.ranks[rows])]
        p = probs[rows]
        votes = [int(v) for v in (p >= 0.5)]
        records.append(TrialRecord(t.trial_id, t.label, votes, majority_vote(votes, p, expected=k), fold))
    correct = sum(r.prediction == r.label for r in records)
    return FoldResult(
        fold, correct / len(records), records, list(csp_model.selected_max), list(csp_model.selected_min)
    )


@dataclass
class CvReport:
    fold_accuracies: list[float]
    mean: float
    std: float
    trials: list[TrialRecord]
    config: dict = field(default_factory=dict)
    selections: list[dict] = field(default_factory=list)

    @classmethod
    def from_folds(cls, folds: Sequence[FoldResult], config: dict) -> "CvReport":
        folds = sorted(folds, key=lambda f: f.fold)
        acc = [float(f.accuracy) for f in folds]
        trials = sorted((r for f in folds for r in f.records), key=lambda r: r.trial_id)
        sel = [{"fold": f.fold, "selected_max": f.selected_max, "selected_min": f.selected_min} for f in folds]
        return cls(acc, float(np.mean(acc)), float(np.std(acc)), trials, config, sel)

    def summary(self) -> str:
        return f"accuracy {100 * self.mean:.1f} ± {100 * self.std:.1f} % over {len(self.fold_accuracies)} folds"

    def to_dict(self) -> dict:
        return {
            "fold_accuracies": self.fold_accuracies,
            "mean": self.mean,
            "std": self.std,
            "config": self.config,
            "selections": self.selections,
            "trials": [r.to_dict() for r in self.trials],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "CvReport":
        return cls(
            fold_accuracies=list(d["fold_accuracies"]),
            mean=d["mean"],
            std=d["std"],
            trials=[TrialRecord(**r) for r in d["trials"]],
            config=d.get("config", {}),
            selections=d.get("selections", []),
        )

    def folds_csv(self) -> str:
        return "fold,accuracy\n" + "".join(f"{i},{a!r}\n" for i, a in enumerate(self.fold_accuracies))

    def trials_csv(self) -> str:
        width = max((len(r.votes) for r in self.trials), default=0)
        head = ["trial_id", "label", "fold"] + [f"vote_{i}" for i in range(1, width + 1)] + ["prediction"]
        lines = [",".join(head)]
        for r in self.trials:
            lines.append(",".join(str(v) for v in [r.trial_id, r.label, r.fold, *r.votes, r.prediction]))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "report") -> None:
        out = Path(out_dir)
        atomic_write_text(out / f"{stem}.json", self.to_json())
        atomic_write_text(out / f"{stem}_folds.csv", self.folds_csv())
        atomic_write_text(out / f"{stem}_trials.csv", self.trials_csv())


def _fold_job(args):
    return run_fold(*args[0], **args[1])


def run_cv(
    ts: TrialSet,
    n_folds: int = 10,
    k: int = 9,
    train_config: nnet.TrainConfig | None = None,
    seed: int = 0,
    standardize: bool = True,
    ridge: float = 1e-8,
    jobs: int = 1,
    trainer: Trainer | None = None,
    table: dict[int, np.ndarray] | None = None,
    stratify: bool = True,
) -> CvReport:
    """K-fold CV at trial granularity; fold jobs may run in worker processes.

    Every fold draws its randomness from ``sub_seed(seed, ...)`` so the
    report does not depend on ``jobs``.
    """
    ts.require_both_classes()
    if not 1 <= k <= ts.n_channels:
        raise PipelineError(f"k must be in [1, {ts.n_channels}], got {k}")
    train_config = train_config or nnet.TrainConfig()
    assignment = make_folds(ts, n_folds, seed, stratify)
    if table is None:
        table = feature_table(ts)
    kw = dict(k=k, train_config=train_config, seed=seed, standardize=standardize,
              ridge=ridge, trainer=trainer, table=table)
    if jobs > 1 and n_folds > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_fold_job, [((ts, assignment, f), kw) for f in range(n_folds)]))
    else:
        folds = [run_fold(ts, assignment, f, **kw) for f in range(n_folds)]

    train_echo = train_config.to_dict()
    train_echo.pop("seed")
    config = {
        "folds": n_folds,
        "k": k,
        "seed": seed,
        "standardize": standardize,
        "stratify": stratify,
        "ridge": ridge,
        "train": train_echo,
        "trials": len(ts),
        "channels": ts.n_channels,
    }
    return CvReport.from_folds(folds, config)


@dataclass
class SweepRow:
    k: int
    mean: float
    std: float


def sweep_channels(
    ts: TrialSet,
    k_values: Sequence[int],
    n_folds: int = 10,
    train_config: nnet.TrainConfig | None = None,
    seed: int = 0,
    **cv_kwargs,
) -> list[SweepRow]:
    """Mean/std CV accuracy for each channel count in ``k_values``."""
    k_values = list(k_values)
    if k_values and max(k_values) > ts.n_channels:
        raise PipelineError(f"k = {max(k_values)} exceeds the {ts.n_channels} available channels")
    if not k_values:
        return []
    table = cv_kwargs.pop("table", None) or feature_table(ts)
    rows = []
    for k in k_values:
        rep = run_cv(ts, n_folds, k, train_config, seed, table=table, **cv_kwargs)
        rows.append(SweepRow(k, rep.mean, rep.std))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    return "k,mean,std\n" + "".join(f"{r.k},{r.mean!r},{r.std!r}\n" for r in rows)
