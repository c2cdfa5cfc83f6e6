"""Command-line entry point: ``neurodecode <command> [options]``.

Commands
--------
generate    write a synthetic trial set
preprocess  resample, bandpass and notch a trial set
evaluate    cross-validated accuracy of the full chain
sweep       accuracy as a function of the number of channel pairs
gradcheck   finite-difference check of the network gradients

Settings come from built-in defaults, then an optional JSON file given with
``--config``, then ``NEURODECODE_SEED``, then command-line flags.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, dsp, nnet, pipeline, synth
from ._io import atomic_write_text
from .dataset import DatasetError, load_manifest, save_manifest

SEED_ENV = "NEURODECODE_SEED"

DEFAULTS: dict = {
    "dataset": None,
    "output": "out",
    "preprocessing": {
        "resample": True,
        "resample_hz": 256.0,
        "bandpass": True,
        "bandpass_hz": [8.0, 70.0],
        "bandpass_order": 5,
        "notch": True,
        "notch_hz": 60.0,
        "notch_q": 30.0,
    },
    "csp": {"k": 9, "ridge": 1e-8},
    "training": {
        "learning_rate": 1e-3,
        "batch_size": 32,
        "epochs": 200,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "bn_momentum": 0.9,
    },
    "cv": {"folds": 10, "seed": 0, "stratify": True, "standardize": True},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    """Resolved settings for one run; build with :meth:`from_sources`."""

    dataset: str | None
    output: str
    preprocessing: dict
    csp: dict
    training: dict
    cv: dict
    sources: list[str] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        merged = _merge(DEFAULTS, d)
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def from_sources(cls, path=None, overrides: dict | None = None, environ=None) -> "RunConfig":
        environ = os.environ if environ is None else environ
        merged = copy.deepcopy(DEFAULTS)
        sources = ["defaults"]
        if path is not None:
            try:
                with open(path) as fh:
                    doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError(f"config file {path} must hold a JSON object")
            merged = _merge(merged, doc)
            sources.append(str(path))
        if environ.get(SEED_ENV):
            try:
                merged["cv"]["seed"] = int(environ[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from exc
            sources.append(SEED_ENV)
        if overrides:
            merged = _merge(merged, overrides)
            sources.append("flags")
        cfg = cls(**merged, sources=sources)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.train_config()
        self.preprocess_config()
        k, ridge = self.csp["k"], self.csp["ridge"]
        if not isinstance(k, int) or k < 1:
            raise ConfigError(f"csp.k must be a positive integer, got {k!r}")
        if not ridge >= 0:
            raise ConfigError(f"csp.ridge must be non-negative, got {ridge!r}")
        folds = self.cv["folds"]
        if not isinstance(folds, int) or folds < 1:
            raise ConfigError(f"cv.folds must be a positive integer, got {folds!r}")
        if not isinstance(self.cv["seed"], int):
            raise ConfigError("cv.seed must be an integer")

    def train_config(self) -> nnet.TrainConfig:
        try:
            return nnet.TrainConfig(**self.training)
        except nnet.NetworkError as exc:
            raise ConfigError(f"training: {exc}") from exc

    def preprocess_config(self) -> dsp.PreprocessConfig:
        p = self.preprocessing
        band = p["bandpass_hz"]
        if not (isinstance(band, (list, tuple)) and len(band) == 2):
            raise ConfigError("preprocessing.bandpass_hz must be [low, high]")
        return dsp.PreprocessConfig(
            resample_hz=float(p["resample_hz"]) if p["resample"] else None,
            bandpass=(float(band[0]), float(band[1])) if p["bandpass"] else None,
            bandpass_order=int(p["bandpass_order"]),
            notch_hz=float(p["notch_hz"]) if p["notch"] else None,
            notch_q=float(p["notch_q"]),
        )

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "output": self.output,
            "preprocessing": self.preprocessing,
            "csp": self.csp,
            "training": self.training,
            "cv": self.cv,
        }


def _nested(pairs) -> dict:
    """Turn ``[("cv.seed", 3), ...]`` into nested dicts, skipping ``None``."""
    out: dict = {}
    for dotted, value in pairs:
        if value is None:
            continue
        node = out
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def _k_values(text: str) -> list[int]:
    """Parse ``"3..15"`` or ``"3,5,9"`` (or a mix) into a list of ints."""
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..")
            values += list(range(int(lo), int(hi) + 1))
        else:
            values.append(int(part))
    return values


def _add_run_flags(p: argparse.ArgumentParser, evaluation: bool = True) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--dataset", help="manifest.json of the input trial set")
    p.add_argument("--out", dest="output", help="output directory")
    p.add_argument("--seed", type=int, help="top-level seed (overrides config and environment)")
    if not evaluation:
        return
    p.add_argument("--folds", type=int)
    p.add_argument("--k", type=int, help="channel pairs per trial")
    p.add_argument("--ridge", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--no-standardize", action="store_const", const=False, dest="standardize")
    p.add_argument("--no-stratify", action="store_const", const=False, dest="stratify")
    p.add_argument("--jobs", type=int, default=1, help="parallel fold workers (default 1)")


def _overrides(args) -> dict:
    g = vars(args)
    return _nested([
        ("dataset", g.get("dataset")),
        ("output", g.get("output")),
        ("cv.seed", g.get("seed")),
        ("cv.folds", g.get("folds")),
        ("cv.standardize", g.get("standardize")),
        ("cv.stratify", g.get("stratify")),
        ("csp.k", g.get("k")),
        ("csp.ridge", g.get("ridge")),
        ("training.epochs", g.get("epochs")),
        ("training.batch_size", g.get("batch_size")),
        ("training.learning_rate", g.get("learning_rate")),
        ("preprocessing.resample_hz", g.get("resample_hz")),
        ("preprocessing.resample", g.get("resample")),
        ("preprocessing.bandpass_hz", g.get("bandpass_hz")),
        ("preprocessing.bandpass_order", g.get("bandpass_order")),
        ("preprocessing.bandpass", g.get("bandpass")),
        ("preprocessing.notch_hz", g.get("notch_hz")),
        ("preprocessing.notch_q", g.get("notch_q")),
        ("preprocessing.notch", g.get("notch")),
    ])


def _resolve(args) -> RunConfig:
    return RunConfig.from_sources(args.config, _overrides(args))


def _require_dataset(cfg: RunConfig) -> Path:
    if not cfg.dataset:
        raise ConfigError("no dataset given (use --dataset or the config's \"dataset\" key)")
    return Path(cfg.dataset)


def cmd_generate(args) -> int:
    seed = args.seed
    if seed is None:
        seed = int(os.environ[SEED_ENV]) if os.environ.get(SEED_ENV) else 0
    fields = dict(
        channels=args.channels, trials_per_class=args.trials, epoch_samples=args.epoch,
        rate_hz=args.rate, informative_pairs=args.pairs, variance_ratio=args.ratio,
        noise_sigma=args.noise, band_hz=tuple(args.band) if args.band else None,
    )
    spec = synth.SynthSpec(seed=seed, **{k: v for k, v in fields.items() if v is not None})
    ts = synth.generate(spec)
    out = Path(args.out)
    save_manifest(ts, out / "manifest.json")
    atomic_write_text(out / "synth_spec.json", json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ts)} trials ({spec.channels} channels x {spec.epoch_samples} samples "
          f"@ {spec.rate_hz:g} Hz, {spec.informative_pairs} informative pairs) to {out / 'manifest.json'}")
    return 0


def _copy_dataset(src: Path, out: Path) -> None:
    doc = json.loads(src.read_text())
    out.mkdir(parents=True, exist_ok=True)
    for entry in doc.get("trials", []):
        target = out / entry["file"]
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src.parent / entry["file"], target)
    shutil.copyfile(src, out / "manifest.json")


def cmd_preprocess(args) -> int:
    cfg = _resolve(args)
    src = _require_dataset(cfg)
    pcfg = cfg.preprocess_config()
    ts = load_manifest(src)
    out = Path(cfg.output)
    if pcfg.resample_hz is None and pcfg.bandpass is None and pcfg.notch_hz is None:
        _copy_dataset(src, out)
        print(f"all preprocessing disabled; copied {len(ts)} trials unchanged to {out / 'manifest.json'}")
        return 0
    result = dsp.preprocess_trials(ts, pcfg)
    save_manifest(result, out / "manifest.json")
    steps = "; ".join(result.preprocessing[len(ts.preprocessing):])
    print(f"preprocessed {len(result)} trials -> {result.rate_hz:g} Hz, {result.epoch_samples} samples ({steps})")
    return 0


def _cv_kwargs(cfg: RunConfig, jobs: int) -> dict:
    return dict(
        train_config=cfg.train_config(),
        seed=cfg.cv["seed"],
        standardize=bool(cfg.cv["standardize"]),
        stratify=bool(cfg.cv["stratify"]),
        ridge=float(cfg.csp["ridge"]),
        jobs=jobs,
    )


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    ts = load_manifest(_require_dataset(cfg))
    started = time.perf_counter()
    report = pipeline.run_cv(ts, cfg.cv["folds"], cfg.csp["k"], **_cv_kwargs(cfg, args.jobs))
    report.write(cfg.output)
    print(f"{report.summary()} (k = {cfg.csp['k']}, {len(ts)} trials, {time.perf_counter() - started:.1f} s)")
    print(f"mean ± std: {100 * report.mean:.2f} ± {100 * report.std:.2f} %")
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    ts = load_manifest(_require_dataset(cfg))
    ks = _k_values(args.k_values)
    if any(k < 1 for k in ks):
        raise ConfigError("k values must be positive")
    rows = pipeline.sweep_channels(ts, ks, cfg.cv["folds"], **_cv_kwargs(cfg, args.jobs))
    out = Path(cfg.output)
    atomic_write_text(out / "sweep.csv", pipeline.sweep_csv(rows))
    for r in rows:
        print(f"k = {r.k:2d}: {100 * r.mean:.1f} ± {100 * r.std:.1f} %")
    if rows:
        best = max(rows, key=lambda r: r.mean)
        print(f"best k = {best.k}; wrote {out / 'sweep.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args)
    seed = cfg.cv["seed"]
    rng = np.random.default_rng(pipeline.sub_seed(seed, "gradcheck-data"))
    x = rng.standard_normal((args.batch, nnet.INPUT_WIDTH))
    y = rng.integers(0, 2, args.batch).astype(float)
    model = nnet.build_model(pipeline.sub_seed(seed, "init"))
    n_params = None if args.params <= 0 else args.params
    report = nnet.gradient_check(model, x, y, step=args.step, tolerance=args.tolerance,
                                 n_params=n_params, seed=seed)
    print(report)
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neurodecode", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic trial set")
    g.add_argument("--channels", type=int)
    g.add_argument("--trials", type=int, help="trials per class")
    g.add_argument("--epoch", type=int, help="samples per epoch (multiple of 16)")
    g.add_argument("--rate", type=float, help="sampling rate in Hz")
    g.add_argument("--pairs", type=int, help="informative channel pairs p")
    g.add_argument("--ratio", type=float, help="variance ratio r > 1")
    g.add_argument("--noise", type=float, help="white sensor-noise standard deviation")
    g.add_argument("--band", type=float, nargs=2, metavar=("LOW", "HIGH"))
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="resample, bandpass and notch a trial set")
    _add_run_flags(p, evaluation=False)
    p.add_argument("--resample-hz", type=float)
    p.add_argument("--bandpass", dest="bandpass_hz", type=float, nargs=2, metavar=("LOW", "HIGH"))
    p.add_argument("--bandpass-order", type=int)
    p.add_argument("--notch-hz", type=float)
    p.add_argument("--notch-q", type=float)
    p.add_argument("--no-resample", action="store_const", const=False, dest="resample")
    p.add_argument("--no-bandpass", action="store_const", const=False, dest="bandpass")
    p.add_argument("--no-notch", action="store_const", const=False, dest="notch")
    p.set_defaults(func=cmd_preprocess)

    e = sub.add_parser("evaluate", help="cross-validated accuracy")
    _add_run_flags(e)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="accuracy versus channel pairs")
    _add_run_flags(s)
    s.add_argument("--k-values", default="3..15", help='e.g. "3..15" or "3,6,9,12" (default 3..15)')
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--batch", type=int, default=20)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--params", type=int, default=100, help="parameters sampled; 0 checks all")
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (ConfigError, DatasetError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
