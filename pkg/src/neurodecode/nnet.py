"""Dense classifier with batch normalisation and dropout, written on numpy.

Each hidden block is dense -> batchnorm -> activation -> dropout; the head is
a single dense unit with a sigmoid. The default stack is 24 -> 4 x 40 -> 1
with ReLU, ReLU, tanh, ReLU and dropout 0.1, 0.3, 0.3, 0.3.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from ._io import atomic_write_json

INPUT_WIDTH = 24
HIDDEN_WIDTHS = (40, 40, 40, 40)
ACTIVATIONS = ("relu", "relu", "tanh", "relu")
DROPOUTS = (0.10, 0.30, 0.30, 0.30)
PROB_CLAMP = 1e-12

TRAINING = "training"
INFERENCE = "inference"


class NetworkError(ValueError):
    pass


class StaleCacheError(NetworkError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise NetworkError("learning_rate must be positive")
        if int(self.batch_size) != self.batch_size or self.batch_size < 2:
            raise NetworkError("batch_size must be an integer >= 2")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise NetworkError("epochs must be a non-negative integer")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise NetworkError("Adam betas must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise NetworkError("adam_eps must be positive")
        if not 0 < self.bn_momentum < 1:
            raise NetworkError("bn_momentum must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HiddenLayer:
    W: np.ndarray
    b: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    activation: str
    dropout: float

    @property
    def width(self) -> int:
        return self.W.shape[1]


@dataclass
class MlpModel:
    hidden: list[HiddenLayer]
    W_out: np.ndarray
    b_out: np.ndarray
    mode: str = INFERENCE
    bn_momentum: float = 0.9
    bn_eps: float = 1e-6
    config: dict | None = None
    history: list[float] = field(default_factory=list)
    _cache: dict | None = field(default=None, repr=False, compare=False)

    @property
    def input_width(self) -> int:
        return self.hidden[0].W.shape[0] if self.hidden else self.W_out.shape[0]

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays, in a fixed order, as live references."""
        out = []
        for i, h in enumerate(self.hidden, start=1):
            out += [(f"h{i}.W", h.W), (f"h{i}.b", h.b), (f"h{i}.gamma", h.gamma), (f"h{i}.beta", h.beta)]
        out += [("out.W", self.W_out), ("out.b", self.b_out)]
        return out

    def copy(self) -> "MlpModel":
        m = copy.deepcopy(self)
        m._cache = None
        return m

    def to_dict(self) -> dict:
        return {
            "input_width": self.input_width,
            "mode": self.mode,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
            "config": self.config,
            "history": list(self.history),
            "hidden": [
                {
                    "activation": h.activation,
                    "dropout": h.dropout,
                    "W": h.W.ravel().tolist(),
                    "shape": list(h.W.shape),
                    "b": h.b.tolist(),
                    "gamma": h.gamma.tolist(),
                    "beta": h.beta.tolist(),
                    "running_mean": h.running_mean.tolist(),
                    "running_var": h.running_var.tolist(),
                }
                for h in self.hidden
            ],
            "output": {"W": self.W_out.ravel().tolist(), "b": self.b_out.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        hidden = []
        for h in d["hidden"]:
            f = lambda k: np.asarray(h[k], dtype=np.float64)  # noqa: E731
            hidden.append(HiddenLayer(
                W=f("W").reshape(h["shape"]), b=f("b"), gamma=f("gamma"), beta=f("beta"),
                running_mean=f("running_mean"), running_var=f("running_var"),
                activation=h["activation"], dropout=float(h["dropout"]),
            ))
        width = hidden[-1].width if hidden else int(d["input_width"])
        return cls(
            hidden=hidden,
            W_out=np.asarray(d["output"]["W"], dtype=np.float64).reshape(width, 1),
            b_out=np.asarray(d["output"]["b"], dtype=np.float64),
            mode=d["mode"],
            bn_momentum=d["bn_momentum"],
            bn_eps=d["bn_eps"],
            config=d.get("config"),
            history=list(d.get("history", [])),
        )

    def save(self, path) -> None:
        atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "MlpModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_model(
    seed: int = 0,
    input_width: int = INPUT_WIDTH,
    widths: Sequence[int] = HIDDEN_WIDTHS,
    activations: Sequence[str] = ACTIVATIONS,
    dropouts: Sequence[float] = DROPOUTS,
    bn_momentum: float = 0.9,
) -> MlpModel:
    """Fresh network. He-uniform init for ReLU layers, Glorot-uniform otherwise."""
    if not len(widths) == len(activations) == len(dropouts):
        raise NetworkError("widths, activations and dropouts must have equal length")
    rng = np.random.default_rng(seed)
    hidden = []
    fan_in = input_width
    for width, act, p in zip(widths, activations, dropouts):
        if act not in ("relu", "tanh"):
            raise NetworkError(f"unknown activation {act!r}")
        if not 0 <= p < 1:
            raise NetworkError(f"dropout ratio must lie in [0, 1), got {p}")
        limit = np.sqrt(6.0 / fan_in) if act == "relu" else np.sqrt(6.0 / (fan_in + width))
        hidden.append(HiddenLayer(
            W=rng.uniform(-limit, limit, size=(fan_in, width)),
            b=np.zeros(width),
            gamma=np.ones(width),
            beta=np.zeros(width),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            activation=act,
            dropout=float(p),
        ))
        fan_in = width
    limit = np.sqrt(6.0 / (fan_in + 1))
    return MlpModel(hidden, rng.uniform(-limit, limit, size=(fan_in, 1)), np.zeros(1), bn_momentum=bn_momentum)


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def forward(
    model: MlpModel,
    x,
    mode: str | None = None,
    rng: np.random.Generator | None = None,
    masks: Sequence[np.ndarray | None] | None = None,
    update_stats: bool = True,
) -> np.ndarray:
    """Class-1 probabilities for each row of ``x``.

    In training mode batchnorm uses batch statistics (and, if
    ``update_stats``, folds them into the running averages) and dropout
    masks are drawn from ``rng`` unless ``masks`` are given. Intermediates
    are kept on the model for :func:`backward`.
    """
    mode = model.mode if mode is None else mode
    if mode not in (TRAINING, INFERENCE):
        raise NetworkError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_width:
        raise NetworkError(f"expected input of shape [n, {model.input_width}], got {x.shape}")
    n = x.shape[0]
    training = mode == TRAINING
    if training and n < 2:
        raise NetworkError("training-mode forward needs a batch of at least 2")
    if not np.all(np.isfinite(x)):
        raise NetworkError("inputs must be finite")

    layers = []
    used_masks = []
    h = x
    for i, layer in enumerate(model.hidden):
        z = h @ layer.W + layer.b
        if training:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            if update_stats:
                m = model.bn_momentum
                layer.running_mean = m * layer.running_mean + (1 - m) * mu
                layer.running_var = m * layer.running_var + (1 - m) * var * n / (n - 1)
        else:
            mu, var = layer.running_mean, layer.running_var
        inv_std = 1.0 / np.sqrt(var + model.bn_eps)
        xhat = (z - mu) * inv_std
        u = layer.gamma * xhat + layer.beta
        a = _activate(layer.activation, u)
        mask = None
        if training and layer.dropout > 0:
            if masks is not None:
                mask = masks[i]
            else:
                if rng is None:
                    raise NetworkError("training-mode dropout needs an rng or explicit masks")
                keep = 1.0 - layer.dropout
                mask = (rng.random(a.shape) < keep) / keep
        if mask is not None:
            a = a * mask
        used_masks.append(mask)
        layers.append({"h_in": h, "xhat": xhat, "inv_std": inv_std, "u": u, "a": a, "mask": mask})
        h = a
    logits = (h @ model.W_out + model.b_out)[:, 0]
    p = expit(logits)
    model._cache = {"x": x, "mode": mode, "layers": layers, "h_last": h, "p": p, "masks": used_masks}
    return p


def predict_proba(model: MlpModel, x) -> np.ndarray:
    return forward(model, x, mode=INFERENCE)


def predict(model: MlpModel, x, threshold: float = 0.5) -> np.ndarray:
    return (predict_proba(model, x) >= threshold).astype(int)


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise NetworkError("labels must be 0 or 1")
    return y


def loss_bce(p, y) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-12, 1-1e-12]."""
    y = _check_labels(y)
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def backward(model: MlpModel, x, y) -> dict[str, np.ndarray]:
    """Gradients of :func:`loss_bce` for the batch of the most recent forward."""
    cache = model._cache
    x = np.asarray(x, dtype=np.float64)
    if cache is None:
        raise StaleCacheError("no forward pass cached")
    if cache["x"].shape != x.shape or not np.array_equal(cache["x"], x):
        raise StaleCacheError("cached forward pass was computed on a different batch")
    y = _check_labels(y)
    n = x.shape[0]
    training = cache["mode"] == TRAINING

    grads: dict[str, np.ndarray] = {}
    dlogit = ((cache["p"] - y) / n)[:, None]
    grads["out.W"] = cache["h_last"].T @ dlogit
    grads["out.b"] = dlogit.sum(axis=0)
    dh = dlogit @ model.W_out.T

    for i in range(len(model.hidden), 0, -1):
        layer = model.hidden[i - 1]
        c = cache["layers"][i - 1]
        if c["mask"] is not None:
            dh = dh * c["mask"]
        du = dh * _activation_grad(layer.activation, c["u"], _activate(layer.activation, c["u"]))
        xhat = c["xhat"]
        grads[f"h{i}.gamma"] = np.sum(du * xhat, axis=0)
        grads[f"h{i}.beta"] = du.sum(axis=0)
        dxhat = du * layer.gamma
        if training:
            dz = c["inv_std"] / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            dz = dxhat * c["inv_std"]
        grads[f"h{i}.W"] = c["h_in"].T @ dz
        grads[f"h{i}.b"] = dz.sum(axis=0)
        dh = dz @ layer.W.T
    return grads


def _as_xy(features):
    if isinstance(features, tuple):
        x, y = features
    elif hasattr(features, "X"):
        x, y = features.X, features.labels
    else:
        x = np.stack([f.values for f in features])
        y = np.array([f.label for f in features])
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i:i + size] for i in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def batch_loss(model: MlpModel, x, y) -> float:
    """Loss with batch statistics and no dropout; running stats untouched."""
    saved = model._cache
    masks = [None] * len(model.hidden)
    p = forward(model, x, mode=TRAINING, masks=masks, update_stats=False)
    model._cache = saved
    return loss_bce(p, y)


def train(model: MlpModel, features, config: TrainConfig | None = None) -> MlpModel:
    """Mini-batch Adam on binary cross-entropy; returns a new inference-mode model.

    ``features`` is a ``FeatureMatrix``, a list of ``FeatureVector`` or an
    ``(X, y)`` tuple. Shuffling and dropout draw from independent streams
    spawned from ``config.seed``.
    """
    config = config or TrainConfig()
    x, y = _as_xy(features)
    y = _check_labels(y)
    n0, n1 = int(np.sum(y == 0)), int(np.sum(y == 1))
    if n0 < 2 or n1 < 2:
        raise NetworkError(f"training needs at least 2 samples per class (got {n0}, {n1})")
    if not np.all(np.isfinite(x)):
        raise NetworkError("features must be finite")

    m = model.copy()
    m.bn_momentum = config.bn_momentum
    m.config = config.to_dict()
    shuffle_ss, dropout_ss = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)

    params = m.parameters()
    first = {k: np.zeros_like(v) for k, v in params}
    second = {k: np.zeros_like(v) for k, v in params}
    b1, b2 = config.beta1, config.beta2
    step = 0
    m.history = []
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(len(y))
        total = 0.0
        for idx in _batches(order, config.batch_size):
            xb, yb = x[idx], y[idx]
            p = forward(m, xb, mode=TRAINING, rng=dropout_rng)
            total += loss_bce(p, yb) * len(idx)
            grads = backward(m, xb, yb)
            step += 1
            lr_t = config.learning_rate * np.sqrt(1 - b2 ** step) / (1 - b1 ** step)
            for name, arr in params:
                g = grads[name]
                first[name] = b1 * first[name] + (1 - b1) * g
                second[name] = b2 * second[name] + (1 - b2) * g * g
                arr -= lr_t * first[name] / (np.sqrt(second[name]) + config.adam_eps)
        m.history.append(total / len(y))
    m.mode = INFERENCE
    m._cache = None
    return m


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]] | None
    passed: bool
    checked: int
    tolerance: float

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst[0]}{list(self.worst[1])}" if self.worst else ""
        return f"gradient check {verdict}: max relative error {self.max_rel_error:.3e}{where} over {self.checked} parameters (tol {self.tolerance:g})"


def gradient_check(
    model: MlpModel,
    x,
    y,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    n_params: int | None = 100,
    seed: int = 0,
    mode: str = TRAINING,
    gradients: dict[str, np.ndarray] | None = None,
    floor: float = 1e-5,
    prefixes: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Dropout masks are drawn once and held fixed; batch statistics are
    recomputed per evaluation but running averages are not touched. The
    relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    parameters whose true gradient is zero (dense biases feeding a
    batchnorm) from dividing rounding noise by itself. ``n_params=None``
    checks every parameter; ``prefixes`` restricts the check to parameters
    whose name starts with one of them (e.g. ``"h3."`` or ``"out."``).
    """
    x = np.asarray(x, dtype=np.float64)
    y = _check_labels(y)
    work = model.copy()
    rng = np.random.default_rng(seed)
    forward(work, x, mode=mode, rng=rng, update_stats=False)
    masks = work._cache["masks"]
    analytic = backward(work, x, y) if gradients is None else gradients

    def loss_at() -> float:
        return loss_bce(forward(work, x, mode=mode, masks=masks, update_stats=False), y)

    params = work.parameters()
    if prefixes is not None:
        params = [(name, arr) for name, arr in params if name.startswith(tuple(prefixes))]
    coords = [(name, idx) for name, arr in params for idx in np.ndindex(arr.shape)]
    if n_params is not None and n_params < len(coords):
        pick = rng.choice(len(coords), size=n_params, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    lookup = dict(params)

    worst, worst_err = None, 0.0
    for name, idx in coords:
        arr = lookup[name]
        orig = arr[idx]
        arr[idx] = orig + step
        up = loss_at()
        arr[idx] = orig - step
        down = loss_at()
        arr[idx] = orig
        numeric = (up - down) / (2.0 * step)
        a = float(analytic[name][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        if err > worst_err or worst is None:
            worst, worst_err = (name, tuple(int(i) for i in idx)), err
    return GradCheckReport(worst_err, worst, worst_err <= tolerance, len(coords), tolerance)
