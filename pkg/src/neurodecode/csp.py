"""Common spatial patterns for two classes and channel selection.

Spatial filters extremise the variance ratio ``w'C1w / w'C2w``. The
generalized problem is reduced to a symmetric one by whitening the
composite covariance, and both symmetric eigenproblems are solved with a
cyclic Jacobi iteration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._io import atomic_write_json
from .dataset import Trial


class CspError(ValueError):
    pass


class NotSymmetricError(CspError):
    pass


class ConvergenceError(CspError, ArithmeticError):
    pass


class SingularCovarianceError(CspError, np.linalg.LinAlgError):
    pass


def jacobi_eigh(a, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps over all (p, q) pairs in row order until the off-diagonal
    Frobenius norm drops to ``tol * ||A||_F``.

    Returns
    -------
    eigenvalues : ndarray, shape (n,)
        Sorted descending; ties keep their diagonal order.
    eigenvectors : ndarray, shape (n, n)
        Orthonormal columns, ``A @ V == V @ diag(eigenvalues)``.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSymmetricError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    scale = np.abs(a).max() if a.size else 0.0
    if a.size and np.abs(a - a.T).max() > 1e-9 * max(scale, 1.0):
        raise NotSymmetricError("matrix is not symmetric within 1e-9")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    norm = np.linalg.norm(a)
    target = tol * norm

    iu = np.triu_indices(n, 1)

    def off(m):
        return np.sqrt(2.0 * np.sum(m[iu] ** 2))

    sweeps = 0
    while off(a) > target:
        if sweeps >= max_sweeps:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < 1e-150 * abs(diff):
                    # theta*theta would overflow; first-order t = 1/(2 theta)
                    t = apq / diff
                else:
                    theta = diff / (2.0 * apq)
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp = a[:, p].copy()
                cq = a[:, q]
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp = a[p, :].copy()
                rq = a[q, :]
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


@dataclass(frozen=True, eq=False)
class SpatialCovariance:
    matrix: np.ndarray
    class_id: int
    trial_count: int

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise CspError(f"covariance must be square, got {m.shape}")
        if np.abs(m - m.T).max() > 1e-12 * max(np.abs(m).max(), 1.0):
            raise NotSymmetricError("covariance is not symmetric within 1e-12")
        m = 0.5 * (m + m.T)
        if np.linalg.eigvalsh(m).min() < -1e-10 * max(np.abs(m).max(), 1.0):
            raise CspError("covariance is not positive semidefinite")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def n_channels(self) -> int:
        return self.matrix.shape[0]


def covariance(trials: Sequence[Trial] | Sequence[np.ndarray], class_id: int = 0) -> SpatialCovariance:
    """Pooled spatial covariance: sum of X X' over trials / total samples.

    Each epoch is centred per channel first. ``trials`` may be ``Trial``
    objects or raw ``[channels, time]`` arrays.
    """
    if len(trials) == 0:
        raise CspError(f"class {class_id} has no trials")
    acc = None
    total = 0
    for tr in trials:
        x = tr.epoch.samples if isinstance(tr, Trial) else np.asarray(tr, dtype=np.float64)
        if acc is not None and x.shape[0] != acc.shape[0]:
            raise CspError("trials have inconsistent channel counts")
        xc = x - x.mean(axis=1, keepdims=True)
        prod = xc @ xc.T
        acc = prod if acc is None else acc + prod
        total += x.shape[1]
    acc /= total
    return SpatialCovariance(0.5 * (acc + acc.T), class_id, len(trials))


def objective(w, cov1, cov2) -> float:
    """Variance ratio ``w'C1w / w'C2w``."""
    c1 = cov1.matrix if isinstance(cov1, SpatialCovariance) else np.asarray(cov1, dtype=np.float64)
    c2 = cov2.matrix if isinstance(cov2, SpatialCovariance) else np.asarray(cov2, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    den = w @ c2 @ w
    if den <= 0.0:
        raise ZeroDivisionError("w'C2w is not positive")
    return float(w @ c1 @ w / den)


def top_k_indices(w: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest |w|; equal magnitudes go to the lower index."""
    order = np.argsort(-np.abs(w), kind="stable")
    return [int(i) for i in order[:k]]


@dataclass(frozen=True, eq=False)
class CspModel:
    w_max: np.ndarray
    w_min: np.ndarray
    eigenvalues: np.ndarray
    selected_max: tuple[int, ...]
    selected_min: tuple[int, ...]
    k: int
    filters: np.ndarray  # rows are spatial filters, same order as eigenvalues

    def __post_init__(self):
        n = len(self.w_max)
        for name in ("selected_max", "selected_min"):
            sel = tuple(int(i) for i in getattr(self, name))
            if len(sel) != self.k or len(set(sel)) != self.k or not all(0 <= i < n for i in sel):
                raise CspError(f"{name} must hold {self.k} unique channel indices in [0, {n})")
            object.__setattr__(self, name, sel)

    @property
    def n_channels(self) -> int:
        return len(self.w_max)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "w_max": self.w_max.tolist(),
            "w_min": self.w_min.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "selected_max": list(self.selected_max),
            "selected_min": list(self.selected_min),
            "filters": self.filters.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CspModel":
        return cls(
            w_max=np.asarray(d["w_max"], dtype=np.float64),
            w_min=np.asarray(d["w_min"], dtype=np.float64),
            eigenvalues=np.asarray(d["eigenvalues"], dtype=np.float64),
            selected_max=tuple(d["selected_max"]),
            selected_min=tuple(d["selected_min"]),
            k=int(d["k"]),
            filters=np.asarray(d["filters"], dtype=np.float64),
        )

    def save(self, path) -> None:
        atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "CspModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def whiten(c1: np.ndarray, c2: np.ndarray, ridge: float = 1e-8):
    """Regularised whitening of the composite covariance.

    The ridge ``ridge * trace(C1 + C2) / n`` is split evenly between the two
    classes so the regularised pair still sums to the composite exactly.
    Returns ``(P, C1_reg, C2_reg)`` with ``P (C1_reg + C2_reg) P' = I``.
    """
    n = c1.shape[0]
    delta = ridge * np.trace(c1 + c2) / n
    eye = np.eye(n)
    c1r = c1 + 0.5 * delta * eye
    c2r = c2 + 0.5 * delta * eye
    lam, u = jacobi_eigh(c1r + c2r)
    if not lam[-1] > 1e-300 or lam[-1] <= 1e-15 * lam[0]:
        raise SingularCovarianceError("composite covariance is singular even after regularisation")
    p = (u / np.sqrt(lam)).T
    return p, c1r, c2r


def fit_csp(cov1: SpatialCovariance, cov2: SpatialCovariance, k: int = 9, ridge: float = 1e-8) -> CspModel:
    c1 = cov1.matrix if isinstance(cov1, SpatialCovariance) else np.asarray(cov1, dtype=np.float64)
    c2 = cov2.matrix if isinstance(cov2, SpatialCovariance) else np.asarray(cov2, dtype=np.float64)
    if c1.shape != c2.shape:
        raise CspError(f"covariance shapes differ: {c1.shape} vs {c2.shape}")
    n = c1.shape[0]
    if not 1 <= k <= n:
        raise CspError(f"k must be in [1, {n}], got {k}")

    p, c1r, _ = whiten(c1, c2, ridge)
    s1 = p @ c1r @ p.T
    theta, b = jacobi_eigh(0.5 * (s1 + s1.T))
    w = b.T @ p
    # sign convention: largest-magnitude coefficient of each filter is positive
    piv = np.argmax(np.abs(w), axis=1)
    w *= np.sign(w[np.arange(n), piv])[:, None]

    return CspModel(
        w_max=w[0].copy(),
        w_min=w[-1].copy(),
        eigenvalues=theta,
        selected_max=tuple(top_k_indices(w[0], k)),
        selected_min=tuple(top_k_indices(w[-1], k)),
        k=k,
        filters=w,
    )


def fit_csp_trials(trials: Sequence[Trial], k: int = 9, ridge: float = 1e-8) -> CspModel:
    by_class = {0: [], 1: []}
    for t in trials:
        by_class[t.label].append(t)
    if not by_class[0] or not by_class[1]:
        raise CspError("CSP needs trials from both classes")
    return fit_csp(covariance(by_class[0], 0), covariance(by_class[1], 1), k, ridge)
