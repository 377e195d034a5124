"""
Local losses, datasets and non-IID partitioning.

Logistic models are flat vectors of length ``C * (d_f + 1)``: row ``c`` of
the reshaped ``(C, d_f + 1)`` matrix holds the class weights followed by
the class bias.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import ConfigurationError, ShapeError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=float))
        y = np.asarray(self.labels, dtype=int).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ShapeError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.classes):
            raise ShapeError(f"labels must lie in 0..{self.classes - 1}")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.features[idx], self.labels[idx], self.classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.classes)


def _clip(g: np.ndarray, cap: float) -> np.ndarray:
    norm = np.linalg.norm(g)
    if norm > cap:
        return g * (cap / norm)
    return g


@dataclass(frozen=True)
class LogisticLoss:
    """Multinomial logistic regression with an L2 penalty ``l2 / 2 * ||w||^2``."""

    classes: int
    l2: float = 1e-4
    grad_clip: float = 1.0

    def model_dim(self, data: Dataset) -> int:
        return self.classes * (data.dim + 1)

    def _split(self, data: Dataset, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        d = self.model_dim(data)
        if w.shape != (d,):
            raise ShapeError(f"logistic model needs {d} parameters, got shape {w.shape}")
        if data.classes > self.classes:
            raise ShapeError(f"data has {data.classes} classes, loss has {self.classes}")
        return w.reshape(self.classes, data.dim + 1)

    def _logits(self, data: Dataset, W: np.ndarray) -> np.ndarray:
        return data.features @ W[:, :-1].T + W[:, -1]

    def value(self, data: Dataset, w) -> float:
        W = self._split(data, w)
        reg = 0.5 * self.l2 * float(np.dot(W.ravel(), W.ravel()))
        if len(data) == 0:
            return reg
        logp = log_softmax(self._logits(data, W), axis=1)
        nll = -float(np.mean(logp[np.arange(len(data)), data.labels]))
        return nll + reg

    def raw_gradient(self, data: Dataset, w) -> np.ndarray:
        W = self._split(data, w)
        grad = self.l2 * W.copy()
        if len(data):
            probs = softmax(self._logits(data, W), axis=1)
            probs[np.arange(len(data)), data.labels] -= 1.0
            probs /= len(data)
            grad[:, :-1] += probs.T @ data.features
            grad[:, -1] += probs.sum(axis=0)
        return grad.ravel()

    def gradient(self, data: Dataset, w) -> np.ndarray:
        return _clip(self.raw_gradient(data, w), self.grad_clip)

    def predict(self, data: Dataset, w) -> np.ndarray:
        W = self._split(data, w)
        return np.argmax(self._logits(data, W), axis=1)

    def accuracy(self, data: Dataset, w) -> float:
        if len(data) == 0:
            return float("nan")
        return float(np.mean(self.predict(data, w) == data.labels))


@dataclass(frozen=True)
class QuadraticLoss:
    """Least squares ``||A w - b||^2 / 2``; the dataset argument is ignored."""

    A: np.ndarray
    b: np.ndarray
    grad_clip: float = 1.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise ShapeError(f"A has {A.shape[0]} rows, b has {b.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    def model_dim(self, data=None) -> int:
        return self.A.shape[1]

    def _check(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.A.shape[1],):
            raise ShapeError(f"quadratic model needs {self.A.shape[1]} parameters, got {w.shape}")
        return w

    def value(self, data, w) -> float:
        res = self.A @ self._check(w) - self.b
        return 0.5 * float(res @ res)

    def raw_gradient(self, data, w) -> np.ndarray:
        return self.A.T @ (self.A @ self._check(w) - self.b)

    def gradient(self, data, w) -> np.ndarray:
        return _clip(self.raw_gradient(data, w), self.grad_clip)

    def accuracy(self, data, w) -> float:
        return float("nan")


LocalLoss = LogisticLoss | QuadraticLoss


def loss_value(loss: LocalLoss, data: Optional[Dataset], w) -> float:
    return loss.value(data, w)


def loss_gradient(loss: LocalLoss, data: Optional[Dataset], w) -> np.ndarray:
    """Analytic gradient, rescaled to norm ``grad_clip`` when it exceeds it."""
    return loss.gradient(data, w)


def make_synthetic(classes: int, dim: int, per_class: int, separation: float,
                   seed: int = 0) -> Dataset:
    """
    Unit-variance Gaussian blobs, one per class.

    When ``dim >= classes`` the means form a regular simplex with pairwise
    distance ``separation`` in a random orientation. Otherwise they are
    random points on a sphere of radius ``separation / sqrt(2)``, so
    distances are only approximately ``separation``.
    """
    if min(classes, dim, per_class) < 1 or separation <= 0:
        raise ConfigurationError("classes, dim, per_class must be >= 1 and separation > 0")
    rng = np.random.default_rng(seed)
    radius = separation / np.sqrt(2.0)
    if dim >= classes:
        Q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
        means = radius * Q.T
    else:
        dirs = rng.standard_normal((classes, dim))
        means = radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), per_class)
    X = means[labels] + rng.standard_normal((labels.size, dim))
    return Dataset(X, labels, classes)


def load_csv(path, classes: Optional[int] = None) -> Dataset:
    """Read ``label,feature_1,...`` rows; a non-numeric first row is a header."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ConfigurationError(f"{path}: no rows")
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    arr = np.array(rows, dtype=float)
    labels = arr[:, 0].astype(int)
    C = classes if classes is not None else int(labels.max()) + 1
    return Dataset(arr[:, 1:], labels, C)


def dirichlet_partition_indices(data: Dataset, m: int, alpha: float,
                                seed: int = 0) -> List[np.ndarray]:
    """Sample indices per device; see :func:`dirichlet_partition`."""
    n = len(data)
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    if m < 1:
        raise ConfigurationError(f"m must be >= 1, got {m}")
    if n < m:
        raise ConfigurationError(f"{n} samples cannot cover {m} devices")
    if m == 1:
        return [np.arange(n)]
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(data.labels == c) for c in range(data.classes)]
    shards: List[List[int]] = []
    for _ in range(100):
        shards = [[] for _ in range(m)]
        for idx in by_class:
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(m, alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
            for dev, part in enumerate(np.split(idx, cuts)):
                shards[dev].extend(part.tolist())
        if all(shards):
            break
    else:
        # round-robin top-up from the largest shards
        empty = [d for d in range(m) if not shards[d]]
        for d in empty:
            donor = max(range(m), key=lambda k: len(shards[k]))
            shards[d].append(shards[donor].pop())
    return [np.sort(np.asarray(s, dtype=int)) for s in shards]


def dirichlet_partition(data: Dataset, m: int, alpha: float, seed: int = 0) -> List[Dataset]:
    """
    Split each class across ``m`` devices with Dirichlet(alpha) proportions.

    Proportions are resampled up to 100 times until every device is
    nonempty; after that, empty devices take one sample each from the
    largest shards. Shards are disjoint and cover ``data``.
    """
    return [data.subset(ix) for ix in dirichlet_partition_indices(data, m, alpha, seed)]


def write_partition_manifest(path, indices: Sequence[np.ndarray], **meta) -> None:
    doc = {"meta": meta, "devices": {str(d): np.asarray(ix).tolist()
                                     for d, ix in enumerate(indices)}}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_partition_manifest(path) -> List[np.ndarray]:
    doc = json.loads(Path(path).read_text())
    devices = doc["devices"]
    return [np.asarray(devices[str(d)], dtype=int) for d in range(len(devices))]
