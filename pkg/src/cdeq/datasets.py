"""Synthetic desk-scale datasets."""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .numeric import make_rng

DATASETS = ("two_moons", "spirals", "affine_regression")


@dataclass
class Dataset:
    name: str
    x: np.ndarray
    labels: np.ndarray = None  # int (N,) for classification
    targets: np.ndarray = None  # float (N, d_y) for regression
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None
    seed: int = 0

    @property
    def d_x(self):
        return self.x.shape[1]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if self.labels is not None else 0

    @property
    def y(self):
        return self.labels if self.labels is not None else self.targets

    def train(self):
        return self.x[self.train_idx], self.y[self.train_idx]

    def val(self):
        return self.x[self.val_idx], self.y[self.val_idx]


def _two_moons(n, rng):
    n_out = n // 2
    n_in = n - n_out
    a = np.linspace(0.0, np.pi, n_out)
    b = np.linspace(0.0, np.pi, n_in)
    outer = np.stack([np.cos(a), np.sin(a)], axis=1)
    inner = np.stack([1.0 - np.cos(b), 0.5 - np.sin(b)], axis=1)
    x = np.concatenate([outer, inner])
    y = np.concatenate([np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)])
    return x, y


def _spirals(n, rng):
    n0 = n // 2
    n1 = n - n0
    parts, labels = [], []
    for cls, count in ((0, n0), (1, n1)):
        t = np.sqrt(rng.uniform(0.0, 1.0, count)) * 2.5 * np.pi + 0.5
        phase = cls * np.pi
        r = t / (3.0 * np.pi)
        parts.append(np.stack([r * np.cos(t + phase), r * np.sin(t + phase)], axis=1))
        labels.append(np.full(count, cls, dtype=np.int64))
    return np.concatenate(parts), np.concatenate(labels)


def make_dataset(name, n=1000, noise=0.1, seed=0, val_fraction=0.2):
    """Deterministic synthetic dataset with a disjoint train/validation split.

    ``two_moons`` and ``spirals`` are two-class problems in 2-D;
    ``affine_regression`` maps 2-D Gaussian inputs to a 1-D affine target.
    """
    if name not in DATASETS:
        raise ValidationError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if n < 10:
        raise ValidationError("datasets need at least 10 points")
    if not 0.0 < val_fraction < 1.0:
        raise ValidationError("val_fraction must lie in (0, 1)")
    rng = make_rng(seed)
    labels = targets = None
    if name == "two_moons":
        x, labels = _two_moons(n, rng)
        x = x + noise * rng.standard_normal(x.shape)
    elif name == "spirals":
        x, labels = _spirals(n, rng)
        x = x + noise * rng.standard_normal(x.shape)
    else:
        x = rng.standard_normal((n, 2))
        w = np.array([[1.5, -0.7]])
        targets = x @ w.T + 0.3 + noise * rng.standard_normal((n, 1))
    order = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return Dataset(
        name=name,
        x=x,
        labels=labels,
        targets=targets,
        train_idx=np.sort(order[n_val:]),
        val_idx=np.sort(order[:n_val]),
        seed=seed,
    )
