"""Prototype bank: K-means initialisation, nearest-prototype assignment, EMA upkeep."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class PrototypeBank:
    prototypes: np.ndarray          # (C*K, D), class-major
    class_of: np.ndarray            # (C*K,)
    K: int
    alpha: float = 0.99
    update_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.class_of = np.asarray(self.class_of, dtype=np.int64)
        if self.update_counts is None:
            self.update_counts = np.zeros(len(self.class_of), dtype=np.int64)
        n = self.prototypes.shape[0]
        if n % self.K or len(self.class_of) != n:
            raise ValueError("bank must hold exactly K prototypes per class")
        expected = np.repeat(np.arange(n // self.K), self.K)
        if not np.array_equal(self.class_of, expected):
            raise ValueError("prototypes must be stored class-major with K per class")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValueError("prototype vectors must be finite")

    @classmethod
    def from_class_centroids(cls, centroids: Sequence[np.ndarray], alpha: float = 0.99) -> "PrototypeBank":
        K = len(centroids[0])
        protos = np.concatenate([np.asarray(c, dtype=np.float64) for c in centroids], axis=0)
        return cls(protos, np.repeat(np.arange(len(centroids)), K), K, alpha)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0] // self.K

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.prototypes.copy(), self.class_of.copy(), self.K, self.alpha,
                             self.update_counts.copy())

    def class_slice(self, c: int) -> slice:
        return slice(c * self.K, (c + 1) * self.K)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (points * points).sum(1)[:, None] - 2 * points @ centroids.T + (centroids * centroids).sum(1)[None]
    return np.maximum(d, 0.0)


def kmeans(points: np.ndarray, K: int, seed=0, max_iters: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding. Returns (K, D) centroids.

    When there are fewer distinct points than ``K`` the surplus centroids
    duplicate existing ones. Empty clusters are re-seeded at the point
    farthest from its current centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("kmeans needs a non-empty (n, D) array")
    if K < 1:
        raise ValueError("K must be positive")
    rng = np.random.default_rng(seed)
    n = len(points)
    if n < K:
        log.warning("kmeans: %d points for K=%d, padding with duplicates", n, K)

    centroids = [points[int(rng.integers(n))]]
    closest = _sq_dists(points, centroids[0][None])[:, 0]
    while len(centroids) < K:
        total = closest.sum()
        if total <= 0:
            log.warning("kmeans: fewer than K=%d distinct points, padding with duplicates", K)
            centroids.append(centroids[len(centroids) % max(1, len(centroids))].copy())
            continue
        idx = int(rng.choice(n, p=closest / total))
        centroids.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx][None])[:, 0])
    cent = np.array(centroids)

    assign = None
    for _ in range(max_iters):
        d = _sq_dists(points, cent)
        new = np.argmin(d, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(K):
            members = assign == k
            if members.any():
                cent[k] = points[members].mean(axis=0)
        empty = [k for k in range(K) if not (assign == k).any()]
        if empty:
            err = d[np.arange(n), assign]
            for k in empty:
                far = int(np.argmax(err))
                if err[far] <= 0:
                    break
                cent[k] = points[far]
                err[far] = 0.0
    return cent


# ---------------------------------------------------------------------------
# initialisation, assignment, update
# ---------------------------------------------------------------------------

def sample_class_pixels(features: np.ndarray, labels: np.ndarray, num_classes: int,
                        pixels_per_class: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Up to ``pixels_per_class`` feature rows per class, sampled without replacement."""
    flat = features.reshape(-1, features.shape[-1])
    lab = labels.reshape(-1)
    out = []
    for c in range(num_classes):
        idx = np.flatnonzero(lab == c)
        if idx.size == 0:
            raise ValueError(f"class {c} has no pixels in the labeled set")
        if idx.size > pixels_per_class:
            idx = np.sort(rng.choice(idx, size=pixels_per_class, replace=False))
        out.append(flat[idx])
    return out


def init_bank(model, labeled, K: int = 4, pixels_per_class: int = 1000, seed=0,
              alpha: float = 0.99, max_iters: int = 100) -> PrototypeBank:
    """Cluster per-class pixel features of a warmed-up model into K prototypes per class.

    ``labeled`` is a sequence of samples with ``image`` and ``label``.
    """
    images = np.stack([s.image for s in labeled])
    labels = np.stack([s.label for s in labeled])
    feats = model.features(images).data
    rng = np.random.default_rng([seed, 0xB4])
    per_class = sample_class_pixels(feats, labels, model.num_classes, pixels_per_class, rng)
    centroids = [kmeans(pts, K, seed=[seed, c], max_iters=max_iters) for c, pts in enumerate(per_class)]
    return PrototypeBank.from_class_centroids(centroids, alpha)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)


def assign_many(bank: PrototypeBank, features: np.ndarray, class_ids: np.ndarray) -> np.ndarray:
    """Global bank index of the most similar same-class prototype for every row."""
    features = np.asarray(features, dtype=np.float64).reshape(-1, bank.dim)
    class_ids = np.asarray(class_ids).reshape(-1)
    sims = _unit(features) @ _unit(bank.prototypes).T
    sims = sims.reshape(len(features), bank.num_classes, bank.K)
    within = sims[np.arange(len(features)), class_ids]          # (P, K)
    return class_ids * bank.K + np.argmax(within, axis=1)


def assign(bank: PrototypeBank, feature: np.ndarray, class_id: int) -> int:
    return int(assign_many(bank, np.asarray(feature)[None], np.array([class_id]))[0])


def update(bank: PrototypeBank, features: np.ndarray, class_ids: np.ndarray,
           per_pixel: bool = False) -> PrototypeBank:
    """EMA-update prototypes in place from already-gated pixel features.

    Default: each prototype with at least one assigned pixel takes one step
    ``p <- alpha p + (1 - alpha) mean(assigned)``. With ``per_pixel`` the step
    is applied pixel by pixel in the given order, re-assigning each time.
    """
    features = np.asarray(features, dtype=np.float64).reshape(-1, bank.dim)
    class_ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    if len(features) == 0:
        return bank
    a = bank.alpha
    if per_pixel:
        for f, c in zip(features, class_ids):
            k = assign(bank, f, int(c))
            bank.prototypes[k] = a * bank.prototypes[k] + (1 - a) * f
            bank.update_counts[k] += 1
        return bank

    idx = assign_many(bank, features, class_ids)
    n = len(bank.prototypes)
    counts = np.bincount(idx, minlength=n)
    sums = np.zeros_like(bank.prototypes)
    np.add.at(sums, idx, features)
    hit = counts > 0
    means = sums[hit] / counts[hit, None]
    bank.prototypes[hit] = a * bank.prototypes[hit] + (1 - a) * means
    bank.update_counts[hit] += 1
    return bank


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def export_csv(bank: PrototypeBank, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "proto_index"] + [f"d{i}" for i in range(bank.dim)])
        for g, (c, p) in enumerate(zip(bank.class_of, bank.prototypes)):
            w.writerow([int(c), g % bank.K] + [repr(float(v)) for v in p])


def import_csv(path: str | Path, alpha: float = 0.99) -> PrototypeBank:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    classes = np.array([int(r[0]) for r in rows])
    protos = np.array([[float(v) for v in r[2:]] for r in rows])
    K = int(np.bincount(classes).max())
    return PrototypeBank(protos, classes, K, alpha)
