"""k-means and pseudo-multi-label generation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from sm3.diffcore import Rng, derive_seed


@dataclass
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    seed: int
    init_inertia: float
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0


@dataclass
class PseudoLabelSet:
    assignments: np.ndarray  # (n, K) int64
    cluster_counts: tuple[int, ...]
    epoch: int = 0

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        for k, c in enumerate(self.cluster_counts):
            col = self.assignments[:, k]
            if col.size and (col.min() < 0 or col.max() >= c):
                raise ValueError(f"assignment column {k} outside [0, {c})")

    @property
    def K(self) -> int:
        return len(self.cluster_counts)

    def to_csv(self, path: str | Path, sample_ids: Sequence[int] | None = None) -> None:
        ids = range(len(self.assignments)) if sample_ids is None else sample_ids
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", *[f"y_{k + 1}" for k in range(self.K)]])
            for sid, row in zip(ids, self.assignments):
                w.writerow([int(sid), *map(int, row)])


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (points * points).sum(1)[:, None] - 2 * points @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plus_plus(points: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding: each new centre is the best of a few D^2-sampled candidates."""
    n = len(points)
    trials = 2 + int(math.log(k))
    centres = [points[gen.integers(n)]]
    closest = _sq_dists(points, np.array(centres))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with chosen centres
            centres.append(points[gen.integers(n)])
            continue
        cand = np.searchsorted(np.cumsum(closest), gen.random(trials) * total)
        cand = np.minimum(cand, n - 1)
        cand_d = np.minimum(closest[None, :], _sq_dists(points, points[cand]).T)
        best = int(np.argmin(cand_d.sum(1)))
        centres.append(points[cand[best]])
        closest = cand_d[best]
    return np.array(centres)


def kmeans(points, k: int, rng: Rng | int, max_iter: int = 300, n_init: int = 10) -> ClusterModel:
    """Lloyd iterations from k-means++ seeds until the assignment stops changing.

    ``n_init`` independent seedings are run and the lowest final inertia wins;
    a single seeding can still land two centres in one blob.  Empty clusters
    are reseeded at the point farthest from its current centroid.  Distances
    and inertia are computed in float64.
    """
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    seed = rng.seed if isinstance(rng, Rng) else int(rng)
    gen = np.random.Generator(np.random.PCG64(seed))
    best = None
    for _ in range(n_init):
        run = _lloyd(X, k, gen, max_iter, seed)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def _lloyd(X: np.ndarray, k: int, gen: np.random.Generator, max_iter: int, seed: int) -> ClusterModel:
    n = len(X)
    centroids = kmeans_plus_plus(X, k, gen)
    d = _sq_dists(X, centroids)
    labels = d.argmin(1)
    inertia = float(d[np.arange(n), labels].sum())
    init_inertia = inertia
    history = [inertia]
    it = 0
    for it in range(1, max_iter + 1):
        centroids = _update_centroids(X, labels, centroids, k)
        d = _sq_dists(X, centroids)
        new_labels = d.argmin(1)
        inertia = float(d[np.arange(n), new_labels].sum())
        history.append(inertia)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    labels, centroids, inertia = _repair_empty(X, labels, centroids, k)
    return ClusterModel(centroids=centroids, labels=labels, inertia=inertia, seed=seed,
                        init_inertia=init_inertia, inertia_history=history, n_iter=it)


def _update_centroids(X, labels, centroids, k):
    new = centroids.copy()
    counts = np.bincount(labels, minlength=k)
    onehot = np.zeros((k, len(X)), dtype=X.dtype)
    onehot[labels, np.arange(len(X))] = 1
    sums = onehot @ X
    nonempty = counts > 0
    new[nonempty] = sums[nonempty] / counts[nonempty, None]
    for j in np.flatnonzero(~nonempty):
        dist = ((X - new[labels]) ** 2).sum(1)
        far = int(np.argmax(dist))
        new[j] = X[far]
        labels = labels.copy()
        labels[far] = j
    return new


def _repair_empty(X, labels, centroids, k):
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        dist = ((X - centroids[labels]) ** 2).sum(1)
        # only steal from clusters that keep at least one member
        counts = np.bincount(labels, minlength=k)
        dist[counts[labels] <= 1] = -1
        far = int(np.argmax(dist))
        centroids[j] = X[far]
        labels[far] = j
    d = ((X - centroids[labels]) ** 2).sum(1)
    return labels, centroids, float(d.sum())


def align_labels(previous: np.ndarray, current: np.ndarray, k: int) -> np.ndarray:
    """Permute cluster ids of ``current`` to best agree with ``previous`` (Hungarian matching)."""
    overlap = np.zeros((k, k), dtype=np.int64)
    np.add.at(overlap, (current, previous), 1)
    rows, cols = linear_sum_assignment(-overlap)
    perm = np.empty(k, dtype=np.int64)
    perm[rows] = cols
    return perm[current]


def generate_pseudo_multilabels(label_embeddings: Sequence[np.ndarray], cluster_counts: Sequence[int],
                                seed: int, epoch: int = 0, previous: PseudoLabelSet | None = None,
                                max_iter: int = 300, n_init: int = 10) -> PseudoLabelSet:
    """One independent k-means per label; column k has ``cluster_counts[k]`` clusters.

    When ``previous`` is given, each column's cluster ids are matched to the
    previous epoch's ids so the classification heads see a stable target.
    """
    if len(label_embeddings) != len(cluster_counts):
        raise ValueError(f"{len(label_embeddings)} embedding matrices for {len(cluster_counts)} labels")
    n = len(label_embeddings[0])
    if any(len(e) != n for e in label_embeddings):
        raise ValueError("label embedding matrices are not row-aligned")
    cols = []
    for k, (emb, c) in enumerate(zip(label_embeddings, cluster_counts)):
        model = kmeans(np.asarray(emb), int(c), derive_seed(seed, "kmeans", epoch, k), max_iter=max_iter,
                       n_init=n_init)
        labels = model.labels
        if previous is not None:
            labels = align_labels(previous.assignments[:, k], labels, int(c))
        cols.append(labels)
    return PseudoLabelSet(np.stack(cols, axis=1), tuple(int(c) for c in cluster_counts), epoch)
