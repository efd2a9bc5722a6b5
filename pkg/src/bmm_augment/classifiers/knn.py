"""Brute-force k-nearest-neighbours with random vote tie-breaking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyTrainingSet, ShapeMismatch

N_CLASSES = 10
GRAY_LEVELS = 255.0


@dataclass(frozen=True, eq=False)
class KnnModel:
    train_features: np.ndarray  # (N, D) float64
    train_labels: np.ndarray  # (N,)
    k: int = 3

    def __post_init__(self):
        feats = np.asarray(self.train_features, dtype=np.float64)
        labels = np.asarray(getattr(self.train_labels, "values", self.train_labels), dtype=np.intp)
        if feats.shape[0] == 0:
            raise EmptyTrainingSet("KNN needs at least one training vector")
        if labels.shape != (feats.shape[0],):
            raise ShapeMismatch("one label per training vector required")
        if not 1 <= self.k <= feats.shape[0]:
            raise ValueError(f"k={self.k} must lie in [1, {feats.shape[0]}]")
        object.__setattr__(self, "train_features", feats)
        object.__setattr__(self, "train_labels", labels)
        # 8-bit grayscale scaled to [0, 1]: rank on the integer grid, where every
        # distance is exact in float64 and ties are true ties
        scaled = feats * GRAY_LEVELS
        scale = GRAY_LEVELS if _on_grid(scaled) else 1.0
        work = np.rint(scaled) if scale != 1.0 else feats
        object.__setattr__(self, "_scale", scale)
        object.__setattr__(self, "_work", work)
        object.__setattr__(self, "_sq_norms", np.einsum("ij,ij->i", work, work))

    @property
    def n(self) -> int:
        return self.train_features.shape[0]


def _on_grid(scaled: np.ndarray) -> bool:
    return bool(np.all(np.abs(scaled - np.rint(scaled)) < 1e-6))


def _tie_rng(seed, query_index: int) -> np.random.Generator:
    # per-query stream: predictions do not depend on batch order or chunking
    return np.random.default_rng([int(seed), int(query_index)])


def vote(neighbor_labels, seed=0, query_index: int = 0) -> int:
    counts = np.bincount(np.asarray(neighbor_labels), minlength=N_CLASSES)
    winners = np.flatnonzero(counts == counts.max())
    if winners.size == 1:
        return int(winners[0])
    return int(_tie_rng(seed, query_index).choice(winners))


def _to_work(model: KnnModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if model._scale == 1.0:
        return x
    scaled = x * model._scale
    # off-grid queries fall back to plain scaling; ranking is scale invariant
    return np.rint(scaled) if _on_grid(scaled) else scaled


def squared_distances(model: KnnModel, queries: np.ndarray) -> np.ndarray:
    q = _to_work(model, queries)
    d2 = np.einsum("ij,ij->i", q, q)[:, None] + model._sq_norms[None, :]
    d2 -= 2.0 * q @ model._work.T
    np.maximum(d2, 0.0, out=d2)
    return d2


def neighbors(model: KnnModel, queries, k: int | None = None, chunk: int = 1000) -> np.ndarray:
    """Indices of the ``k`` nearest training vectors, nearest first.

    Distance ties are ordered by training index (stable sort).
    """
    k = model.k if k is None else k
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != model.train_features.shape[1]:
        raise ShapeMismatch(
            f"query dimension {queries.shape[1]} != {model.train_features.shape[1]}"
        )
    out = np.empty((queries.shape[0], k), dtype=np.intp)
    for start in range(0, queries.shape[0], chunk):
        d2 = squared_distances(model, queries[start:start + chunk])
        out[start:start + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def predict_from_neighbors(train_labels, neighbor_idx, k: int, seed=0) -> np.ndarray:
    """Majority vote over the first ``k`` columns of a precomputed neighbour table."""
    labels = np.asarray(train_labels)[neighbor_idx[:, :k]]
    return np.array([vote(row, seed, i) for i, row in enumerate(labels)], dtype=np.intp)


def knn_predict(model: KnnModel, queries, seed=0) -> np.ndarray:
    idx = neighbors(model, queries)
    return predict_from_neighbors(model.train_labels, idx, model.k, seed)


def knn_classify(model: KnnModel, query, seed=0, query_index: int = 0) -> int:
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (model.train_features.shape[1],):
        raise ShapeMismatch(f"query has shape {query.shape}")
    diff = model._work - _to_work(model, query)
    d2 = np.einsum("ij,ij->i", diff, diff)
    idx = np.argsort(d2, kind="stable")[: model.k]
    return vote(model.train_labels[idx], seed, query_index)


@dataclass
class KnnSweep:
    k_grid: list
    seeds: list
    errors: np.ndarray  # (len(k_grid), len(seeds)) validation error rates
    predictions: dict  # (k, seed) -> predicted labels

    @property
    def mean_errors(self) -> np.ndarray:
        return self.errors.mean(axis=1)

    @property
    def best_k(self) -> int:
        return self.k_grid[int(np.argmin(self.mean_errors))]


def knn_sweep(train, validation, k_grid, seeds) -> KnnSweep:
    """Validation error for each (k, seed); seeds only affect vote ties.

    ``train`` and ``validation`` are ``(features, labels)`` pairs.
    """
    k_grid, seeds = list(k_grid), list(seeds)
    if not k_grid or not seeds:
        raise ValueError("k_grid and seeds must be non-empty")
    train_x, train_y = train
    val_x, val_y = validation
    val_y = np.asarray(getattr(val_y, "values", val_y))
    model = KnnModel(train_x, train_y, k=max(k_grid))
    idx = neighbors(model, val_x, k=max(k_grid))
    errors = np.zeros((len(k_grid), len(seeds)))
    predictions = {}
    for i, k in enumerate(k_grid):
        for j, seed in enumerate(seeds):
            pred = predict_from_neighbors(model.train_labels, idx, k, seed)
            predictions[(k, seed)] = pred
            errors[i, j] = np.mean(pred != val_y)
    return KnnSweep(k_grid, seeds, errors, predictions)
