"""Sharding baselines evaluated through the same harness: random assignment
with a random router, Lloyd K-means, and a balanced K-means whose assignment
step is a capacity-constrained greedy over the globally sorted (point,
centroid) distance list.

K-means baselines cluster documents and training queries together on the
same TF-IDF features the trained model uses, then route queries to the
nearest centroids.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .featurizer import SparseVector, stack_vectors
from .selective_search import RoutingResult, ShardMap, rank_shards, shard_map_from_assignment


class BaselineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# random baseline

@dataclass
class RandomRouter:
    """Routes every query to a seeded random shard permutation, independent
    of call order (the per-query stream mixes the seed with the id)."""

    n_clusters: int
    seed: int

    def route(self, query_id: str, n: int | None = None) -> RoutingResult:
        rng = np.random.default_rng([self.seed, zlib.crc32(query_id.encode("utf-8"))])
        scores = rng.dirichlet(np.ones(self.n_clusters))
        return rank_shards(scores, n if n is not None else self.n_clusters, query_id)


def random_shard(doc_ids: list[str], n_clusters: int, seed: int) -> tuple[ShardMap, RandomRouter]:
    """Uniform random document assignment plus a random router."""
    if n_clusters < 1:
        raise BaselineError(f"need at least 1 shard, got {n_clusters}")
    rng = np.random.default_rng([seed, 0])
    shards = rng.integers(0, n_clusters, size=len(doc_ids))
    assignment = {did: int(s) for did, s in zip(doc_ids, shards)}
    return shard_map_from_assignment(assignment, n_clusters), RandomRouter(n_clusters, seed)


# ---------------------------------------------------------------------------
# centroid baselines

@dataclass
class CentroidModel:
    """K centroids over the dense feature space plus the assignment of every
    clustered point (documents and training queries alike)."""

    centroids: np.ndarray  # [K, dim]
    assignment: dict[str, int]

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared L2 distances [n, K], clipped at 0 for roundoff."""
    d2 = (
        np.sum(x * x, axis=1, keepdims=True)
        - 2.0 * (x @ centroids.T)
        + np.sum(centroids * centroids, axis=1)
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = _sq_distances(x, centroids[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            centroids[i] = x[rng.integers(n)]
            continue
        centroids[i] = x[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, _sq_distances(x, centroids[i : i + 1]).ravel())
    return centroids


def _nearest_assign(d2: np.ndarray) -> np.ndarray:
    return np.argmin(d2, axis=1)


def balanced_capacities(n: int, k: int) -> tuple[int, int]:
    """(base size, number of clusters allowed one extra point)."""
    return n // k, n % k


def _balanced_assign(d2: np.ndarray) -> np.ndarray:
    """Greedy over the globally sorted (point, centroid) distance list under
    the balance rule: every cluster gets the base size, and exactly
    n mod K clusters get one extra point."""
    n, k = d2.shape
    base, bonus = balanced_capacities(n, k)
    order = np.argsort(d2, axis=None, kind="stable")
    assigned = np.full(n, -1, dtype=np.int64)
    counts = np.zeros(k, dtype=np.int64)
    bonus_used = 0
    remaining = n
    for flat in order:
        i, c = divmod(int(flat), k)
        if assigned[i] >= 0:
            continue
        if counts[c] < base:
            pass
        elif counts[c] == base and bonus_used < bonus:
            bonus_used += 1
        else:
            continue
        assigned[i] = c
        counts[c] += 1
        remaining -= 1
        if remaining == 0:
            break
    return assigned


def _lloyd(
    x: np.ndarray,
    k: int,
    seed: int,
    max_iters: int,
    balanced: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (centroids, assignment indices)."""
    n = len(x)
    if n < k:
        raise BaselineError(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        d2 = _sq_distances(x, centroids)
        new_labels = _balanced_assign(d2) if balanced else _nearest_assign(d2)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = x[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                # re-seed an empty cluster from the farthest point
                far = int(np.argmax(d2[np.arange(n), labels]))
                centroids[c] = x[far]
    return centroids, labels


def _dense_points(vectors: dict[str, SparseVector], dim: int) -> tuple[list[str], np.ndarray]:
    ids = sorted(vectors)
    return ids, stack_vectors([vectors[i] for i in ids], dim).toarray()


def kmeans_shard(
    vectors: dict[str, SparseVector],
    dim: int,
    n_clusters: int,
    seed: int,
    max_iters: int = 50,
) -> CentroidModel:
    """Lloyd's algorithm with k-means++ seeding over densified features."""
    ids, x = _dense_points(vectors, dim)
    centroids, labels = _lloyd(x, n_clusters, seed, max_iters, balanced=False)
    return CentroidModel(centroids, {i: int(c) for i, c in zip(ids, labels)})


def balanced_kmeans_shard(
    vectors: dict[str, SparseVector],
    dim: int,
    n_clusters: int,
    seed: int,
    max_iters: int = 50,
) -> CentroidModel:
    """K-means with the balanced greedy assignment step: cluster sizes differ
    by at most one."""
    ids, x = _dense_points(vectors, dim)
    centroids, labels = _lloyd(x, n_clusters, seed, max_iters, balanced=True)
    return CentroidModel(centroids, {i: int(c) for i, c in zip(ids, labels)})


def centroid_shard_map(cm: CentroidModel, doc_ids: list[str]) -> ShardMap:
    """Restrict a centroid clustering to the documents (queries were only
    co-clustered to shape the centroids)."""
    missing = [d for d in doc_ids if d not in cm.assignment]
    if missing:
        raise BaselineError(f"{len(missing)} documents were not clustered (e.g. {missing[0]!r})")
    return shard_map_from_assignment(
        {d: cm.assignment[d] for d in doc_ids}, cm.n_clusters
    )


def route_query_centroids(
    cm: CentroidModel, query_vector: SparseVector, dim: int, n: int | None = None,
    query_id: str = "",
) -> RoutingResult:
    """Rank shards by ascending centroid distance; scores are a softmax over
    negated distances so closer shards get higher probabilities."""
    x = stack_vectors([query_vector], dim).toarray()
    d = np.sqrt(_sq_distances(x, cm.centroids)[0])
    shifted = -d - np.max(-d)
    scores = np.exp(shifted) / np.exp(shifted).sum()
    return rank_shards(scores, n if n is not None else cm.n_clusters, query_id)


def kmeans_objective(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    """Sum of squared point-to-assigned-centroid distances."""
    return float(_sq_distances(x, centroids)[np.arange(len(x)), labels].sum())
