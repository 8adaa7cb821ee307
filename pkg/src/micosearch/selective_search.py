"""Post-training artifacts: shard assignment and query routing.

Every document goes to the argmax shard of the allocator (ties to the
lowest index); a query is routed to the top-N shards ranked by the router's
probabilities. Both are pure functions of the trained model, so sharding
and routing can fan out over any number of readers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .featurizer import SparseVector, stack_vectors
from .model import MicoModel, ModelError, forward_tower_batch


@dataclass
class ShardMap:
    """doc_id -> shard index in [0, K), plus per-shard document counts."""

    assignment: dict[str, int]
    shard_sizes: np.ndarray  # [K] int64

    @property
    def n_clusters(self) -> int:
        return len(self.shard_sizes)

    @property
    def n_documents(self) -> int:
        return len(self.assignment)


@dataclass
class RoutingResult:
    """Shards ranked for one query, scores (probabilities) nonincreasing."""

    query_id: str
    ranked_shards: list[tuple[int, float]]

    def shard_ids(self, n: int | None = None) -> list[int]:
        ranked = self.ranked_shards if n is None else self.ranked_shards[:n]
        return [s for s, _ in ranked]


def shard_map_from_assignment(assignment: dict[str, int], n_clusters: int) -> ShardMap:
    sizes = np.zeros(n_clusters, dtype=np.int64)
    for shard in assignment.values():
        if not 0 <= shard < n_clusters:
            raise ValueError(f"shard index {shard} out of range for K={n_clusters}")
        sizes[shard] += 1
    return ShardMap(assignment=assignment, shard_sizes=sizes)


def assign_documents(model: MicoModel, doc_vectors: dict[str, SparseVector]) -> ShardMap:
    """Argmax allocation of every document (ties to the lowest shard index)."""
    doc_ids = list(doc_vectors)
    for did in doc_ids:
        v = doc_vectors[did]
        if v.nnz and int(v.indices.max()) >= model.doc_dim:
            raise ModelError(
                f"document {did!r} has feature index {int(v.indices.max())} "
                f"outside model input dim {model.doc_dim}"
            )
    assignment: dict[str, int] = {}
    sizes = np.zeros(model.n_clusters, dtype=np.int64)
    if doc_ids:
        x = stack_vectors([doc_vectors[d] for d in doc_ids], model.doc_dim)
        probs = forward_tower_batch(model.doc_tower, x).p
        shards = np.argmax(probs, axis=1)  # first occurrence wins ties
        for did, shard in zip(doc_ids, shards):
            assignment[did] = int(shard)
            sizes[shard] += 1
    return ShardMap(assignment=assignment, shard_sizes=sizes)


def rank_shards(scores: np.ndarray, n: int, query_id: str = "") -> RoutingResult:
    """Top-n shards by score, ties broken by lowest shard index."""
    k = len(scores)
    if not 1 <= n <= k:
        raise ValueError(f"top-N must be in [1, {k}], got {n}")
    order = np.argsort(-scores, kind="stable")[:n]
    return RoutingResult(
        query_id=query_id,
        ranked_shards=[(int(i), float(scores[i])) for i in order],
    )


def route_query(
    model: MicoModel, query_vector: SparseVector, n: int, query_id: str = ""
) -> RoutingResult:
    """Route one query to its top-n shards by router probability."""
    if query_vector.nnz and int(query_vector.indices.max()) >= model.query_dim:
        raise ModelError(
            f"query feature index {int(query_vector.indices.max())} "
            f"outside model input dim {model.query_dim}"
        )
    x = stack_vectors([query_vector], model.query_dim)
    probs = forward_tower_batch(model.query_tower, x).p[0]
    return rank_shards(probs, n, query_id)


def retrieve(
    shard_map: ShardMap, routing: RoutingResult, relevant_docs: set[str]
) -> list[set[str]]:
    """For each routed shard, in routing order, the subset of the query's
    relevant documents assigned to it. The evaluation harness consumes the
    per-shard counts."""
    by_shard: dict[int, set[str]] = {}
    for did in relevant_docs:
        shard = shard_map.assignment.get(did)
        if shard is not None:
            by_shard.setdefault(shard, set()).add(did)
    return [by_shard.get(shard, set()) for shard, _ in routing.ranked_shards]


# ---------------------------------------------------------------------------
# persistence

def save_shard_map(shard_map: ShardMap, path: str | Path) -> None:
    """shardmap.tsv: doc_id <TAB> shard_index."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for did, shard in shard_map.assignment.items():
            f.write(f"{did}\t{shard}\n")


def load_shard_map(path: str | Path, n_clusters: int) -> ShardMap:
    assignment: dict[str, int] = {}
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path.name}:{lineno}: expected doc_id<TAB>shard")
            assignment[parts[0]] = int(parts[1])
    return shard_map_from_assignment(assignment, n_clusters)


def format_routing(routing: RoutingResult) -> str:
    """One routing line: query_id <TAB> shard:score,shard:score,..."""
    ranked = ",".join(f"{s}:{score:.6f}" for s, score in routing.ranked_shards)
    return f"{routing.query_id}\t{ranked}"


def save_routings(routings: list[RoutingResult], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for r in routings:
            f.write(format_routing(r) + "\n")
