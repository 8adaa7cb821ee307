"""Evaluation harness: query coverage, search costs, shard balance, and
multi-run aggregation.

Coverage Cov_N(q) is the fraction of a query's relevant documents that land
in its top-N routed shards; queries with no relevant document are excluded
from the mean (their count is reported). The resource cost of a query is
the total size of its selected shards, the latency cost the size of the
largest one; no extra shard-selection surcharge applies because routing is
part of the model. Every sharding method (trained or baseline) flows
through this one harness.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .selective_search import RoutingResult, ShardMap, retrieve


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    coverage: dict[int, float]  # N -> mean Cov_N, fraction in [0, 1]
    cost_resource: dict[int, float]  # N -> mean total selected-shard size
    cost_latency: dict[int, float]  # N -> mean largest selected-shard size
    shard_size_histogram: list[int]  # sizes sorted descending
    n_queries: int  # queries entering the coverage mean
    n_excluded: int  # queries skipped for lack of relevant docs
    run_seed: int | None = None


def coverage_at(
    query_id: str,
    shard_map: ShardMap,
    routing: RoutingResult,
    relevance: dict[str, set[str]],
    n: int,
) -> float:
    """Fraction of the query's relevant documents inside its top-n shards."""
    relevant = relevance.get(query_id, set())
    if not relevant:
        raise EvaluationError(f"query {query_id!r} has no relevant documents")
    per_shard = retrieve(shard_map, routing, relevant)
    hit = sum(len(s) for s in per_shard[:n])
    return hit / len(relevant)


def cost_at(routing: RoutingResult, shard_map: ShardMap, n: int) -> tuple[int, int]:
    """(resource, latency) costs of searching the query's top-n shards:
    total and maximum selected-shard size."""
    if n > shard_map.n_clusters:
        raise EvaluationError(f"top-N {n} exceeds shard count {shard_map.n_clusters}")
    sizes = [int(shard_map.shard_sizes[s]) for s in routing.shard_ids(n)]
    return sum(sizes), max(sizes)


def shard_balance(shard_map: ShardMap) -> tuple[list[int], float]:
    """Sizes sorted descending plus the normalized entropy of the size
    distribution: H(sizes/total)/ln K, 1.0 iff perfectly balanced."""
    sizes = sorted((int(s) for s in shard_map.shard_sizes), reverse=True)
    total = sum(sizes)
    k = len(sizes)
    if total == 0 or k < 2:
        return sizes, 0.0
    probs = np.asarray(sizes, dtype=np.float64) / total
    nonzero = probs[probs > 0]
    entropy = float(-np.sum(nonzero * np.log(nonzero)))
    return sizes, entropy / math.log(k)


def evaluate(
    shard_map: ShardMap,
    routings: dict[str, RoutingResult],
    relevance: dict[str, set[str]],
    eval_ns: list[int],
    run_seed: int | None = None,
) -> EvalReport:
    """Score a sharding+routing method over a query set. ``routings`` must
    rank all K shards per query (top-N results are prefixes of that ranking);
    ``relevance`` maps each query to its full relevant-document set."""
    k = shard_map.n_clusters
    for n in eval_ns:
        if not 1 <= n <= k:
            raise EvaluationError(f"eval N={n} outside [1, {k}]")

    coverage_sums = {n: 0.0 for n in eval_ns}
    resource_sums = {n: 0.0 for n in eval_ns}
    latency_sums = {n: 0.0 for n in eval_ns}
    n_covered = 0
    n_excluded = 0
    n_total = 0
    for qid, routing in routings.items():
        if len(routing.ranked_shards) != k:
            raise EvaluationError(f"routing for {qid!r} does not rank all {k} shards")
        n_total += 1
        for n in eval_ns:
            res, lat = cost_at(routing, shard_map, n)
            resource_sums[n] += res
            latency_sums[n] += lat
        if relevance.get(qid):
            n_covered += 1
            for n in eval_ns:
                coverage_sums[n] += coverage_at(qid, shard_map, routing, relevance, n)
        else:
            n_excluded += 1

    if n_total == 0:
        raise EvaluationError("no queries to evaluate")
    sizes, _ = shard_balance(shard_map)
    return EvalReport(
        coverage={n: (coverage_sums[n] / n_covered if n_covered else 0.0) for n in eval_ns},
        cost_resource={n: resource_sums[n] / n_total for n in eval_ns},
        cost_latency={n: latency_sums[n] / n_total for n in eval_ns},
        shard_size_histogram=sizes,
        n_queries=n_covered,
        n_excluded=n_excluded,
        run_seed=run_seed,
    )


# ---------------------------------------------------------------------------
# aggregation over runs

@dataclass
class RunAggregate:
    """Per-metric mean and sample (n-1) standard deviation over runs."""

    coverage: dict[int, tuple[float, float]]
    cost_resource: dict[int, tuple[float, float]]
    cost_latency: dict[int, tuple[float, float]]
    n_runs: int


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1))


def aggregate_runs(reports: list[EvalReport]) -> RunAggregate:
    if len(reports) < 2:
        raise EvaluationError(f"need at least 2 runs to aggregate, got {len(reports)}")
    ns = list(reports[0].coverage)
    for r in reports[1:]:
        if list(r.coverage) != ns:
            raise EvaluationError("reports evaluate different N lists")
    return RunAggregate(
        coverage={n: _mean_std([r.coverage[n] for r in reports]) for n in ns},
        cost_resource={n: _mean_std([r.cost_resource[n] for r in reports]) for n in ns},
        cost_latency={n: _mean_std([r.cost_latency[n] for r in reports]) for n in ns},
        n_runs=len(reports),
    )


# ---------------------------------------------------------------------------
# persistence

def report_to_json(report: EvalReport) -> str:
    payload = {
        "coverage": {str(n): c for n, c in report.coverage.items()},
        "cost_resource": {str(n): c for n, c in report.cost_resource.items()},
        "cost_latency": {str(n): c for n, c in report.cost_latency.items()},
        "shard_size_histogram": report.shard_size_histogram,
        "n_queries": report.n_queries,
        "n_excluded": report.n_excluded,
        "run_seed": report.run_seed,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(report_to_json(report), encoding="utf-8", newline="\n")


def load_report(path: str | Path) -> EvalReport:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return EvalReport(
        coverage={int(n): c for n, c in payload["coverage"].items()},
        cost_resource={int(n): c for n, c in payload["cost_resource"].items()},
        cost_latency={int(n): c for n, c in payload["cost_latency"].items()},
        shard_size_histogram=list(payload["shard_size_histogram"]),
        n_queries=payload["n_queries"],
        n_excluded=payload["n_excluded"],
        run_seed=payload.get("run_seed"),
    )


def write_plotdata(
    rows: list[tuple[str, int, float, float, float, float]], path: str | Path
) -> None:
    """plotdata.csv: the plot-ready coverage/cost table, one row per
    (method, N): coverage mean/std as percentages and mean costs."""
    with Path(path).open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            ["method", "N", "coverage_mean", "coverage_std",
             "cost_resource_mean", "cost_latency_mean"]
        )
        for row in rows:
            writer.writerow(row)


def format_percent(fraction: float, std: float | None = None) -> str:
    """Coverage formatted the way result tables print it: percent with two
    decimals, optionally with the run standard deviation in parentheses."""
    if std is None:
        return f"{100 * fraction:.2f}"
    return f"{100 * fraction:.2f} ({100 * std:.2f})"
