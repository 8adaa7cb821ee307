"""Minimax training loop for the co-trained sharding model.

Each step processes one batch of relevant (query, document) pairs:

1. the marginal logits descend h_plus (Adam, ``lr_theta``, ``theta_steps``
   times) so the learned marginal tracks the batch-mean allocation;
2. the towers descend the total loss once (Adam, ``lr_towers``) with global
   L2 gradient clipping at ``clip_norm``.

The plain variant minimizes h_cross - beta*h_plus; the query-consistency
variant (mico_q) adds a cross-entropy between pairs of documents relevant
to the same query: -beta*h_plus + (h_cross + gamma*h_q)/(1+gamma). See the
module docstring of ``model`` for the term definitions.

Per-batch losses average over pairs, so the epoch mean of the batch loss
equals the full-data loss for frozen parameters. The batch-mean entropy
(``batch_marginal_entropy``) does NOT have this property; it is exposed as
a diagnostic only and never trained on.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation, selective_search
from .corpus import Corpus, training_pairs
from .featurizer import FeatureSet, SparseVector, stack_vectors
from .model import (
    Gradients,
    MicoModel,
    batch_loss_and_grads,
    forward_tower_batch,
    init_model,
    log_softmax,
)

VARIANTS = ("mico", "mico_q")

# per-variant defaults: (beta, gamma, clip_norm, theta_steps)
_VARIANT_DEFAULTS = {
    "mico": (10.0, 0.0, 10.0, 1),
    "mico_q": (3.0, 3.0, 1.0, 4),
}


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "mico"
    beta: float | None = None  # entropy regularization strength
    gamma: float | None = None  # query-consistency strength (mico_q)
    batch_size: int = 256
    lr_towers: float = 0.03
    lr_theta: float = 0.1
    clip_norm: float | None = None
    theta_steps: int | None = None
    max_epochs: int = 50
    patience: int = 5  # dev evaluations without Cov_1 improvement before stopping
    seed: int = 0
    # flip the marginal update to ascend h_plus (literal main-text reading);
    # the default descends, which tightens the variational bound
    theta_ascend: bool = False

    def resolved(self) -> "TrainConfig":
        """Fill variant-dependent defaults and validate."""
        if self.variant not in VARIANTS:
            raise TrainError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        d_beta, d_gamma, d_clip, d_steps = _VARIANT_DEFAULTS[self.variant]
        cfg = replace(
            self,
            beta=d_beta if self.beta is None else self.beta,
            gamma=d_gamma if self.gamma is None else self.gamma,
            clip_norm=d_clip if self.clip_norm is None else self.clip_norm,
            theta_steps=d_steps if self.theta_steps is None else self.theta_steps,
        )
        if cfg.batch_size < 2:
            raise TrainError(f"batch_size must be >= 2, got {cfg.batch_size}")
        if cfg.lr_towers <= 0 or cfg.lr_theta <= 0:
            raise TrainError("learning rates must be positive")
        if cfg.theta_steps < 1:
            raise TrainError(f"theta_steps must be >= 1, got {cfg.theta_steps}")
        if cfg.beta < 0 or cfg.gamma < 0:
            raise TrainError("beta and gamma must be nonnegative")
        return cfg


@dataclass
class Batch:
    """One training batch: paired (query, document) vectors, plus, for the
    query-consistency variant, (doc, doc) pairs drawn per query."""

    pairs: list[tuple[SparseVector, SparseVector, str]]
    consistency_pairs: list[tuple[SparseVector, SparseVector]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class LossBreakdown:
    h_cross: float  # router/allocator cross-entropy, averaged over pairs
    h_plus: float  # bound on the batch-mean allocation entropy
    h_q: float  # document-pair consistency cross-entropy (0 for plain variant)
    total: float


def _matrices(batch: Batch, model: MicoModel):
    qx = stack_vectors([p[0] for p in batch.pairs], model.query_dim)
    dx = stack_vectors([p[1] for p in batch.pairs], model.doc_dim)
    ax = stack_vectors([c[0] for c in batch.consistency_pairs], model.doc_dim)
    bx = stack_vectors([c[1] for c in batch.consistency_pairs], model.doc_dim)
    return qx, dx, ax, bx


# ---------------------------------------------------------------------------
# loss terms

def cross_entropy_term(batch: Batch, model: MicoModel) -> float:
    """(1/b) sum_i sum_k -p(k|d_i) log p(k|q_i)."""
    qx, dx, _, _ = _matrices(batch, model)
    terms, _ = batch_loss_and_grads(model, qx, dx, beta=0.0, want_grads=False)
    return terms[0]


def entropy_plus_term(batch: Batch, model: MicoModel) -> float:
    """sum_k -m_k log g(k) with m the batch mean of the doc distributions.
    Upper-bounds the entropy of m; tight iff g equals m."""
    qx, dx, _, _ = _matrices(batch, model)
    terms, _ = batch_loss_and_grads(model, qx, dx, beta=0.0, want_grads=False)
    return terms[1]


def query_consistency_term(batch: Batch, model: MicoModel) -> float:
    """Mean over (d1, d2) pairs of sum_k -p(k|d1) log p(k|d2); 0 when the
    batch has no consistency pairs."""
    qx, dx, ax, bx = _matrices(batch, model)
    terms, _ = batch_loss_and_grads(
        model, qx, dx, beta=0.0, gamma=1.0, variant="mico_q",
        cons_a_x=ax, cons_b_x=bx, want_grads=False,
    )
    return terms[2]


def mico_loss(batch: Batch, model: MicoModel, config: TrainConfig) -> LossBreakdown:
    cfg = config.resolved()
    qx, dx, ax, bx = _matrices(batch, model)
    terms, _ = batch_loss_and_grads(
        model, qx, dx, beta=cfg.beta, gamma=cfg.gamma, variant=cfg.variant,
        cons_a_x=ax, cons_b_x=bx, want_grads=False,
    )
    return LossBreakdown(*terms)


def backward(batch: Batch, model: MicoModel, config: TrainConfig) -> tuple[LossBreakdown, Gradients]:
    """Analytic gradients: ∂total/∂(towers) and ∂h_plus/∂θ."""
    cfg = config.resolved()
    qx, dx, ax, bx = _matrices(batch, model)
    terms, grads = batch_loss_and_grads(
        model, qx, dx, beta=cfg.beta, gamma=cfg.gamma, variant=cfg.variant,
        cons_a_x=ax, cons_b_x=bx,
    )
    return LossBreakdown(*terms), grads


def batch_marginal_entropy(batch: Batch, model: MicoModel) -> float:
    """Diagnostic only: entropy of the batch-mean doc distribution (the
    biased batch estimator of the marginal entropy). Its epoch mean does not
    equal the full-data value, which is why training uses h_plus instead."""
    dx = stack_vectors([p[1] for p in batch.pairs], model.doc_dim)
    m = forward_tower_batch(model.doc_tower, dx).p.mean(axis=0)
    return float(-np.sum(m * np.log(m)))


# ---------------------------------------------------------------------------
# optimization

@dataclass
class AdamState:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) over a fixed list of
    parameter arrays."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class OptimizerState:
    towers: AdamState
    theta: AdamState


def make_optimizer(config: TrainConfig) -> OptimizerState:
    cfg = config.resolved()
    return OptimizerState(AdamState(lr=cfg.lr_towers), AdamState(lr=cfg.lr_theta))


def clip_gradients(grads: list[np.ndarray], clip_norm: float) -> float:
    """Global L2-norm clipping in place. Returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if math.isfinite(clip_norm) and total > clip_norm > 0:
        scale = clip_norm / total
        for g in grads:
            g *= scale
    return total


def train_step(
    model: MicoModel, batch: Batch, config: TrainConfig, optimizer: OptimizerState
) -> LossBreakdown:
    """One minimax step, in place: theta first (theta_steps Adam updates
    descending h_plus, unclipped), then one clipped Adam update of the
    towers descending the total loss."""
    cfg = config.resolved()
    qx, dx, ax, bx = _matrices(batch, model)

    # the batch-mean allocation is fixed while theta moves
    m = forward_tower_batch(model.doc_tower, dx).p.mean(axis=0)
    sign = -1.0 if cfg.theta_ascend else 1.0
    for _ in range(cfg.theta_steps):
        g = np.exp(log_softmax(model.marginal.logits))
        optimizer.theta.update([model.marginal.logits], [sign * (g - m)])

    terms, grads = batch_loss_and_grads(
        model, qx, dx, beta=cfg.beta, gamma=cfg.gamma, variant=cfg.variant,
        cons_a_x=ax, cons_b_x=bx,
    )
    tower_grads = grads.tower_arrays()
    clip_gradients(tower_grads, cfg.clip_norm)
    optimizer.towers.update(model.tower_arrays(), tower_grads)
    return LossBreakdown(*terms)


# ---------------------------------------------------------------------------
# epochs

def sample_epoch(
    pairs: list[tuple[str, str]],
    features: FeatureSet,
    config: TrainConfig,
    rng: np.random.Generator,
) -> list[Batch]:
    """Shuffle the training pairs and chunk them into batches (the last one
    may be short). For mico_q, each distinct query in a batch with at least
    two relevant documents contributes one (d1, d2) pair drawn uniformly
    without replacement from its full relevant-document set."""
    cfg = config.resolved()
    if not pairs:
        raise TrainError("no training pairs")

    docs_by_query: dict[str, list[str]] = {}
    if cfg.variant == "mico_q":
        grouped: dict[str, set[str]] = {}
        for qid, did in pairs:
            grouped.setdefault(qid, set()).add(did)
        docs_by_query = {qid: sorted(dids) for qid, dids in grouped.items()}

    order = rng.permutation(len(pairs))
    batches: list[Batch] = []
    for start in range(0, len(pairs), cfg.batch_size):
        chunk = [pairs[i] for i in order[start : start + cfg.batch_size]]
        batch_pairs = [
            (features.query_vectors[qid], features.doc_vectors[did], qid)
            for qid, did in chunk
        ]
        cons: list[tuple[SparseVector, SparseVector]] = []
        if cfg.variant == "mico_q":
            seen: set[str] = set()
            for qid, _ in chunk:
                if qid in seen:
                    continue
                seen.add(qid)
                docs = docs_by_query[qid]
                if len(docs) >= 2:
                    i, j = rng.choice(len(docs), size=2, replace=False)
                    cons.append((features.doc_vectors[docs[i]], features.doc_vectors[docs[j]]))
        batches.append(Batch(pairs=batch_pairs, consistency_pairs=cons))
    return batches


@dataclass
class EpochRecord:
    epoch: int
    mean_h_cross: float
    mean_h_plus: float
    mean_h_q: float
    mean_total: float
    dev_cov1: float | None
    wallclock_s: float


@dataclass
class FitResult:
    model: MicoModel
    log: list[EpochRecord]
    best_dev_cov1: float | None


def _dev_scores(model: MicoModel, features: FeatureSet,
                relevance: dict[str, set[str]]) -> tuple[float, float] | None:
    """(dev Cov_1, selection score) over dev queries with relevant docs.

    Raw Cov_1 cannot tell a degenerate sharding apart from a structured one
    (a fully collapsed model covers everything with its single giant shard),
    so checkpoint selection subtracts the fraction of the corpus a query's
    selected shard forces it to search: score = Cov_1 - mean |s_1|/|D|.
    """
    shard_map = selective_search.assign_documents(model, features.doc_vectors)
    n_docs = max(shard_map.n_documents, 1)
    covs = []
    costs = []
    for qid, rel in relevance.items():
        if not rel:
            continue
        routing = selective_search.route_query(model, features.query_vectors[qid], 1, qid)
        covs.append(evaluation.coverage_at(qid, shard_map, routing, relevance, 1))
        costs.append(int(shard_map.shard_sizes[routing.ranked_shards[0][0]]) / n_docs)
    if not covs:
        return None
    cov1 = float(np.mean(covs))
    return cov1, cov1 - float(np.mean(costs))


def fit(
    corpus: Corpus,
    features: FeatureSet,
    n_clusters: int,
    config: TrainConfig,
    share_towers: bool = False,
    hidden_dim: int = 20,
    grade_filter: set[str] | None = None,
    log_path: str | Path | None = None,
) -> FitResult:
    """Run the full training loop: epochs of train_step over shuffled pair
    batches, a dev evaluation after each epoch, early stopping after
    ``patience`` evaluations without improvement, returning the best-dev
    model (the final one if the corpus has no usable dev split). The log
    records raw dev Cov_1; selection and patience use the cost-adjusted
    score (see _dev_scores) so collapse transients never win."""
    cfg = config.resolved()
    pairs = training_pairs(corpus, grade_filter)
    model = init_model(
        features.query_dim, features.doc_dim, n_clusters,
        share_towers=share_towers, seed=cfg.seed, hidden_dim=hidden_dim,
    )
    if cfg.max_epochs == 0:
        return FitResult(model=model, log=[], best_dev_cov1=None)

    dev_relevance = corpus.relevant_docs(grade_filter=grade_filter, split="dev")
    optimizer = make_optimizer(cfg)
    rng = np.random.default_rng([cfg.seed, 1])

    records: list[EpochRecord] = []
    best_model = model
    best_cov: float | None = None
    best_score: float | None = None
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        sums = np.zeros(4)
        batches = sample_epoch(pairs, features, cfg, rng)
        for batch in batches:
            bd = train_step(model, batch, cfg, optimizer)
            sums += (bd.h_cross, bd.h_plus, bd.h_q, bd.total)
        means = sums / len(batches)
        scores = _dev_scores(model, features, dev_relevance)
        cov1 = scores[0] if scores else None
        records.append(
            EpochRecord(
                epoch=epoch,
                mean_h_cross=float(means[0]),
                mean_h_plus=float(means[1]),
                mean_h_q=float(means[2]),
                mean_total=float(means[3]),
                dev_cov1=cov1,
                wallclock_s=time.perf_counter() - start,
            )
        )
        if scores is not None:
            if best_score is None or scores[1] > best_score:
                best_cov, best_score = scores[0], scores[1]
                best_model = model.copy()
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best_score is None:
        best_model = model  # no usable dev split: keep the final parameters

    if log_path is not None:
        write_training_log(records, log_path)
    return FitResult(model=best_model, log=records, best_dev_cov1=best_cov)


def write_training_log(records: list[EpochRecord], path: str | Path) -> None:
    """training_log.jsonl: one record per epoch."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(
                json.dumps(
                    {
                        "epoch": r.epoch,
                        "mean_h_cross": r.mean_h_cross,
                        "mean_h_plus": r.mean_h_plus,
                        "mean_h_q": r.mean_h_q,
                        "mean_total": r.mean_total,
                        "dev_cov1": r.dev_cov1,
                        "wallclock_s": r.wallclock_s,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
