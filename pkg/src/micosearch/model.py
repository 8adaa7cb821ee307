"""The three trainable components: query router p(z|q), document allocator
p(z'|d), and the learned marginal g(z') that tracks the allocator's average.

Both towers are one-hidden-layer networks (leaky rectifier, see
HIDDEN_LEAK) over sparse TF-IDF inputs with a softmax output over the K
shards; the marginal is a bare logit vector. Forward passes use stable
log-softmax; gradients are analytic (no autodiff) and are checked against
finite differences in the tests.

Parameters are float64 in memory; checkpoints store float32 per the wire
format below.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .featurizer import SparseVector, stack_vectors

DEFAULT_HIDDEN_DIM = 20

# Slope of the hidden activation on the negative side. Pure ReLU (slope 0)
# lets the optimizer kill every hidden unit early in training (biases march
# negative, gradients vanish, the model freezes at uniform outputs); the
# small leak keeps a recovery path open without changing h = max(x, 0) in
# any practical sense on the positive side.
HIDDEN_LEAK = 0.01

CHECKPOINT_MAGIC = b"MICO"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIBQ")  # magic, version, K, qdim, ddim, hidden, shared, cfg hash


class ModelError(ValueError):
    pass


@dataclass
class DenseLayerParams:
    weights: np.ndarray  # [in_dim, out_dim]
    bias: np.ndarray  # [out_dim]


@dataclass
class TowerParams:
    hidden: DenseLayerParams  # in_dim -> hidden_dim
    output: DenseLayerParams  # hidden_dim -> K

    @property
    def in_dim(self) -> int:
        return self.hidden.weights.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.hidden.weights.shape[1]

    @property
    def n_clusters(self) -> int:
        return self.output.weights.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [self.hidden.weights, self.hidden.bias, self.output.weights, self.output.bias]


@dataclass
class MarginalParams:
    logits: np.ndarray  # [K]


@dataclass
class MicoModel:
    query_tower: TowerParams
    doc_tower: TowerParams  # same object as query_tower when share_towers
    marginal: MarginalParams
    n_clusters: int
    share_towers: bool

    @property
    def query_dim(self) -> int:
        return self.query_tower.in_dim

    @property
    def doc_dim(self) -> int:
        return self.doc_tower.in_dim

    def tower_arrays(self) -> list[np.ndarray]:
        """Unique tower parameter arrays (one set when towers are shared)."""
        arrays = self.query_tower.arrays()
        if not self.share_towers:
            arrays += self.doc_tower.arrays()
        return arrays

    def copy(self) -> "MicoModel":
        qt = TowerParams(
            DenseLayerParams(self.query_tower.hidden.weights.copy(), self.query_tower.hidden.bias.copy()),
            DenseLayerParams(self.query_tower.output.weights.copy(), self.query_tower.output.bias.copy()),
        )
        if self.share_towers:
            dt = qt
        else:
            dt = TowerParams(
                DenseLayerParams(self.doc_tower.hidden.weights.copy(), self.doc_tower.hidden.bias.copy()),
                DenseLayerParams(self.doc_tower.output.weights.copy(), self.doc_tower.output.bias.copy()),
            )
        return MicoModel(qt, dt, MarginalParams(self.marginal.logits.copy()),
                         self.n_clusters, self.share_towers)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(
    query_dim: int,
    doc_dim: int,
    n_clusters: int,
    share_towers: bool = False,
    seed: int = 0,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
) -> MicoModel:
    """Glorot-uniform weights, zero biases and marginal logits. Deterministic
    given seed; the marginal starts uniform."""
    if query_dim < 1 or doc_dim < 1 or hidden_dim < 1:
        raise ModelError("dimensions must be >= 1")
    if n_clusters < 2:
        raise ModelError(f"need at least 2 clusters, got {n_clusters}")
    if share_towers and query_dim != doc_dim:
        raise ModelError(
            f"share_towers requires equal input dims, got {query_dim} != {doc_dim}"
        )
    rng = np.random.default_rng(seed)

    def make_tower(in_dim: int) -> TowerParams:
        return TowerParams(
            DenseLayerParams(_glorot(rng, in_dim, hidden_dim), np.zeros(hidden_dim)),
            DenseLayerParams(_glorot(rng, hidden_dim, n_clusters), np.zeros(n_clusters)),
        )

    query_tower = make_tower(query_dim)
    doc_tower = query_tower if share_towers else make_tower(doc_dim)
    return MicoModel(query_tower, doc_tower, MarginalParams(np.zeros(n_clusters)),
                     n_clusters, share_towers)


# ---------------------------------------------------------------------------
# forward

def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable log-softmax (works on 1-D and 2-D arrays)."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


@dataclass
class TowerCache:
    """Intermediate values of one batched tower pass, kept for backprop."""

    x: sp.csr_matrix | np.ndarray  # [n, in_dim]
    pre: np.ndarray  # [n, hidden]
    h: np.ndarray  # [n, hidden]
    logp: np.ndarray  # [n, K]
    p: np.ndarray  # [n, K]


def forward_tower_batch(tower: TowerParams, x) -> TowerCache:
    """Forward a stacked input matrix (CSR or dense) through a tower."""
    if x.shape[1] != tower.in_dim:
        raise ModelError(f"input dim {x.shape[1]} does not match tower dim {tower.in_dim}")
    pre = np.asarray(x @ tower.hidden.weights) + tower.hidden.bias
    h = np.where(pre > 0.0, pre, HIDDEN_LEAK * pre)
    logits = h @ tower.output.weights + tower.output.bias
    logp = log_softmax(logits)
    return TowerCache(x=x, pre=pre, h=h, logp=logp, p=np.exp(logp))


def forward_tower(tower: TowerParams, x: SparseVector) -> np.ndarray:
    """Cluster distribution p(.|x) for one sparse input. An empty vector is
    legal and flows through the biases only."""
    if x.nnz and int(x.indices.max()) >= tower.in_dim:
        raise ModelError(
            f"feature index {int(x.indices.max())} out of range for input dim {tower.in_dim}"
        )
    return forward_tower_batch(tower, stack_vectors([x], tower.in_dim)).p[0]


def forward_marginal(marginal: MarginalParams) -> np.ndarray:
    """The learned marginal distribution g(z') = softmax(logits)."""
    return np.exp(log_softmax(marginal.logits))


# ---------------------------------------------------------------------------
# backward

@dataclass
class Gradients:
    """∂L/∂(towers) and ∂H+/∂θ, the two pieces the update schedule consumes.

    ``query`` / ``doc`` are per-tower lists [dW_hidden, db_hidden, dW_out,
    db_out]; when towers are shared they are one summed list (same object).
    """

    query: list[np.ndarray]
    doc: list[np.ndarray]
    theta_hplus: np.ndarray
    shared: bool

    def tower_arrays(self) -> list[np.ndarray]:
        return self.query if self.shared else self.query + self.doc


def _backprop_tower(tower: TowerParams, cache: TowerCache, dlogits: np.ndarray) -> list[np.ndarray]:
    dw_out = cache.h.T @ dlogits
    db_out = dlogits.sum(axis=0)
    dh = dlogits @ tower.output.weights.T
    dpre = np.where(cache.pre > 0.0, dh, HIDDEN_LEAK * dh)
    dw_hid = np.asarray((cache.x.T @ dpre))
    db_hid = dpre.sum(axis=0)
    return [dw_hid, db_hid, dw_out, db_out]


def _zero_grads(tower: TowerParams) -> list[np.ndarray]:
    return [np.zeros_like(a) for a in tower.arrays()]


def _add_into(acc: list[np.ndarray], grads: list[np.ndarray]) -> None:
    for a, g in zip(acc, grads):
        a += g


def batch_loss_and_grads(
    model: MicoModel,
    query_x,
    doc_x,
    beta: float,
    gamma: float = 0.0,
    variant: str = "mico",
    cons_a_x=None,
    cons_b_x=None,
    want_grads: bool = True,
) -> tuple[tuple[float, float, float, float], Gradients | None]:
    """Batch losses and analytic gradients.

    Inputs are stacked matrices: ``query_x``/``doc_x`` hold the b paired
    vectors; ``cons_a_x``/``cons_b_x`` hold the per-query document pairs of
    the query-consistency term (mico_q only; may be None or empty).

    Returns ((h_cross, h_plus, h_q, total), gradients). h_cross is the mean
    cross-entropy between allocator and router outputs; h_plus the
    cross-entropy of the batch-mean allocation against the learned marginal
    (an upper bound on the batch-mean entropy); h_q the document-pair
    consistency cross-entropy. total = h_cross - beta*h_plus for mico and
    -beta*h_plus + (h_cross + gamma*h_q)/(1+gamma) for mico_q.
    """
    b = query_x.shape[0]
    if b == 0:
        raise ModelError("empty batch")
    qc = forward_tower_batch(model.query_tower, query_x)
    dc = forward_tower_batch(model.doc_tower, doc_x)
    logg = log_softmax(model.marginal.logits)
    g = np.exp(logg)

    # h_cross = (1/b) sum_i sum_k -p_doc[i,k] log p_query[i,k]
    h_cross = float(-np.sum(dc.p * qc.logp) / b)
    # h_plus = sum_k -m_k log g_k with m the batch mean of the doc distributions
    m = dc.p.mean(axis=0)
    h_plus = float(-np.sum(m * logg))

    h_q = 0.0
    ac = bc = None
    n_pairs = 0
    if variant == "mico_q" and cons_a_x is not None and cons_a_x.shape[0] > 0:
        ac = forward_tower_batch(model.doc_tower, cons_a_x)
        bc = forward_tower_batch(model.doc_tower, cons_b_x)
        n_pairs = cons_a_x.shape[0]
        h_q = float(-np.sum(ac.p * bc.logp) / n_pairs)

    if variant == "mico":
        w_cross, w_q = 1.0, 0.0
        total = h_cross - beta * h_plus
    elif variant == "mico_q":
        w_cross = 1.0 / (1.0 + gamma)
        w_q = gamma / (1.0 + gamma)
        total = -beta * h_plus + w_cross * h_cross + w_q * h_q
    else:
        raise ModelError(f"unknown loss variant {variant!r}")

    if not np.isfinite(total):
        raise ModelError(f"non-finite loss: h_cross={h_cross} h_plus={h_plus} h_q={h_q}")
    terms = (h_cross, h_plus, h_q, total)
    if not want_grads:
        return terms, None

    # query tower: only the cross term touches it
    dlogits_q = w_cross * (qc.p - dc.p) / b
    query_grads = _backprop_tower(model.query_tower, qc, dlogits_q)

    # doc tower, pairs sub-batch: cross term + the -beta*h_plus term
    row_dot_cross = np.sum(dc.p * qc.logp, axis=1, keepdims=True)
    dlogits_cross = -dc.p * (qc.logp - row_dot_cross) / b
    row_dot_g = dc.p @ logg
    dlogits_hplus = -dc.p * (logg[None, :] - row_dot_g[:, None]) / b
    dlogits_d = w_cross * dlogits_cross - beta * dlogits_hplus
    doc_grads = _zero_grads(model.doc_tower)
    _add_into(doc_grads, _backprop_tower(model.doc_tower, dc, dlogits_d))

    # doc tower, consistency pairs (both sides feed the same tower)
    if n_pairs:
        row_dot_q = np.sum(ac.p * bc.logp, axis=1, keepdims=True)
        dlogits_a = -w_q * ac.p * (bc.logp - row_dot_q) / n_pairs
        dlogits_b = w_q * (bc.p - ac.p) / n_pairs
        _add_into(doc_grads, _backprop_tower(model.doc_tower, ac, dlogits_a))
        _add_into(doc_grads, _backprop_tower(model.doc_tower, bc, dlogits_b))

    # theta: gradient of h_plus itself (the marginal descends the bound)
    theta_grad = g - m

    if model.share_towers:
        _add_into(query_grads, doc_grads)
        grads = Gradients(query=query_grads, doc=query_grads, theta_hplus=theta_grad, shared=True)
    else:
        grads = Gradients(query=query_grads, doc=doc_grads, theta_hplus=theta_grad, shared=False)

    for arr in grads.tower_arrays() + [grads.theta_hplus]:
        if not np.all(np.isfinite(arr)):
            raise ModelError("non-finite gradient (training diverged)")
    return terms, grads


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: MicoModel, path: str | Path, config_hash: int = 0) -> None:
    """Binary checkpoint: header + little-endian float32 arrays in order
    query tower (hidden W, hidden b, output W, output b), doc tower (same),
    marginal logits. The doc tower block is written even when towers are
    shared so the layout is fixed by the header alone."""
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        model.n_clusters,
        model.query_dim,
        model.doc_dim,
        model.query_tower.hidden_dim,
        1 if model.share_towers else 0,
        config_hash & 0xFFFFFFFFFFFFFFFF,
    )
    with Path(path).open("wb") as f:
        f.write(header)
        for arr in (*model.query_tower.arrays(), *model.doc_tower.arrays(),
                    model.marginal.logits):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[MicoModel, int]:
    """Returns (model, config hash). Parameters come back as float64."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ModelError(f"{path}: truncated checkpoint")
    magic, version, k, qdim, ddim, hidden, shared, cfg_hash = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")

    offset = _HEADER.size

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        return arr.astype(np.float64).reshape(shape)

    def take_tower(in_dim: int) -> TowerParams:
        return TowerParams(
            DenseLayerParams(take((in_dim, hidden)), take((hidden,))),
            DenseLayerParams(take((hidden, k)), take((k,))),
        )

    expected = _HEADER.size + 4 * (
        (qdim * hidden + hidden + hidden * k + k)
        + (ddim * hidden + hidden + hidden * k + k)
        + k
    )
    if len(raw) != expected:
        raise ModelError(f"{path}: bad checkpoint size {len(raw)}, expected {expected}")

    query_tower = take_tower(qdim)
    doc_tower = take_tower(ddim)
    marginal = MarginalParams(take((k,)))
    if shared:
        doc_tower = query_tower
    return (
        MicoModel(query_tower, doc_tower, marginal, int(k), bool(shared)),
        int(cfg_hash),
    )
