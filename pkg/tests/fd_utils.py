"""Finite-difference gradient checking shared by the model tests and the
acceptance suite.

Instances are resampled until every hidden pre-activation clears a margin
around the rectifier kink, so a central difference never straddles it.
"""

import numpy as np

from micosearch.model import MicoModel, batch_loss_and_grads, init_model

EPS = 1e-4
KINK_MARGIN = 5e-3


def random_instance(rng: np.random.Generator, variant: str):
    """Random small model + dense batch matrices, kink-safe for FD at EPS."""
    while True:
        k = int(rng.integers(2, 6))
        qdim = int(rng.integers(2, 11))
        ddim = qdim if rng.random() < 0.3 else int(rng.integers(2, 11))
        hidden = int(rng.integers(2, 7))
        b = int(rng.integers(2, 9))
        share = bool(qdim == ddim and rng.random() < 0.25)
        model = init_model(qdim, ddim, k, share_towers=share,
                           seed=int(rng.integers(2**31)), hidden_dim=hidden)
        for arr in model.tower_arrays():
            arr += rng.normal(0.0, 0.3, arr.shape)
        model.marginal.logits[:] = rng.normal(0.0, 0.5, k)

        def dense(n, dim):
            x = np.zeros((n, dim))
            for i in range(n):
                nnz = int(rng.integers(1, dim + 1))
                cols = rng.choice(dim, size=nnz, replace=False)
                x[i, cols] = rng.uniform(0.1, 1.0, size=nnz)
            return x

        qx, dx = dense(b, qdim), dense(b, ddim)
        n_pairs = int(rng.integers(0, 4)) if variant == "mico_q" else 0
        ax = dense(n_pairs, ddim) if n_pairs else np.zeros((0, ddim))
        bx = dense(n_pairs, ddim) if n_pairs else np.zeros((0, ddim))

        if _kink_margin_ok(model, (qx, dx, ax, bx)):
            beta = float(rng.uniform(0.0, 12.0))
            gamma = float(rng.uniform(0.0, 5.0)) if variant == "mico_q" else 0.0
            return model, (qx, dx, ax, bx), beta, gamma


def _kink_margin_ok(model: MicoModel, mats) -> bool:
    qx, dx, ax, bx = mats
    for tower, xs in ((model.query_tower, [qx]), (model.doc_tower, [dx, ax, bx])):
        for x in xs:
            if x.shape[0] == 0:
                continue
            pre = x @ tower.hidden.weights + tower.hidden.bias
            if np.min(np.abs(pre)) < KINK_MARGIN:
                return False
    return True


def max_rel_error(model, mats, beta, gamma, variant, rng, per_block=3):
    """Compare analytic gradients against central differences on a few
    random entries of every parameter block. Returns the worst relative
    error over tower blocks (vs the total loss) and theta (vs h_plus)."""
    qx, dx, ax, bx = mats

    def loss(index):
        terms, _ = batch_loss_and_grads(
            model, qx, dx, beta, gamma, variant, ax, bx, want_grads=False
        )
        return terms[index]

    _, grads = batch_loss_and_grads(model, qx, dx, beta, gamma, variant, ax, bx)
    worst = 0.0
    for arr, grad in zip(model.tower_arrays(), grads.tower_arrays()):
        flat, gflat = arr.ravel(), grad.ravel()
        picks = rng.choice(arr.size, size=min(per_block, arr.size), replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + EPS
            up = loss(3)
            flat[j] = orig - EPS
            down = loss(3)
            flat[j] = orig
            fd = (up - down) / (2 * EPS)
            worst = max(worst, _rel(fd, gflat[j]))
    theta = model.marginal.logits
    for j in range(len(theta)):
        orig = theta[j]
        theta[j] = orig + EPS
        up = loss(1)
        theta[j] = orig - EPS
        down = loss(1)
        theta[j] = orig
        fd = (up - down) / (2 * EPS)
        worst = max(worst, _rel(fd, grads.theta_hplus[j]))
    return worst


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)
