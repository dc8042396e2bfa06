"""Graph pooling with per-view attention scores, cross-view union, and the
differentiable soft-DTW alignment distance used as a training regularizer.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor


def init_pool_params(store: ParamStore, d: int, rng: np.random.Generator) -> None:
    """One scoring projector shared across views and stages."""
    store.add("pool.W", dc.xavier_uniform(rng, d, 1))
    store.add("pool.b", np.zeros(1))


def sag_scores(adj: Tensor, v: Tensor, w_pool: Tensor, b_pool: Tensor) -> Tensor:
    """Per-node attention score tanh((A V + V) W_pool + b_pool), shape (T', 1).

    Score propagation includes the node's own features (self-looped adjacency,
    the SAGPool convention). Divergence-built adjacency carries no self mass,
    and without the self term a node is scored purely by what it points at, so
    rankings across views share no content signal; selection then cannot learn
    to prefer indicative tokens.
    """
    return dc.tanh_act(dc.linear(dc.add(dc.matmul(adj, v), v), w_pool, b_pool))


def select_topk(scores: np.ndarray, ratio: float) -> np.ndarray:
    """Positions of the ceil(ratio * T') largest scores, sorted ascending.

    Ties break toward the smaller index; the result is deterministic.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"pooling ratio must be in (0, 1], got {ratio}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    k = math.ceil(ratio * scores.size)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def union_pool(index_sets: list[np.ndarray], v: Tensor,
               scores: list[Tensor]) -> tuple[Tensor, np.ndarray, float]:
    """Union the per-view selections and gate survivors by score.

    Each surviving node's features are multiplied by the largest activated
    score among the views that selected it (ties toward the lower view).
    Returns (gated features, surviving indices ascending, realized ratio).
    """
    t_prime = v.data.shape[0]
    survivors = np.unique(np.concatenate(index_sets))
    if survivors.size == 0:
        raise RuntimeError("union_pool produced an empty node set")
    score_mat = dc.concat_cols(scores)                      # (T', N)
    masked = np.full((t_prime, len(index_sets)), -np.inf)
    for n, idx in enumerate(index_sets):
        masked[idx, n] = score_mat.data[idx, n]
    best_view = masked[survivors].argmax(axis=1)
    gate = dc.gather_elems(score_mat, survivors, best_view)  # (K, 1)
    pooled = dc.mul(dc.take_rows(v, survivors), gate)
    return pooled, survivors, survivors.size / t_prime


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    np.maximum(d, 0.0, out=d)
    return d


def softdtw(seq_a: Tensor, seq_b: Tensor, gamma: float) -> Tensor:
    """Soft-DTW alignment cost between two vector sequences (m,d) and (n,d).

    DP recursion r_ij = delta_ij + softmin_gamma(r_{i-1,j}, r_{i,j-1},
    r_{i-1,j-1}) with softmin_gamma(a..) = -gamma ln sum e^{-a/gamma},
    computed via stabilized log-sum-exp; delta is squared Euclidean distance.
    Backward runs the reverse DP over soft alignments and yields exact
    gradients for both sequences.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    a = seq_a.data
    b = seq_b.data
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise dc.ShapeError(f"softdtw: sequences {a.shape} and {b.shape} do not conform")
    m, n = a.shape[0], b.shape[0]
    delta = _pairwise_sq_dists(a, b)

    inf = math.inf
    exp, log = math.exp, math.log
    r = [[inf] * (n + 2) for _ in range(m + 2)]
    r[0][0] = 0.0
    dlist = delta.tolist()
    for i in range(1, m + 1):
        ri = r[i]
        rp = r[i - 1]
        di = dlist[i - 1]
        for j in range(1, n + 1):
            r0 = rp[j - 1]
            r1 = rp[j]
            r2 = ri[j - 1]
            rmin = r0 if r0 < r1 else r1
            if r2 < rmin:
                rmin = r2
            acc = exp(rmin - r0) + exp(rmin - r1) + exp(rmin - r2) if gamma == 1.0 else (
                exp((rmin - r0) / gamma) + exp((rmin - r1) / gamma) + exp((rmin - r2) / gamma))
            ri[j] = di[j - 1] + rmin - gamma * log(acc)
    value = np.float64(r[m][n])

    def bw(gout):
        ninf = -inf
        rr = [row[:] for row in r]
        for row in rr:
            row[n + 1] = ninf
        rr[m + 1] = [ninf] * (n + 2)
        rr[m + 1][n + 1] = rr[m][n]
        d_ext = [[0.0] * (n + 2) for _ in range(m + 2)]
        for i in range(m):
            d_ext[i + 1][1:n + 1] = dlist[i]
        e = [[0.0] * (n + 2) for _ in range(m + 2)]
        e[m + 1][n + 1] = 1.0
        for i in range(m, 0, -1):
            ei = e[i]
            en = e[i + 1]
            ri = rr[i]
            rn = rr[i + 1]
            dn = d_ext[i + 1]
            di = d_ext[i]
            for j in range(n, 0, -1):
                rij = ri[j]
                wa = exp((rn[j] - rij - dn[j]) / gamma)
                wb = exp((ri[j + 1] - rij - di[j + 1]) / gamma)
                wc = exp((rn[j + 1] - rij - dn[j + 1]) / gamma)
                ei[j] = wa * en[j] + wb * ei[j + 1] + wc * en[j + 1]
        w = np.array(e)[1:m + 1, 1:n + 1] * float(gout)
        da = 2.0 * (w.sum(axis=1)[:, None] * a - w @ b)
        db = 2.0 * (w.sum(axis=0)[:, None] * b - w.T @ a)
        return da, db

    return dc.make_op(value, (seq_a, seq_b), bw)


def hard_dtw(seq_a: np.ndarray, seq_b: np.ndarray) -> float:
    """Classic min-cost alignment with the same squared-Euclidean cost."""
    delta = _pairwise_sq_dists(np.asarray(seq_a, dtype=np.float64),
                               np.asarray(seq_b, dtype=np.float64))
    m, n = delta.shape
    r = np.full((m + 1, n + 1), np.inf)
    r[0, 0] = 0.0
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            r[i, j] = delta[i - 1, j - 1] + min(r[i - 1, j], r[i, j - 1], r[i - 1, j - 1])
    return float(r[m, n])
