"""Latent multi-view graph edges from per-node diagonal Gaussians.

Each node feature row is encoded, per view, into a mean vector and a
softplus-positive stddev vector. Directed raw edge weights are pairwise KL
divergences (asymmetric by nature), then each row is normalized into a
row-stochastic adjacency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor


@dataclass
class GaussianBank:
    """Per-view (mu, sigma) tensors, each (T', g); sigma strictly positive."""

    views: list[tuple[Tensor, Tensor]]

    @property
    def n_views(self) -> int:
        return len(self.views)


EDGE_INIT_SCALE = 0.1


def init_gaussian_params(store: ParamStore, d: int, g: int, n_views: int,
                         rng: np.random.Generator,
                         scale: float = EDGE_INIT_SCALE) -> None:
    """One mean encoder and one stddev encoder per view (single affine each).

    Weights start at Xavier shrunk by scale/sqrt(g), which keeps the raw
    pairwise divergences near zero at first: the edge softmax starts close to
    uniform rather than saturated one-hot (divergences grow with g, and tiny
    stddevs blow them up further), all views begin with agreeing node
    rankings, and training sharpens edges from there.
    """
    factor = scale / np.sqrt(g)
    for n in range(n_views):
        store.add(f"ggg.v{n}.mu.W", factor * dc.xavier_uniform(rng, d, g))
        store.add(f"ggg.v{n}.mu.b", np.zeros(g))
        store.add(f"ggg.v{n}.sig.W", factor * dc.xavier_uniform(rng, d, g))
        store.add(f"ggg.v{n}.sig.b", np.zeros(g))


def encode_gaussians(v0: Tensor, store: ParamStore, n_views: int) -> GaussianBank:
    """mu^n = linear_n(V0); sigma^n = softplus(linear'_n(V0))."""
    views = []
    for n in range(n_views):
        mu = dc.linear(v0, store[f"ggg.v{n}.mu.W"], store[f"ggg.v{n}.mu.b"])
        sigma = dc.softplus(dc.linear(v0, store[f"ggg.v{n}.sig.W"], store[f"ggg.v{n}.sig.b"]))
        views.append((mu, sigma))
    return GaussianBank(views)


def kl_diag_gaussian(mu_i, sigma_i, mu_j, sigma_j) -> float:
    """Closed-form KL(N_i || N_j) for diagonal Gaussians given as 1-D arrays.

    sum_k [ ln(sigma_j,k/sigma_i,k) + (sigma_i,k^2 + (mu_i,k - mu_j,k)^2)
            / (2 sigma_j,k^2) - 1/2 ]
    """
    mu_i = np.asarray(mu_i, dtype=np.float64).reshape(-1)
    mu_j = np.asarray(mu_j, dtype=np.float64).reshape(-1)
    sigma_i = np.asarray(sigma_i, dtype=np.float64).reshape(-1)
    sigma_j = np.asarray(sigma_j, dtype=np.float64).reshape(-1)
    if not (mu_i.shape == mu_j.shape == sigma_i.shape == sigma_j.shape):
        raise dc.ShapeError("kl_diag_gaussian: all four vectors must share one length")
    if np.any(sigma_i <= 0) or np.any(sigma_j <= 0):
        raise ValueError("kl_diag_gaussian: sigma entries must be positive")
    return float(np.sum(np.log(sigma_j / sigma_i)
                        + (sigma_i ** 2 + (mu_i - mu_j) ** 2) / (2.0 * sigma_j ** 2)
                        - 0.5))


def kl_matrix(mu: Tensor, sigma: Tensor) -> Tensor:
    """Pairwise KL(node i || node j) as a (T', T') tensor with an exact-zero
    diagonal, fused for speed with a hand-derived backward."""
    m = mu.data
    s = sigma.data
    t, g = m.shape
    log_s = np.log(s)
    s2 = s * s
    prec = 1.0 / (2.0 * s2)            # 1 / (2 sigma_j^2), indexed by j
    m2 = m * m
    row_log = log_s.sum(axis=1)
    out = ((s2 + m2) @ prec.T
           - 2.0 * (m @ (m * prec).T)
           + (m2 * prec).sum(axis=1)[None, :]
           + row_log[None, :] - row_log[:, None]
           - 0.5 * g)
    np.fill_diagonal(out, 0.0)

    def bw(gout):
        gm = np.array(gout)
        np.fill_diagonal(gm, 0.0)       # diagonal is pinned to zero
        q = 1.0 / s2                    # 1 / sigma_j^2
        row_w = gm.sum(axis=1)          # sum_j G_ij
        col_w = gm.sum(axis=0)          # sum_i G_ij
        gq = gm @ q                     # (i,k): sum_j G_ij / sigma_jk^2
        gmq = gm @ (m * q)              # (i,k): sum_j G_ij mu_jk / sigma_jk^2
        d_mu = m * gq - gmq
        d_mu += q * (col_w[:, None] * m - gm.T @ m)
        d_sigma = -row_w[:, None] / s + s * gq
        gt_s2m2 = gm.T @ (s2 + m2)
        gt_m = gm.T @ m
        d_sigma += (col_w[:, None] / s
                    - (q / s) * (gt_s2m2 - 2.0 * m * gt_m + m2 * col_w[:, None]))
        return d_mu, d_sigma

    return dc.make_op(out, (mu, sigma), bw)


def normalize_adjacency(scores: Tensor, mode: str = "softmax") -> Tensor:
    """Turn a raw directed score matrix into an adjacency matrix.

    softmax: row softmax (row-stochastic, the default).
    row_sum: divide each row by its sum; all-zero rows become uniform.
    none:    raw scores unchanged.
    """
    if mode == "softmax":
        return dc.row_softmax(scores)
    if mode == "none":
        return scores
    if mode == "row_sum":
        sums = scores.data.sum(axis=1, keepdims=True)
        zero = sums[:, 0] == 0.0
        safe = np.where(sums == 0.0, 1.0, sums)
        out = scores.data / safe
        out[zero] = 1.0 / scores.data.shape[1]

        def bw(g):
            ds = (g - (g * out).sum(axis=1, keepdims=True)) / safe
            ds[zero] = 0.0
            return (ds,)

        return dc.make_op(out, (scores,), bw)
    raise ValueError(f"unknown adjacency normalization {mode!r}")


def build_adjacency(bank: GaussianBank, norm: str = "softmax") -> list[Tensor]:
    """Raw KL scores per view, each row normalized into a directed adjacency."""
    return [normalize_adjacency(kl_matrix(mu, sigma), norm) for mu, sigma in bank.views]
