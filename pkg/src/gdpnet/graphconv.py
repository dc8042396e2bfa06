"""Multi-view densely connected graph convolution.

Each view runs M sub-layers; sub-layer l sees the concatenation of the block
input with the outputs of sub-layers 1..l-1, messages are passed through the
view's row-stochastic adjacency, and the view output concatenates all M
sub-layer outputs back to width d. View outputs are fused by a single
projection.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor


def init_conv_params(store: ParamStore, stage: int, d: int, n_views: int,
                     m_sublayers: int, rng: np.random.Generator) -> None:
    """Per-stage block: per view M sub-layer affines plus one view merge."""
    if d % m_sublayers != 0:
        raise ValueError(f"node width {d} is not divisible by {m_sublayers} sub-layers")
    q = d // m_sublayers
    for n in range(n_views):
        for layer in range(m_sublayers):
            w_in = d + layer * q
            store.add(f"conv{stage}.v{n}.l{layer}.W", dc.xavier_uniform(rng, w_in, q))
            store.add(f"conv{stage}.v{n}.l{layer}.b", np.zeros(q))
    store.add(f"conv{stage}.merge.W", dc.xavier_uniform(rng, n_views * d, d))


def dense_conv_view(adj: Tensor, v_in: Tensor,
                    weights: list[tuple[Tensor, Tensor]]) -> Tensor:
    """One view's densely connected block; output is (T', d)."""
    outs: list[Tensor] = []
    k = v_in
    for W, b in weights:
        h = dc.relu(dc.linear(dc.matmul(adj, k), W, b))
        outs.append(h)
        k = dc.concat_cols([v_in] + outs)
    return dc.concat_cols(outs)


def stage_weights(store: ParamStore, stage: int, view: int,
                  m_sublayers: int) -> list[tuple[Tensor, Tensor]]:
    return [(store[f"conv{stage}.v{view}.l{layer}.W"],
             store[f"conv{stage}.v{view}.l{layer}.b"])
            for layer in range(m_sublayers)]


def merge_views(view_outs: list[Tensor], w_merge: Tensor) -> Tensor:
    """Concatenate views along the feature axis, project back to d, ReLU."""
    shapes = {t.data.shape for t in view_outs}
    if len(shapes) != 1:
        raise dc.ShapeError(f"merge_views: inconsistent view shapes {sorted(shapes)}")
    stacked = view_outs[0] if len(view_outs) == 1 else dc.concat_cols(view_outs)
    return dc.relu(dc.matmul(stacked, w_merge))


def submatrix(scores: Tensor, idx: np.ndarray) -> Tensor:
    """Restrict a square score matrix to the rows and columns in ``idx``.

    Renormalizing after pooling happens on raw scores (slice, then re-apply
    the row normalization): for softmax rows this equals renormalizing the
    sliced adjacency exactly, but works in log space, so a row that kept only
    a sliver of its probability mass cannot blow up the backward pass.
    """
    idx = np.asarray(idx, dtype=np.intp)
    out = scores.data[np.ix_(idx, idx)].copy()

    def bw(g):
        da = np.zeros_like(scores.data)
        da[np.ix_(idx, idx)] = g
        return (da,)

    return dc.make_op(out, (scores,), bw)
