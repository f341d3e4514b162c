"""Single-scale multi-head deformable attention and the encoder layer.

Each query predicts, per head, K sampling offsets around its reference point
and K softmax-normalized weights; sampled values go through a per-head value
projection, heads are concatenated and output-projected. One evaluation can
aggregate many (source map, reference set) pairs at once: offsets and weights
depend only on the query, so they are computed once and shared across
sources, and invalid (source, query) pairs contribute exactly zero.

Value and output projections carry no bias; this keeps "sum over sources of
per-source attention outputs" exactly equal to "output projection of the
summed per-head features", which is how the batched path evaluates it.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Parameter, Tensor


class DeformAttnParams:
    """Projection weights for one deformable attention block.

    heads * (channels/heads) value projections of width value_dim -> N/M,
    offset projection N -> M*K*2, weight projection N -> M*K, output
    projection N -> N. Offset and weight projections start at zero so the
    block begins as uniform attention at the reference points.
    """

    def __init__(self, prefix: str, heads: int, points: int, channels: int,
                 value_dim: int, rng: np.random.Generator):
        if channels % heads:
            raise ContractError(f"channels {channels} not divisible by heads {heads}")
        if points < 1:
            raise ContractError(f"points_per_head must be >= 1, got {points}")
        self.heads = heads
        self.points = points
        self.channels = channels
        self.value_dim = value_dim
        head_dim = channels // heads
        s = 1.0 / np.sqrt(channels)
        sv = 1.0 / np.sqrt(value_dim)
        self.offset_w = Parameter(f"{prefix}.offset.weight", np.zeros((channels, heads * points * 2)))
        self.offset_b = Parameter(f"{prefix}.offset.bias", np.zeros(heads * points * 2))
        self.weight_w = Parameter(f"{prefix}.weight.weight", np.zeros((channels, heads * points)))
        self.weight_b = Parameter(f"{prefix}.weight.bias", np.zeros(heads * points))
        self.value_w = [
            Parameter(f"{prefix}.value{m}.weight", rng.uniform(-sv, sv, (value_dim, head_dim)))
            for m in range(heads)
        ]
        self.out_w = Parameter(f"{prefix}.out.weight", rng.uniform(-s, s, (channels, channels)))

    def parameters(self) -> List[Parameter]:
        return [self.offset_w, self.offset_b, self.weight_w, self.weight_b,
                *self.value_w, self.out_w]


class EncoderLayerParams:
    """Self-attention, cross-attention, FFN (N -> 4N -> N, relu) and the three
    post-norm gain/shift pairs of one encoder layer."""

    def __init__(self, prefix: str, heads: int, points: int, channels: int,
                 value_dim: int, rng: np.random.Generator):
        self.channels = channels
        self.self_attn = DeformAttnParams(f"{prefix}.self_attn", heads, points, channels, channels, rng)
        self.cross_attn = DeformAttnParams(f"{prefix}.cross_attn", heads, points, channels, value_dim, rng)
        hidden = 4 * channels
        s1 = 1.0 / np.sqrt(channels)
        s2 = 1.0 / np.sqrt(hidden)
        self.ffn_w1 = Parameter(f"{prefix}.ffn.w1", rng.uniform(-s1, s1, (channels, hidden)))
        self.ffn_b1 = Parameter(f"{prefix}.ffn.b1", np.zeros(hidden))
        self.ffn_w2 = Parameter(f"{prefix}.ffn.w2", rng.uniform(-s2, s2, (hidden, channels)))
        self.ffn_b2 = Parameter(f"{prefix}.ffn.b2", np.zeros(channels))
        self.norms = []
        for i in (1, 2, 3):
            self.norms.append((Parameter(f"{prefix}.norm{i}.gain", np.ones(channels)),
                               Parameter(f"{prefix}.norm{i}.shift", np.zeros(channels))))

    def parameters(self) -> List[Parameter]:
        ps = self.self_attn.parameters() + self.cross_attn.parameters()
        ps += [self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2]
        for g, b in self.norms:
            ps += [g, b]
        return ps


def _query_offsets_weights(queries: Tensor, params: DeformAttnParams):
    """Per-query sampling offsets [T,M,K,2] and softmaxed weights [T,M,K]."""
    t = queries.shape[0]
    m, k = params.heads, params.points
    off = T.linear(queries, params.offset_w.tensor, params.offset_b.tensor)
    off = T.reshape(off, (t, m, k, 2))
    logits = T.linear(queries, params.weight_w.tensor, params.weight_b.tensor)
    attn = T.softmax_lastaxis(T.reshape(logits, (t, m, k)))
    return off, attn


def deform_attn(queries: Tensor, ref_pts, feat: Tensor, params: DeformAttnParams,
                valid=None) -> Tensor:
    """Deformable attention of T queries against one feature map.

    ref_pts: [T,2] continuous (row, col) feature coordinates. valid: [T] bool;
    rows with valid=False yield exactly zero output.
    """
    ref = np.asarray(ref_pts.data if isinstance(ref_pts, Tensor) else ref_pts)
    if ref.ndim != 2 or ref.shape[1] != 2:
        raise ShapeError(f"deform_attn: ref_pts must be [T,2], got {ref.shape}")
    if feat.shape[-1] != params.value_dim:
        raise ShapeError(
            f"deform_attn: feature channels {feat.shape[-1]} != value width {params.value_dim}"
        )
    t = queries.shape[0]
    m, k = params.heads, params.points
    off, attn = _query_offsets_weights(queries, params)
    base = Tensor(np.broadcast_to(ref[:, None, None, :], (t, m, k, 2)).copy())
    pts = T.reshape(T.add(base, off), (t * m * k, 2))
    sampled = T.bilinear_sample(feat, pts)  # [T*M*K, value_dim]
    sampled = T.reshape(sampled, (t, m, k, params.value_dim))
    weighted = T.tsum(T.mul(sampled, T.reshape(attn, (t, m, k, 1))), axis=2)  # [T,M,Vd]
    per_head = []
    flat = T.reshape(weighted, (t * m, params.value_dim))
    for h in range(m):
        rows = T.take_rows(flat, np.arange(t) * m + h)
        per_head.append(T.matmul(rows, params.value_w[h].tensor))
    mixed = T.concat_lastaxis(per_head)  # [T, N]
    out = T.matmul(mixed, params.out_w.tensor)
    if valid is not None:
        out = T.mul(out, Tensor(np.asarray(valid, dtype=np.float64)[:, None]))
    return out


def deform_attn_multi(queries: Tensor, sources: Sequence, params: DeformAttnParams) -> Tensor:
    """Sum of deformable attention over many (feature map, refs, valid) sources.

    sources: list of (feat Tensor [Hf,Wf,Vd], ref_pts [T,2], valid [T] bool)
    tuples, optionally with a fourth integer multiplicity (the source counted
    that many times). All maps must share one shape. Offsets/weights are
    computed once from the queries; invalid (source, query) pairs are skipped,
    which equals the masked dense sum bit for bit because their contribution
    is exactly zero.
    """
    if not sources:
        raise ContractError("deform_attn_multi: no sources")
    sources = [s if len(s) == 4 else (*s, 1) for s in sources]
    t = queries.shape[0]
    m, k = params.heads, params.points
    shape0 = sources[0][0].shape
    for f, _, _, _ in sources:
        if f.shape != shape0:
            raise ShapeError(f"deform_attn_multi: map shapes differ: {f.shape} vs {shape0}")
    off, attn = _query_offsets_weights(queries, params)

    pair_src = []
    pair_query = []
    pair_mult = []
    for s, (_, ref, vis, mult) in enumerate(sources):
        ref = np.asarray(ref)
        if ref.ndim != 2 or ref.shape[1] != 2:
            raise ShapeError(f"deform_attn_multi: ref_pts must be [T,2], got {ref.shape}")
        qidx = np.nonzero(np.asarray(vis))[0] if vis is not None else np.arange(t)
        pair_src.append(np.full(qidx.shape, s, dtype=np.intp))
        pair_query.append(qidx)
        pair_mult.append(np.full(qidx.shape, float(mult)))
    src_idx = np.concatenate(pair_src)
    qry_idx = np.concatenate(pair_query)
    mults = np.concatenate(pair_mult)
    n_pairs = src_idx.size

    stacked = T.stack_first([f for f, _, _, _ in sources])
    accum = Tensor(np.zeros((t, m * params.value_dim)))
    if n_pairs:
        refs_all = np.stack([np.asarray(r) for _, r, _, _ in sources])  # [S,T,2]
        pair_ref = refs_all[src_idx, qry_idx]  # [P,2]
        attended = T.deform_attend(stacked, src_idx, pair_ref, off, attn, qry_idx)
        if np.any(mults != 1.0):
            attended = T.mul(attended, Tensor(mults[:, None, None]))
        accum = _scatter_rows(T.reshape(attended, (n_pairs, m * params.value_dim)), qry_idx, t)
    per_head = []
    flat = T.reshape(accum, (t * m, params.value_dim))
    for h in range(m):
        rows = T.take_rows(flat, np.arange(t) * m + h)
        per_head.append(T.matmul(rows, params.value_w[h].tensor))
    mixed = T.concat_lastaxis(per_head)
    return T.matmul(mixed, params.out_w.tensor)


def _scatter_rows(rows: Tensor, idx: np.ndarray, n_out: int) -> Tensor:
    """Sum rows [P,C] into an output [n_out,C] at integer indices."""
    data = np.zeros((n_out, rows.shape[1]))
    np.add.at(data, idx, rows.data)

    def vjp(g):
        T._accum(rows, g[idx])

    return T._make(data, "scatter_rows", (rows,), vjp)


def encoder_layer(tokens: Tensor, grid_hw, self_refs: np.ndarray,
                  sources: Sequence, params: EncoderLayerParams,
                  normalize_by_hits: bool = False, return_parts: bool = False):
    """One encoder layer over (H*W) BEV tokens.

    tokens: [T,N]; grid_hw: (H, W) with T = H*W; self_refs: [T,2] of each
    token's own cell (row, col); sources: cross-attention inputs as for
    deform_attn_multi. Post-norm residual order: self-attn, cross-attn, ffn.
    """
    h, w = grid_hw
    t, n = tokens.shape
    if t != h * w:
        raise ContractError(f"encoder_layer: {t} tokens != grid {h}x{w}")
    if n != params.channels:
        raise ShapeError(f"encoder_layer: token width {n} != layer width {params.channels}")

    token_map = T.reshape(tokens, (h, w, n))
    sa = deform_attn_multi(tokens, [(token_map, self_refs, None)], params.self_attn)
    g1, b1 = params.norms[0]
    x1 = T.layer_normalize(T.add(tokens, sa), g1.tensor, b1.tensor)

    ca = deform_attn_multi(x1, sources, params.cross_attn)
    if normalize_by_hits:
        hits = np.zeros(t)
        for src in sources:
            vis = src[2]
            mult = src[3] if len(src) == 4 else 1
            hits += (np.asarray(vis, dtype=np.float64) if vis is not None else 1.0) * mult
        ca = T.mul(ca, Tensor(1.0 / np.maximum(hits, 1.0)[:, None]))
    g2, b2 = params.norms[1]
    x2 = T.layer_normalize(T.add(x1, ca), g2.tensor, b2.tensor)

    ff = T.linear(T.relu(T.linear(x2, params.ffn_w1.tensor, params.ffn_b1.tensor)),
                  params.ffn_w2.tensor, params.ffn_b2.tensor)
    g3, b3 = params.norms[2]
    out = T.layer_normalize(T.add(x2, ff), g3.tensor, b3.tensor)
    if return_parts:
        return out, {"self": sa, "cross": ca, "after_self": x1, "after_cross": x2}
    return out
