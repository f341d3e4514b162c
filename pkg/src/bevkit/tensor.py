"""Reverse-mode autodiff over dense float64 numpy buffers.

The graph is a tape rebuilt on every forward pass: each op wires its output
Tensor to a node holding the parent tensors and a backward closure.
``backward()`` walks the tape in reverse topological order and accumulates
gradients additively, so using a tensor twice doubles its gradient.

Everything is float64 and deterministic. Elementwise ops follow numpy
broadcasting (gradients are summed back over broadcast axes); every other op
demands exact shapes and raises ShapeError otherwise.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class _Node:
    """Graph node: op label, parent tensors, and the vjp closure."""

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op, parents, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """Dense float64 array with an optional autodiff graph node.

    Data is contiguous row-major and treated as immutable once the tensor has
    been consumed by an op; only ``grad`` mutates afterwards. Constants
    (requires_grad=False leaves) never accumulate gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # np.ascontiguousarray would promote 0-d to 1-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        op = self.node.op if self.node is not None else "leaf"
        return f"Tensor(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)


class Parameter:
    """Named trainable tensor. Names are unique, dot-separated paths."""

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=True)

    @property
    def data(self):
        return self.tensor.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op: str, parents: tuple, vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = _Node(op, parents, vjp)
    return out


def _accum(t: Tensor, g: np.ndarray, own: bool = False):
    """Add g into t.grad. own=True promises g is a fresh array the caller will
    not reuse, letting the first accumulation take it without copying."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if own and isinstance(g, np.ndarray) and g.base is None and g.dtype == np.float64:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _accum_slice(t: Tensor, sl, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad[sl] += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from loss.

    Gradients add into any existing ``grad`` buffers (call ``zero_grad``
    between steps). The loss must hold a single scalar.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    # iterative topo sort: creation order is not stored, so DFS from the loss
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            topo.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
    _accum(loss, np.ones_like(loss.data))
    for t in reversed(topo):
        if t.node is not None and t.grad is not None:
            t.node.vjp(t.grad)


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(data, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        _accum(a, _unbroadcast(g * b.data, a.shape), own=True)
        _accum(b, _unbroadcast(g * a.data, b.shape), own=True)

    return _make(data, "mul", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        _accum(a, -g)

    return _make(-a.data, "neg", (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    data = np.where(mask, a.data, 0.0)

    def vjp(g):
        _accum(a, g * mask, own=True)

    return _make(data, "relu", (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    # split positive/negative branches for stability
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    data[~pos] = e / (1.0 + e)

    def vjp(g):
        _accum(a, g * data * (1.0 - data), own=True)

    return _make(data, "sigmoid", (a,), vjp)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def vjp(g):
        _accum(a, g * data, own=True)

    return _make(data, "exp", (a,), vjp)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def vjp(g):
        _accum(a, g / a.data)

    return _make(data, "log", (a,), vjp)


def absval(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def vjp(g):
        _accum(a, g * np.sign(a.data))

    return _make(data, "abs", (a,), vjp)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Elementwise atan2. Gradient at the undefined origin is taken as 0."""
    y, x = _wrap(y), _wrap(x)
    if y.shape != x.shape:
        raise ShapeError(f"atan2: shapes {y.shape} and {x.shape} differ")
    data = np.arctan2(y.data, x.data)
    denom = y.data * y.data + x.data * x.data

    def vjp(g):
        safe = np.where(denom == 0.0, 1.0, denom)
        scale = np.where(denom == 0.0, 0.0, g / safe)
        _accum(y, scale * x.data)
        _accum(x, -scale * y.data)

    return _make(data, "atan2", (y, x), vjp)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    data = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy(), own=True)
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(), own=True)

    return _make(data, "sum", (a,), vjp)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    data = a.data.mean(axis=axis)
    n = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy())

    return _make(data, "mean", (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product [m,k] @ [k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    data = a.data @ b.data

    def vjp(g):
        _accum(a, g @ b.data.T, own=True)
        _accum(b, a.data.T @ g, own=True)

    return _make(data, "matmul", (a, b), vjp)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d: expected 2-D, got {a.shape}")

    def vjp(g):
        _accum(a, np.ascontiguousarray(g.T))

    return _make(a.data.T, "transpose", (a,), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[...,I] @ weight[I,O] + bias[O]."""
    i_in = x.shape[-1] if x.data.ndim else 0
    if weight.data.ndim != 2 or weight.shape[0] != i_in:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    x2 = x.data.reshape(-1, i_in)
    out2 = x2 @ weight.data + bias.data
    data = out2.reshape(*x.shape[:-1], weight.shape[1])

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[1])
        _accum(x, (g2 @ weight.data.T).reshape(x.shape), own=True)
        _accum(weight, x2.T @ g2, own=True)
        _accum(bias, g2.sum(axis=0), own=True)

    return _make(data, "linear", (x, weight, bias), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def vjp(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, "reshape", (a,), vjp)


def concat_lastaxis(parts: Sequence[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead for p in parts):
        raise ShapeError(f"concat_lastaxis: leading shapes differ: {[p.shape for p in parts]}")
    data = np.concatenate([p.data for p in parts], axis=-1)
    sizes = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[..., lo:hi])

    return _make(data, "concat", tuple(parts), vjp)


def split_lastaxis(a: Tensor, sizes: Sequence[int]) -> tuple:
    """Split the last axis into consecutive blocks of the given sizes."""
    if sum(sizes) != a.shape[-1]:
        raise ShapeError(f"split_lastaxis: sizes {sizes} do not cover last axis of {a.shape}")
    outs = []
    lo = 0
    for n in sizes:
        sl = (Ellipsis, slice(lo, lo + n))

        def vjp(g, sl=sl):
            _accum_slice(a, sl, g)

        outs.append(_make(np.ascontiguousarray(a.data[sl]), "split", (a,), vjp))
        lo += n
    return tuple(outs)


def stack_first(parts: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    parts = [_wrap(p) for p in parts]
    if any(p.shape != parts[0].shape for p in parts):
        raise ShapeError(f"stack_first: shapes differ: {[p.shape for p in parts]}")
    data = np.stack([p.data for p in parts], axis=0)

    def vjp(g):
        for i, p in enumerate(parts):
            _accum(p, g[i])

    return _make(data, "stack", tuple(parts), vjp)


def take_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor by integer index (rows may repeat)."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-D, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def vjp(g):
        if a.grad is None and a.requires_grad:
            a.grad = np.zeros_like(a.data)
        if a.requires_grad:
            np.add.at(a.grad, idx, g)

    return _make(data, "take_rows", (a,), vjp)


# ---------------------------------------------------------------------------
# normalization


def softmax_lastaxis(x: Tensor) -> Tensor:
    """Numerically stabilized softmax along the last axis."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_lastaxis: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accum(x, (g - dot) * data, own=True)

    return _make(data, "softmax", (x,), vjp)


def log_softmax_lastaxis(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax_lastaxis: non-finite input")
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def vjp(g):
        _accum(x, g - soft * g.sum(axis=-1, keepdims=True), own=True)

    return _make(data, "log_softmax", (x,), vjp)


def layer_normalize(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then gain*xhat + shift."""
    c = x.shape[-1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"layer_normalize: gain {gain.shape} / shift {shift.shape} must be ({c},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + shift.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead), own=True)
        _accum(shift, g.sum(axis=lead), own=True)
        gx = g * gain.data
        _accum(
            x,
            inv
            * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            ),
            own=True,
        )

    return _make(data, "layer_norm", (x, gain, shift), vjp)


# ---------------------------------------------------------------------------
# sampling and convolution


class _BilinearPlan:
    """Sparse interpolation operator for a fixed set of sample points.

    Row p of the [P, cells] CSR matrix holds the four bilinear corner weights
    of point p (zero where a corner falls outside its map), so sampling is one
    sparse-dense matmul and the three backward products reuse the same index
    structure. This is an order of magnitude faster than fancy-index gathers
    plus np.add.at scatters at the sizes the encoders use.
    """

    __slots__ = ("indices", "indptr", "weights", "dwdr", "dwdc", "n_cells", "p")

    def __init__(self, shape_hw, base, pts: np.ndarray, n_cells: int):
        h, w = shape_hw
        p = pts.shape[0]
        r, c = pts[:, 0], pts[:, 1]
        r0f = np.floor(r)
        c0f = np.floor(c)
        fr = r - r0f
        fc = c - c0f
        r0 = r0f.astype(np.intp)
        c0 = c0f.astype(np.intp)
        idx = np.empty((p, 4), dtype=np.intp)
        wgt = np.empty((p, 4))
        dwr = np.empty((p, 4))
        dwc = np.empty((p, 4))
        for k, (dr, dc) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            ri, ci = r0 + dr, c0 + dc
            inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
            wr = fr if dr else 1.0 - fr
            wc = fc if dc else 1.0 - fc
            sr = 1.0 if dr else -1.0
            sc = 1.0 if dc else -1.0
            idx[:, k] = base + np.clip(ri, 0, h - 1) * w + np.clip(ci, 0, w - 1)
            wgt[:, k] = wr * wc * inside
            dwr[:, k] = sr * wc * inside
            dwc[:, k] = wr * sc * inside
        self.indices = idx.reshape(-1)
        self.indptr = np.arange(0, 4 * p + 4, 4, dtype=np.intp)
        self.weights = wgt.reshape(-1)
        self.dwdr = dwr.reshape(-1)
        self.dwdc = dwc.reshape(-1)
        self.n_cells = n_cells
        self.p = p

    def _matrix(self, data):
        from scipy import sparse

        return sparse.csr_matrix((data, self.indices, self.indptr),
                                 shape=(self.p, self.n_cells))

    def sample(self, flat: np.ndarray) -> np.ndarray:
        return self._matrix(self.weights) @ flat

    def scatter(self, g: np.ndarray) -> np.ndarray:
        return self._matrix(self.weights).T @ g

    def point_grads(self, flat: np.ndarray, g: np.ndarray) -> np.ndarray:
        dr = (self._matrix(self.dwdr) @ flat * g).sum(axis=1)
        dc = (self._matrix(self.dwdc) @ flat * g).sum(axis=1)
        return np.stack([dr, dc], axis=1)


def _bilinear_common(feat: Tensor, pts: Tensor, shape_hw, base, op: str) -> Tensor:
    n_cells = feat.data.size // feat.shape[-1]
    ch = feat.shape[-1]
    flat = feat.data.reshape(n_cells, ch)
    plan = _BilinearPlan(shape_hw, base, pts.data, n_cells)
    out = plan.sample(flat) if plan.p else np.zeros((0, ch))

    def vjp(g):
        if feat.requires_grad:
            _accum(feat, plan.scatter(g).reshape(feat.shape), own=True)
        if pts.requires_grad:
            _accum(pts, plan.point_grads(flat, g), own=True)

    return _make(out, op, (feat, pts), vjp)


def bilinear_sample(feat: Tensor, pts: Tensor) -> Tensor:
    """Sample feat[H,W,C] at continuous (row, col) points [P,2], zero padding.

    Corner cells outside [0,H-1]x[0,W-1] read as zero, so the result decays
    linearly to zero within one cell of the border and is zero beyond.
    """
    pts = _wrap(pts)
    if feat.data.ndim != 3:
        raise ShapeError(f"bilinear_sample: feature map must be [H,W,C], got {feat.shape}")
    if pts.data.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: points must be [P,2], got {pts.shape}")
    h, w, _ = feat.shape
    return _bilinear_common(feat, pts, (h, w), 0, "bilinear")


def bilinear_sample_stacked(feats: Tensor, map_idx, pts: Tensor) -> Tensor:
    """Sample a stack feats[B,H,W,C] at points [P,2], map_idx[P] selecting the map.

    Same padding rule as bilinear_sample; used to batch multi-view sampling.
    """
    pts = _wrap(pts)
    if feats.data.ndim != 4:
        raise ShapeError(f"bilinear_sample_stacked: expected [B,H,W,C], got {feats.shape}")
    if pts.data.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"bilinear_sample_stacked: points must be [P,2], got {pts.shape}")
    b, h, w, _ = feats.shape
    base = np.asarray(map_idx, dtype=np.intp) * (h * w)
    return _bilinear_common(feats, pts, (h, w), base, "bilinear_stacked")


def deform_attend(feats: Tensor, map_idx, base_pts: np.ndarray, offsets: Tensor,
                  attn: Tensor, qry_idx) -> Tensor:
    """Fused deformable-attention gather.

    For each of P (source, query) pairs with base point base_pts[p] on map
    map_idx[p], sample feats at base + offsets[qry_idx[p], m, k], combine the
    K points of each head with attn[qry_idx[p], m, k], and return [P, M, C].
    One sparse matmul evaluates the whole thing; equal to composing
    bilinear_sample_stacked / mul / sum but without the [P,M,K,C]
    intermediates.
    """
    if feats.data.ndim != 4:
        raise ShapeError(f"deform_attend: expected [B,H,W,C], got {feats.shape}")
    b, h, w, ch = feats.shape
    t, m, k, _ = offsets.shape
    qry_idx = np.asarray(qry_idx, dtype=np.intp)
    p = qry_idx.size
    if p == 0:
        def vjp_empty(g):
            pass
        return _make(np.zeros((0, m, ch)), "deform_attend", (feats, offsets, attn), vjp_empty)
    offp = offsets.data[qry_idx]  # [P,M,K,2]
    attnp = attn.data[qry_idx]  # [P,M,K]
    pts = (base_pts[:, None, None, :] + offp).reshape(p * m * k, 2)
    cell_base = (np.asarray(map_idx, dtype=np.intp) * (h * w)).repeat(m * k)
    plan = _BilinearPlan((h, w), cell_base, pts, b * h * w)
    flat = feats.data.reshape(b * h * w, ch)

    from scipy import sparse

    data_attn = (plan.weights.reshape(p * m * k, 4) * attnp.reshape(p * m * k, 1)).reshape(-1)
    indptr_pm = np.arange(0, 4 * k * (p * m) + 1, 4 * k, dtype=np.intp)
    s_attn = sparse.csr_matrix((data_attn, plan.indices, indptr_pm), shape=(p * m, b * h * w))
    out = (s_attn @ flat).reshape(p, m, ch)

    def vjp(g):
        g2 = g.reshape(p * m, ch)
        if feats.requires_grad:
            _accum(feats, (s_attn.T @ g2).reshape(feats.shape), own=True)
        need_off = offsets.requires_grad
        need_attn = attn.requires_grad
        if not (need_off or need_attn):
            return
        g3 = g2.reshape(p * m, 1, ch)
        if need_attn:
            samples = plan.sample(flat).reshape(p * m, k, ch)
            dattn = np.einsum("xkc,xoc->xk", samples, g3).reshape(p, m, k)
            if attn.grad is None:
                attn.grad = np.zeros_like(attn.data)
            np.add.at(attn.grad, qry_idx, dattn)
        if need_off:
            sr = plan._matrix(plan.dwdr) @ flat
            sc = plan._matrix(plan.dwdc) @ flat
            dr = np.einsum("xkc,xoc->xk", sr.reshape(p * m, k, ch), g3).reshape(p, m, k)
            dc = np.einsum("xkc,xoc->xk", sc.reshape(p * m, k, ch), g3).reshape(p, m, k)
            dpts = np.stack([dr * attnp, dc * attnp], axis=-1)
            if offsets.grad is None:
                offsets.grad = np.zeros_like(offsets.data)
            np.add.at(offsets.grad, qry_idx, dpts)

    return _make(out, "deform_attend", (feats, offsets, attn), vjp)


def conv2d_3x3(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-size 3x3 convolution with zero padding: x[H,W,Ci] -> [H,W,Co]."""
    if x.data.ndim != 3 or kernel.data.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d_3x3: x {x.shape}, kernel {kernel.shape}")
    h, w, ci = x.shape
    if kernel.shape[2] != ci:
        raise ShapeError(f"conv2d_3x3: input channels {ci} != kernel channels {kernel.shape[2]}")
    co = kernel.shape[3]
    if bias.shape != (co,):
        raise ShapeError(f"conv2d_3x3: bias {bias.shape} != ({co},)")
    xp = np.zeros((h + 2, w + 2, ci))
    xp[1:-1, 1:-1] = x.data
    out2 = np.tile(bias.data, (h * w, 1))
    slices = []
    for di in range(3):
        for dj in range(3):
            sl = xp[di : di + h, dj : dj + w].reshape(h * w, ci)
            slices.append(sl)
            out2 += sl @ kernel.data[di, dj]

    def vjp(g):
        g2 = g.reshape(h * w, co)
        if kernel.requires_grad:
            if kernel.grad is None:
                kernel.grad = np.zeros_like(kernel.data)
            for k, (di, dj) in enumerate((i, j) for i in range(3) for j in range(3)):
                kernel.grad[di, dj] += slices[k].T @ g2
        _accum(bias, g2.sum(axis=0))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k, (di, dj) in enumerate((i, j) for i in range(3) for j in range(3)):
                gxp[di : di + h, dj : dj + w] += (g2 @ kernel.data[di, dj].T).reshape(h, w, ci)
            _accum(x, gxp[1:-1, 1:-1])

    return _make(out2.reshape(h, w, co), "conv3x3", (x, kernel, bias), vjp)


def avgpool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; H and W must be even."""
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x2: H,W must be even, got {x.shape}")
    data = x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def vjp(g):
        gx = np.broadcast_to(g[:, None, :, None, :] * 0.25, (h // 2, 2, w // 2, 2, c))
        _accum(x, gx.reshape(h, w, c))

    return _make(data, "avgpool", (x,), vjp)


# convenience aliases matching common naming elsewhere in the package
sum_all = tsum
mean_all = tmean
