"""Differentiable kernels on :class:`~streamtrack.numerics.tensor.Tensor`.

Each op computes its forward value with numpy and registers a closure
implementing the exact vector-Jacobian product. Shapes are kept as small
as the model needs; only elementwise add/mul support general numpy
broadcasting (gradients are un-broadcast by summation).

All kernels are deterministic: identical inputs produce bit-identical
outputs. A small diagnostics counter records degenerate events (clamped
sample coordinates, zero-norm cosine inputs, fully-masked attention rows)
without altering results.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from .tensor import Tensor, astensor, record

diagnostics = Counter()


def reset_diagnostics() -> None:
    diagnostics.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = astensor(a)
    out = Tensor(-a.data)

    def bwd(g):
        a.accumulate(-g)

    return record(out, (a,), bwd)


def scale(a, c: float) -> Tensor:
    a = astensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def bwd(g):
        a.accumulate(g * c)

    return record(out, (a,), bwd)


def absolute(a) -> Tensor:
    a = astensor(a)
    out = Tensor(np.abs(a.data))
    sign = np.sign(a.data)

    def bwd(g):
        a.accumulate(g * sign)

    return record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = astensor(a)
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        a.accumulate(g.reshape(old))

    return record(out, (a,), bwd)


def moveaxis(a, src, dst) -> Tensor:
    a = astensor(a)
    out = Tensor(np.moveaxis(a.data, src, dst).copy())

    def bwd(g):
        a.accumulate(np.moveaxis(g, dst, src))

    return record(out, (a,), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [astensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p.accumulate(piece)

    return record(out, tuple(parts), bwd)


def stack(parts, axis: int = 0) -> Tensor:
    parts = [astensor(p) for p in parts]
    out = Tensor(np.stack([p.data for p in parts], axis=axis))

    def bwd(g):
        gm = np.moveaxis(g, axis, 0)
        for p, piece in zip(parts, gm):
            if p.requires_grad:
                p.accumulate(piece)

    return record(out, tuple(parts), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` elements along ``axis``."""
    a = astensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(a.data[sl].copy())

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[sl] = g
        a.accumulate(buf)

    return record(out, (a,), bwd)


def gather_rows(a, idx) -> Tensor:
    """Select rows along axis 0; backward scatter-adds."""
    a = astensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx])

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a.accumulate(buf)

    return record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product, including stacked (batched) operands via np.matmul."""
    a, b = astensor(a), astensor(b)
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate(_unbroadcast(gb, b.data.shape))

    return record(out, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    """Fused x @ w + b over the last axis."""
    x, w = astensor(x), astensor(w)
    y = np.matmul(x.data, w.data)
    if b is not None:
        b = astensor(b)
        y = y + b.data
    out = Tensor(y)

    def bwd(g):
        if x.requires_grad:
            x.accumulate(np.matmul(g, w.data.T))
        if w.requires_grad:
            x2 = x.data.reshape(-1, x.data.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            w.accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b.accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, bwd)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = astensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    pos = a.data > 0

    def bwd(g):
        a.accumulate(g * pos)

    return record(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = astensor(a)
    t = np.tanh(a.data)
    out = Tensor(t)

    def bwd(g):
        a.accumulate(g * (1.0 - t * t))

    return record(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = astensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)

    def bwd(g):
        a.accumulate(g * s * (1.0 - s))

    return record(out, (a,), bwd)


def exp(a) -> Tensor:
    a = astensor(a)
    e = np.exp(a.data)
    out = Tensor(e)

    def bwd(g):
        a.accumulate(g * e)

    return record(out, (a,), bwd)


def log(a, eps: float = 0.0) -> Tensor:
    a = astensor(a)
    out = Tensor(np.log(a.data + eps))

    def bwd(g):
        a.accumulate(g / (a.data + eps))

    return record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(ge, a.data.shape).copy())

    return record(out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size if axis is None else (
        np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)]))

    def bwd(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g / n, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(ge / n, a.data.shape).copy())

    return record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# normalization and attention pieces
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift."""
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = Tensor(xh * gamma.data + beta.data)
    d = x.data.shape[-1]

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xh).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xh).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (gy - m1 - xh * m2))

    return record(out, (x, gamma, beta), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along ``axis``; slices sum to 1."""
    x = astensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        x.accumulate(p * (g - dot))

    return record(out, (x,), bwd)


def masked_softmax(x, mask, axis: int = -1) -> Tensor:
    """Softmax over positions where ``mask`` is True.

    Masked positions get probability 0. Slices with no valid position
    produce an all-zero row (counted in diagnostics) so that callers can
    fall back to a pure residual path.
    """
    x = astensor(x)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    neg = np.where(m, x.data, -np.inf)
    mx = neg.max(axis=axis, keepdims=True)
    mx_safe = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(neg - mx_safe) * m
    s = e.sum(axis=axis, keepdims=True)
    empty = s == 0.0
    if empty.any():
        diagnostics["attention_empty_rows"] += int(empty.sum())
    p = e / np.where(empty, 1.0, s)
    out = Tensor(p)

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        x.accumulate(p * (g - dot))

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# sampling and geometry kernels
# ---------------------------------------------------------------------------

def bilinear_sample(fmap, points) -> Tensor:
    """Sample a [H, W, D] map at continuous (x, y) locations.

    ``points`` may be a single (x, y) pair or an [N, 2] tensor/array; the
    result is [D] or [N, D]. The convention places the value of cell
    (row i, col j) at coordinate x = j, y = i. Out-of-range coordinates
    are clamped to the border (and counted in diagnostics). Differentiable
    with respect to both the map and the points.
    """
    fmap = astensor(fmap)
    pts = astensor(points)
    single = pts.data.ndim == 1
    p = np.atleast_2d(pts.data)
    H, W, D = fmap.data.shape

    x = p[:, 0]
    y = p[:, 1]
    bad = ~(np.isfinite(x) & np.isfinite(y))
    if bad.any():
        # poisoned coordinates (e.g. after divergence) must surface as NaN
        # in the output, not crash the integer gather below
        x = np.where(bad, 0.0, x)
        y = np.where(bad, 0.0, y)
    in_x = (x >= 0.0) & (x <= W - 1.0) & ~bad
    in_y = (y >= 0.0) & (y <= H - 1.0) & ~bad
    n_clamped = int((~(in_x & in_y)).sum())
    if n_clamped:
        diagnostics["bilinear_clamped"] += n_clamped
    xc = np.clip(x, 0.0, W - 1.0)
    yc = np.clip(y, 0.0, H - 1.0)
    x0 = np.clip(np.floor(xc), 0, max(W - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(yc), 0, max(H - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (xc - x0)[:, None]
    wy = (yc - y0)[:, None]

    m = fmap.data
    v00 = m[y0, x0]
    v01 = m[y0, x1]
    v10 = m[y1, x0]
    v11 = m[y1, x1]
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    val = top * (1 - wy) + bot * wy
    if bad.any():
        val = np.where(bad[:, None], np.nan, val)
    out = Tensor(val[0] if single else val)

    def bwd(g):
        g2 = np.atleast_2d(g)
        if fmap.requires_grad:
            buf = np.zeros((H * W, D))
            np.add.at(buf, y0 * W + x0, g2 * (1 - wx) * (1 - wy))
            np.add.at(buf, y0 * W + x1, g2 * wx * (1 - wy))
            np.add.at(buf, y1 * W + x0, g2 * (1 - wx) * wy)
            np.add.at(buf, y1 * W + x1, g2 * wx * wy)
            fmap.accumulate(buf.reshape(H, W, D))
        if pts.requires_grad:
            dx = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy)
            dy = (bot - top)
            gp = np.stack([(g2 * dx).sum(axis=1) * in_x,
                           (g2 * dy).sum(axis=1) * in_y], axis=1)
            pts.accumulate(gp[0] if single else gp)

    return record(out, (fmap, pts), bwd)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling on a [H, W, D] map; odd trailing rows/cols drop."""
    x = astensor(x)
    H, W, D = x.data.shape
    Ho, Wo = H // 2, W // 2
    v = x.data[: Ho * 2, : Wo * 2].reshape(Ho, 2, Wo, 2, D)
    out = Tensor(v.mean(axis=(1, 3)))

    def bwd(g):
        buf = np.zeros_like(x.data)
        buf[: Ho * 2, : Wo * 2] = np.repeat(
            np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
        x.accumulate(buf)

    return record(out, (x,), bwd)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution on a [H, W, C] image with a [kh, kw, C, O] kernel."""
    x, w = astensor(x), astensor(w)
    kh, kw, C, O = w.data.shape
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]                  # [Ho, Wo, C, kh, kw]
    Ho, Wo = win.shape[:2]
    cols = np.ascontiguousarray(np.moveaxis(win, 2, 4)).reshape(Ho * Wo, kh * kw * C)
    w2 = w.data.reshape(kh * kw * C, O)
    y = cols @ w2
    if b is not None:
        b = astensor(b)
        y = y + b.data
    out = Tensor(y.reshape(Ho, Wo, O))

    def bwd(g):
        g2 = g.reshape(Ho * Wo, O)
        if w.requires_grad:
            w.accumulate((cols.T @ g2).reshape(kh, kw, C, O))
        if b is not None and b.requires_grad:
            b.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ w2.T).reshape(Ho, Wo, kh, kw, C)
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[ki: ki + stride * Ho: stride,
                        kj: kj + stride * Wo: stride] += dcols[:, :, ki, kj]
            x.accumulate(dxp[pad: dxp.shape[0] - pad, pad: dxp.shape[1] - pad]
                         if pad else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, bwd)


def cosine_rows(a, b, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of every row of a [N, D] against every row of b [P, D].

    Zero-norm rows yield similarity 0 (counted in diagnostics); ``eps``
    keeps the kernel finite and differentiable there.
    """
    a, b = astensor(a), astensor(b)
    an = np.linalg.norm(a.data, axis=1)
    bn = np.linalg.norm(b.data, axis=1)
    degenerate = int((an < eps).sum() + (bn < eps).sum())
    if degenerate:
        diagnostics["cosine_degenerate"] += degenerate
    s = a.data @ b.data.T
    den = an[:, None] * bn[None, :] + eps
    c = s / den
    out = Tensor(c)

    def bwd(g):
        if a.requires_grad:
            ga = (g / den) @ b.data
            coeff = (g * s * bn[None, :] / (den * den)).sum(axis=1)
            ga -= (coeff / np.maximum(an, eps))[:, None] * a.data
            a.accumulate(ga)
        if b.requires_grad:
            gb = (g / den).T @ a.data
            coeff = (g * s * an[:, None] / (den * den)).sum(axis=0)
            gb -= (coeff / np.maximum(bn, eps))[:, None] * b.data
            b.accumulate(gb)

    return record(out, (a, b), bwd)


def cosine_similarity(a, b, eps: float = 1e-12) -> Tensor:
    """Scalar cosine similarity of two vectors (0 for zero-norm inputs)."""
    a, b = astensor(a), astensor(b)
    c = cosine_rows(reshape(a, (1, -1)), reshape(b, (1, -1)), eps=eps)
    return reshape(c, ())


def interp_rows_linear(emb, k_out: int) -> Tensor:
    """Resample the rows of a [K, D] table to [k_out, D] by linear interpolation.

    Output row j is read at fractional index j*(K-1)/(k_out-1); integral
    indices (in particular both endpoints, and every row when k_out == K)
    copy their source row bit-exactly.
    """
    emb = astensor(emb)
    K, D = emb.data.shape
    if K < 2:
        raise ValueError(f"need at least 2 rows to interpolate, got {K}")
    if k_out < 2:
        raise ValueError(f"target row count must be >= 2, got {k_out}")
    pos = np.arange(k_out, dtype=np.float64) * (K - 1) / (k_out - 1)
    lo = np.minimum(pos.astype(np.intp), K - 2)
    w = pos - lo
    exact = w == 0.0
    vals = emb.data[lo] * (1.0 - w[:, None]) + emb.data[lo + 1] * w[:, None]
    vals[exact] = emb.data[lo[exact]]
    out = Tensor(vals)

    def bwd(g):
        buf = np.zeros_like(emb.data)
        np.add.at(buf, lo, g * (1.0 - w[:, None]))
        np.add.at(buf, lo + 1, g * w[:, None])
        emb.accumulate(buf)

    return record(out, (emb,), bwd)


def soft_argmax(probs) -> Tensor:
    """Probability-weighted mean grid coordinate of a [H, W] (or [N, H, W]) map.

    Returns (x, y) per map. Inputs must already be a spatial probability
    distribution: nonnegative, summing to 1 within 1e-6 per map.
    """
    probs = astensor(probs)
    p = probs.data
    single = p.ndim == 2
    if single:
        p3 = p[None]
    else:
        p3 = p
    if np.any(p3 < -1e-12):
        raise ValueError("soft_argmax input must be nonnegative")
    sums = p3.sum(axis=(1, 2))
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("soft_argmax input must sum to 1 (apply a spatial softmax first)")
    H, W = p3.shape[1:]
    gx = np.arange(W, dtype=np.float64)
    gy = np.arange(H, dtype=np.float64)
    xs = (p3.sum(axis=1) * gx).sum(axis=1)
    ys = (p3.sum(axis=2) * gy).sum(axis=1)
    coords = np.stack([xs, ys], axis=1)
    out = Tensor(coords[0] if single else coords)

    def bwd(g):
        g2 = np.atleast_2d(g)
        grid = (g2[:, 0, None, None] * gx[None, None, :]
                + g2[:, 1, None, None] * gy[None, :, None])
        probs.accumulate(grid[0] if single else grid)

    return record(out, (probs,), bwd)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy_rows(probs, targets, eps: float = 1e-12) -> Tensor:
    """-log p[target] per row, for probability rows and integer targets."""
    probs = astensor(probs)
    idx = np.asarray(targets, dtype=np.intp)
    rows = np.arange(probs.data.shape[0])
    picked = probs.data[rows, idx]
    out = Tensor(-np.log(picked + eps))

    def bwd(g):
        buf = np.zeros_like(probs.data)
        buf[rows, idx] = -g / (picked + eps)
        probs.accumulate(buf)

    return record(out, (probs,), bwd)


def binary_cross_entropy(p, y, eps: float = 1e-7) -> Tensor:
    """Elementwise BCE on probabilities, clamped to [eps, 1-eps]."""
    p = astensor(p)
    t = np.asarray(y, dtype=np.float64)
    pc = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data > eps) & (p.data < 1.0 - eps)
    out = Tensor(-(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)))

    def bwd(g):
        p.accumulate(g * inside * (pc - t) / (pc * (1.0 - pc)))

    return record(out, (p,), bwd)


def l1_rows(a, b) -> Tensor:
    """Sum of absolute differences along the last axis."""
    a, b = astensor(a), astensor(b)
    d = a.data - b.data
    sign = np.sign(d)
    out = Tensor(np.abs(d).sum(axis=-1))

    def bwd(g):
        ge = np.expand_dims(g, -1) * sign
        if a.requires_grad:
            a.accumulate(ge)
        if b.requires_grad:
            b.accumulate(-ge)

    return record(out, (a, b), bwd)


def huber(a, b, delta: float = 1.0) -> Tensor:
    """Elementwise Huber loss: quadratic within ``delta``, linear outside."""
    a, b = astensor(a), astensor(b)
    d = a.data - b.data
    small = np.abs(d) <= delta
    out = Tensor(np.where(small, 0.5 * d * d, delta * (np.abs(d) - 0.5 * delta)))

    def bwd(g):
        dd = g * np.where(small, d, delta * np.sign(d))
        if a.requires_grad:
            a.accumulate(dd)
        if b.requires_grad:
            b.accumulate(-dd)

    return record(out, (a, b), bwd)
