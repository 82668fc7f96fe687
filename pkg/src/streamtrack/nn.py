"""Neural building blocks on top of the numerics engine.

Conventions used by every block here:

* pre-layer-norm residual wiring: ``x + sublayer(norm(x))``;
* attention masks are boolean, True = attend; a query whose mask row is
  entirely False passes through a residual connection unchanged;
* all weights are float64 tensors registered on the owning module, so
  ``named_parameters`` can serialize or count them.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import Tensor, ops


class Module:
    """Base class with automatic parameter/child registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self.items = list(modules)
        for i, m in enumerate(self.items):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def __len__(self):
        return len(self.items)


def _xavier(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-a, a, size=(d_in, d_out))


class Linear(Module):
    """Affine map over the last axis, with an optional low-rank adapter.

    When an adapter (a, b) is attached, the effective weight is
    W + a @ b with the base W typically frozen; ``b`` starts at zero so
    attaching is output-preserving.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        w = np.zeros((d_in, d_out)) if zero_init else _xavier(rng, d_in, d_out)
        self.weight = Tensor.param(w)
        self.bias = Tensor.param(np.zeros(d_out)) if bias else None
        self.adapter = None

    def attach_adapter(self, a: Tensor, b: Tensor) -> None:
        if a.shape != (self.d_in, a.shape[1]) or b.shape != (a.shape[1], self.d_out):
            raise ValueError("adapter shapes do not match this layer")
        self.adapter = (a, b)

    def forward(self, x):
        y = ops.linear(x, self.weight, self.bias)
        if self.adapter is not None:
            a, b = self.adapter
            y = ops.add(y, ops.matmul(ops.matmul(x, a), b))
        return y

    __call__ = forward


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, pad: int = 0):
        super().__init__()
        fan_in = kernel * kernel * c_in
        fan_out = kernel * kernel * c_out
        a = math.sqrt(6.0 / (fan_in + fan_out))
        self.weight = Tensor.param(rng.uniform(-a, a, size=(kernel, kernel, c_in, c_out)))
        self.bias = Tensor.param(np.zeros(c_out))
        self.stride, self.pad = stride, pad

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gamma = Tensor.param(np.ones(d))
        self.beta = Tensor.param(np.zeros(d))

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)

    __call__ = forward


class MLP(Module):
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims, rng: np.random.Generator, zero_init_last: bool = False):
        super().__init__()
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            layers.append(Linear(a, b, rng, zero_init=zero_init_last and last))
        self.layers = ModuleList(layers)

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.relu(x)
        return x

    __call__ = forward


class FeedForward(Module):
    def __init__(self, d: int, rng: np.random.Generator, mult: int = 4):
        super().__init__()
        self.up = Linear(d, mult * d, rng)
        self.down = Linear(mult * d, d, rng)

    def forward(self, x):
        return self.down(ops.relu(self.up(x)))

    __call__ = forward


def _valid_rows(mask, n: int) -> np.ndarray | None:
    """Per-query 0/1 column vector marking queries with >=1 valid position."""
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.all():
        return None
    any_valid = m.any(axis=-1) if m.ndim > 1 else np.full(n, m.any())
    if int(any_valid.sum()) < any_valid.size:
        ops.diagnostics["attention_fully_masked_queries"] += int(
            any_valid.size - any_valid.sum())
    return any_valid.astype(np.float64)[:, None]


class MultiHeadAttention(Module):
    """Scaled dot-product attention over a shared or per-query key set.

    ``forward`` takes keys/values of shape [P, D] shared by all N queries;
    ``forward_each`` takes per-query sets of shape [N, K, D] (used for
    memory reads and candidate fusion, where every tracked point owns its
    own token list). Fully-masked queries return a zero update so the
    caller's residual leaves them untouched.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d, self.heads, self.dh = d, heads, d // heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def _split(self, x, n):
        # [n, D] -> [heads, n, dh]
        return ops.moveaxis(ops.reshape(x, (n, self.heads, self.dh)), 0, 1)

    def forward(self, q, kv, mask=None):
        n = q.shape[0]
        p = kv.shape[0]
        qh = self._split(self.q_proj(q), n)
        kh = self._split(self.k_proj(kv), p)
        vh = self._split(self.v_proj(kv), p)
        scores = ops.scale(ops.matmul(qh, ops.moveaxis(kh, 1, 2)),
                           1.0 / math.sqrt(self.dh))
        if mask is None:
            attn = ops.softmax(scores, axis=-1)
        else:
            attn = ops.masked_softmax(scores, np.asarray(mask, dtype=bool), axis=-1)
        mixed = ops.reshape(ops.moveaxis(ops.matmul(attn, vh), 0, 1), (n, self.d))
        out = self.out_proj(mixed)
        valid = _valid_rows(mask, n)
        if valid is not None:
            out = ops.mul(out, valid)
        return out

    def forward_each(self, q, kv, mask=None):
        n, k = kv.shape[0], kv.shape[1]
        qh = ops.reshape(self.q_proj(q), (n, self.heads, 1, self.dh))
        kh = ops.moveaxis(ops.reshape(self.k_proj(kv), (n, k, self.heads, self.dh)), 1, 3)
        vh = ops.moveaxis(ops.reshape(self.v_proj(kv), (n, k, self.heads, self.dh)), 1, 2)
        scores = ops.scale(ops.matmul(qh, kh), 1.0 / math.sqrt(self.dh))
        if mask is None:
            attn = ops.softmax(scores, axis=-1)
        else:
            m = np.asarray(mask, dtype=bool).reshape(n, 1, 1, k)
            attn = ops.masked_softmax(scores, m, axis=-1)
        mixed = ops.reshape(ops.matmul(attn, vh), (n, self.d))
        out = self.out_proj(mixed)
        valid = _valid_rows(mask, n)
        if valid is not None:
            out = ops.mul(out, valid)
        return out

    __call__ = forward


class SelfAttention(Module):
    """Self-attention over token lists, shared [T, D] or per-query [N, K, D]."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.mha = MultiHeadAttention(d, heads, rng)

    def forward(self, x, mask=None):
        if x.data.ndim == 2:
            return self.mha.forward(x, x, mask=mask)
        n, k, d = x.shape
        flatq = ops.reshape(x, (n * k, d))
        mha = self.mha
        qh = ops.moveaxis(ops.reshape(mha.q_proj(flatq), (n, k, mha.heads, mha.dh)), 1, 2)
        kh = ops.moveaxis(ops.reshape(mha.k_proj(flatq), (n, k, mha.heads, mha.dh)), 1, 3)
        vh = ops.moveaxis(ops.reshape(mha.v_proj(flatq), (n, k, mha.heads, mha.dh)), 1, 2)
        scores = ops.scale(ops.matmul(qh, kh), 1.0 / math.sqrt(mha.dh))
        if mask is None:
            attn = ops.softmax(scores, axis=-1)
        else:
            m = np.asarray(mask, dtype=bool).reshape(n, 1, 1, k)
            attn = ops.masked_softmax(scores, m, axis=-1)
        mixed = ops.reshape(ops.moveaxis(ops.matmul(attn, vh), 1, 2), (n * k, d))
        out = ops.reshape(mha.out_proj(mixed), (n, k, d))
        if mask is not None:
            keep = np.asarray(mask, dtype=np.float64)[..., None]
            out = ops.mul(out, keep)
        return out

    __call__ = forward


class TransformerDecoderBlock(Module):
    """Residual block: cross-attention, then feed-forward, then self-attention."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ffn_mult: int = 4):
        super().__init__()
        self.norm_cross = LayerNorm(d)
        self.cross = MultiHeadAttention(d, heads, rng)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, rng, mult=ffn_mult)
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng)

    def forward(self, q, kv, kv_mask=None):
        if kv.data.ndim == 3:
            q = ops.add(q, self.cross.forward_each(self.norm_cross(q), kv, mask=kv_mask))
        else:
            q = ops.add(q, self.cross.forward(self.norm_cross(q), kv, mask=kv_mask))
        q = ops.add(q, self.ffn(self.norm_ffn(q)))
        normed = self.norm_self(q)
        q = ops.add(q, self.self_attn.forward(normed, normed))
        return q

    __call__ = forward


class CrossAttentionLayer(Module):
    """Residual cross-attention without feed-forward or self-attention.

    Reads per-query token lists; a query with no valid tokens is returned
    bit-identically (the empty-memory no-op rule).
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)

    def forward(self, q, kv, kv_mask=None):
        if kv_mask is not None and not np.asarray(kv_mask, dtype=bool).any():
            return q
        if kv.data.ndim == 3:
            return ops.add(q, self.attn.forward_each(self.norm(q), kv, mask=kv_mask))
        return ops.add(q, self.attn.forward(self.norm(q), kv, mask=kv_mask))

    __call__ = forward


class TransformerEncoderLayer(Module):
    """Residual self-attention + feed-forward over a token list."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ffn_mult: int = 4):
        super().__init__()
        self.norm_attn = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, rng, mult=ffn_mult)

    def forward(self, x, mask=None):
        x = ops.add(x, self.attn(self.norm_attn(x), mask=mask))
        x = ops.add(x, self.ffn(self.norm_ffn(x)))
        return x

    __call__ = forward


class DeformableAttention(Module):
    """Content-adaptive sparse attention around a per-query reference point.

    Each head predicts ``points`` sampling offsets from the query, samples
    the feature map there bilinearly, and mixes the samples with weights
    softmax-normalized per head. Offset projections start at zero so an
    untrained layer samples exactly at the reference. References and
    offsets live in feature-grid coordinates.
    """

    def __init__(self, d: int, rng: np.random.Generator,
                 heads: int = 4, points: int = 4):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d, self.heads, self.points = d, heads, points
        self.dh = d // heads
        self.offset_proj = Linear(d, heads * points * 2, rng, zero_init=True)
        self.weight_proj = Linear(d, heads * points, rng)
        self.value_weight = Tensor.param(
            np.stack([_xavier(rng, d, self.dh) for _ in range(heads)]))
        self.value_bias = Tensor.param(np.zeros((heads, 1, self.dh)))
        self.out_proj = Linear(d, d, rng)

    def forward(self, q, reference, fmap):
        n = q.shape[0]
        h, pts, dh = self.heads, self.points, self.dh
        ref = reference if isinstance(reference, Tensor) else Tensor(reference)
        offsets = ops.reshape(self.offset_proj(q), (n, h * pts, 2))
        locs = ops.add(offsets, ops.reshape(ref, (n, 1, 2)))
        sampled = ops.bilinear_sample(fmap, ops.reshape(locs, (n * h * pts, 2)))
        # [n*h*pts, D] -> [h, n*pts, D] -> per-head value projection
        sampled = ops.moveaxis(ops.reshape(sampled, (n, h, pts, self.d)), 1, 0)
        vals = ops.add(ops.matmul(ops.reshape(sampled, (h, n * pts, self.d)),
                                  self.value_weight), self.value_bias)
        vals = ops.reshape(vals, (h, n, pts, dh))
        logits = ops.moveaxis(ops.reshape(self.weight_proj(q), (n, h, pts)), 0, 1)
        w = ops.softmax(logits, axis=-1)
        mixed = ops.sum_(ops.mul(vals, ops.reshape(w, (h, n, pts, 1))), axis=2)
        mixed = ops.reshape(ops.moveaxis(mixed, 0, 1), (n, self.d))
        return self.out_proj(mixed)

    __call__ = forward


class DeformableDecoderLayer(Module):
    """Pre-norm residual layer: deformable attention then feed-forward."""

    def __init__(self, d: int, rng: np.random.Generator,
                 heads: int = 4, points: int = 4, ffn_mult: int = 4):
        super().__init__()
        self.norm_attn = LayerNorm(d)
        self.attn = DeformableAttention(d, rng, heads=heads, points=points)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, rng, mult=ffn_mult)

    def forward(self, q, reference, fmap):
        q = ops.add(q, self.attn(self.norm_attn(q), reference, fmap))
        q = ops.add(q, self.ffn(self.norm_ffn(q)))
        return q

    __call__ = forward


class DeformableDecoder(Module):
    """Stack of deformable decoder layers sharing one reference point set."""

    def __init__(self, d: int, n_layers: int, rng: np.random.Generator,
                 heads: int = 4, points: int = 4, ffn_mult: int = 4):
        super().__init__()
        self.layers = ModuleList([
            DeformableDecoderLayer(d, rng, heads=heads, points=points,
                                   ffn_mult=ffn_mult)
            for _ in range(n_layers)])

    def forward(self, q, reference, fmap):
        for layer in self.layers:
            q = layer(q, reference, fmap)
        return q

    __call__ = forward
