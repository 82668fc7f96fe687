"""FIFO memories that condition each tracked point on its own history.

Two buffers exist per tracking session: a spatial memory of locally
decoded features around past predictions (used to refresh the initial
query each frame) and a context memory of past decoded queries (read
inside the query decoder). Entries are stored per written frame as one
batched tensor covering the queries active at that frame; because a
query never deactivates, trimming to the most recent ``capacity`` frames
implements an exact per-query FIFO.

An empty buffer is represented by validity masks, never by zero rows:
a query with no history must pass through the update modules
bit-identically (the first-frame rule).
"""

from __future__ import annotations

import numpy as np

from . import nn
from .numerics import Tensor, ops


class MemoryBuffer:
    """Per-frame windows of [A_w, D] entries, trimmed to ``capacity``."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.windows: list[tuple[Tensor, np.ndarray]] = []
        self.total_writes = 0

    def write(self, entries: Tensor, idx) -> None:
        idx = np.asarray(idx, dtype=np.intp)
        if entries.shape[0] != idx.size:
            raise ValueError("one entry row per query index required")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("query indices must be strictly increasing")
        if self.windows:
            prev = self.windows[-1][1]
            if not np.isin(prev, idx).all():
                raise ValueError("active query set may only grow")
        self.windows.append((entries, idx))
        self.total_writes += idx.size
        if len(self.windows) > self.capacity:
            self.windows.pop(0)

    @property
    def n_windows(self) -> int:
        return len(self.windows)

    def counts(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.intp)
        out = np.zeros(idx.size, dtype=np.intp)
        for _, widx in self.windows:
            out += np.isin(idx, widx)
        return out

    def read(self, idx):
        """Aligned view for the given queries: ([A, W, D] tokens, [A, W] mask).

        Window order is oldest to newest. Queries missing from a window
        (activated later) get a masked-out dummy row. Returns (None, None)
        when the buffer is empty.
        """
        idx = np.asarray(idx, dtype=np.intp)
        if not self.windows:
            return None, None
        slots = []
        mask = np.zeros((idx.size, len(self.windows)), dtype=bool)
        for w, (entries, widx) in enumerate(self.windows):
            pos = np.searchsorted(widx, idx)
            pos_c = np.clip(pos, 0, widx.size - 1)
            present = widx[pos_c] == idx
            mask[:, w] = present
            slots.append(ops.gather_rows(entries, np.where(present, pos_c, 0)))
        tokens = ops.moveaxis(ops.stack(slots, axis=0), 0, 1)
        return tokens, mask

    def entries_for(self, qid: int) -> list[np.ndarray]:
        """This query's stored rows, oldest to newest (test/debug view)."""
        out = []
        for entries, widx in self.windows:
            hit = np.flatnonzero(widx == qid)
            if hit.size:
                out.append(entries.numpy()[hit[0]])
        return out

    def clear(self) -> None:
        self.windows.clear()


class SpatialWriter(nn.Module):
    """Builds a spatial-memory entry from the query pair and local features.

    The initial and current query embeddings are concatenated and projected
    to a single token, which then decodes the feature map around the
    predicted point through a 3-layer deformable decoder (no self-attention).
    """

    def __init__(self, d: int, rng: np.random.Generator,
                 layers: int = 3, heads: int = 4, points: int = 4,
                 ffn_mult: int = 4):
        super().__init__()
        self.cat_proj = nn.Linear(2 * d, d, rng)
        self.dec = nn.DeformableDecoder(d, layers, rng, heads=heads,
                                        points=points, ffn_mult=ffn_mult)

    def forward(self, q_init, q_t, fmap, ref_grid):
        token = self.cat_proj(ops.concat([q_init, q_t], axis=1))
        return self.dec(token, ref_grid, fmap)

    __call__ = forward


class QueryUpdater(nn.Module):
    """Refreshes q_init against the spatial memory (residual update).

    The memory tokens (plus temporal embeddings) pass through one
    transformer encoder layer; the initial query then cross-attends to
    the encoded tokens, runs a feed-forward refinement, and a final
    linear (zero-initialized) produces the update added back to q_init.
    Queries whose memory is empty are returned bit-identically.
    """

    def __init__(self, d: int, rng: np.random.Generator, heads: int = 4,
                 ffn_mult: int = 4):
        super().__init__()
        self.mem_enc = nn.TransformerEncoderLayer(d, heads, rng, ffn_mult=ffn_mult)
        self.norm_cross = nn.LayerNorm(d)
        self.cross = nn.MultiHeadAttention(d, heads, rng)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = nn.FeedForward(d, rng, mult=ffn_mult)
        self.out = nn.Linear(d, d, rng, zero_init=True)

    def forward(self, q_init, tokens, mask, gamma_rows):
        if tokens is None:
            return q_init
        has_mem = mask.any(axis=1)
        if not has_mem.any():
            return q_init
        enc = self.mem_enc(ops.add(tokens, gamma_rows), mask=mask)
        x = ops.add(q_init, self.cross.forward_each(self.norm_cross(q_init), enc, mask=mask))
        x = ops.add(x, self.ffn(self.norm_ffn(x)))
        update = ops.mul(self.out(x), has_mem.astype(np.float64)[:, None])
        return ops.add(q_init, update)

    __call__ = forward


def gamma_window(gamma: Tensor, n_windows: int) -> Tensor:
    """Most recent ``n_windows`` temporal-embedding rows, oldest first.

    Alignment is anchored at the newest slot so a partially filled buffer
    uses the same embeddings those entries will keep as the buffer fills.
    """
    k = gamma.shape[0]
    if n_windows > k:
        raise ValueError("more windows than embedding rows")
    return ops.narrow(gamma, 0, k - n_windows, n_windows)


def similarity_ratio(q_init_row, q_upd_row, fmap, p_gt_px, stride: int) -> float:
    """Ratio of updated-query to initial-query response at the true point.

    Plain dot products against the feature sampled at the ground-truth
    location. Returns NaN when the denominator is within 1e-9 of zero.
    """
    grid_pt = np.asarray(p_gt_px, dtype=np.float64) / stride - 0.5
    feat = ops.bilinear_sample(fmap, grid_pt).numpy()
    q0 = q_init_row.numpy() if isinstance(q_init_row, Tensor) else np.asarray(q_init_row)
    q1 = q_upd_row.numpy() if isinstance(q_upd_row, Tensor) else np.asarray(q_upd_row)
    denom = float(q0 @ feat)
    if abs(denom) < 1e-9:
        return float("nan")
    return float(q1 @ feat) / denom
