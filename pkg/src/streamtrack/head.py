"""Correspondence heads: patch classification, re-ranking, offset, visibility.

Locating a point in frame t is cast as a P-way classification over the
feature-grid cells. The decoded query is first scored against every cell
of the multi-scale matching pyramid (cosine similarity, learned scale
mixture, temperature softmax); the query is then refined against the
top-k candidate patches and re-scored; finally a deformable offset head
adds a sub-patch correction bounded to [-S, S] and a visibility head
classifies occlusion at the predicted location.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .encoder import patch_centers_px, to_grid
from .numerics import Tensor, ops


class SimilarityHead(nn.Module):
    """Multi-scale cosine scoring with softmax-normalized scale mixture.

    Coarse maps are bilinearly upsampled to the base grid before mixing;
    the mixed map is divided by the temperature and spatially
    softmax-normalized, so each query's row is a distribution over cells.
    """

    def __init__(self, levels: int, temperature: float):
        super().__init__()
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.temperature = temperature
        self.coeffs = Tensor.param(np.zeros(levels))

    def forward(self, q, pyramid):
        g0 = pyramid[0].shape[0]
        base_cells = to_grid(patch_centers_px(np.arange(g0 * g0), g0, 1), 1)
        weights = ops.softmax(self.coeffs)
        mixed = None
        for level, hmap in enumerate(pyramid):
            gl = hmap.shape[0]
            cells = ops.reshape(hmap, (gl * gl, hmap.shape[2]))
            sims = ops.cosine_rows(q, cells)
            if gl != g0:
                # upsample by sampling the level-l map at base-cell centers;
                # border half-cells land outside the coarse grid, clip them
                smap = ops.moveaxis(ops.reshape(sims, (-1, gl, gl)), 0, 2)
                pts = np.clip((base_cells + 0.5) * (gl / g0) - 0.5, 0.0, gl - 1.0)
                sims = ops.moveaxis(ops.bilinear_sample(smap, pts), 0, 1)
            term = ops.mul(sims, ops.narrow(weights, 0, level, 1))
            mixed = term if mixed is None else ops.add(mixed, term)
        return ops.softmax(ops.scale(mixed, 1.0 / self.temperature), axis=-1)

    __call__ = forward


def top_k_cells(probs: np.ndarray, k: int):
    """Indices of the k most probable cells per row, descending.

    Ties resolve to the lowest flat index (stable sort on the negated row).
    """
    if k > probs.shape[1]:
        raise ValueError(f"k={k} exceeds {probs.shape[1]} cells")
    return np.argsort(-probs, axis=1, kind="stable")[:, :k]


class RerankHead(nn.Module):
    """Refines the decoded query against its top-k candidate patches.

    Each candidate is retrieved with deformable attention at its patch
    center, scored for uncertainty, and fused into the query by one
    transformer decoder block (candidates as keys/values).
    """

    def __init__(self, d: int, k: int, rng: np.random.Generator,
                 heads: int = 4, points: int = 4, ffn_mult: int = 4):
        super().__init__()
        self.k = k
        self.retrieve = nn.DeformableAttention(d, rng, heads=heads, points=points)
        self.fuse = nn.TransformerDecoderBlock(d, heads, rng, ffn_mult=ffn_mult)
        self.unc_top = nn.Linear(d, 1, rng)

    def forward(self, q_dec, probs_dec: np.ndarray, hmap, stride: int):
        n, d = q_dec.shape
        k = self.k
        grid = hmap.shape[0]
        top_idx = top_k_cells(probs_dec, k)
        centers_px = patch_centers_px(top_idx.reshape(-1), grid, stride)
        refs = to_grid(centers_px, stride)

        q_rep = ops.reshape(
            ops.moveaxis(ops.stack([q_dec] * k, axis=0), 0, 1), (n * k, d))
        cand = ops.reshape(self.retrieve(q_rep, refs, hmap), (n, k, d))
        u_top = ops.reshape(ops.sigmoid(self.unc_top(cand)), (n, k))
        q_t = self.fuse(q_dec, cand)
        return q_t, u_top, top_idx, centers_px.reshape(n, k, 2)

    __call__ = forward


class OffsetHead(nn.Module):
    """Sub-patch correction around the selected patch center, in [-S, S]."""

    def __init__(self, d: int, rng: np.random.Generator, layers: int = 3,
                 heads: int = 4, points: int = 4, ffn_mult: int = 4):
        super().__init__()
        self.dec = nn.DeformableDecoder(d, layers, rng, heads=heads,
                                        points=points, ffn_mult=ffn_mult)
        self.out = nn.Linear(d, 2, rng, zero_init=True)

    def forward(self, q_t, hmap, patch_centers: np.ndarray, stride: int):
        refs = to_grid(patch_centers, stride)
        x = self.dec(q_t, refs, hmap)
        return ops.scale(ops.tanh(self.out(x)), float(stride))

    __call__ = forward


class VisibilityHead(nn.Module):
    """Visibility and uncertainty probabilities at the predicted point."""

    def __init__(self, d: int, rng: np.random.Generator, heads: int = 4,
                 points: int = 4, ffn_mult: int = 4):
        super().__init__()
        self.dec = nn.DeformableDecoderLayer(d, rng, heads=heads, points=points,
                                             ffn_mult=ffn_mult)
        self.out = nn.Linear(d, 2, rng)

    def forward(self, q_t, hmap, p_hat_px, stride: int):
        refs = ops.add(ops.scale(p_hat_px, 1.0 / stride), -0.5)
        x = self.dec(q_t, refs, hmap)
        probs = ops.sigmoid(self.out(x))
        vis = ops.reshape(ops.narrow(probs, 1, 0, 1), (-1,))
        unc = ops.reshape(ops.narrow(probs, 1, 1, 1), (-1,))
        return vis, unc

    __call__ = forward
