"""The online tracker: per-frame decoding pipeline and session state.

Each frame is processed strictly in order using only data from frames
seen so far. The pipeline per frame:

1. encode the image;
2. refresh every active query's initial embedding against its spatial
   memory;
3. decode the queries: one cross-attention read of the context memory,
   then three decoder blocks over the frame's feature tokens;
4. classify the patch (multi-scale similarity), re-rank against the
   top-k candidates, re-classify;
5. predict the sub-patch offset and visibility;
6. write both memories (once per active query, after prediction).

``TrackerModel`` is stateless given its weights; all per-video state
(memory buffers, initial query embeddings, frame cursor) lives in an
``OnlineSession``, so independent videos can run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .encoder import (Encoder, EncoderConfig, init_queries, patch_centers_px,
                      to_grid)
from .head import OffsetHead, RerankHead, SimilarityHead, VisibilityHead
from .memory import (MemoryBuffer, QueryUpdater, SpatialWriter, gamma_window)
from .numerics import Tensor, ops


@dataclass
class TrackerConfig:
    image_size: int = 64
    stride: int = 4
    width: int = 64
    heads: int = 4
    points: int = 4
    ffn_mult: int = 4
    decoder_blocks: int = 3
    res_blocks: int = 2
    encoder_attn_layers: int = 2
    top_k: int = 3
    temperature: float = 0.05
    memory_size: int = 12
    vis_threshold: float = 0.5
    use_spatial_memory: bool = True
    use_context_memory: bool = True
    use_offset_head: bool = True
    seed: int = 0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(image_size=self.image_size, stride=self.stride,
                             width=self.width, res_blocks=self.res_blocks,
                             attn_layers=self.encoder_attn_layers,
                             attn_heads=self.heads)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prediction:
    """Per-frame outputs for the active queries (one row per active query)."""

    t: int
    active: np.ndarray            # global query indices
    patch_centers: np.ndarray     # [A, 2] px, from the re-ranked map
    top_centers: np.ndarray       # [A, k, 2] px, candidates from the decoded map
    offsets: Tensor               # [A, 2] px, each component in [-S, S]
    points: Tensor                # [A, 2] px, patch center + offset
    visibility: Tensor            # [A] probabilities
    uncertainty: Tensor           # [A] probabilities
    unc_top: Tensor               # [A, k] probabilities
    probs_dec: Tensor             # [A, P] decoded-query cell distribution
    probs_final: Tensor           # [A, P] re-ranked cell distribution
    q_init_updated: Tensor        # [A, D] memory-refreshed initial queries
    features: object = None      # FrameFeatures of this frame

    @property
    def n_active(self) -> int:
        return int(self.active.size)

    def points_np(self) -> np.ndarray:
        return self.points.numpy() if self.n_active else np.zeros((0, 2))

    def visible_np(self, threshold: float) -> np.ndarray:
        if not self.n_active:
            return np.zeros(0, dtype=bool)
        return self.visibility.numpy() > threshold


def _empty_prediction(t: int) -> Prediction:
    z = Tensor(np.zeros((0,)))
    z2 = Tensor(np.zeros((0, 2)))
    return Prediction(t=t, active=np.zeros(0, dtype=np.intp),
                      patch_centers=np.zeros((0, 2)),
                      top_centers=np.zeros((0, 0, 2)), offsets=z2, points=z2,
                      visibility=z, uncertainty=z, unc_top=Tensor(np.zeros((0, 0))),
                      probs_dec=Tensor(np.zeros((0, 0))),
                      probs_final=Tensor(np.zeros((0, 0))), q_init_updated=z2)


class TrackerModel(nn.Module):
    def __init__(self, config: TrackerConfig | None = None):
        super().__init__()
        cfg = config or TrackerConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.width
        enc_cfg = cfg.encoder_config()

        self.encoder = Encoder(enc_cfg, rng)
        self.query_updater = QueryUpdater(d, rng, heads=cfg.heads,
                                          ffn_mult=cfg.ffn_mult)
        self.context_read = nn.CrossAttentionLayer(d, cfg.heads, rng)
        self.context_read.attn.out_proj.weight.data[:] = 0.0
        self.blocks = nn.ModuleList([
            nn.TransformerDecoderBlock(d, cfg.heads, rng, ffn_mult=cfg.ffn_mult)
            for _ in range(cfg.decoder_blocks)])
        self.similarity = SimilarityHead(enc_cfg.levels, cfg.temperature)
        self.rerank = RerankHead(d, cfg.top_k, rng, heads=cfg.heads,
                                 points=cfg.points, ffn_mult=cfg.ffn_mult)
        self.offset_head = OffsetHead(d, rng, heads=cfg.heads, points=cfg.points,
                                      ffn_mult=cfg.ffn_mult)
        self.visibility_head = VisibilityHead(d, rng, heads=cfg.heads,
                                              points=cfg.points,
                                              ffn_mult=cfg.ffn_mult)
        self.spatial_writer = SpatialWriter(d, rng, heads=cfg.heads,
                                            points=cfg.points,
                                            ffn_mult=cfg.ffn_mult)
        self.gamma_mem_s = Tensor.param(rng.normal(size=(cfg.memory_size, d)) * 0.02)
        self.gamma_mem_c = Tensor.param(rng.normal(size=(cfg.memory_size, d)) * 0.02)
        self.memory_size = cfg.memory_size
        self.trained_memory_size = cfg.memory_size
        self.training = False

    # -- memory capacity -------------------------------------------------------

    def extend_memory(self, k_new: int) -> None:
        """Inference-time capacity change via temporal-embedding interpolation."""
        if self.training:
            raise RuntimeError("memory extension is inference-only")
        if k_new < self.trained_memory_size:
            raise ValueError(
                f"extended size {k_new} below trained size {self.trained_memory_size}")
        self.gamma_mem_s = Tensor.param(
            ops.interp_rows_linear(self.gamma_mem_s, k_new).numpy())
        self.gamma_mem_c = Tensor.param(
            ops.interp_rows_linear(self.gamma_mem_c, k_new).numpy())
        self.memory_size = k_new

    # -- per-frame pipeline ----------------------------------------------------

    def decode_frame(self, feats, q_init, ms: MemoryBuffer, mc: MemoryBuffer,
                     active: np.ndarray) -> Prediction:
        cfg = self.config
        s = cfg.stride
        g = feats.grid

        if cfg.use_spatial_memory:
            tokens, mask = ms.read(active)
            gamma = (gamma_window(self.gamma_mem_s, ms.n_windows)
                     if tokens is not None else None)
            q0 = self.query_updater(q_init, tokens, mask, gamma)
        else:
            q0 = q_init

        q = q0
        if cfg.use_context_memory:
            ctokens, cmask = mc.read(active)
            if ctokens is not None:
                ctokens = ops.add(ctokens, gamma_window(self.gamma_mem_c, mc.n_windows))
                q = self.context_read(q, ctokens, kv_mask=cmask)

        ftokens = ops.reshape(feats.f, (g * g, cfg.width))
        for block in self.blocks:
            q = block(q, ftokens)

        probs_dec = self.similarity(q, feats.pyramid)
        q_t, u_top, _, top_centers = self.rerank(q, probs_dec.numpy(), feats.h, s)
        probs_final = self.similarity(q_t, feats.pyramid)

        patch_idx = np.argmax(probs_final.numpy(), axis=1)
        centers = patch_centers_px(patch_idx, g, s)
        if cfg.use_offset_head:
            offsets = self.offset_head(q_t, feats.h, centers, s)
        else:
            offsets = Tensor(np.zeros_like(centers))
        points = ops.add(Tensor(centers), offsets)
        vis, unc = self.visibility_head(q_t, feats.h, points, s)

        if cfg.use_spatial_memory:
            ref = ops.add(ops.scale(points, 1.0 / s), -0.5)
            entry = self.spatial_writer(q_init, q_t, feats.f, ref)
            ms.write(entry, active)
        if cfg.use_context_memory:
            mc.write(q_t, active)

        return Prediction(t=feats.t, active=active, patch_centers=centers,
                          top_centers=top_centers, offsets=offsets, points=points,
                          visibility=vis, uncertainty=unc, unc_top=u_top,
                          probs_dec=probs_dec, probs_final=probs_final,
                          q_init_updated=q0, features=feats)


@dataclass
class QuerySpec:
    """Query points: start frame and pixel position, queried-first protocol."""

    starts: np.ndarray            # [N] frame indices
    points: np.ndarray            # [N, 2] pixel coordinates

    def __post_init__(self):
        self.starts = np.asarray(self.starts, dtype=np.intp)
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.starts.ndim != 1 or self.points.shape != (self.starts.size, 2):
            raise ValueError("need starts [N] and points [N, 2]")
        if (self.starts < 0).any():
            raise ValueError("query start frames must be >= 0")

    @property
    def n(self) -> int:
        return self.starts.size


class OnlineSession:
    """Causal tracking state for one video."""

    def __init__(self, model: TrackerModel, queries: QuerySpec):
        self.model = model
        self.queries = queries
        self.ms = MemoryBuffer(model.memory_size)
        self.mc = MemoryBuffer(model.memory_size)
        self.q_init_rows: list = [None] * queries.n
        self.next_t = 0
        self.predictions: list[Prediction] = []

    def frame_step(self, image, t: int | None = None) -> Prediction:
        if t is None:
            t = self.next_t
        if t != self.next_t:
            raise ValueError(f"frame out of order: got t={t}, expected {self.next_t}")
        feats = self.model.encoder(image, t=t)

        starting = np.flatnonzero(self.queries.starts == t)
        if starting.size:
            rows = init_queries(feats, self.queries.points[starting],
                                self.model.config.stride)
            for j, qi in enumerate(starting):
                self.q_init_rows[qi] = ops.narrow(rows, 0, j, 1)

        active = np.flatnonzero(self.queries.starts <= t)
        if active.size == 0:
            pred = _empty_prediction(t)
        else:
            q_init = ops.concat([self.q_init_rows[i] for i in active], axis=0)
            pred = self.model.decode_frame(feats, q_init, self.ms, self.mc, active)

        self.next_t = t + 1
        self.predictions.append(pred)
        return pred

    def run(self, frames) -> list[Prediction]:
        return [self.frame_step(frame) for frame in frames]
