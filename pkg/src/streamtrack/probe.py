"""Correlation-map probing of a frozen feature extractor.

Three regimes of increasing capacity over the same per-frame feature
volumes:

* zero-shot: the query feature is compared against every grid cell by
  cosine similarity and the argmax cell is the prediction;
* probing: small convolutional heads decode the correlation map into a
  sub-cell point (spatial softmax + soft-argmax) and an occlusion logit,
  while the extractor stays frozen;
* adaptation: low-rank adapters on the extractor's attention query/value
  projections train jointly with the heads; base weights stay frozen.

Feature volumes may come from the package's own toy encoder or from an
external file; external grids are bilinearly resampled to a configured
nominal resolution so sources are comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .encoder import Encoder
from .numerics import Tape, Tensor, no_grad, ops
from .tracks import TrackRecord, TrackSet
from .train import AdamW, lr_at

NOMINAL_GRID = 32


# ---------------------------------------------------------------------------
# feature volumes
# ---------------------------------------------------------------------------

def _lin_weights(n_in: int, n_out: int):
    """Source indices and blend weights aligning pixel centers."""
    c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    c = np.clip(c, 0.0, n_in - 1.0)
    i0 = np.clip(np.floor(c).astype(np.intp), 0, max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, c - i0


@dataclass
class FeatureVolume:
    """Per-frame feature grids of one video plus the pixel mapping.

    ``feats`` is [T, D, G_y, G_x]; cell (a, b) of a grid covers the patch
    centered at pixel ((b + 0.5) * s, (a + 0.5) * s) with s the pixel
    stride image_size / G.
    """

    feats: np.ndarray
    image_size: int
    source: str = "toy"

    def __post_init__(self):
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim != 4:
            raise ValueError(f"feature volume must be [T, D, H, W], "
                             f"got shape {self.feats.shape}")
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")

    @property
    def n_frames(self) -> int:
        return self.feats.shape[0]

    @property
    def depth(self) -> int:
        return self.feats.shape[1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.feats.shape[2], self.feats.shape[3]

    @property
    def stride(self) -> float:
        return self.image_size / self.feats.shape[3]

    def resample(self, grid: int) -> "FeatureVolume":
        """Bilinear resample every frame/channel to a square grid."""
        if grid <= 0:
            raise ValueError("grid must be positive")
        h, w = self.grid
        if (h, w) == (grid, grid):
            return self
        y0, y1, wy = _lin_weights(h, grid)
        x0, x1, wx = _lin_weights(w, grid)
        f = self.feats
        rows = f[:, :, y0, :] * (1.0 - wy)[None, None, :, None] \
            + f[:, :, y1, :] * wy[None, None, :, None]
        out = rows[:, :, :, x0] * (1.0 - wx) + rows[:, :, :, x1] * wx
        return FeatureVolume(out, self.image_size, self.source)

    def grid_frame(self, t: int) -> np.ndarray:
        """Frame features as [G_y, G_x, D] (sampling layout)."""
        return np.moveaxis(self.feats[t], 0, -1)

    def to_grid(self, points_px) -> np.ndarray:
        """Pixel coordinates -> continuous feature-grid coordinates."""
        return np.asarray(points_px, dtype=np.float64) / self.stride - 0.5

    def to_px(self, points_grid) -> np.ndarray:
        """Feature-grid coordinates -> pixel coordinates."""
        return (np.asarray(points_grid, dtype=np.float64) + 0.5) * self.stride


def encode_video(frames: np.ndarray, encoder: Encoder) -> FeatureVolume:
    """Run the toy encoder over [T, H, W, 3] frames (no gradients kept)."""
    grids = []
    with no_grad():
        for t in range(frames.shape[0]):
            f = encoder(frames[t], t=t).f
            grids.append(np.moveaxis(f.data, -1, 0))
    return FeatureVolume(np.stack(grids), encoder.config.image_size, "toy")


# ---------------------------------------------------------------------------
# correlation maps
# ---------------------------------------------------------------------------

def query_feature(vol: FeatureVolume, t_q: int, p_q) -> np.ndarray:
    """Bilinear sample of frame t_q's features at pixel location p_q."""
    if not 0 <= t_q < vol.n_frames:
        raise ValueError(f"query frame {t_q} outside 0..{vol.n_frames - 1}")
    with no_grad():
        q = ops.bilinear_sample(vol.grid_frame(t_q), vol.to_grid(p_q))
    return q.data


def correlation_map(vol: FeatureVolume, query, t: int) -> np.ndarray:
    """Cosine similarity of the query feature against every cell of frame t.

    Values lie in [-1, 1]; a cell holding the exact query feature scores
    exactly 1 when the arithmetic is exact (e.g. one-hot features). Cells
    with zero-norm features score 0; a zero-norm query is an error.
    """
    t_q, p_q = query
    q = query_feature(vol, t_q, p_q)
    return correlation_from_query(vol, q, t)


def correlation_from_query(vol: FeatureVolume, q: np.ndarray,
                           t: int) -> np.ndarray:
    if not 0 <= t < vol.n_frames:
        raise ValueError(f"frame {t} outside 0..{vol.n_frames - 1}")
    qn = float(np.linalg.norm(q))
    if qn < 1e-12:
        raise ValueError("query feature has zero norm; nothing to correlate")
    f = vol.feats[t]
    num = np.tensordot(q, f, axes=([0], [0]))
    den = qn * np.linalg.norm(f, axis=0)
    c = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.clip(c, -1.0, 1.0)


def correlation_tensor(f_grid: Tensor, q: Tensor) -> Tensor:
    """Differentiable correlation map from [G, G, D] features and a [D] query.

    Training-path counterpart of correlation_from_query (the adaptation
    loop needs gradients through both features and query); zero norms are
    kept finite by the kernel's epsilon rather than raised.
    """
    g_y, g_x, d = f_grid.shape
    tokens = ops.reshape(f_grid, (g_y * g_x, d))
    c = ops.cosine_rows(ops.reshape(q, (1, d)), tokens)
    return ops.reshape(c, (g_y, g_x))


def zero_shot_track(vol: FeatureVolume, query) -> np.ndarray:
    """Argmax-cell tracking: [T, 2] pixel coordinates, one row per frame.

    Ties resolve to the first cell in row-major order. The query frame is
    included (its row is normally the query cell itself).
    """
    t_q, p_q = query
    q = query_feature(vol, t_q, p_q)
    out = np.zeros((vol.n_frames, 2))
    g_y, g_x = vol.grid
    for t in range(vol.n_frames):
        c = correlation_from_query(vol, q, t)
        flat = int(np.argmax(c))
        cell = np.array([flat % g_x, flat // g_x], dtype=np.float64)
        out[t] = vol.to_px(cell)
    return out


# ---------------------------------------------------------------------------
# probing heads
# ---------------------------------------------------------------------------

class ProbeHeads(nn.Module):
    """Decoding heads over a single-channel correlation map.

    A shared 5x5 convolution lifts the map to 32 channels; the point head
    is another 5x5 convolution whose output turns into a probability map
    (spatial softmax) and then a sub-cell coordinate (soft-argmax); the
    occlusion head is a 3x3 convolution, global average pooling, and two
    linear layers with a ReLU between them. 5,550 learnable parameters
    total, independent of the grid size.
    """

    def __init__(self, grid: int, rng: np.random.Generator):
        super().__init__()
        self.grid = grid
        self.enc = nn.Conv2d(1, 32, 5, rng, pad=2)
        self.point = nn.Conv2d(32, 1, 5, rng, pad=2)
        self.occ_conv = nn.Conv2d(32, 12, 3, rng, pad=1)
        self.occ_fc1 = nn.Linear(12, 32, rng)
        self.occ_fc2 = nn.Linear(32, 1, rng)

    def forward(self, c):
        c = ops.astensor(c)
        g = self.grid
        if c.shape != (g, g):
            raise ValueError(f"correlation map is {c.shape}, heads expect "
                             f"({g}, {g})")
        x = ops.relu(self.enc(ops.reshape(c, (g, g, 1))))
        logits = ops.reshape(self.point(x), (g * g,))
        probs = ops.reshape(ops.softmax(logits, axis=-1), (g, g))
        point = ops.soft_argmax(probs)
        h = ops.relu(self.occ_conv(x))
        pooled = ops.mean(ops.reshape(h, (g * g, 12)), axis=0)
        z = ops.relu(self.occ_fc1(pooled))
        occ_logit = ops.reshape(self.occ_fc2(z), ())
        return point, occ_logit

    __call__ = forward


def track_with_probe(vol: FeatureVolume, heads: ProbeHeads, query):
    """Per-frame probe predictions: ([T, 2] px points, [T] occlusion prob)."""
    t_q, p_q = query
    q = query_feature(vol, t_q, p_q)
    points = np.zeros((vol.n_frames, 2))
    occ = np.zeros(vol.n_frames)
    with no_grad():
        for t in range(vol.n_frames):
            c = correlation_from_query(vol, q, t)
            p_grid, logit = heads(Tensor(c))
            points[t] = vol.to_px(p_grid.data)
            occ[t] = 1.0 / (1.0 + np.exp(-float(logit.data)))
    return points, occ


# ---------------------------------------------------------------------------
# low-rank adaptation
# ---------------------------------------------------------------------------

def lora_apply(w: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Adapted weight W + B A for A: [r, d], B: [d, r]; requires r < d."""
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = w.shape[0]
    if w.shape != (d, d):
        raise ValueError(f"base weight must be square, got {w.shape}")
    r = a.shape[0]
    if a.shape != (r, d) or b.shape != (d, r):
        raise ValueError("adapter shapes must be A: [r, d] and B: [d, r]")
    if r >= d:
        raise ValueError(f"rank {r} must be smaller than the width {d}")
    return w + b @ a


def lora_param_count(r: int, d: int, n_layers: int,
                     n_matrices: int = 2) -> int:
    """Learnable adapter parameters: n_layers * n_matrices * 2 * r * d."""
    for name, v in (("r", r), ("d", d), ("n_layers", n_layers),
                    ("n_matrices", n_matrices)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer")
    return n_layers * n_matrices * 2 * r * d


def freeze(module: nn.Module) -> None:
    """Mark every registered parameter as non-trainable."""
    for p in module.parameters():
        p.requires_grad = False


def attach_lora(encoder: Encoder, rank: int,
                rng: np.random.Generator) -> list[Tensor]:
    """Freeze the encoder and adapt its attention query/value projections.

    Adapters start output-preserving (the second factor is zero), so the
    first forward pass after attaching is bit-identical to the frozen
    encoder. Returns the new trainable tensors, two per adapted matrix.
    """
    layers = encoder.attention_layers()
    if not layers:
        raise ValueError("encoder has no attention layers to adapt")
    d = layers[0].d
    if not 0 < rank < d:
        raise ValueError(f"rank must be in 1..{d - 1}, got {rank}")
    freeze(encoder)
    params = []
    for mha in layers:
        for proj in (mha.q_proj, mha.v_proj):
            a = Tensor.param(rng.normal(0.0, 0.02, size=(d, rank)))
            b = Tensor.param(np.zeros((rank, d)))
            proj.attach_adapter(a, b)
            params += [a, b]
    return params


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class ProbeSample:
    """One supervised (query, frame) pair."""

    c: np.ndarray                 # [G, G] correlation map (probing path)
    target_grid: np.ndarray       # [2] gt point in grid coordinates
    occluded: float               # 1.0 when the gt point is not visible
    track: int = 0                # indices into the source clip, for the
    t: int = 0                    # adaptation path which re-encodes frames
    t_q: int = 0
    clip: int = 0


@dataclass
class ProbeConfig:
    steps: int = 300
    batch: int = 8
    lr: float = 1e-3
    warmup: int = 20
    wd_heads: float = 1e-3        # weight decay when only heads train
    wd_adapt: float = 1e-5        # weight decay when adapters train too
    huber_delta: float = 1.0      # in grid-cell units
    rank: int = 16
    nominal_grid: int = NOMINAL_GRID
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch <= 0:
            raise ValueError("steps must be >= 0 and batch positive")


def probe_samples(vol: FeatureVolume, tracks: TrackSet,
                  clip: int = 0) -> list[ProbeSample]:
    """Supervision pairs for every track at every active frame."""
    out = []
    for k, rec in enumerate(tracks.tracks):
        q = query_feature(vol, rec.query_t, rec.query_point)
        for t in range(rec.query_t, rec.n_frames):
            out.append(ProbeSample(
                c=correlation_from_query(vol, q, t),
                target_grid=vol.to_grid(rec.points[t]),
                occluded=0.0 if rec.visible[t] else 1.0,
                track=k, t=t, t_q=rec.query_t, clip=clip))
    return out


def _sample_loss(point, occ_logit, sample: ProbeSample,
                 delta: float) -> Tensor:
    occ = ops.binary_cross_entropy(ops.sigmoid(occ_logit),
                                   np.float64(sample.occluded))
    if not sample.occluded:
        loc = ops.mean(ops.huber(point, sample.target_grid, delta=delta))
        return ops.add(loc, occ)
    return occ


def fit_probe(heads: ProbeHeads, samples: list[ProbeSample],
              config: ProbeConfig) -> list[float]:
    """Train the heads on fixed correlation maps; extractor untouched."""
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(config.seed)
    opt = AdamW(list(heads.parameters()), lr=config.lr,
                weight_decay=config.wd_heads)
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, len(samples), size=config.batch)
        heads.zero_grad()
        with Tape():
            parts = []
            for i in idx:
                s = samples[i]
                point, logit = heads(Tensor(s.c))
                parts.append(_sample_loss(point, logit, s,
                                          config.huber_delta))
            loss = ops.mean(ops.stack(parts))
            loss.backward()
        opt.step(lr=lr_at(step, config.lr, config.warmup, config.steps))
        losses.append(float(loss.data))
    return losses


def fit_adapted(heads: ProbeHeads, encoder: Encoder,
                clips: list, samples: list[ProbeSample],
                adapter_params: list[Tensor],
                config: ProbeConfig) -> list[float]:
    """Train heads plus attached adapters; features recomputed each step.

    ``clips`` holds (frames, TrackSet) pairs indexed by ProbeSample.clip;
    the correlation maps stored on the samples are ignored here because
    the adapted features change every step.
    """
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(config.seed)
    opt = AdamW(list(heads.parameters()) + list(adapter_params),
                lr=config.lr, weight_decay=config.wd_adapt)
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, len(samples), size=config.batch)
        batch = [samples[i] for i in idx]
        heads.zero_grad()
        for p in adapter_params:
            p.zero_grad()
        with Tape():
            feats = {}
            for s in batch:
                for t in {s.t, s.t_q}:
                    key = (s.clip, t)
                    if key not in feats:
                        frames, _ = clips[s.clip]
                        feats[key] = encoder(frames[t], t=t).f
            parts = []
            for s in batch:
                frames, tracks = clips[s.clip]
                rec = tracks.tracks[s.track]
                stride = encoder.config.stride
                q = ops.bilinear_sample(
                    feats[(s.clip, s.t_q)],
                    np.asarray(rec.query_point) / stride - 0.5)
                c = correlation_tensor(feats[(s.clip, s.t)], q)
                point, logit = heads(c)
                parts.append(_sample_loss(point, logit, s,
                                          config.huber_delta))
            loss = ops.mean(ops.stack(parts))
            loss.backward()
        opt.step(lr=lr_at(step, config.lr, config.warmup, config.steps))
        losses.append(float(loss.data))
    return losses


# ---------------------------------------------------------------------------
# benchmark orchestration
# ---------------------------------------------------------------------------

def _predicted_set(gt: TrackSet, points_per_track: list) -> TrackSet:
    preds = []
    for rec, pts in zip(gt.tracks, points_per_track):
        preds.append(TrackRecord(rec.query_t, rec.query_point, pts,
                                 rec.visible.copy(), rec.track_id))
    return TrackSet(tracks=preds, resolution=gt.resolution, fps=gt.fps,
                    video_id=gt.video_id)


def run_benchmark(train_clips: list, eval_clips: list, encoder: Encoder,
                  mode: str, config: ProbeConfig) -> dict:
    """Train (if the mode asks for it) and measure delta_avg on eval clips.

    Evaluation is restricted to frames where ground truth marks the point
    visible: predicted records reuse the gt visibility flags, so only the
    localization quality varies between modes.
    """
    from .metrics import video_metrics

    if mode not in ("zero_shot", "probe", "adapt"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(config.seed)
    heads = None
    lora_params = 0
    losses = []

    if mode == "adapt":
        adapters = attach_lora(encoder, config.rank, rng)
        lora_params = lora_param_count(
            config.rank, encoder.attention_layers()[0].d,
            len(encoder.attention_layers()))
        heads = ProbeHeads(encoder.config.grid, rng)
        samples = []
        for ci, (frames, tracks) in enumerate(train_clips):
            vol = encode_video(frames, encoder)
            samples += probe_samples(vol, tracks, clip=ci)
        losses = fit_adapted(heads, encoder, train_clips, samples,
                             adapters, config)
    elif mode == "probe":
        freeze(encoder)
        heads = ProbeHeads(encoder.config.grid, rng)
        samples = []
        for ci, (frames, tracks) in enumerate(train_clips):
            vol = encode_video(frames, encoder)
            samples += probe_samples(vol, tracks, clip=ci)
        losses = fit_probe(heads, samples, config)

    deltas = []
    for frames, gt in eval_clips:
        vol = encode_video(frames, encoder)
        per_track = []
        for rec in gt.tracks:
            query = (rec.query_t, rec.query_point)
            if mode == "zero_shot":
                per_track.append(zero_shot_track(vol, query))
            else:
                per_track.append(track_with_probe(vol, heads, query)[0])
        m = video_metrics(gt, _predicted_set(gt, per_track))
        deltas.append(m["delta_avg"])
    defined = [d for d in deltas if d is not None]

    return {
        "mode": mode,
        "delta_avg": sum(defined) / len(defined) if defined else None,
        "per_video": deltas,
        "head_params": heads.num_params() if heads is not None else 0,
        "lora_params": lora_params,
        "losses": losses,
    }
