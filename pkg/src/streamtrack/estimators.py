"""Estimator-style wrappers: fit on clips, predict tracks for query points.

Both estimators follow the scikit-learn contract: constructors only store
hyperparameters, ``fit`` validates inputs and returns ``self``, learned
state lives in trailing-underscore attributes, and ``get_params`` /
``set_params`` come from ``BaseEstimator``. ``X`` is a list of videos
(each ``[T, H, W, 3]``, uint8 or floats in [0, 1]) and ``y`` the matching
list of track sets.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .encoder import Encoder, EncoderConfig
from .io import frames_to_float
from .metrics import video_metrics
from .model import OnlineSession, QuerySpec, TrackerConfig, TrackerModel
from .probe import (ProbeConfig, ProbeHeads, attach_lora, encode_video,
                    fit_adapted, fit_probe, freeze, probe_samples,
                    track_with_probe, zero_shot_track)
from .tracks import TrackRecord, TrackSet
from .train import TrainConfig, train


# ---------------------------------------------------------------------------
# input validation
# ---------------------------------------------------------------------------

def validate_video(X) -> np.ndarray:
    """One video as float64 [T, H, W, 3] with square frames in [0, 1]."""
    arr = frames_to_float(np.asarray(X))
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"a video must be [T, H, W, 3], got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("a video needs at least one frame")
    if arr.shape[1] != arr.shape[2]:
        raise ValueError(f"frames must be square, got "
                         f"{arr.shape[1]}x{arr.shape[2]}")
    return arr


def validate_clips(X, y) -> list:
    """Paired (video, track set) training clips, all at one resolution."""
    if y is None:
        raise ValueError("y must hold one track set per video")
    videos = [validate_video(v) for v in X]
    if len(videos) != len(y):
        raise ValueError(f"{len(videos)} videos but {len(y)} track sets")
    if not videos:
        raise ValueError("at least one training clip is required")
    size = videos[0].shape[1]
    clips = []
    for i, (video, tracks) in enumerate(zip(videos, y)):
        if not isinstance(tracks, TrackSet):
            raise ValueError(f"y[{i}] must be a TrackSet, got "
                             f"{type(tracks).__name__}")
        if video.shape[1] != size:
            raise ValueError(f"clip {i} is {video.shape[1]} px but clip 0 "
                             f"is {size} px")
        if tracks.n_frames != video.shape[0]:
            raise ValueError(f"clip {i}: {video.shape[0]} frames but the "
                             f"track set covers {tracks.n_frames}")
        if tuple(tracks.resolution) != (size, size):
            raise ValueError(f"clip {i}: track resolution "
                             f"{tracks.resolution} does not match frames")
        clips.append((video, tracks))
    return clips


def validate_queries(queries, n_frames: int, size: int):
    """Query starts, points, and ids from a TrackSet or an [N, 3] array.

    Array rows are (t, x, y). Points must lie inside the frame and start
    frames inside the video.
    """
    if isinstance(queries, TrackSet):
        starts, points = queries.query_spec()
        ids = [r.track_id or f"q{j:02d}"
               for j, r in enumerate(queries.tracks)]
    else:
        arr = check_array(queries, dtype=np.float64, ensure_2d=True)
        if arr.shape[1] != 3:
            raise ValueError(f"queries need (t, x, y) rows, got "
                             f"{arr.shape[1]} columns")
        if np.any(arr[:, 0] != np.round(arr[:, 0])):
            raise ValueError("query frame indices must be integral")
        starts = arr[:, 0].astype(np.intp)
        points = arr[:, 1:]
        ids = [f"q{j:02d}" for j in range(arr.shape[0])]
    if starts.size and (starts.min() < 0 or starts.max() >= n_frames):
        raise ValueError(f"query frames must lie in 0..{n_frames - 1}")
    if points.size and (points.min() < 0 or points.max() > size - 1):
        raise ValueError(f"query points must lie inside the {size}x{size} "
                         "frame")
    return starts, points, ids


def _predictions_to_trackset(starts, points, ids, pred_pts, pred_vis,
                             size: int) -> TrackSet:
    recs = []
    for j, track_id in enumerate(ids):
        recs.append(TrackRecord(int(starts[j]), points[j], pred_pts[j],
                                pred_vis[j], track_id))
    return TrackSet(tracks=recs, resolution=(size, size))


def _mean_delta_avg(scores: list) -> float:
    defined = [s for s in scores if s is not None]
    if not defined:
        raise ValueError("score is undefined: no ground-truth visible "
                         "frames in y")
    return float(np.mean(defined))


# ---------------------------------------------------------------------------
# online tracker
# ---------------------------------------------------------------------------

class OnlinePointTracker(BaseEstimator):
    """Causal point tracker trained end to end on (video, tracks) clips.

    ``fit`` trains the underlying model from scratch on the given clips
    (the frame size is taken from the data); ``predict`` tracks query
    points through an unseen video one frame at a time and returns a
    ``TrackSet``; ``score`` is the average fraction of visible ground-truth
    points within the evaluation thresholds (higher is better).
    """

    def __init__(self, stride=4, width=64, heads=4, points=4, ffn_mult=4,
                 decoder_blocks=3, res_blocks=2, encoder_attn_layers=2,
                 top_k=3, temperature=0.05, memory_size=12,
                 vis_threshold=0.5, use_spatial_memory=True,
                 use_context_memory=True, use_offset_head=True,
                 steps=200, lr=1e-3, warmup=20, weight_decay=1e-4,
                 lam=1.0, uncertainty_radius=None, seed=0):
        self.stride = stride
        self.width = width
        self.heads = heads
        self.points = points
        self.ffn_mult = ffn_mult
        self.decoder_blocks = decoder_blocks
        self.res_blocks = res_blocks
        self.encoder_attn_layers = encoder_attn_layers
        self.top_k = top_k
        self.temperature = temperature
        self.memory_size = memory_size
        self.vis_threshold = vis_threshold
        self.use_spatial_memory = use_spatial_memory
        self.use_context_memory = use_context_memory
        self.use_offset_head = use_offset_head
        self.steps = steps
        self.lr = lr
        self.warmup = warmup
        self.weight_decay = weight_decay
        self.lam = lam
        self.uncertainty_radius = uncertainty_radius
        self.seed = seed

    def fit(self, X, y):
        clips = validate_clips(X, y)
        size = clips[0][0].shape[1]
        config = TrackerConfig(
            image_size=size, stride=self.stride, width=self.width,
            heads=self.heads, points=self.points, ffn_mult=self.ffn_mult,
            decoder_blocks=self.decoder_blocks, res_blocks=self.res_blocks,
            encoder_attn_layers=self.encoder_attn_layers, top_k=self.top_k,
            temperature=self.temperature, memory_size=self.memory_size,
            vis_threshold=self.vis_threshold,
            use_spatial_memory=self.use_spatial_memory,
            use_context_memory=self.use_context_memory,
            use_offset_head=self.use_offset_head, seed=self.seed)
        self.model_ = TrackerModel(config)
        train_cfg = TrainConfig(
            steps=self.steps, lr=self.lr, warmup=self.warmup,
            weight_decay=self.weight_decay, lam=self.lam,
            uncertainty_radius=self.uncertainty_radius)
        self.history_ = train(self.model_, clips, train_cfg)
        self.image_size_ = size
        return self

    def predict(self, X, queries) -> TrackSet:
        """Track the queries through one video, causally."""
        check_is_fitted(self, "model_")
        video = validate_video(X)
        if video.shape[1] != self.image_size_:
            raise ValueError(f"video is {video.shape[1]} px but the model "
                             f"was fitted at {self.image_size_} px")
        t_total = video.shape[0]
        starts, points, ids = validate_queries(queries, t_total,
                                               self.image_size_)
        session = OnlineSession(self.model_, QuerySpec(starts, points))
        pred_pts = np.tile(points[:, None, :], (1, t_total, 1))
        pred_vis = np.zeros((len(ids), t_total), dtype=bool)
        thr = self.model_.config.vis_threshold
        for t in range(t_total):
            pred = session.frame_step(video[t], t=t)
            if pred.n_active:
                pred_pts[pred.active, t] = pred.points_np()
                pred_vis[pred.active, t] = pred.visible_np(thr)
        return _predictions_to_trackset(starts, points, ids, pred_pts,
                                        pred_vis, self.image_size_)

    def score(self, X, y) -> float:
        """Average over videos of delta_avg against the given ground truth."""
        check_is_fitted(self, "model_")
        scores = []
        for video, gt in zip(X, y):
            pred = self.predict(video, gt)
            scores.append(video_metrics(gt, pred)["delta_avg"])
        return _mean_delta_avg(scores)

    def widen_memory(self, memory_size: int):
        """Grow the memory windows of the fitted model in place."""
        check_is_fitted(self, "model_")
        self.model_.extend_memory(memory_size)
        return self


# ---------------------------------------------------------------------------
# correlation probe
# ---------------------------------------------------------------------------

class CorrelationProbe(BaseEstimator):
    """Tracking by correlation against a fixed feature extractor.

    ``mode`` selects the capacity: "zero_shot" (argmax of the correlation
    map, nothing trained), "probe" (small trained heads on the frozen
    extractor), or "adapt" (heads plus low-rank adapters on the
    extractor's attention projections).
    """

    def __init__(self, mode="probe", width=64, rank=16, steps=300, batch=8,
                 lr=1e-3, warmup=20, huber_delta=1.0,
                 occlusion_threshold=0.5, seed=0):
        self.mode = mode
        self.width = width
        self.rank = rank
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.warmup = warmup
        self.huber_delta = huber_delta
        self.occlusion_threshold = occlusion_threshold
        self.seed = seed

    def _config(self) -> ProbeConfig:
        return ProbeConfig(steps=self.steps, batch=self.batch, lr=self.lr,
                           warmup=self.warmup, huber_delta=self.huber_delta,
                           rank=self.rank, seed=self.seed)

    def fit(self, X, y):
        if self.mode not in ("zero_shot", "probe", "adapt"):
            raise ValueError(f"unknown mode {self.mode!r}")
        clips = validate_clips(X, y)
        size = clips[0][0].shape[1]
        rng = np.random.default_rng(self.seed)
        self.encoder_ = Encoder(EncoderConfig(image_size=size,
                                              width=self.width), rng)
        self.heads_ = None
        self.losses_ = []
        if self.mode != "zero_shot":
            cfg = self._config()
            if self.mode == "adapt":
                self.adapters_ = attach_lora(self.encoder_, self.rank, rng)
            else:
                freeze(self.encoder_)
            self.heads_ = ProbeHeads(self.encoder_.config.grid, rng)
            samples = []
            for ci, (frames, tracks) in enumerate(clips):
                vol = encode_video(frames, self.encoder_)
                samples += probe_samples(vol, tracks, clip=ci)
            if self.mode == "adapt":
                self.losses_ = fit_adapted(self.heads_, self.encoder_,
                                           clips, samples, self.adapters_,
                                           cfg)
            else:
                self.losses_ = fit_probe(self.heads_, samples, cfg)
        self.image_size_ = size
        return self

    def predict(self, X, queries) -> TrackSet:
        check_is_fitted(self, "encoder_")
        video = validate_video(X)
        if video.shape[1] != self.image_size_:
            raise ValueError(f"video is {video.shape[1]} px but the probe "
                             f"was fitted at {self.image_size_} px")
        t_total = video.shape[0]
        starts, points, ids = validate_queries(queries, t_total,
                                               self.image_size_)
        vol = encode_video(video, self.encoder_)
        pred_pts = np.zeros((len(ids), t_total, 2))
        pred_vis = np.ones((len(ids), t_total), dtype=bool)
        for j in range(len(ids)):
            query = (int(starts[j]), points[j])
            if self.heads_ is None:
                pred_pts[j] = zero_shot_track(vol, query)
            else:
                pred_pts[j], occ = track_with_probe(vol, self.heads_, query)
                pred_vis[j] = occ < self.occlusion_threshold
        return _predictions_to_trackset(starts, points, ids, pred_pts,
                                        pred_vis, self.image_size_)

    def score(self, X, y) -> float:
        """Average over videos of delta_avg against the given ground truth."""
        check_is_fitted(self, "encoder_")
        scores = []
        for video, gt in zip(X, y):
            pred = self.predict(video, gt)
            scores.append(video_metrics(gt, pred)["delta_avg"])
        return _mean_delta_avg(scores)
