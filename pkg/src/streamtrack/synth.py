"""Deterministic moving-sprites clips with exact point ground truth.

A scene is a static background plus textured sprites and occluding
rectangles, each following a closed-form motion program (reflected
linear motion for sprites, straight sweeps for occluders). Rendering
uses inverse bilinear sampling, so sprites sit at subpixel positions.
Because motion is closed-form, ground-truth point positions carry no
accumulated float error, and visibility is decided by the same z-order
and alpha tests the renderer uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tracks import TrackRecord, TrackSet


@dataclass
class SceneConfig:
    size: int = 64
    n_frames: int = 24
    n_sprites: int = 3
    n_occluders: int = 1
    sprite_size: tuple[int, int] = (12, 18)     # inclusive px range
    occluder_size: tuple[int, int] = (10, 22)
    max_speed: float = 2.0                      # sprite px/frame per axis
    occluder_speed: float = 3.0
    appearance_drift: float = 0.0               # texture blend reached at last frame
    max_queries: int = 8
    background_contrast: float = 0.25

    def __post_init__(self):
        if self.sprite_size[1] >= self.size:
            raise ValueError("sprites must be smaller than the canvas")
        if not 0.0 <= self.appearance_drift <= 1.0:
            raise ValueError("appearance_drift must be in [0, 1]")


def _bilinear_zero(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sample with zero padding outside the image extent."""
    h, w = img.shape[:2]
    pad = ((2, 2), (2, 2)) + ((0, 0),) * (img.ndim - 2)
    p = np.pad(img, pad)
    x = np.clip(np.asarray(xs, dtype=np.float64) + 2.0, 1.0, w + 2.0)
    y = np.clip(np.asarray(ys, dtype=np.float64) + 2.0, 1.0, h + 2.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx, fy = x - x0, y - y0
    if img.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    return (p[y0, x0] * (1 - fx) * (1 - fy) + p[y0, x0 + 1] * fx * (1 - fy)
            + p[y0 + 1, x0] * (1 - fx) * fy + p[y0 + 1, x0 + 1] * fx * fy)


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int,
                  lo: float, hi: float) -> np.ndarray:
    """[h, w, 3] field interpolated from a coarse random lattice."""
    coarse = rng.uniform(lo, hi, size=(cells + 1, cells + 1, 3))
    xs = np.linspace(0.0, cells, w)
    ys = np.linspace(0.0, cells, h)
    return _bilinear_zero(coarse, xs[None, :], ys[:, None])


def _shape_mask(kind: str, s: int) -> np.ndarray:
    """Alpha in [0, 1] with a one-pixel soft edge."""
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    c = (s - 1) / 2.0
    if kind == "disk":
        d = np.hypot(xs - c, ys - c)
        r = c - 0.5
    elif kind == "diamond":
        # L1 distances on the lattice are integers; the quarter-pixel
        # offset keeps one partial-alpha ring at the rim
        d = np.abs(xs - c) + np.abs(ys - c)
        r = c - 0.25
    else:   # square
        d = np.maximum(np.abs(xs - c), np.abs(ys - c))
        r = c - 0.5
    return np.clip(r - d + 1.0, 0.0, 1.0)


def _reflect(x: np.ndarray, span: float) -> np.ndarray:
    """Fold unbounded linear motion into [0, span] (triangle wave)."""
    if span <= 0:
        return np.zeros_like(x)
    y = np.mod(x, 2.0 * span)
    return np.where(y <= span, y, 2.0 * span - y)


@dataclass
class _Object:
    texture: np.ndarray           # [s, s, 3]
    texture_alt: np.ndarray       # blend target under appearance drift
    alpha: np.ndarray             # [s, s]
    origins: np.ndarray           # [T, 2] float top-left corner per frame
    z: int
    drift: float = 0.0

    def texture_at(self, t: int, n_frames: int) -> np.ndarray:
        if self.drift == 0.0 or n_frames < 2:
            return self.texture
        c = self.drift * t / (n_frames - 1)
        return (1.0 - c) * self.texture + c * self.texture_alt

    def alpha_at_canvas(self, t: int, pts_xy: np.ndarray) -> np.ndarray:
        """Alpha sampled at canvas points [..., 2] for frame t."""
        ox, oy = self.origins[t]
        return _bilinear_zero(self.alpha, pts_xy[..., 0] - ox, pts_xy[..., 1] - oy)


class SyntheticScene:
    """Fully determined by (seed, config); renders frames and ground truth."""

    def __init__(self, seed: int, config: SceneConfig | None = None):
        self.config = cfg = config or SceneConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        size, t_n = cfg.size, cfg.n_frames
        ts = np.arange(t_n, dtype=np.float64)[:, None]

        self.background = _smooth_field(
            rng, size, size, 4, 0.35 - cfg.background_contrast / 2,
            0.35 + cfg.background_contrast / 2)

        self.sprites: list[_Object] = []
        self.sprite_motion: list[tuple[np.ndarray, np.ndarray]] = []
        kinds = ["disk", "square", "diamond"]
        for i in range(cfg.n_sprites):
            s = int(rng.integers(cfg.sprite_size[0], cfg.sprite_size[1] + 1))
            tex = _smooth_field(rng, s, s, 4, 0.15, 0.95)
            alt = _smooth_field(rng, s, s, 4, 0.15, 0.95)
            mask = _shape_mask(kinds[int(rng.integers(len(kinds)))], s)
            span = float(size - s)
            p0 = rng.uniform(0.0, span, size=2)
            v = rng.uniform(-cfg.max_speed, cfg.max_speed, size=2)
            origins = _reflect(p0 + v * ts, span)
            self.sprite_motion.append((p0, v))
            self.sprites.append(_Object(tex, alt, mask, origins, z=i,
                                        drift=cfg.appearance_drift))

        self.occluders: list[_Object] = []
        for i in range(cfg.n_occluders):
            w = int(rng.integers(cfg.occluder_size[0], cfg.occluder_size[1] + 1))
            h = int(rng.integers(cfg.occluder_size[0], cfg.occluder_size[1] + 1))
            color = rng.uniform(0.05, 0.5, size=3)
            tex = np.tile(color, (h, w, 1))
            alpha = np.ones((h, w))
            horizontal = bool(rng.integers(2))
            sign = 1.0 if rng.integers(2) else -1.0
            speed = cfg.occluder_speed * sign
            if horizontal:
                start_x = -float(w) if sign > 0 else float(size)
                fixed_y = rng.uniform(0.0, size - h)
                origins = np.stack([start_x + speed * ts[:, 0],
                                    np.full(t_n, fixed_y)], axis=1)
            else:
                start_y = -float(h) if sign > 0 else float(size)
                fixed_x = rng.uniform(0.0, size - w)
                origins = np.stack([np.full(t_n, fixed_x),
                                    start_y + speed * ts[:, 0]], axis=1)
            self.occluders.append(_Object(tex, tex, alpha, origins,
                                          z=1000 + i, drift=0.0))

        self._rng_state = rng   # continued by sample_tracks for query draws

    # -- rendering -----------------------------------------------------------

    def _objects_by_z(self) -> list[_Object]:
        return sorted(self.sprites + self.occluders, key=lambda o: o.z)

    def render_frame(self, t: int) -> np.ndarray:
        cfg = self.config
        canvas = self.background.copy()
        for obj in self._objects_by_z():
            tex = obj.texture_at(t, cfg.n_frames)
            premult = obj.alpha[..., None] * tex
            ox, oy = obj.origins[t]
            h, w = obj.alpha.shape
            x0 = max(int(np.floor(ox)) - 1, 0)
            y0 = max(int(np.floor(oy)) - 1, 0)
            x1 = min(int(np.ceil(ox)) + w + 1, cfg.size)
            y1 = min(int(np.ceil(oy)) + h + 1, cfg.size)
            if x0 >= x1 or y0 >= y1:
                continue
            ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
            a = _bilinear_zero(obj.alpha, xs - ox, ys - oy)
            col = _bilinear_zero(premult, xs - ox, ys - oy)
            region = canvas[y0:y1, x0:x1]
            canvas[y0:y1, x0:x1] = (1.0 - a[..., None]) * region + col
        return np.clip(canvas, 0.0, 1.0)

    def render(self) -> np.ndarray:
        return np.stack([self.render_frame(t)
                         for t in range(self.config.n_frames)])

    # -- ground truth ----------------------------------------------------------

    def point_track(self, sprite_idx: int, local_xy: np.ndarray):
        """Positions [T, 2] and visibility [T] of a sprite-local point."""
        cfg = self.config
        sprite = self.sprites[sprite_idx]
        local_xy = np.asarray(local_xy, dtype=np.float64)
        positions = sprite.origins + local_xy
        in_canvas = ((positions >= 0.0) & (positions <= cfg.size - 1.0)).all(axis=1)
        on_sprite = _bilinear_zero(sprite.alpha, local_xy[0], local_xy[1]) >= 0.5
        visible = in_canvas & bool(on_sprite)
        for obj in self._objects_by_z():
            if obj.z <= sprite.z:
                continue
            covered = np.array([obj.alpha_at_canvas(t, positions[t]) > 0.5
                                for t in range(cfg.n_frames)])
            visible &= ~covered
        return positions, visible

    def sample_tracks(self, n_queries: int | None = None) -> TrackSet:
        cfg = self.config
        rng = self._rng_state
        want = cfg.max_queries if n_queries is None else n_queries
        tracks = []
        for _ in range(want):
            for _attempt in range(20):
                si = int(rng.integers(len(self.sprites)))
                sprite = self.sprites[si]
                s = sprite.alpha.shape[0]
                local = rng.uniform(1.0, s - 2.0, size=2)
                if _bilinear_zero(sprite.alpha, local[0], local[1]) < 0.9:
                    continue
                positions, visible = self.point_track(si, local)
                if not visible.any():
                    continue
                t_q = int(np.argmax(visible))
                tracks.append(TrackRecord(
                    query_t=t_q, query_point=positions[t_q], points=positions,
                    visible=visible, track_id=f"track{len(tracks)}"))
                break
        return TrackSet(tracks=tracks, resolution=(cfg.size, cfg.size),
                        fps=12.0, video_id=f"synth-{self.seed}")


def generate_clip(seed: int, config: SceneConfig | None = None,
                  n_queries: int | None = None):
    """Frames [T, H, W, 3] in [0, 1] plus sampled ground-truth tracks."""
    scene = SyntheticScene(seed, config)
    frames = scene.render()
    tracks = scene.sample_tracks(n_queries)
    return frames, tracks
