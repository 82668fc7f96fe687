"""Track records: a query point plus its per-frame ground truth or predictions.

A record follows the queried-first protocol: the query frame is the first
frame the point is visible, and the track is active from that frame on.
Positions are pixel coordinates (x, y) at the stated resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrackRecord:
    query_t: int
    query_point: np.ndarray       # [2] px
    points: np.ndarray            # [T, 2] px
    visible: np.ndarray           # [T] bool
    track_id: str = ""

    def __post_init__(self):
        self.query_point = np.asarray(self.query_point, dtype=np.float64)
        self.points = np.asarray(self.points, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        t = self.points.shape[0]
        if self.points.shape != (t, 2) or self.visible.shape != (t,):
            raise ValueError("points must be [T, 2] and visible [T]")
        if not 0 <= self.query_t < t:
            raise ValueError(f"query frame {self.query_t} outside 0..{t - 1}")

    @property
    def n_frames(self) -> int:
        return self.points.shape[0]

    def active(self) -> np.ndarray:
        """Boolean [T]: frames at or after the query frame."""
        return np.arange(self.n_frames) >= self.query_t


@dataclass
class TrackSet:
    """All tracks of one video at one resolution."""

    tracks: list[TrackRecord] = field(default_factory=list)
    resolution: tuple[int, int] = (64, 64)   # (height, width)
    fps: float = 12.0
    video_id: str = ""

    @property
    def n_tracks(self) -> int:
        return len(self.tracks)

    @property
    def n_frames(self) -> int:
        return self.tracks[0].n_frames if self.tracks else 0

    def validate(self) -> None:
        for rec in self.tracks:
            if rec.n_frames != self.n_frames:
                raise ValueError("tracks disagree on frame count")

    def query_spec(self):
        """Starts and query points in the layout the tracker consumes."""
        starts = np.array([r.query_t for r in self.tracks], dtype=np.intp)
        points = np.array([r.query_point for r in self.tracks])
        return starts, points
