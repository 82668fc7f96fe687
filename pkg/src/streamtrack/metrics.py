"""Tracking metrics under the queried-first protocol.

A (track, frame) pair participates from the track's query frame on.
Distances are Euclidean in pixels, multiplied by ``scale`` before any
threshold comparison, so the canonical thresholds {1, 2, 4, 8, 16} can
be applied either to raw pixels (scale 1) or at the 256-px-equivalent
scale (scale 256/H). Results state their scale; delta metrics with no
visible pairs are reported as None, never as zero.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .tracks import TrackSet

THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
FAIL_AT = 50.0


def validate_queried_first(gt: TrackSet) -> None:
    """Ground-truth queries must sit on each track's first visible frame."""
    for rec in gt.tracks:
        vis = np.flatnonzero(rec.visible)
        if vis.size == 0:
            raise ValueError(f"track {rec.track_id!r} is never visible")
        if rec.query_t != vis[0]:
            raise ValueError(
                f"track {rec.track_id!r}: query frame {rec.query_t} is not "
                f"the first visible frame {int(vis[0])}")


def _check_aligned(gt: TrackSet, pred: TrackSet) -> None:
    if gt.n_tracks != pred.n_tracks:
        raise ValueError(f"track count mismatch: {gt.n_tracks} ground-truth "
                         f"vs {pred.n_tracks} predicted")
    for g, p in zip(gt.tracks, pred.tracks):
        if g.track_id and p.track_id and g.track_id != p.track_id:
            raise ValueError(f"track id mismatch: {g.track_id!r} vs "
                             f"{p.track_id!r}")
        if g.n_frames != p.n_frames:
            raise ValueError(f"track {g.track_id!r}: frame count mismatch")
        if g.query_t != p.query_t:
            raise ValueError(f"track {g.track_id!r}: query frame mismatch")


def _pairs(gt: TrackSet, pred: TrackSet, scale: float):
    """Flattened active pairs plus per-track active distances (in order)."""
    gv_all, pv_all, d_all, per_track = [], [], [], []
    for g, p in zip(gt.tracks, pred.tracks):
        sl = slice(g.query_t, g.n_frames)
        d = np.linalg.norm(p.points[sl] - g.points[sl], axis=1) * scale
        gv_all.append(g.visible[sl])
        pv_all.append(p.visible[sl])
        d_all.append(d)
        per_track.append(d)
    if not gv_all:
        z = np.zeros(0)
        return z.astype(bool), z.astype(bool), z, []
    return (np.concatenate(gv_all), np.concatenate(pv_all),
            np.concatenate(d_all), per_track)


def _metrics(gv: np.ndarray, pv: np.ndarray, dist: np.ndarray,
             per_track: list, thresholds, fail_at: float) -> dict:
    out = {"flags": {"jaccard_empty": 0}}

    n_vis = int(gv.sum())
    deltas = {}
    for x in thresholds:
        deltas[x] = (float((gv & (dist <= x)).sum() / n_vis)
                     if n_vis else None)
    out["delta"] = deltas
    defined = [v for v in deltas.values() if v is not None]
    out["delta_avg"] = sum(defined) / len(defined) if defined else None

    out["oa"] = float((gv == pv).mean()) if gv.size else None

    jac, counts = {}, {}
    for x in thresholds:
        within = dist <= x
        tp = int((gv & pv & within).sum())
        fp = int((pv & ~(gv & within)).sum())
        fn = int((gv & ~(pv & within)).sum())
        counts[x] = (tp, fp, fn)
        if tp + fp + fn == 0:
            jac[x] = 1.0
            out["flags"]["jaccard_empty"] += 1
        else:
            jac[x] = tp / (tp + fp + fn)
    out["jaccard"] = jac
    out["counts"] = counts
    out["aj"] = sum(jac.values()) / len(thresholds)

    out["mte"] = float(np.median(dist)) if dist.size else None

    if per_track:
        rates = []
        for d in per_track:
            failed = d > fail_at
            ok = int(np.argmax(failed)) if failed.any() else d.size
            rates.append(ok / d.size)
        out["survival"] = 100.0 * float(np.mean(rates))
    else:
        out["survival"] = None
    return out


def video_metrics(gt: TrackSet, pred: TrackSet, thresholds=THRESHOLDS,
                  scale: float = 1.0, fail_at: float = FAIL_AT) -> dict:
    _check_aligned(gt, pred)
    gv, pv, dist, per_track = _pairs(gt, pred, scale)
    return _metrics(gv, pv, dist, per_track, thresholds, fail_at)


def _average(per_video: list[dict], key) -> float | None:
    vals = [key(v) for v in per_video]
    vals = [v for v in vals if v is not None]
    return sum(vals) / len(vals) if vals else None


@dataclass
class EvalResult:
    thresholds: tuple
    scale: float
    fail_at: float
    n_videos: int
    n_tracks: int
    aj: float | None
    delta_avg: float | None
    oa: float | None
    mte: float | None
    survival: float | None
    delta: dict
    jaccard: dict
    counts: dict                      # pooled TP/FP/FN per threshold
    pooled: dict
    per_video: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def describe(self) -> str:
        if self.scale == 1.0:
            head = "scale: native pixels (thresholds in raw px)"
        else:
            head = (f"scale: {self.scale:g}x (256-px equivalent; native "
                    f"threshold {self.thresholds[0] / self.scale:g}.."
                    f"{self.thresholds[-1] / self.scale:g} px)")
        def fmt(v, pct=True):
            if v is None:
                return "undefined"
            return f"{100 * v:.2f}" if pct else f"{v:.3f}"
        lines = [head,
                 f"videos: {self.n_videos}  tracks: {self.n_tracks}",
                 f"AJ: {fmt(self.aj)}  delta_avg: {fmt(self.delta_avg)}  "
                 f"OA: {fmt(self.oa)}",
                 f"MTE: {fmt(self.mte, pct=False)} px  survival: "
                 f"{self.survival if self.survival is None else round(self.survival, 2)}%"]
        for x in self.thresholds:
            lines.append(f"  delta@{x:g}: {fmt(self.delta[x])}  "
                         f"jaccard@{x:g}: {fmt(self.jaccard[x])}")
        if self.flags.get("jaccard_empty"):
            lines.append(f"  note: {self.flags['jaccard_empty']} empty-"
                         "denominator Jaccard terms counted as 1")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "scale": self.scale,
            "fail_at": self.fail_at,
            "n_videos": self.n_videos,
            "n_tracks": self.n_tracks,
            "aj": self.aj,
            "delta_avg": self.delta_avg,
            "oa": self.oa,
            "mte": self.mte,
            "survival": self.survival,
            "delta": {str(k): v for k, v in self.delta.items()},
            "jaccard": {str(k): v for k, v in self.jaccard.items()},
            "counts": {str(k): list(v) for k, v in self.counts.items()},
            "pooled": {k: (v if not isinstance(v, dict)
                           else {str(kk): vv for kk, vv in v.items()})
                       for k, v in self.pooled.items() if k != "counts"},
            "per_video": self.per_video,
            "flags": self.flags,
        }

    def write_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "threshold", "value"])
            for name in ["aj", "delta_avg", "oa", "mte", "survival"]:
                w.writerow([name, "", getattr(self, name)])
            for x in self.thresholds:
                w.writerow(["delta", x, self.delta[x]])
                w.writerow(["jaccard", x, self.jaccard[x]])


def evaluate_queried_first(gt_sets: list[TrackSet], pred_sets: list[TrackSet],
                           thresholds=THRESHOLDS, scale: float = 1.0,
                           fail_at: float = FAIL_AT) -> EvalResult:
    """Per-video metrics averaged uniformly across videos, plus pooled."""
    if len(gt_sets) != len(pred_sets):
        raise ValueError(f"{len(gt_sets)} ground-truth videos vs "
                         f"{len(pred_sets)} predicted")
    if not gt_sets:
        raise ValueError("no videos to evaluate")

    per_video, all_parts = [], []
    flags = {"jaccard_empty": 0}
    for gt, pred in zip(gt_sets, pred_sets):
        if gt.video_id and pred.video_id and gt.video_id != pred.video_id:
            raise ValueError(f"video id mismatch: {gt.video_id!r} vs "
                             f"{pred.video_id!r}")
        validate_queried_first(gt)
        _check_aligned(gt, pred)
        parts = _pairs(gt, pred, scale)
        all_parts.append(parts)
        m = _metrics(*parts, thresholds, fail_at)
        flags["jaccard_empty"] += m["flags"]["jaccard_empty"]
        m["video_id"] = gt.video_id
        per_video.append(m)

    gv = np.concatenate([p[0] for p in all_parts])
    pv = np.concatenate([p[1] for p in all_parts])
    dist = np.concatenate([p[2] for p in all_parts])
    tracks = [d for p in all_parts for d in p[3]]
    pooled = _metrics(gv, pv, dist, tracks, thresholds, fail_at)

    counts = {x: tuple(sum(m["counts"][x][i] for m in per_video)
                       for i in range(3)) for x in thresholds}
    return EvalResult(
        thresholds=tuple(thresholds), scale=scale, fail_at=fail_at,
        n_videos=len(gt_sets), n_tracks=len(tracks),
        aj=_average(per_video, lambda v: v["aj"]),
        delta_avg=_average(per_video, lambda v: v["delta_avg"]),
        oa=_average(per_video, lambda v: v["oa"]),
        mte=_average(per_video, lambda v: v["mte"]),
        survival=_average(per_video, lambda v: v["survival"]),
        delta={x: _average(per_video, lambda v: v["delta"][x])
               for x in thresholds},
        jaccard={x: _average(per_video, lambda v: v["jaccard"][x])
                 for x in thresholds},
        counts=counts, pooled=pooled,
        per_video=[{k: v for k, v in m.items() if k != "counts"}
                   for m in per_video],
        flags=flags)
