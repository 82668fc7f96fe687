"""Metric correctness: hand-computed cases, invariants, and a differential
fuzz against the brute-force reference in oracle_metrics."""

import json

import numpy as np
import pytest

from oracle_metrics import oracle_average, oracle_video
from streamtrack.metrics import (THRESHOLDS, evaluate_queried_first,
                                 validate_queried_first, video_metrics)
from streamtrack.tracks import TrackRecord, TrackSet


def make_pair(dists, query_t=0, gt_vis=None, pred_vis=None, tid="t0"):
    """One (gt, pred) record pair whose active-frame distances are ``dists``."""
    T = query_t + len(dists)
    gt_pts = np.full((T, 2), 5.0)
    pred_pts = np.full((T, 2), 5.0)
    pred_pts[query_t:, 0] += np.asarray(dists, dtype=float)
    if gt_vis is None:
        gt_vis = np.arange(T) >= query_t
    if pred_vis is None:
        pred_vis = np.ones(T, dtype=bool)
    gt = TrackRecord(query_t, gt_pts[query_t], gt_pts, gt_vis, tid)
    pred = TrackRecord(query_t, gt_pts[query_t], pred_pts, pred_vis, tid)
    return gt, pred


def make_sets(pairs, video_id="v0"):
    gt = TrackSet(tracks=[g for g, _ in pairs], video_id=video_id)
    pred = TrackSet(tracks=[p for _, p in pairs], video_id=video_id)
    return gt, pred


def close(a, b, tol=1e-12):
    if a is None or b is None:
        assert a is None and b is None
    else:
        assert abs(a - b) <= tol


def assert_matches_oracle(mine, ref):
    for x in THRESHOLDS:
        close(mine["delta"][x], ref["delta"][x])
        close(mine["jaccard"][x], ref["jaccard"][x])
        assert mine["counts"][x] == ref["counts"][x]
    for k in ("delta_avg", "oa", "aj", "mte", "survival"):
        close(mine[k], ref[k])
    assert mine["flags"] == ref["flags"]


class TestHandCases:
    def test_single_pair_three_px(self):
        # one active pair at distance 3: inside {4, 8, 16}, outside {1, 2}
        gt, pred = make_pair([3.0], query_t=2)
        m = video_metrics(*make_sets([(gt, pred)]))
        assert [m["delta"][x] for x in THRESHOLDS] == [0.0, 0.0, 1.0, 1.0, 1.0]
        assert abs(m["delta_avg"] - 0.6) < 1e-15
        assert abs(m["aj"] - 0.6) < 1e-15
        assert m["oa"] == 1.0          # pre-query frames are excluded
        assert m["mte"] == 3.0
        assert m["survival"] == 100.0

    def test_mte_odd_takes_middle(self):
        m = video_metrics(*make_sets([make_pair([1.0, 2.0, 9.0])]))
        assert m["mte"] == 2.0

    def test_mte_even_averages_central_pair(self):
        m = video_metrics(*make_sets([make_pair([1.0, 3.0])]))
        assert m["mte"] == 2.0

    def test_survival_midpoint(self):
        # first failure at frame 2 of 4 active frames
        m = video_metrics(*make_sets([make_pair([0.0, 0.0, 60.0, 0.0])]))
        assert m["survival"] == 50.0

    def test_survival_boundary_not_a_failure(self):
        m = video_metrics(*make_sets([make_pair([0.0, 50.0, 0.0])]))
        assert m["survival"] == 100.0

    def test_never_visible_gt_leaves_delta_undefined(self):
        T = 4
        gt, pred = make_pair([0.0] * T, gt_vis=np.zeros(T, bool),
                             pred_vis=np.zeros(T, bool))
        m = video_metrics(*make_sets([(gt, pred)]))
        assert all(m["delta"][x] is None for x in THRESHOLDS)
        assert m["delta_avg"] is None
        assert m["oa"] == 1.0
        # no TP/FP/FN at any threshold: Jaccard falls back to 1 and is flagged
        assert m["aj"] == 1.0
        assert m["flags"]["jaccard_empty"] == len(THRESHOLDS)

    def test_false_positive_visibility_zeroes_jaccard(self):
        gt, pred = make_pair([0.0], gt_vis=np.zeros(1, bool),
                             pred_vis=np.ones(1, bool))
        m = video_metrics(*make_sets([(gt, pred)]))
        assert m["aj"] == 0.0
        assert m["oa"] == 0.0
        assert m["delta_avg"] is None
        assert m["counts"][4.0] == (0, 1, 0)

    def test_scale_multiplies_distance_before_thresholding(self):
        pair = make_pair([3.0])
        m4 = video_metrics(*make_sets([pair]), scale=4.0)
        assert abs(m4["delta_avg"] - 0.2) < 1e-15    # 12 px: only <= 16
        assert m4["mte"] == 12.0
        m_half = video_metrics(*make_sets([pair]), scale=0.5)
        assert abs(m_half["delta_avg"] - 0.8) < 1e-15  # 1.5 px: misses 1 only

    def test_scale_applies_to_survival(self):
        pair = make_pair([30.0])
        assert video_metrics(*make_sets([pair]))["survival"] == 100.0
        assert video_metrics(*make_sets([pair]), scale=4.0)["survival"] == 0.0


class TestInvariants:
    def test_delta_and_jaccard_monotone_in_threshold(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            gt, pred = random_video(rng)
            m = video_metrics(gt, pred)
            for series in (m["delta"], m["jaccard"]):
                vals = [series[x] for x in THRESHOLDS]
                if vals[0] is None:
                    continue
                assert all(a <= b + 1e-15 for a, b in zip(vals, vals[1:]))

    def test_perfect_visibility_ties_jaccard_to_delta(self):
        # with both sides visible everywhere a miss is counted as one FP
        # and one FN, so Jaccard_x = h/(2n - h) = delta_x / (2 - delta_x)
        rng = np.random.default_rng(4)
        for _ in range(10):
            gt, pred = random_video(rng, all_visible=True)
            m = video_metrics(gt, pred)
            for x in THRESHOLDS:
                d = m["delta"][x]
                close(m["jaccard"][x], d / (2.0 - d))
                if d in (0.0, 1.0):
                    close(m["jaccard"][x], d)

    def test_track_order_invariance(self):
        rng = np.random.default_rng(5)
        gt, pred = random_video(rng, n_tracks=5)
        m = video_metrics(gt, pred)
        perm = rng.permutation(5)
        gt2 = TrackSet(tracks=[gt.tracks[i] for i in perm])
        pred2 = TrackSet(tracks=[pred.tracks[i] for i in perm])
        m2 = video_metrics(gt2, pred2)
        for k in ("delta_avg", "oa", "aj", "mte", "survival"):
            close(m[k], m2[k])

    def test_video_order_invariance(self):
        rng = np.random.default_rng(6)
        videos = [random_video(rng, protocol=True) for _ in range(4)]
        gts = [g for g, _ in videos]
        preds = [p for _, p in videos]
        r1 = evaluate_queried_first(gts, preds)
        r2 = evaluate_queried_first(gts[::-1], preds[::-1])
        for k in ("aj", "delta_avg", "oa", "mte", "survival"):
            close(getattr(r1, k), getattr(r2, k))
        assert r1.counts == r2.counts


def random_video(rng, n_tracks=None, protocol=False, all_visible=False):
    T = int(rng.integers(1, 7))
    n = int(rng.integers(1, 5)) if n_tracks is None else n_tracks
    gts, preds = [], []
    for i in range(n):
        q = int(rng.integers(0, T))
        if all_visible:
            vis = np.ones(T, dtype=bool)
            q = 0
        elif protocol:
            vis = rng.random(T) < 0.6
            vis[:q] = False
            vis[q] = True
        else:
            vis = rng.random(T) < 0.6
        gt_pts = rng.uniform(0.0, 40.0, (T, 2))
        noise = rng.exponential(2.0, (T, 2)) * rng.choice([-1.0, 1.0], (T, 2))
        noise[rng.random(T) < 0.15] *= 30.0
        pred_pts = gt_pts + noise
        # exact-threshold ties exercise the inclusive comparison
        ties = rng.random(T) < 0.1
        pred_pts[ties] = gt_pts[ties] + np.array([4.0, 0.0])
        pv = np.ones(T, dtype=bool) if all_visible else rng.random(T) < 0.6
        gts.append(TrackRecord(q, gt_pts[q], gt_pts, vis, f"t{i}"))
        preds.append(TrackRecord(q, gt_pts[q], pred_pts, pv, f"t{i}"))
    return (TrackSet(tracks=gts, video_id="v"),
            TrackSet(tracks=preds, video_id="v"))


class TestOracleFuzz:
    def test_video_metrics_matches_oracle(self):
        rng = np.random.default_rng(7)
        scales = [1.0, 0.5, 4.0, 256.0 / 64.0]
        for trial in range(300):
            gt, pred = random_video(rng)
            scale = scales[trial % len(scales)]
            mine = video_metrics(gt, pred, scale=scale)
            ref = oracle_video(gt.tracks, pred.tracks, scale=scale)
            assert_matches_oracle(mine, ref)

    def test_evaluate_matches_oracle_average_and_pool(self):
        rng = np.random.default_rng(8)
        for _ in range(60):
            videos = [random_video(rng, protocol=True)
                      for _ in range(int(rng.integers(1, 5)))]
            gts = [g for g, _ in videos]
            preds = [p for _, p in videos]
            res = evaluate_queried_first(gts, preds)
            ref = oracle_average([oracle_video(g.tracks, p.tracks)
                                  for g, p in videos])
            for k in ("aj", "delta_avg", "oa", "mte", "survival"):
                close(getattr(res, k), ref[k])
            for x in THRESHOLDS:
                close(res.delta[x], ref["delta"][x])
                close(res.jaccard[x], ref["jaccard"][x])
            pooled_ref = oracle_video([t for g in gts for t in g.tracks],
                                      [t for p in preds for t in p.tracks])
            assert_matches_oracle(res.pooled, pooled_ref)
            assert res.counts == pooled_ref["counts"]


class TestValidation:
    def test_query_must_be_first_visible(self):
        gt, _ = make_pair([0.0], query_t=1,
                          gt_vis=np.array([True, True]))
        with pytest.raises(ValueError, match="not the first visible"):
            validate_queried_first(TrackSet(tracks=[gt]))

    def test_never_visible_rejected(self):
        gt, _ = make_pair([0.0], gt_vis=np.zeros(1, bool))
        with pytest.raises(ValueError, match="never visible"):
            validate_queried_first(TrackSet(tracks=[gt]))

    def test_track_count_mismatch(self):
        g1, p1 = make_pair([0.0])
        g2, _ = make_pair([0.0])
        with pytest.raises(ValueError, match="track count"):
            video_metrics(TrackSet(tracks=[g1, g2]), TrackSet(tracks=[p1]))

    def test_frame_count_mismatch(self):
        g, _ = make_pair([0.0, 0.0])
        _, p = make_pair([0.0])
        with pytest.raises(ValueError, match="frame count"):
            video_metrics(TrackSet(tracks=[g]), TrackSet(tracks=[p]))

    def test_query_frame_mismatch(self):
        g, _ = make_pair([0.0], query_t=1)
        _, p = make_pair([0.0, 0.0], query_t=0)
        with pytest.raises(ValueError, match="query frame mismatch"):
            video_metrics(TrackSet(tracks=[g]), TrackSet(tracks=[p]))

    def test_track_id_mismatch_is_named(self):
        g, _ = make_pair([0.0], tid="track3")
        _, p = make_pair([0.0], tid="track7")
        with pytest.raises(ValueError, match="track3"):
            video_metrics(TrackSet(tracks=[g]), TrackSet(tracks=[p]))

    def test_video_count_and_id_mismatch(self):
        g, p = make_pair([0.0])
        gt = TrackSet(tracks=[g], video_id="a")
        pred = TrackSet(tracks=[p], video_id="b")
        with pytest.raises(ValueError, match="ground-truth videos"):
            evaluate_queried_first([gt, gt], [pred])
        with pytest.raises(ValueError, match="video id mismatch"):
            evaluate_queried_first([gt], [pred])
        with pytest.raises(ValueError, match="no videos"):
            evaluate_queried_first([], [])


class TestResultObject:
    def _result(self):
        rng = np.random.default_rng(9)
        videos = [random_video(rng, protocol=True) for _ in range(2)]
        return evaluate_queried_first([g for g, _ in videos],
                                      [p for _, p in videos],
                                      scale=256.0 / 64.0)

    def test_fields_and_describe(self):
        res = self._result()
        assert res.n_videos == 2
        assert len(res.per_video) == 2
        text = res.describe()
        assert "AJ" in text and "256-px equivalent" in text

    def test_serialization_round_trip(self, tmp_path):
        res = self._result()
        jp = tmp_path / "r.json"
        cp = tmp_path / "r.csv"
        res.write_json(str(jp))
        res.write_csv(str(cp))
        parsed = json.loads(jp.read_text())
        assert parsed["n_videos"] == 2
        assert abs(parsed["aj"] - res.aj) < 1e-15
        assert "delta" in cp.read_text()

    def test_native_scale_description(self):
        rng = np.random.default_rng(10)
        gt, pred = random_video(rng, protocol=True)
        res = evaluate_queried_first([gt], [pred])
        assert "native pixels" in res.describe()
