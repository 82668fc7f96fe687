"""Command line front end.

Subcommands cover the full loop on synthetic data: ``synth`` renders
clips to disk, ``track`` runs the online tracker over stored frames and
streams its predictions to a track file after every frame, ``eval``
scores predictions against ground truth, ``train`` fits a tracker from a
run-configuration file, ``probe`` measures correlation-map tracking with
a frozen feature extractor, and ``selftest`` re-checks the numerical
core on the installed machine.

Exit codes: 0 success, 1 bad usage, 2 bad data or runtime failure,
3 selftest failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from .encoder import Encoder, EncoderConfig
from .io import (RunConfig, align_by_id, frames_to_float, load_checkpoint,
                 read_ppm, read_run_config, read_tensors, read_trackfile,
                 rescale_trackset, save_checkpoint, write_ppm, write_tensors,
                 write_trackfile)
from .memory import MemoryBuffer
from .metrics import THRESHOLDS, evaluate_queried_first, video_metrics
from .model import OnlineSession, QuerySpec, TrackerConfig, TrackerModel
from .numerics import Tape, Tensor, ops
from .numerics.gradcheck import numeric_grad
from .probe import NOMINAL_GRID, FeatureVolume, ProbeConfig, run_benchmark, \
    zero_shot_track
from .synth import SceneConfig, generate_clip
from .tracks import TrackRecord, TrackSet
from .train import train, write_loss_curve


class UsageError(Exception):
    """Bad flag combinations detected after parsing."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; this tool reserves 2 for
    # data errors, so usage problems are remapped to exit 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _scene(size: int, frames: int, queries: int, sprites: int = 3,
           occluders: int = 1, drift: float = 0.0) -> SceneConfig:
    lo, hi = 12, 18
    if hi >= size:
        lo, hi = max(2, size // 4), max(3, size // 2 - 1)
    olo, ohi = 10, 22
    if ohi >= size:
        olo, ohi = max(2, size // 4), max(3, size // 2 - 1)
    return SceneConfig(size=size, n_frames=frames, n_sprites=sprites,
                       n_occluders=occluders, sprite_size=(lo, hi),
                       occluder_size=(olo, ohi), appearance_drift=drift,
                       max_queries=queries)


def _load_frames(path: str) -> np.ndarray:
    """[T, H, W, 3] float frames from a .ppm directory or a tensor file."""
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".ppm"))
        if not names:
            raise ValueError(f"no .ppm frames found in {path}")
        imgs = []
        for t, name in enumerate(names):
            try:
                imgs.append(read_ppm(os.path.join(path, name)))
            except (OSError, ValueError) as exc:
                raise ValueError(f"frame {t} ({name}): {exc}") from exc
        arr = np.stack(imgs)
    else:
        data = read_tensors(path)
        if "frames" not in data:
            raise ValueError(f"{path} has no 'frames' tensor")
        arr = data["frames"]
    arr = frames_to_float(arr)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"frames must be [T, H, W, 3], got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _scene(args.size, args.frames, args.queries, args.sprites,
                 args.occluders, args.drift)
    os.makedirs(args.out_dir, exist_ok=True)
    for i in range(args.clips):
        frames, tracks = generate_clip(seed=args.seed + i, config=cfg)
        name = f"clip{i:03d}"
        tracks.video_id = tracks.video_id or name
        if args.format in ("container", "both"):
            u8 = np.round(frames * 255.0).astype(np.uint8)
            write_tensors(os.path.join(args.out_dir, name + ".trkt"),
                          {"frames": u8})
        if args.format in ("ppm", "both"):
            frame_dir = os.path.join(args.out_dir, name)
            os.makedirs(frame_dir, exist_ok=True)
            for t in range(frames.shape[0]):
                write_ppm(os.path.join(frame_dir, f"frame{t:04d}.ppm"),
                          frames[t])
        write_trackfile(os.path.join(args.out_dir, name + ".gt.json"), tracks)
        print(f"{name}: {frames.shape[0]} frames of {args.size}x{args.size}, "
              f"{tracks.n_tracks} tracks")
    return 0


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

def cmd_track(args) -> int:
    frames = _load_frames(args.frames)
    t_total, h, w = frames.shape[0], frames.shape[1], frames.shape[2]
    if h != w:
        raise ValueError(f"frames must be square, got {h}x{w}")
    queries = read_trackfile(args.queries)
    for rec in queries.tracks:
        if rec.query_t >= t_total:
            raise ValueError(f"track {rec.track_id!r} is queried at frame "
                             f"{rec.query_t} but only {t_total} frames "
                             "were provided")

    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    elif args.config:
        model = TrackerModel(read_run_config(args.config).model)
    else:
        model = TrackerModel(TrackerConfig(image_size=h, seed=args.seed))
    if model.config.image_size != h:
        raise ValueError(f"frames are {h}x{w} but the model expects "
                         f"{model.config.image_size}x"
                         f"{model.config.image_size}")
    if args.memory_size is not None:
        model.extend_memory(args.memory_size)

    starts, points = queries.query_spec()
    session = OnlineSession(model, QuerySpec(starts, points))
    n = queries.n_tracks
    pts = np.zeros((n, t_total, 2))
    for j, rec in enumerate(queries.tracks):
        pts[j, :] = rec.query_point
    vis = np.zeros((n, t_total), dtype=bool)
    thr = model.config.vis_threshold

    for t in range(t_total):
        pred = session.frame_step(frames[t], t=t)
        if pred.n_active:
            pts[pred.active, t] = pred.points_np()
            vis[pred.active, t] = pred.visible_np(thr)
        out = TrackSet(
            tracks=[TrackRecord(rec.query_t, rec.query_point, pts[j],
                                vis[j], rec.track_id)
                    for j, rec in enumerate(queries.tracks)],
            resolution=(h, w), fps=queries.fps,
            video_id=queries.video_id)
        # rewritten after every frame so the file on disk is always a
        # complete, valid prefix of the video
        write_trackfile(args.out, out, upto_t=t + 1)
    print(f"tracked {n} queries over {t_total} frames -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    if len(args.gt) != len(args.pred):
        raise ValueError(f"{len(args.gt)} ground-truth files but "
                         f"{len(args.pred)} prediction files")
    gt_sets, pred_sets = [], []
    for gpath, ppath in zip(args.gt, args.pred):
        gt = read_trackfile(gpath, ground_truth=True)
        pred = read_trackfile(ppath)
        if pred.resolution != gt.resolution:
            if args.rescale:
                pred = rescale_trackset(pred, gt.resolution)
            else:
                raise ValueError(
                    f"{ppath}: resolution {pred.resolution} does not match "
                    f"ground truth {gt.resolution} (pass --rescale to map "
                    "predictions onto the ground-truth resolution)")
        gt_sets.append(gt)
        pred_sets.append(align_by_id(gt, pred))

    heights = {ts.resolution[0] for ts in gt_sets}
    reports = []
    if args.scale in ("native", "both"):
        reports.append(("native", 1.0))
    if args.scale in ("256", "both"):
        if len(heights) != 1:
            raise ValueError("videos differ in resolution; the 256-px "
                             "equivalent scale needs a single height")
        reports.append(("256eq", 256.0 / heights.pop()))

    for suffix, scale in reports:
        result = evaluate_queried_first(gt_sets, pred_sets, scale=scale)
        print(result.describe())
        if args.out_prefix:
            result.write_json(f"{args.out_prefix}_{suffix}.json")
            result.write_csv(f"{args.out_prefix}_{suffix}.csv")
            print(f"wrote {args.out_prefix}_{suffix}.json and .csv")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = read_run_config(args.config) if args.config else RunConfig()
    if args.steps is not None:
        cfg.training.steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    scene = _scene(cfg.model.image_size, cfg.clip_frames, cfg.queries,
                   cfg.sprites, cfg.occluders, cfg.appearance_drift)
    clips = [generate_clip(seed=cfg.seed + i, config=scene)
             for i in range(cfg.clips)]
    model = TrackerModel(cfg.model)
    n_params = sum(p.data.size for p in model.parameters())
    print(f"training a {n_params}-parameter model on {len(clips)} clips "
          f"for {cfg.training.steps} steps")
    history = train(model, clips, cfg.training, log=print)
    save_checkpoint(args.out, model)
    print(f"final loss {history[-1].loss:.4f}; checkpoint -> {args.out}")
    curve = args.curve or cfg.curve
    if curve:
        write_loss_curve(curve, history)
        print(f"loss curve -> {curve}")
    return 0


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------

def _probe_external(args) -> dict:
    if args.mode != "zero_shot":
        raise UsageError("--features supplies a precomputed volume, which "
                         "supports --mode zero_shot only")
    if not args.gt:
        raise UsageError("--features requires --gt for queries and scoring")
    data = read_tensors(args.features)
    for key in ("feats", "image_size"):
        if key not in data:
            raise ValueError(f"{args.features} has no {key!r} tensor")
    size = int(np.asarray(data["image_size"]).reshape(-1)[0])
    vol = FeatureVolume(np.asarray(data["feats"], dtype=np.float64), size,
                        source="file")
    vol = vol.resample(NOMINAL_GRID)
    gt = read_trackfile(args.gt, ground_truth=True)
    if gt.n_frames != vol.n_frames:
        raise ValueError(f"{args.gt} covers {gt.n_frames} frames but the "
                         f"volume has {vol.n_frames}")
    recs = []
    for rec in gt.tracks:
        points = zero_shot_track(vol, (rec.query_t, rec.query_point))
        recs.append(TrackRecord(rec.query_t, rec.query_point, points,
                                rec.visible.copy(), rec.track_id))
    pred = TrackSet(tracks=recs, resolution=gt.resolution, fps=gt.fps,
                    video_id=gt.video_id)
    m = video_metrics(gt, pred)
    return {"mode": "zero_shot", "delta_avg": m["delta_avg"],
            "per_video": [m["delta_avg"]], "head_params": 0,
            "lora_params": 0, "losses": []}


def cmd_probe(args) -> int:
    if args.features:
        report = _probe_external(args)
    else:
        rng = np.random.default_rng(args.seed)
        encoder = Encoder(EncoderConfig(image_size=args.size,
                                        width=args.width), rng)
        scene = _scene(args.size, args.frames, args.queries)
        train_clips = [generate_clip(seed=args.seed + i, config=scene)
                       for i in range(args.train_clips)]
        eval_clips = [generate_clip(seed=args.seed + 1000 + i, config=scene)
                      for i in range(args.eval_clips)]
        cfg = ProbeConfig(steps=args.steps, batch=args.batch, rank=args.rank,
                          seed=args.seed)
        report = run_benchmark(train_clips, eval_clips, encoder, args.mode,
                               cfg)
    d = report["delta_avg"]
    shown = "undefined (no visible ground truth)" if d is None else f"{d:.4f}"
    print(f"mode {report['mode']}: delta_avg {shown}")
    print(f"trainable head params {report['head_params']}, "
          f"adapter params {report['lora_params']}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
        print(f"report -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def _gradient_cases(rng: np.random.Generator) -> dict:
    """Named scalar-valued closures over the differentiable core."""
    def w(*shape):
        return rng.normal(size=shape)

    mix25 = w(2, 5)
    mix43 = w(4, 3)
    mix32 = w(3, 2)
    mix2 = w(2)
    mix3 = w(3)
    mix53 = w(5, 3)
    mix223 = w(2, 2, 3)
    mask = rng.random((2, 5)) < 0.7
    mask[:, 0] = True
    pts = np.array([[1.3, 0.7], [2.6, 1.2], [0.2, 2.8]])
    targets = np.array([1, 3, 0])
    y01 = np.array([1.0, 0.0, 1.0, 1.0])

    cases = {
        "matmul": (lambda a, b: ops.sum_(ops.tanh(ops.matmul(a, b))),
                   [w(3, 4), w(4, 2)]),
        "linear": (lambda x, m, b: ops.sum_(ops.tanh(ops.linear(x, m, b))),
                   [w(3, 4), w(4, 2), w(2)]),
        "softmax": (lambda x: ops.sum_(ops.mul(ops.softmax(x, axis=-1),
                                               mix25)), [w(2, 5)]),
        "masked_softmax": (lambda x: ops.sum_(
            ops.mul(ops.masked_softmax(x, mask, axis=-1), mix25)),
            [w(2, 5)]),
        "layer_norm": (lambda x, g, b: ops.sum_(
            ops.mul(ops.layer_norm(x, g, b), mix43)),
            [w(4, 3), 1.0 + 0.1 * w(3), 0.1 * w(3)]),
        "bilinear_sample": (lambda f: ops.sum_(
            ops.mul(ops.bilinear_sample(f, pts), mix32)), [w(4, 4, 2)]),
        "conv2d": (lambda x, k, b: ops.sum_(
            ops.tanh(ops.conv2d(x, k, b, stride=1, pad=1))),
            [w(5, 5, 2), w(3, 3, 2, 2), w(2)]),
        "soft_argmax": (lambda x: ops.sum_(ops.mul(ops.soft_argmax(
            ops.reshape(ops.softmax(ops.reshape(x, (16,)), axis=-1),
                        (4, 4))), mix2)), [w(4, 4)]),
        "cosine_rows": (lambda a, b: ops.sum_(
            ops.mul(ops.cosine_rows(a, b), mix3)),
            [w(3, 4) + 2.0, w(3, 4) + 2.0]),
        "interp_rows_linear": (lambda e: ops.sum_(
            ops.mul(ops.interp_rows_linear(e, 5), mix53)), [w(3, 3)]),
        "cross_entropy_rows": (lambda x: ops.sum_(ops.cross_entropy_rows(
            ops.softmax(x, axis=-1), targets)), [w(3, 4)]),
        "binary_cross_entropy": (lambda x: ops.mean(ops.binary_cross_entropy(
            ops.sigmoid(x), y01)), [w(4)]),
        "huber": (lambda a, b: ops.sum_(ops.huber(a, b, 1.0)),
                  [w(3, 2), w(3, 2) + 0.3]),
        "avg_pool2": (lambda x: ops.sum_(ops.mul(ops.avg_pool2(x),
                                                 mix223)), [w(5, 4, 3)]),
    }
    return cases


def _run_gradient_case(fn, arrays, corrupt: bool, eps: float) -> float:
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
               for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        tape.backward(out)
    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if corrupt:
            analytic = analytic + 0.05
        numeric = numeric_grad(fn, tensors, i, eps=eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        rel = np.abs(analytic - numeric) / denom
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst


def _selftest_gradient(quick: bool, corrupt_op: str | None) -> str:
    rng = np.random.default_rng(7)
    cases = _gradient_cases(rng)
    if corrupt_op is not None and corrupt_op not in cases:
        raise ValueError(f"unknown op {corrupt_op!r}; known: "
                         + ", ".join(sorted(cases)))
    if quick:
        keep = ("matmul", "softmax", "layer_norm", "bilinear_sample",
                "conv2d", "binary_cross_entropy")
        cases = {k: v for k, v in cases.items()
                 if k in keep or k == corrupt_op}
    tol, eps = 1e-3, 1e-4
    worst_overall = 0.0
    for name, (fn, arrays) in cases.items():
        worst = _run_gradient_case(fn, arrays, corrupt_op == name, eps)
        if worst > tol:
            raise AssertionError(f"{name}: rel error {worst:.2e} > {tol:.0e}")
        worst_overall = max(worst_overall, worst)
    return f"{len(cases)} ops, worst rel error {worst_overall:.2e}"


def _selftest_fifo(quick: bool) -> str:
    rng = np.random.default_rng(11)
    rounds = 40 if quick else 200
    d = 3
    for _ in range(rounds):
        cap = int(rng.integers(1, 6))
        buf = MemoryBuffer(cap)
        n = int(rng.integers(1, 5))
        starts = np.sort(rng.integers(0, 6, size=n))
        written: list[tuple[np.ndarray, np.ndarray]] = []
        for t in range(int(rng.integers(1, 13))):
            active = np.flatnonzero(starts <= t)
            if active.size == 0:
                continue
            rows = rng.normal(size=(active.size, d))
            buf.write(Tensor(rows), active)
            written.append((rows, active))
        kept = written[-cap:]
        if buf.n_windows != len(kept):
            raise AssertionError(f"{buf.n_windows} windows kept, expected "
                                 f"{len(kept)}")
        for j in range(n):
            want = [rows[list(act).index(j)] for rows, act in kept
                    if j in act]
            got = buf.entries_for(j)
            if len(got) != len(want) or any(
                    not np.array_equal(a, b) for a, b in zip(got, want)):
                raise AssertionError(f"query {j}: stored history diverges "
                                     "from the slicing reference")
        if kept:
            idx = np.arange(n)
            tokens, mask = buf.read(idx)
            counts = buf.counts(idx)
            for j in range(n):
                present = np.array([j in act for _, act in kept])
                if not np.array_equal(mask[j], present):
                    raise AssertionError(f"query {j}: mask mismatch")
                if counts[j] != present.sum():
                    raise AssertionError(f"query {j}: count mismatch")
    return f"{rounds} randomized write sequences"


def _tiny_tracker(memory_size: int = 3) -> TrackerModel:
    return TrackerModel(TrackerConfig(
        image_size=16, stride=4, width=8, heads=2, points=2, ffn_mult=2,
        decoder_blocks=1, res_blocks=1, encoder_attn_layers=1, top_k=2,
        memory_size=memory_size, seed=3))


def _tiny_clip(n_frames: int = 8, seed: int = 5):
    cfg = SceneConfig(size=16, n_frames=n_frames, n_sprites=1,
                      n_occluders=0, sprite_size=(6, 8), max_queries=3)
    return generate_clip(seed=seed, config=cfg)


def _run_session(model: TrackerModel, frames, tracks, upto: int | None = None):
    starts, points = tracks.query_spec()
    session = OnlineSession(model, QuerySpec(starts, points))
    stop = frames.shape[0] if upto is None else upto
    out = []
    for t in range(stop):
        pred = session.frame_step(frames[t], t=t)
        out.append((pred.points_np().tobytes(),
                    pred.visibility.numpy().tobytes()))
    return out


def _selftest_ime(quick: bool) -> str:
    emb = np.arange(12, dtype=np.float64).reshape(4, 3)
    same = ops.interp_rows_linear(Tensor(emb), 4).numpy()
    if not np.array_equal(same, emb):
        raise AssertionError("resampling to the same length must copy rows")
    up = ops.interp_rows_linear(Tensor(emb[:2]), 3).numpy()
    if not (np.array_equal(up[0], emb[0]) and np.array_equal(up[2], emb[1])):
        raise AssertionError("endpoint rows must copy bit-exactly")
    if not np.allclose(up[1], 0.5 * (emb[0] + emb[1]), rtol=0, atol=1e-15):
        raise AssertionError("midpoint row must average its neighbours")

    frames, tracks = _tiny_clip(n_frames=4 if quick else 6)
    model = _tiny_tracker(memory_size=3)
    before = _run_session(model, frames, tracks)
    model.extend_memory(3)
    after = _run_session(model, frames, tracks)
    if before != after:
        raise AssertionError("extending memory to its trained size changed "
                             "predictions")
    return "identity resize is bit-exact"


def _selftest_causality(quick: bool) -> str:
    n_frames = 5 if quick else 8
    frames, tracks = _tiny_clip(n_frames=n_frames)
    model = _tiny_tracker()
    full = _run_session(model, frames, tracks)
    cut = n_frames // 2
    prefix = _run_session(model, frames, tracks, upto=cut)
    if full[:cut] != prefix:
        raise AssertionError(f"prefix of {cut} frames is not bit-identical "
                             "to the full run")
    return f"prefix of {cut}/{n_frames} frames is bit-identical"


def _reference_metrics(gt: TrackSet, pred: TrackSet, thresholds,
                       scale: float, fail_at: float) -> dict:
    """Slow per-frame rebuild of every score, for cross-checking."""
    gvs, pvs, dists, per_track = [], [], [], []
    for g, p in zip(gt.tracks, pred.tracks):
        track_d = []
        for t in range(g.n_frames):
            if t < g.query_t:
                continue
            d = math.hypot(p.points[t, 0] - g.points[t, 0],
                           p.points[t, 1] - g.points[t, 1]) * scale
            gvs.append(bool(g.visible[t]))
            pvs.append(bool(p.visible[t]))
            dists.append(d)
            track_d.append(d)
        per_track.append(track_d)

    n_vis = sum(gvs)
    delta = {}
    for x in thresholds:
        if n_vis:
            delta[x] = sum(1 for g_, d in zip(gvs, dists)
                           if g_ and d <= x) / n_vis
        else:
            delta[x] = None
    defined = [v for v in delta.values() if v is not None]
    jac, counts = {}, {}
    for x in thresholds:
        tp = sum(1 for g_, p_, d in zip(gvs, pvs, dists)
                 if g_ and p_ and d <= x)
        fp = sum(1 for g_, p_, d in zip(gvs, pvs, dists)
                 if p_ and not (g_ and d <= x))
        fn = sum(1 for g_, p_, d in zip(gvs, pvs, dists)
                 if g_ and not (p_ and d <= x))
        counts[x] = (tp, fp, fn)
        jac[x] = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    rates = []
    for track_d in per_track:
        ok = len(track_d)
        for i, d in enumerate(track_d):
            if d > fail_at:
                ok = i
                break
        rates.append(ok / len(track_d))
    return {
        "delta": delta,
        "delta_avg": sum(defined) / len(defined) if defined else None,
        "oa": sum(1 for a, b in zip(gvs, pvs) if a == b) / len(gvs),
        "jaccard": jac,
        "counts": counts,
        "aj": sum(jac.values()) / len(thresholds),
        "mte": float(np.median(dists)),
        "survival": 100.0 * sum(rates) / len(rates),
    }


def _random_eval_pair(rng: np.random.Generator):
    t_total = int(rng.integers(2, 8))
    n = int(rng.integers(1, 4))
    gt_recs, pr_recs = [], []
    for j in range(n):
        qt = int(rng.integers(0, t_total))
        gpts = rng.uniform(0, 64, size=(t_total, 2))
        gvis = rng.random(t_total) < 0.8
        gvis[:qt] = False
        gvis[qt] = True
        ppts = gpts + rng.normal(0, 3, size=(t_total, 2))
        if rng.random() < 0.5:
            # exact tie on a threshold: must count as within
            ppts[qt] = gpts[qt] + np.array([4.0, 0.0])
        pvis = rng.random(t_total) < 0.8
        gt_recs.append(TrackRecord(qt, gpts[qt], gpts, gvis, f"t{j}"))
        pr_recs.append(TrackRecord(qt, gpts[qt], ppts, pvis, f"t{j}"))
    return (TrackSet(gt_recs, (64, 64), video_id="v"),
            TrackSet(pr_recs, (64, 64), video_id="v"))


def _selftest_metrics(quick: bool) -> str:
    rng = np.random.default_rng(23)
    rounds = 15 if quick else 60
    scales = [1.0, 0.5, 4.0]
    for i in range(rounds):
        gt, pred = _random_eval_pair(rng)
        scale = scales[i % len(scales)]
        got = video_metrics(gt, pred, scale=scale)
        want = _reference_metrics(gt, pred, THRESHOLDS, scale, 50.0)
        for key in ("delta_avg", "oa", "aj", "mte", "survival"):
            if not math.isclose(got[key], want[key], rel_tol=0,
                                abs_tol=1e-12):
                raise AssertionError(f"{key}: {got[key]} vs reference "
                                     f"{want[key]} (scale {scale})")
        for x in THRESHOLDS:
            if got["counts"][x] != want["counts"][x]:
                raise AssertionError(f"counts at {x}px: {got['counts'][x]} "
                                     f"vs reference {want['counts'][x]}")
            for field in ("delta", "jaccard"):
                a, b = got[field][x], want[field][x]
                if (a is None) != (b is None) or (
                        a is not None and abs(a - b) > 1e-12):
                    raise AssertionError(f"{field} at {x}px: {a} vs "
                                         f"reference {b}")
    return f"{rounds} randomized instances match the slow reference"


_SUITES = (
    ("gradient", _selftest_gradient, 120.0),
    ("fifo", _selftest_fifo, 30.0),
    ("ime", _selftest_ime, 60.0),
    ("causality", _selftest_causality, 60.0),
    ("metrics-fuzz", _selftest_metrics, 30.0),
)


def cmd_selftest(args) -> int:
    failures = []
    t_start = time.perf_counter()
    for name, suite, budget in _SUITES:
        if name != "gradient" and args.corrupt_op:
            continue
        t0 = time.perf_counter()
        try:
            if name == "gradient":
                detail = suite(args.quick, args.corrupt_op)
            else:
                detail = suite(args.quick)
            ok = True
        except Exception as exc:  # keep running the remaining suites
            detail = str(exc)
            ok = False
        dt = time.perf_counter() - t0
        over = "" if dt <= budget else " OVER BUDGET"
        print(f"{name}: {'PASS' if ok else 'FAIL'} "
              f"({dt:.1f}s of {budget:.0f}s budget{over}) - {detail}")
        if not ok or dt > budget:
            failures.append(name)
    total = time.perf_counter() - t_start
    if failures:
        print(f"selftest: FAIL ({', '.join(failures)}; {total:.1f}s)")
        return 3
    print(f"selftest: PASS ({total:.1f}s)")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="streamtrack",
                     description="online point tracking on synthetic video")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="render synthetic clips to disk")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--clips", type=int, default=4)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--queries", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sprites", type=int, default=3)
    p.add_argument("--occluders", type=int, default=1)
    p.add_argument("--drift", type=float, default=0.0)
    p.add_argument("--format", choices=("ppm", "container", "both"),
                   default="both")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("track", help="run the tracker over stored frames")
    p.add_argument("--frames", required=True,
                   help="directory of .ppm files or a .trkt tensor file")
    p.add_argument("--queries", required=True,
                   help="track file supplying the query points")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--config", help="run configuration for a fresh model")
    p.add_argument("--memory-size", type=int, default=None,
                   help="widen the memory windows at inference time")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--out-prefix")
    p.add_argument("--rescale", action="store_true",
                   help="map predictions onto the ground-truth resolution")
    p.add_argument("--scale", choices=("native", "256", "both"),
                   default="both")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="fit a tracker on synthetic clips")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curve", help="CSV loss curve path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe",
                       help="correlation tracking with a frozen extractor")
    p.add_argument("--mode", choices=("zero_shot", "probe", "adapt"),
                   default="zero_shot")
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--train-clips", type=int, default=2)
    p.add_argument("--eval-clips", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--queries", type=int, default=4)
    p.add_argument("--steps", type=int, default=60)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--features",
                   help="precomputed volume ('feats' and 'image_size' "
                        "tensors) scored instead of the toy extractor")
    p.add_argument("--gt", help="track file with queries for --features")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("selftest", help="re-check the numerical core")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
