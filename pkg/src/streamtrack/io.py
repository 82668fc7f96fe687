"""File formats: binary tensor containers, JSON track files, PPM images,
run configuration, and model checkpoints.

The tensor container is a single file holding named arrays:

    magic "TRKT" | version u32 | count u32 |
    count * ( name_len u16 | name utf-8 | offset u64 ) |
    per tensor at its offset: dtype u8 | rank u8 | rank * dim u64 | payload

All integers and payloads are little-endian; payloads are row-major.
Track files are plain JSON: a header (resolution, fps, video_id,
protocol "queried_first") plus one record per track with its query and
per-frame entries sorted by frame index.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct

import numpy as np

from .model import TrackerConfig, TrackerModel
from .tracks import TrackRecord, TrackSet
from .train import TrainConfig

MAGIC = b"TRKT"
VERSION = 1

_DTYPES = {1: "<f8", 2: "<f4", 3: "<i8", 4: "u1", 5: "?"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


# ---------------------------------------------------------------------------
# tensor container
# ---------------------------------------------------------------------------

def write_tensors(path: str, tensors: dict) -> None:
    """Write named arrays to one container file (atomic replace)."""
    entries = []
    for name, arr in tensors.items():
        # asarray keeps rank-0 inputs rank-0 (ascontiguousarray would not)
        arr = np.asarray(arr, order="C")
        key = np.dtype(arr.dtype.str.replace(">", "<"))
        if key not in _CODES:
            arr = arr.astype("<f8")
            key = np.dtype("<f8")
        entries.append((name, arr.astype(key, copy=False)))

    index_size = sum(2 + len(n.encode()) + 8 for n, _ in entries)
    offset = len(MAGIC) + 4 + 4 + index_size
    blocks, index = [], []
    for name, arr in entries:
        head = struct.pack("<BB", _CODES[np.dtype(arr.dtype.str.replace(">", "<"))],
                           arr.ndim)
        dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        payload = arr.tobytes()
        index.append((name, offset))
        blocks.append(head + dims + payload)
        offset += len(blocks[-1])

    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, off in index:
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)) + enc + struct.pack("<Q", off))
        for block in blocks:
            fh.write(block)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_tensors(path: str) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    pos = 12
    index = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos: pos + nlen].decode()
        pos += nlen
        (off,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if off >= len(blob):
            raise ValueError(f"{path}: index offset for {name!r} outside file")
        index.append((name, off))

    out = {}
    for name, off in index:
        code, rank = struct.unpack_from("<BB", blob, off)
        if code not in _DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code} for {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", blob, off + 2) if rank else ()
        dt = np.dtype(_DTYPES[code])
        start = off + 2 + 8 * rank
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank \
            else dt.itemsize
        if start + n_bytes > len(blob):
            raise ValueError(f"{path}: payload of {name!r} runs past the file")
        arr = np.frombuffer(blob[start: start + n_bytes], dtype=dt)
        out[name] = arr.reshape(dims).copy()
    return out


# ---------------------------------------------------------------------------
# PPM images
# ---------------------------------------------------------------------------

def write_ppm(path: str, image: np.ndarray) -> None:
    """Write an [H, W, 3] image (floats in [0, 1] or uint8) as binary P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM image must be [H, W, 3], got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary P6 file as a uint8 [H, W, 3] array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos: pos + 1].isspace():
            pos += 1
        if blob[pos: pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos: pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1                                   # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    data = blob[pos: pos + w * h * 3]
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def frames_to_float(frames: np.ndarray) -> np.ndarray:
    """uint8 frames -> float64 in [0, 1]; float frames validated and passed."""
    arr = np.asarray(frames)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64)
    if arr.size and (arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9):
        raise ValueError("float frames must lie in [0, 1]")
    return arr


# ---------------------------------------------------------------------------
# track files
# ---------------------------------------------------------------------------

def trackset_to_json(ts: TrackSet, upto_t: int | None = None) -> dict:
    """JSON form of a track set; ``upto_t`` truncates to a frame prefix."""
    doc = {
        "resolution": [int(ts.resolution[0]), int(ts.resolution[1])],
        "fps": float(ts.fps),
        "video_id": ts.video_id,
        "protocol": "queried_first",
        "n_frames": int(ts.n_frames if upto_t is None else upto_t),
        "tracks": [],
    }
    for rec in ts.tracks:
        stop = rec.n_frames if upto_t is None else min(upto_t, rec.n_frames)
        if rec.query_t >= stop:
            continue          # a prefix cannot carry queries it has not met
        frames = [{"t": int(t), "x": float(rec.points[t, 0]),
                   "y": float(rec.points[t, 1]),
                   "visible": bool(rec.visible[t])}
                  for t in range(rec.query_t, stop)]
        doc["tracks"].append({
            "id": rec.track_id,
            "query": {"t": int(rec.query_t),
                      "x": float(rec.query_point[0]),
                      "y": float(rec.query_point[1])},
            "frames": frames,
        })
    return doc


def write_trackfile(path: str, ts: TrackSet, upto_t: int | None = None) -> None:
    """Serialize a track set as JSON, atomically replacing ``path``."""
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(trackset_to_json(ts, upto_t), fh, indent=1)
        fh.write("\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def trackset_from_json(doc: dict, ground_truth: bool = False,
                       origin: str = "trackfile") -> TrackSet:
    for key in ("resolution", "protocol", "tracks"):
        if key not in doc:
            raise ValueError(f"{origin}: missing {key!r}")
    if doc["protocol"] != "queried_first":
        raise ValueError(f"{origin}: unsupported protocol {doc['protocol']!r}")
    res = tuple(int(v) for v in doc["resolution"])
    if len(res) != 2 or min(res) <= 0:
        raise ValueError(f"{origin}: resolution must be [height, width]")

    max_t = -1
    for tr in doc["tracks"]:
        ts_list = [f["t"] for f in tr.get("frames", [])]
        if any(b <= a for a, b in zip(ts_list, ts_list[1:])):
            raise ValueError(f"{origin}: track {tr.get('id')!r} frames "
                             "not sorted by t")
        max_t = max([max_t, tr["query"]["t"]] + ts_list)
    n_frames = int(doc.get("n_frames", max_t + 1))
    if n_frames <= max_t:
        raise ValueError(f"{origin}: header frame count {n_frames} is "
                         f"smaller than the largest entry t={max_t}")

    records = []
    for tr in doc["tracks"]:
        q = tr["query"]
        qt = int(q["t"])
        qp = np.array([float(q["x"]), float(q["y"])])
        points = np.tile(qp, (n_frames, 1))
        visible = np.zeros(n_frames, dtype=bool)
        seen_query = False
        for f in tr.get("frames", []):
            t = int(f["t"])
            points[t] = (float(f["x"]), float(f["y"]))
            visible[t] = bool(f["visible"])
            if t == qt:
                seen_query = True
                if ground_truth and not visible[t]:
                    raise ValueError(f"{origin}: track {tr.get('id')!r} is "
                                     "not visible at its query frame")
        if ground_truth and not seen_query:
            raise ValueError(f"{origin}: track {tr.get('id')!r} has no entry "
                             "for its query frame")
        records.append(TrackRecord(qt, qp, points, visible,
                                   str(tr.get("id", ""))))
    return TrackSet(tracks=records, resolution=res,
                    fps=float(doc.get("fps", 12.0)),
                    video_id=str(doc.get("video_id", "")))


def read_trackfile(path: str, ground_truth: bool = False) -> TrackSet:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON ({e})") from e
    return trackset_from_json(doc, ground_truth, origin=path)


def align_by_id(gt: TrackSet, pred: TrackSet) -> TrackSet:
    """Reorder predicted tracks to the ground-truth order, matching by id."""
    by_id = {rec.track_id: rec for rec in pred.tracks}
    if len(by_id) != len(pred.tracks):
        raise ValueError("predicted track ids are not unique")
    ordered = []
    for rec in gt.tracks:
        if rec.track_id not in by_id:
            raise ValueError(f"track id {rec.track_id!r} missing from "
                             "predictions")
        ordered.append(by_id[rec.track_id])
    return TrackSet(tracks=ordered, resolution=pred.resolution,
                    fps=pred.fps, video_id=pred.video_id)


def rescale_trackset(ts: TrackSet, resolution: tuple[int, int]) -> TrackSet:
    """Scale point coordinates to a new (height, width) resolution."""
    sy = resolution[0] / ts.resolution[0]
    sx = resolution[1] / ts.resolution[1]
    factor = np.array([sx, sy])
    recs = [TrackRecord(r.query_t, r.query_point * factor, r.points * factor,
                        r.visible.copy(), r.track_id) for r in ts.tracks]
    return TrackSet(tracks=recs, resolution=tuple(resolution), fps=ts.fps,
                    video_id=ts.video_id)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_MODEL_KEYS = {f.name for f in dataclasses.fields(TrackerConfig)}
_TRAIN_KEYS = {"lambda", "lr", "warmup", "steps", "weight_decay", "log_every",
               "uncertainty_radius", "seed", "clips", "clip_frames",
               "queries", "occluders", "sprites", "appearance_drift"}
_EVAL_KEYS = {"memory_size", "thresholds", "rescale"}
_PATH_KEYS = {"checkpoint", "out_dir", "curve"}


@dataclasses.dataclass
class RunConfig:
    """Everything a full run needs, loadable from one JSON file.

    Sections and defaults (unknown keys anywhere are rejected):

    * "model": any TrackerConfig field (image_size 64, stride 4, width 64,
      heads 4, points 4, top_k 3, temperature 0.05, memory_size 12,
      vis_threshold 0.5, ...);
    * "training": lambda 1.0, lr 1e-3, warmup 20, steps 200, weight_decay
      1e-4, log_every 10, uncertainty_radius null (8 px at 256-px scale),
      seed 0, clips 8, clip_frames 24, queries 8, occluders 1, sprites 3,
      appearance_drift 0.0;
    * "eval": memory_size null (trained size), thresholds [1,2,4,8,16],
      rescale false;
    * "paths": checkpoint "", out_dir "", curve "".
    """

    model: TrackerConfig = dataclasses.field(default_factory=TrackerConfig)
    training: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    seed: int = 0
    clips: int = 8
    clip_frames: int = 24
    queries: int = 8
    occluders: int = 1
    sprites: int = 3
    appearance_drift: float = 0.0
    eval_memory_size: int | None = None
    thresholds: tuple = (1.0, 2.0, 4.0, 8.0, 16.0)
    rescale: bool = False
    checkpoint: str = ""
    out_dir: str = ""
    curve: str = ""


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ValueError(f"unknown key {sorted(unknown)[0]!r} in {where} "
                         "section")


def parse_run_config(doc: dict) -> RunConfig:
    _reject_unknown(doc, {"model", "training", "eval", "paths"}, "top-level")
    model_doc = dict(doc.get("model", {}))
    train_doc = dict(doc.get("training", {}))
    eval_doc = dict(doc.get("eval", {}))
    path_doc = dict(doc.get("paths", {}))
    _reject_unknown(model_doc, _MODEL_KEYS, "model")
    _reject_unknown(train_doc, _TRAIN_KEYS, "training")
    _reject_unknown(eval_doc, _EVAL_KEYS, "eval")
    _reject_unknown(path_doc, _PATH_KEYS, "paths")

    cfg = RunConfig()
    cfg.model = TrackerConfig(**model_doc)
    tc = {k: train_doc[k] for k in
          ("lr", "warmup", "steps", "weight_decay", "log_every",
           "uncertainty_radius") if k in train_doc}
    if "lambda" in train_doc:
        tc["lam"] = train_doc["lambda"]
    cfg.training = TrainConfig(**tc)
    cfg.seed = int(train_doc.get("seed", cfg.model.seed))
    cfg.clips = int(train_doc.get("clips", 8))
    cfg.clip_frames = int(train_doc.get("clip_frames", 24))
    cfg.queries = int(train_doc.get("queries", 8))
    cfg.occluders = int(train_doc.get("occluders", 1))
    cfg.sprites = int(train_doc.get("sprites", 3))
    cfg.appearance_drift = float(train_doc.get("appearance_drift", 0.0))
    if eval_doc.get("memory_size") is not None:
        cfg.eval_memory_size = int(eval_doc["memory_size"])
    if "thresholds" in eval_doc:
        cfg.thresholds = tuple(float(x) for x in eval_doc["thresholds"])
    cfg.rescale = bool(eval_doc.get("rescale", False))
    cfg.checkpoint = str(path_doc.get("checkpoint", ""))
    cfg.out_dir = str(path_doc.get("out_dir", ""))
    cfg.curve = str(path_doc.get("curve", ""))
    return cfg


def read_run_config(path: str) -> RunConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return parse_run_config(doc)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, model: TrackerModel) -> None:
    tensors = {"param/" + name: p.data
               for name, p in model.named_parameters()}
    cfg = json.dumps(model.config.to_dict()).encode()
    tensors["__config__"] = np.frombuffer(cfg, dtype=np.uint8)
    write_tensors(path, tensors)


def load_checkpoint(path: str) -> TrackerModel:
    tensors = read_tensors(path)
    if "__config__" not in tensors:
        raise ValueError(f"{path}: not a checkpoint (no config entry)")
    cfg_doc = json.loads(tensors.pop("__config__").tobytes().decode())
    model = TrackerModel(TrackerConfig(**cfg_doc))
    stored = {n[len("param/"):] for n in tensors}
    current = {name for name, _ in model.named_parameters()}
    if stored != current:
        missing = sorted(current - stored)[:3]
        extra = sorted(stored - current)[:3]
        raise ValueError(f"{path}: parameter names do not match the "
                         f"configuration (missing {missing}, extra {extra})")
    for name, p in model.named_parameters():
        arr = tensors["param/" + name]
        if arr.shape != p.data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}: "
                             f"{arr.shape} vs {p.data.shape}")
        p.data[...] = arr
    return model
