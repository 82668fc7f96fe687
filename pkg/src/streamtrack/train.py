"""Target construction, the tracking loss, AdamW, and the clip-unrolled loop.

The loss for one frame combines patch classification (both similarity
maps), sub-patch offsets, visibility, and two uncertainty terms.
Classification and offset terms are masked by ground-truth visibility;
the rest are supervised on every active query. Frame losses are averaged
over active queries and summed over the clip, and gradients flow through
the entire unroll, including everything written to memory along the way.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import OnlineSession, Prediction, QuerySpec, TrackerModel
from .numerics import Tape, Tensor, ops
from .tracks import TrackSet


def uncertainty_radius(image_size: int) -> float:
    """Error threshold for the uncertainty targets: 8 px at 256-px scale."""
    return 8.0 * image_size / 256.0


@dataclass
class Targets:
    c_patch: np.ndarray          # [A] flat patch index containing the gt point
    offsets: np.ndarray          # [A, 2] gt point minus its patch center
    visible: np.ndarray          # [A] float 0/1
    uncertain: np.ndarray        # [A] float 0/1
    uncertain_top: np.ndarray    # [A, k] float 0/1


def build_targets(points_gt: np.ndarray, visible_gt: np.ndarray,
                  pred: Prediction, stride: int, grid: int,
                  delta_u: float) -> Targets:
    points_gt = np.asarray(points_gt, dtype=np.float64)
    visible_gt = np.asarray(visible_gt, dtype=bool)
    ix = np.clip(np.floor(points_gt[:, 0] / stride), 0, grid - 1).astype(np.intp)
    iy = np.clip(np.floor(points_gt[:, 1] / stride), 0, grid - 1).astype(np.intp)
    centers = np.stack([(ix + 0.5) * stride, (iy + 0.5) * stride], axis=1)
    err = np.linalg.norm(pred.points.numpy() - points_gt, axis=1)
    top_err = np.linalg.norm(pred.top_centers - points_gt[:, None, :], axis=2)
    return Targets(
        c_patch=iy * grid + ix,
        offsets=points_gt - centers,
        visible=visible_gt.astype(np.float64),
        uncertain=((err > delta_u) | ~visible_gt).astype(np.float64),
        uncertain_top=((top_err > delta_u) | ~visible_gt[:, None]).astype(np.float64),
    )


def total_loss(pred: Prediction, tgt: Targets, lam: float = 1.0):
    """Scalar frame loss (mean over active queries) plus per-term floats."""
    if tgt.c_patch.size == 0:
        return Tensor(np.zeros(())), {"empty": True}
    v = tgt.visible
    ce_final = ops.cross_entropy_rows(pred.probs_final, tgt.c_patch)
    ce_dec = ops.cross_entropy_rows(pred.probs_dec, tgt.c_patch)
    l1 = ops.l1_rows(pred.offsets, tgt.offsets)
    bce_v = ops.binary_cross_entropy(pred.visibility, v)
    bce_u = ops.binary_cross_entropy(pred.uncertainty, tgt.uncertain)
    bce_ut = ops.mean(ops.binary_cross_entropy(pred.unc_top, tgt.uncertain_top),
                      axis=1)
    masked = ops.mul(ops.add(ops.scale(ops.add(ce_final, ce_dec), lam), l1), v)
    per_query = ops.add(ops.add(masked, bce_v), ops.add(bce_u, bce_ut))
    loss = ops.mean(per_query)
    terms = {
        "empty": False,
        "ce_final": float((ce_final.numpy() * v).mean()),
        "ce_dec": float((ce_dec.numpy() * v).mean()),
        "l1": float((l1.numpy() * v).mean()),
        "bce_v": float(bce_v.numpy().mean()),
        "bce_u": float(bce_u.numpy().mean()),
        "bce_u_top": float(bce_ut.numpy().mean()),
    }
    return loss, terms


def clip_loss(model: TrackerModel, frames: np.ndarray, tracks: TrackSet,
              lam: float = 1.0, delta_u: float | None = None):
    """Unrolled loss: sum of frame losses over one clip, one session.

    ``delta_u`` overrides the uncertainty radius; by default it scales
    with the image size (8 px at 256).
    """
    starts, points = tracks.query_spec()
    session = OnlineSession(model, QuerySpec(starts, points))
    grid = model.config.image_size // model.config.stride
    if delta_u is None:
        delta_u = uncertainty_radius(model.config.image_size)
    total = Tensor(np.zeros(()))
    n_supervised = 0
    for t in range(frames.shape[0]):
        pred = session.frame_step(frames[t])
        if pred.n_active == 0:
            continue
        gt_pts = np.stack([tracks.tracks[i].points[t] for i in pred.active])
        gt_vis = np.array([tracks.tracks[i].visible[t] for i in pred.active])
        loss_t, _ = total_loss(pred, build_targets(
            gt_pts, gt_vis, pred, model.config.stride, grid, delta_u), lam)
        total = ops.add(total, loss_t)
        n_supervised += 1
    return total, n_supervised


class AdamW:
    """Decoupled weight decay; a step with any non-finite gradient is skipped."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.skipped = 0

    def step(self, lr: float | None = None) -> bool:
        """Apply one update; returns False (and changes nothing) on bad grads."""
        lr = self.lr if lr is None else lr
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad
                 for p in self.params]
        if any(not np.isfinite(g).all() for g in grads):
            self.skipped += 1
            return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)
        return True


def lr_at(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to zero."""
    if step < warmup:
        return base_lr * (step + 1) / max(warmup, 1)
    if total <= warmup:
        return base_lr
    progress = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-3
    warmup: int = 20
    weight_decay: float = 1e-4
    lam: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    log_every: int = 10
    curve_path: str = ""
    uncertainty_radius: float | None = None   # None: 8 px at 256-px scale

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("classification weight must be positive")
        if self.uncertainty_radius is not None and self.uncertainty_radius <= 0:
            raise ValueError("uncertainty radius must be positive")


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    skipped: bool = False


def write_loss_curve(path: str, history: list[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "skipped"])
        for rec in history:
            writer.writerow([rec.step, f"{rec.loss:.10g}", f"{rec.lr:.10g}",
                             int(rec.skipped)])


def train(model: TrackerModel, clips: list, config: TrainConfig | None = None,
          log=None) -> list[StepRecord]:
    """Cycle through ``clips`` (pairs of frames and tracks) for ``steps`` updates."""
    cfg = config or TrainConfig()
    if not clips:
        raise ValueError("no training clips")
    opt = AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas,
                weight_decay=cfg.weight_decay)
    history: list[StepRecord] = []
    model.training = True
    try:
        for step in range(cfg.steps):
            frames, tracks = clips[step % len(clips)]
            model.zero_grad()
            with Tape() as tape:
                loss, _ = clip_loss(model, frames, tracks, lam=cfg.lam,
                                    delta_u=cfg.uncertainty_radius)
                value = float(loss.numpy())
                if math.isnan(value) or math.isinf(value):
                    raise RuntimeError(f"training diverged at step {step}: "
                                       f"loss={value}")
                if loss.requires_grad:
                    tape.backward(loss)
            lr = lr_at(step, cfg.lr, cfg.warmup, cfg.steps)
            applied = loss.requires_grad and opt.step(lr=lr)
            history.append(StepRecord(step, value, lr, skipped=not applied))
            if log is not None and step % cfg.log_every == 0:
                log(f"step {step}: loss {value:.4f} lr {lr:.2e}")
    finally:
        model.training = False
    if cfg.curve_path:
        write_loss_curve(cfg.curve_path, history)
    return history
