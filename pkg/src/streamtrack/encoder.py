"""Per-frame visual encoder and query initialization.

The encoder turns an H x W x 3 image in [0, 1] into a feature grid at
stride S: three convolutions (3 -> 32 -> 64 -> D, downsampling to S),
a couple of residual conv blocks, and a small self-attention encoder over
the grid tokens (which also gives the adaptation pipeline attention
matrices to target). A learnable positional table is added once at the
end. A pointwise 4-layer MLP then produces the matching map h and its
average-pooled pyramid.

Coordinates are pixels with the origin at the top-left; the cell (a, b)
of the feature grid corresponds to the patch centered at ((b+0.5)*S,
(a+0.5)*S). Pixel positions map to grid positions via p/S - 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .numerics import Tensor, ops


@dataclass
class EncoderConfig:
    image_size: int = 64
    stride: int = 4
    width: int = 64
    res_blocks: int = 2
    attn_layers: int = 2
    attn_heads: int = 4
    mlp_layers: int = 4
    pyramid_levels: int = 4

    def __post_init__(self):
        if self.stride not in (4, 8):
            raise ValueError(f"stride must be 4 or 8, got {self.stride}")
        if self.image_size % self.stride:
            raise ValueError("image size must be divisible by the stride")

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    @property
    def levels(self) -> int:
        """Pyramid level count, truncated so the coarsest level is >= 1 cell."""
        feasible = int(np.floor(np.log2(self.grid))) + 1
        return min(self.pyramid_levels, feasible)


@dataclass
class FrameFeatures:
    """Encoder outputs for one frame."""

    f: Tensor                      # [G, G, D] feature grid (query source)
    h: Tensor                      # [G, G, D] matching map
    pyramid: list = field(default_factory=list)  # h downsampled by 2**level
    t: int = 0

    @property
    def grid(self) -> int:
        return self.f.shape[0]


class ResBlock(nn.Module):
    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.c1 = nn.Conv2d(d, d, 3, rng, pad=1)
        self.c2 = nn.Conv2d(d, d, 3, rng, pad=1)

    def forward(self, x):
        return ops.add(x, self.c2(ops.relu(self.c1(x))))

    __call__ = forward


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        d = config.width
        s3 = 2 if config.stride == 8 else 1
        self.conv1 = nn.Conv2d(3, 32, 3, rng, stride=2, pad=1)
        self.conv2 = nn.Conv2d(32, 64, 3, rng, stride=2, pad=1)
        self.conv3 = nn.Conv2d(64, d, 3, rng, stride=s3, pad=1)
        self.res = nn.ModuleList([ResBlock(d, rng) for _ in range(config.res_blocks)])
        self.attn = nn.ModuleList([
            nn.TransformerEncoderLayer(d, config.attn_heads, rng)
            for _ in range(config.attn_layers)])
        g = config.grid
        self.pos_table = Tensor.param(np.zeros((g, g, d)))
        self.match_mlp = nn.MLP([d] * (config.mlp_layers + 1), rng)

    def attention_layers(self):
        """The self-attention blocks (adaptation targets live here)."""
        return [layer.attn.mha for layer in self.attn]

    def forward(self, image, t: int = 0) -> FrameFeatures:
        cfg = self.config
        img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        if img.shape != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(
                f"expected {cfg.image_size}x{cfg.image_size}x3 image, got {img.shape}")
        if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
            raise ValueError("image values must lie in [0, 1]")
        x = image if isinstance(image, Tensor) else Tensor(img)

        x = ops.relu(self.conv1(x))
        x = ops.relu(self.conv2(x))
        x = self.conv3(x)
        for block in self.res:
            x = block(x)
        g, d = cfg.grid, cfg.width
        tokens = ops.reshape(x, (g * g, d))
        for layer in self.attn:
            tokens = layer(tokens)
        f = ops.add(ops.reshape(tokens, (g, g, d)), self.pos_table)

        h = ops.reshape(self.match_mlp(ops.reshape(f, (g * g, d))), (g, g, d))
        pyramid = [h]
        for _ in range(cfg.levels - 1):
            pyramid.append(ops.avg_pool2(pyramid[-1]))
        return FrameFeatures(f=f, h=h, pyramid=pyramid, t=t)

    __call__ = forward


def to_grid(points_px, stride: int):
    """Pixel coordinates -> continuous feature-grid coordinates."""
    return np.asarray(points_px, dtype=np.float64) / stride - 0.5


def patch_centers_px(indices_flat, grid: int, stride: int) -> np.ndarray:
    """Flat row-major cell indices -> patch-center pixel coordinates."""
    idx = np.asarray(indices_flat, dtype=np.intp)
    ys, xs = np.divmod(idx, grid)
    return np.stack([(xs + 0.5) * stride, (ys + 0.5) * stride], axis=-1).astype(np.float64)


def init_queries(features: FrameFeatures, points_px, stride: int) -> Tensor:
    """Sample initial query features at pixel positions (one row per point)."""
    pts = np.atleast_2d(np.asarray(points_px, dtype=np.float64))
    size = features.f.shape[0] * stride
    if pts.min() < 0 or pts.max() > size - 1:
        raise ValueError("query points must lie within image bounds")
    return ops.bilinear_sample(features.f, to_grid(pts, stride))
