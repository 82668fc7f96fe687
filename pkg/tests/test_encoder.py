"""Encoder tests: shapes, determinism, coordinate convention, equivariance."""

import numpy as np
import pytest

from streamtrack.encoder import (Encoder, EncoderConfig, init_queries,
                                 patch_centers_px, to_grid)
from streamtrack.numerics import Tensor, ops


def make(seed=0, **kw):
    cfg = EncoderConfig(**kw)
    return Encoder(cfg, np.random.default_rng(seed)), cfg


def rand_image(rng, size=64):
    return rng.random((size, size, 3))


def test_shapes_and_pyramid_dims():
    enc, cfg = make()
    feats = enc(rand_image(np.random.default_rng(1)))
    assert feats.f.shape == (16, 16, 64)
    assert feats.h.shape == (16, 16, 64)
    assert [p.shape[0] for p in feats.pyramid] == [16, 8, 4, 2]

    enc8, _ = make(stride=8)
    feats8 = enc8(rand_image(np.random.default_rng(2)))
    assert feats8.f.shape == (8, 8, 64)
    assert [p.shape[0] for p in feats8.pyramid] == [8, 4, 2, 1]


def test_pyramid_truncates_on_tiny_grids():
    cfg = EncoderConfig(image_size=16, stride=4)
    assert cfg.grid == 4
    assert cfg.levels == 3
    enc = Encoder(cfg, np.random.default_rng(0))
    feats = enc(np.random.default_rng(1).random((16, 16, 3)))
    assert [p.shape[0] for p in feats.pyramid] == [4, 2, 1]


def test_encoding_is_deterministic():
    enc, _ = make(seed=3)
    img = rand_image(np.random.default_rng(4))
    a = enc(img)
    b = enc(img)
    assert a.f.numpy().tobytes() == b.f.numpy().tobytes()
    assert a.h.numpy().tobytes() == b.h.numpy().tobytes()


def test_zero_image_yields_positional_table():
    enc, _ = make(seed=5)
    enc.pos_table.data[:] = np.random.default_rng(6).normal(size=enc.pos_table.shape)
    feats = enc(np.zeros((64, 64, 3)))
    np.testing.assert_array_equal(feats.f.numpy(), enc.pos_table.numpy())


def test_pyramid_matches_pooling_oracle():
    enc, _ = make(seed=7)
    feats = enc(rand_image(np.random.default_rng(8)))
    h = feats.h.numpy()
    for level in feats.pyramid[1:]:
        g = h.shape[0] // 2
        want = h[: g * 2, : g * 2].reshape(g, 2, g, 2, -1).mean(axis=(1, 3))
        np.testing.assert_array_equal(level.numpy(), want)
        h = want


def test_input_validation():
    enc, _ = make()
    with pytest.raises(ValueError):
        enc(np.zeros((32, 32, 3)))
    with pytest.raises(ValueError):
        enc(np.full((64, 64, 3), 2.0))
    with pytest.raises(ValueError):
        EncoderConfig(stride=3)
    with pytest.raises(ValueError):
        EncoderConfig(image_size=30, stride=4)


def test_coordinate_convention_round_trip():
    centers = patch_centers_px([0, 1, 16, 255], grid=16, stride=4)
    np.testing.assert_array_equal(centers, [[2, 2], [6, 2], [2, 6], [62, 62]])
    np.testing.assert_array_equal(to_grid(centers, 4),
                                  [[0, 0], [1, 0], [0, 1], [15, 15]])


def test_init_queries_at_patch_centers_and_midpoints():
    enc, cfg = make(seed=9)
    feats = enc(rand_image(np.random.default_rng(10)))
    f = feats.f.numpy()

    center = patch_centers_px([3 * 16 + 5], grid=16, stride=4)[0]
    q = init_queries(feats, [center], stride=4).numpy()
    np.testing.assert_array_equal(q[0], f[3, 5])

    two = init_queries(feats, [center, center], stride=4).numpy()
    np.testing.assert_array_equal(two[0], two[1])

    mid = center + np.array([2.0, 0.0])  # halfway to the next patch center
    qm = init_queries(feats, [mid], stride=4).numpy()
    np.testing.assert_allclose(qm[0], 0.5 * (f[3, 5] + f[3, 6]), atol=1e-12)


def test_init_queries_rejects_out_of_bounds():
    enc, _ = make(seed=11)
    feats = enc(rand_image(np.random.default_rng(12)))
    with pytest.raises(ValueError):
        init_queries(feats, [[-1.0, 5.0]], stride=4)
    with pytest.raises(ValueError):
        init_queries(feats, [[10.0, 64.0]], stride=4)


def shift_argmax_check(enc, cfg, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((cfg.image_size, cfg.image_size, 3))
    rolled = np.roll(img, cfg.stride, axis=1)
    f0 = enc(img).f.numpy()
    f1 = enc(rolled).f.numpy()
    hits = 0
    for (a, b) in [(5, 5), (8, 7), (10, 4)]:
        q = f0[a, b]
        sims = ops.cosine_rows(Tensor(q[None]), Tensor(f1.reshape(-1, f1.shape[-1]))).numpy()[0]
        best = np.unravel_index(np.argmax(sims), f0.shape[:2])
        hits += best == (a, b + 1)
    return hits


def test_stride_shift_moves_argmax_one_patch_conv_only():
    enc, cfg = make(seed=13, attn_layers=0)
    assert shift_argmax_check(enc, cfg, seed=14) == 3


def test_stride_shift_moves_argmax_one_patch_full_encoder():
    enc, cfg = make(seed=15)
    assert shift_argmax_check(enc, cfg, seed=16) == 3
