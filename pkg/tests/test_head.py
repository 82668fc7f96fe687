"""Tracker-head tests: classification, re-ranking, offsets, visibility."""

import numpy as np
import pytest

from streamtrack.encoder import patch_centers_px
from streamtrack.head import (OffsetHead, RerankHead, SimilarityHead,
                              VisibilityHead, top_k_cells)
from streamtrack.numerics import Tensor, ops


def pyramid_from(h0):
    pyr = [h0]
    while min(pyr[-1].shape[0], pyr[-1].shape[1]) >= 2:
        pyr.append(ops.avg_pool2(pyr[-1]))
    return pyr[:4]


def test_rows_are_distributions_and_tau_preserves_argmax():
    rng = np.random.default_rng(0)
    h0 = Tensor(rng.normal(size=(8, 8, 16)))
    pyr = pyramid_from(h0)
    q = Tensor(rng.normal(size=(5, 16)))
    argmaxes = []
    for tau in (0.01, 0.05, 1.0):
        head = SimilarityHead(len(pyr), tau)
        probs = head(q, pyr).numpy()
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert probs.min() >= 0
        argmaxes.append(np.argmax(probs, axis=1))
    assert all((a == argmaxes[0]).all() for a in argmaxes)


def test_identical_patches_give_uniform_rows():
    head = SimilarityHead(1, 0.05)
    h0 = Tensor(np.tile(np.arange(1.0, 5.0), (6, 6, 1)))
    probs = head(Tensor(np.random.default_rng(1).normal(size=(2, 4))), [h0]).numpy()
    np.testing.assert_allclose(probs, 1.0 / 36.0, atol=1e-12)


def test_feature_scaling_is_invisible_to_cosine():
    rng = np.random.default_rng(2)
    h0 = rng.normal(size=(8, 8, 16))
    q = Tensor(rng.normal(size=(3, 16)))
    head = SimilarityHead(3, 0.05)
    head.coeffs.data[:] = rng.normal(size=3)
    a = head(q, pyramid_from(Tensor(h0))[:3]).numpy()
    b = head(q, pyramid_from(Tensor(2.0 * h0))[:3]).numpy()
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_orthonormal_field_gives_confident_match():
    head = SimilarityHead(1, 0.01)
    h0 = Tensor(np.eye(16).reshape(4, 4, 16))
    q = Tensor(np.eye(16)[6][None])
    probs = head(q, [h0]).numpy()[0]
    assert probs[6] > 0.99


def test_multiscale_mixing_matches_manual_computation():
    rng = np.random.default_rng(3)
    h0 = Tensor(rng.normal(size=(4, 4, 8)))
    pyr = pyramid_from(h0)
    assert len(pyr) == 3
    head = SimilarityHead(3, 0.07)
    head.coeffs.data[:] = np.array([0.2, -0.5, 1.0])
    q = rng.normal(size=(2, 8))
    got = head(Tensor(q), pyr).numpy()

    def cos(a, b):
        num = a @ b.T
        den = (np.linalg.norm(a, axis=1)[:, None]
               * np.linalg.norm(b, axis=1)[None]) + 1e-12
        return num / den

    w = np.exp(head.coeffs.numpy()) / np.exp(head.coeffs.numpy()).sum()
    mixed = np.zeros((2, 16))
    base = np.stack(np.meshgrid(np.arange(4), np.arange(4))[::-1], -1).reshape(16, 2)
    for level, hm in enumerate(pyr):
        gl = hm.shape[0]
        sims = cos(q, hm.numpy().reshape(gl * gl, 8))
        if gl != 4:
            up = np.zeros((2, 16))
            for c, (y, x) in enumerate(base):
                px = np.clip((x + 0.5) * gl / 4 - 0.5, 0, gl - 1)
                py = np.clip((y + 0.5) * gl / 4 - 0.5, 0, gl - 1)
                x0, y0 = int(min(np.floor(px), gl - 2)) if gl > 1 else 0, \
                    int(min(np.floor(py), gl - 2)) if gl > 1 else 0
                wx, wy = px - x0, py - y0
                sm = sims.reshape(2, gl, gl)
                up[:, c] = ((1 - wy) * ((1 - wx) * sm[:, y0, x0] + wx * sm[:, y0, min(x0 + 1, gl - 1)])
                            + wy * ((1 - wx) * sm[:, min(y0 + 1, gl - 1), x0]
                                    + wx * sm[:, min(y0 + 1, gl - 1), min(x0 + 1, gl - 1)]))
            sims = up
        mixed += w[level] * sims
    z = mixed / 0.07
    want = np.exp(z - z.max(axis=1, keepdims=True))
    want /= want.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(got, want, atol=1e-9)


# ---------------------------------------------------------------------------
# patch selection
# ---------------------------------------------------------------------------

def test_top_k_ordering_and_ties():
    row = np.array([[0.1, 0.4, 0.1, 0.4, 0.0]])
    np.testing.assert_array_equal(top_k_cells(row, 3), [[1, 3, 0]])
    uniform = np.full((1, 6), 1 / 6)
    np.testing.assert_array_equal(top_k_cells(uniform, 2), [[0, 1]])
    with pytest.raises(ValueError):
        top_k_cells(row, 6)


def test_patch_center_example():
    # hot cell at grid position x=2, y=3 with stride 4 -> center (10, 14)
    flat = 3 * 16 + 2
    np.testing.assert_array_equal(patch_centers_px([flat], 16, 4)[0], [10.0, 14.0])


# ---------------------------------------------------------------------------
# re-ranking
# ---------------------------------------------------------------------------

def test_rerank_zeroed_fusion_keeps_decoded_query():
    rng = np.random.default_rng(4)
    head = RerankHead(8, k=2, rng=rng, heads=2, points=2)
    for lin in (head.fuse.cross.out_proj, head.fuse.ffn.down,
                head.fuse.self_attn.out_proj):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0
    q = Tensor(rng.normal(size=(3, 8)))
    probs = np.random.default_rng(5).dirichlet(np.ones(16), size=3)
    hmap = Tensor(rng.normal(size=(4, 4, 8)))
    q_t, u_top, top_idx, centers = head(q, probs, hmap, stride=4)
    np.testing.assert_array_equal(q_t.numpy(), q.numpy())
    assert u_top.shape == (3, 2)
    assert np.all((u_top.numpy() >= 0) & (u_top.numpy() <= 1))
    np.testing.assert_array_equal(top_idx, top_k_cells(probs, 2))
    assert centers.shape == (3, 2, 2)


def test_rerank_k1_depends_only_on_best_candidate():
    rng = np.random.default_rng(6)
    head = RerankHead(8, k=1, rng=rng, heads=2, points=2)
    q = Tensor(rng.normal(size=(1, 8)))
    hmap = rng.normal(size=(4, 4, 8))
    probs = np.zeros((1, 16))
    probs[0, 5] = 1.0
    hmap2 = hmap.copy()
    hmap2[3, 3] = 99.0  # far from cell 5's neighborhood
    out1 = head(q, probs, Tensor(hmap), stride=4)[0].numpy()
    out2 = head(q, probs, Tensor(hmap2), stride=4)[0].numpy()
    np.testing.assert_array_equal(out1, out2)


# ---------------------------------------------------------------------------
# offset and visibility heads
# ---------------------------------------------------------------------------

def test_offsets_zero_at_init_and_bounded_always():
    rng = np.random.default_rng(7)
    head = OffsetHead(8, rng, layers=2, heads=2, points=2)
    hmap = Tensor(rng.normal(size=(4, 4, 8)))
    centers = patch_centers_px([0, 5, 9], 4, 4)
    q = Tensor(rng.normal(size=(3, 8)))
    np.testing.assert_array_equal(head(q, hmap, centers, 4).numpy(), np.zeros((3, 2)))

    head.out.weight.data[:] = rng.normal(size=(8, 2)) * 50
    head.out.bias.data[:] = rng.normal(size=2) * 50
    off = head(q, hmap, centers, 4).numpy()
    assert np.all(np.abs(off) <= 4.0)


def test_visibility_outputs_are_probabilities():
    rng = np.random.default_rng(8)
    head = VisibilityHead(8, rng, heads=2, points=2)
    hmap = Tensor(rng.normal(size=(4, 4, 8)))
    pts = Tensor(np.array([[2.0, 2.0], [9.5, 13.0]]))
    v, u = head(Tensor(rng.normal(size=(2, 8))), hmap, pts, 4)
    assert v.shape == (2,) and u.shape == (2,)
    assert np.all((v.numpy() > 0) & (v.numpy() < 1))
    assert np.all((u.numpy() > 0) & (u.numpy() < 1))


def test_sigmoid_half_at_zero_logits():
    rng = np.random.default_rng(9)
    head = VisibilityHead(8, rng, heads=2, points=2)
    head.out.weight.data[:] = 0.0
    head.out.bias.data[:] = 0.0
    hmap = Tensor(rng.normal(size=(4, 4, 8)))
    v, u = head(Tensor(rng.normal(size=(1, 8))), hmap,
                Tensor(np.array([[5.0, 5.0]])), 4)
    assert v.numpy()[0] == 0.5 and u.numpy()[0] == 0.5
