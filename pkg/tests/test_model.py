"""Session-level tests: activation, causality, determinism, memory extension."""

import numpy as np
import pytest

from streamtrack.model import (OnlineSession, QuerySpec, TrackerConfig,
                               TrackerModel)

SMALL = dict(image_size=32, width=32, res_blocks=1, encoder_attn_layers=1,
             ffn_mult=2, memory_size=4)


def small_model(seed=0, **kw):
    return TrackerModel(TrackerConfig(seed=seed, **{**SMALL, **kw}))


def frames_for(seed, n, size=32):
    rng = np.random.default_rng(seed)
    return [rng.random((size, size, 3)) for _ in range(n)]


def queries_2():
    return QuerySpec(starts=[0, 0], points=[[10.0, 12.0], [25.0, 7.0]])


def test_prediction_shapes_and_bounds():
    model = small_model()
    sess = OnlineSession(model, queries_2())
    for frame in frames_for(1, 3):
        pred = sess.frame_step(frame)
    assert pred.points.shape == (2, 2)
    assert pred.offsets.shape == (2, 2)
    assert np.all(np.abs(pred.offsets.numpy()) <= model.config.stride)
    np.testing.assert_array_equal(
        pred.points.numpy(), pred.patch_centers + pred.offsets.numpy())
    np.testing.assert_allclose(pred.probs_dec.numpy().sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(pred.probs_final.numpy().sum(axis=1), 1.0, atol=1e-6)
    assert pred.top_centers.shape == (2, model.config.top_k, 2)
    v = pred.visibility.numpy()
    assert np.all((v > 0) & (v < 1))


def test_late_queries_are_absent_then_activate():
    model = small_model(seed=1)
    qs = QuerySpec(starts=[1, 3], points=[[8.0, 8.0], [20.0, 20.0]])
    sess = OnlineSession(model, qs)
    frames = frames_for(2, 4)

    p0 = sess.frame_step(frames[0])
    assert p0.n_active == 0 and p0.points_np().shape == (0, 2)
    assert sess.ms.total_writes == 0

    p1 = sess.frame_step(frames[1])
    np.testing.assert_array_equal(p1.active, [0])
    p2 = sess.frame_step(frames[2])
    np.testing.assert_array_equal(p2.active, [0])
    p3 = sess.frame_step(frames[3])
    np.testing.assert_array_equal(p3.active, [0, 1])


def test_out_of_order_frames_rejected():
    sess = OnlineSession(small_model(), queries_2())
    frames = frames_for(3, 2)
    sess.frame_step(frames[0], t=0)
    with pytest.raises(ValueError):
        sess.frame_step(frames[1], t=2)
    with pytest.raises(ValueError):
        sess.frame_step(frames[1], t=0)


def test_memory_writes_once_per_active_query_per_frame():
    model = small_model(seed=2)
    qs = QuerySpec(starts=[0, 2], points=[[8.0, 8.0], [20.0, 20.0]])
    sess = OnlineSession(model, qs)
    expected = 0
    for t, frame in enumerate(frames_for(4, 5)):
        sess.frame_step(frame)
        expected += int(np.sum(qs.starts <= t))
    assert sess.ms.total_writes == expected
    assert sess.mc.total_writes == expected


def test_first_active_frame_is_memory_free():
    model = small_model(seed=3)
    qs = QuerySpec(starts=[0, 2], points=[[8.0, 8.0], [20.0, 20.0]])
    sess = OnlineSession(model, qs)
    frames = frames_for(5, 3)
    sess.frame_step(frames[0])
    sess.frame_step(frames[1])
    p2 = sess.frame_step(frames[2])
    # query 1 activates at t=2: its refreshed init row must equal the raw row
    raw = sess.q_init_rows[1].numpy()[0]
    np.testing.assert_array_equal(p2.q_init_updated.numpy()[1], raw)
    # query 0 has memory by now: its row must differ once the updater is live
    model.query_updater.out.weight.data[:] = (
        np.random.default_rng(6).normal(size=(32, 32)) * 0.1)
    sess2 = OnlineSession(model, qs)
    for f in frames:
        p = sess2.frame_step(f)
    assert not np.allclose(p.q_init_updated.numpy()[0], sess2.q_init_rows[0].numpy()[0])


def run_points(model, qs, frames):
    sess = OnlineSession(model, qs)
    preds = sess.run(frames)
    return [(p.points_np().copy(), p.visibility.numpy().copy() if p.n_active else None)
            for p in preds]


def test_causality_prefix_runs_match():
    model = small_model(seed=4)
    qs = queries_2()
    frames = frames_for(7, 6)
    full = run_points(model, qs, frames)
    prefix = run_points(model, qs, frames[:3])
    for (pf, vf), (pp, vp) in zip(full[:3], prefix):
        assert pf.tobytes() == pp.tobytes()
        assert (vf is None and vp is None) or vf.tobytes() == vp.tobytes()


def test_sessions_are_deterministic():
    model = small_model(seed=5)
    qs = queries_2()
    frames = frames_for(8, 4)
    a = run_points(model, qs, frames)
    b = run_points(model, qs, frames)
    for (pa, _), (pb, _) in zip(a, b):
        assert pa.tobytes() == pb.tobytes()


# ---------------------------------------------------------------------------
# memory extension
# ---------------------------------------------------------------------------

def test_extend_memory_identity_at_trained_size():
    qs = queries_2()
    frames = frames_for(9, 6)
    base = run_points(small_model(seed=6), qs, frames)
    extended = small_model(seed=6)
    extended.extend_memory(extended.memory_size)
    ext = run_points(extended, qs, frames)
    for (pa, va), (pb, vb) in zip(base, ext):
        assert pa.tobytes() == pb.tobytes()
        assert va.tobytes() == vb.tobytes()


def test_extend_memory_grows_capacity():
    model = small_model(seed=7)
    model.extend_memory(9)
    assert model.memory_size == 9
    assert model.gamma_mem_s.shape == (9, 32)
    sess = OnlineSession(model, queries_2())
    for frame in frames_for(10, 7):
        sess.frame_step(frame)
    assert sess.ms.n_windows == 7  # old capacity (4) would have trimmed


def test_extend_memory_guards():
    model = small_model(seed=8)
    model.training = True
    with pytest.raises(RuntimeError):
        model.extend_memory(8)
    model.training = False
    with pytest.raises(ValueError):
        model.extend_memory(2)


def test_memory_ablation_flags_change_nothing_but_memory():
    frames = frames_for(11, 4)
    qs = queries_2()
    noctx = small_model(seed=9, use_context_memory=False)
    sess = OnlineSession(noctx, qs)
    preds = sess.run(frames)
    assert sess.mc.total_writes == 0 and sess.ms.total_writes == 8
    nomem = small_model(seed=9, use_spatial_memory=False, use_context_memory=False)
    sess2 = OnlineSession(nomem, qs)
    sess2.run(frames)
    assert sess2.ms.total_writes == 0
    assert preds[-1].points_np().shape == (2, 2)


def test_offset_head_flag_pins_points_to_patch_centers():
    model = small_model(seed=10, use_offset_head=False)
    sess = OnlineSession(model, queries_2())
    pred = sess.frame_step(frames_for(12, 1)[0])
    np.testing.assert_array_equal(pred.points_np(), pred.patch_centers)
