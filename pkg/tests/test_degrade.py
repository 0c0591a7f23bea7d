import numpy as np
import pytest

from evfuse import degrade as dg
from evfuse import scenes as sc


def gray_frame(value=0.5, shape=(8, 8), t=123):
    return sc.Frame(np.full(shape, value, dtype=np.float32), t)


def test_exposure_identity():
    frame = gray_frame(0.37)
    out = dg.degrade_exposure(frame, 1.0, 0.0)
    assert np.array_equal(out.pixels, frame.pixels)
    assert out.t == frame.t


def test_exposure_saturates_midgray():
    out = dg.degrade_exposure(gray_frame(0.5), 4.0, 0.5)
    assert np.all(out.pixels == 1.0)


def test_exposure_linear_where_unclipped():
    rng = np.random.default_rng(0)
    frame = sc.Frame(rng.uniform(0.0, 1.0, (6, 6)).astype(np.float32), 0)
    out = dg.degrade_exposure(frame, 0.1, 0.0)
    assert np.allclose(out.pixels, 0.1 * frame.pixels, atol=1e-7)


def test_exposure_monotone_in_pixel_value():
    lo = dg.degrade_exposure(gray_frame(0.2), 2.0, 0.1)
    hi = dg.degrade_exposure(gray_frame(0.3), 2.0, 0.1)
    assert np.all(hi.pixels >= lo.pixels)


def test_exposure_rejects_nonpositive_alpha():
    with pytest.raises(dg.DegradeError):
        dg.degrade_exposure(gray_frame(), 0.0, 0.0)
    with pytest.raises(dg.DegradeError):
        dg.degrade_exposure(gray_frame(), -1.0, 0.0)


def test_blur_zero_flow_identity():
    rng = np.random.default_rng(1)
    frame = sc.Frame(rng.uniform(0, 1, (10, 10)).astype(np.float32), 5)
    flow = sc.FlowField(np.zeros((10, 10)), np.zeros((10, 10)))
    for n in (1, 3, 8):
        out = dg.degrade_blur(frame, flow, n)
        assert np.allclose(out.pixels, frame.pixels, atol=1e-6)
        assert out.t == 5


def test_blur_constant_integer_flow_matches_shift_oracle():
    rng = np.random.default_rng(2)
    pixels = rng.uniform(0, 1, (8, 12)).astype(np.float32)
    frame = sc.Frame(pixels, 0)
    flow = sc.FlowField(np.full((8, 12), 2.0), np.zeros((8, 12)))
    out = dg.degrade_blur(frame, flow, 1)
    # Oracle: plain array shift with border replication, averaged with input.
    shifted = np.concatenate([np.repeat(pixels[:, :1], 2, axis=1),
                              pixels[:, :-2]], axis=1)
    want = (pixels.astype(np.float64) + shifted) / 2
    assert np.allclose(out.pixels, want, atol=1e-6)


def test_blur_preserves_mean_for_interior_shapes():
    shape = sc.ShapeSpec("disk", 6.0, 0.9, sc.LinearPath((24.0, 32.0), (20.0, 0.0)))
    spec = sc.SceneSpec(0, (64, 64), 1.0, 240, 24, (shape,), 0.4)
    frames_hi, _, _ = sc.render_scene(spec)
    flow = sc.ground_truth_flow(spec, 0, 1_000_000 // 24)
    out = dg.degrade_blur(frames_hi[0], flow, 8)
    assert abs(out.pixels.mean() - frames_hi[0].pixels.mean()) \
        < 0.01 * frames_hi[0].pixels.mean()


def test_blur_output_is_convex_combination():
    rng = np.random.default_rng(3)
    pixels = rng.uniform(0.1, 0.9, (9, 9)).astype(np.float32)
    flow = sc.FlowField(rng.uniform(-3, 3, (9, 9)), rng.uniform(-3, 3, (9, 9)))
    out = dg.degrade_blur(sc.Frame(pixels, 0), flow, 5)
    assert out.pixels.min() >= pixels.min() - 1e-6
    assert out.pixels.max() <= pixels.max() + 1e-6


def test_blur_rejects_shape_mismatch():
    flow = sc.FlowField(np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(dg.DegradeError, match="resolution"):
        dg.degrade_blur(gray_frame(shape=(5, 5)), flow, 2)


def test_operations_deterministic():
    rng = np.random.default_rng(4)
    frame = sc.Frame(rng.uniform(0, 1, (7, 7)).astype(np.float32), 0)
    flow = sc.FlowField(rng.uniform(-2, 2, (7, 7)), rng.uniform(-2, 2, (7, 7)))
    a = dg.degrade_blur(frame, flow, 4).pixels
    b = dg.degrade_blur(frame, flow, 4).pixels
    assert np.array_equal(a, b)
    c = dg.degrade_exposure(frame, 2.3, -0.1).pixels
    d = dg.degrade_exposure(frame, 2.3, -0.1).pixels
    assert np.array_equal(c, d)


def test_schedule_draws_are_valid_and_reproducible():
    schedule = dg.DegradeSchedule()
    draws_a = [schedule.draw(np.random.default_rng(i)) for i in range(200)]
    draws_b = [schedule.draw(np.random.default_rng(i)) for i in range(200)]
    assert draws_a == draws_b
    modes = {d.mode for d in draws_a}
    assert modes == {"none", "exposure", "blur"}
    n_none = sum(d.mode == "none" for d in draws_a)
    assert 60 <= n_none <= 140  # p_none = 0.5
    for d in draws_a:
        if d.mode == "exposure":
            assert 0.1 - 1e-9 <= d.alpha <= 6.0 + 1e-9
            assert -0.3 <= d.beta <= 0.5


def test_apply_degrade_dispatch():
    frame = gray_frame(0.5)
    assert dg.apply_degrade(frame, dg.DegradeSpec()) is frame
    out = dg.apply_degrade(frame, dg.DegradeSpec(mode="exposure", alpha=2.0, beta=0.0))
    assert np.all(out.pixels == 1.0)
    with pytest.raises(dg.DegradeError, match="flow"):
        dg.apply_degrade(frame, dg.DegradeSpec(mode="blur"))
    with pytest.raises(dg.DegradeError, match="mode"):
        dg.DegradeSpec(mode="fog")
