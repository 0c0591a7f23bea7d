import math

import numpy as np
import pytest
import torch

from evfuse import scenes as sc
from evfuse import events as ev

C_DEFAULT = 0.2
EPS_DEFAULT = 1e-3


def make_frames(stack: np.ndarray, dt_us: int = 4167, t0: int = 0) -> list[sc.Frame]:
    """Wrap a (T, H, W) array as Frame objects with uniform timestamps."""
    return [sc.Frame(stack[i].astype(np.float32), t0 + i * dt_us)
            for i in range(len(stack))]


def ladder_oracle(ts, values, c, eps):
    """Scalar brute-force reference: walk the threshold ladder one crossing
    at a time for a single pixel's intensity samples.

    Returns a list of (t_float, polarity). Kept deliberately independent of
    the vectorized implementation.
    """
    tol = ev._LADDER_TOL  # same exact-multiple tolerance as the implementation
    logs = [math.log(v + eps) for v in values]
    ref = logs[0]
    out = []
    for k in range(len(ts) - 1):
        la, lb = logs[k], logs[k + 1]
        ta, tb = ts[k], ts[k + 1]
        while True:
            if lb - ref >= c - tol:
                level = ref + c
            elif lb - ref <= -(c - tol):
                level = ref - c
            else:
                break
            t = ta + (tb - ta) * (level - la) / (lb - la)
            out.append((t, 1 if level > ref else -1))
            ref = level
    return out


def pixel_events(stream: ev.EventStream, x: int, y: int):
    """(t, p) pairs of one pixel, in stream order."""
    sel = (stream.events["x"] == x) & (stream.events["y"] == y)
    recs = stream.events[sel]
    return [(int(r["t"]), int(r["p"])) for r in recs]


def central_difference(fn, tensor: torch.Tensor, index: tuple, step: float = 1e-5) -> float:
    """Central finite difference of a scalar function w.r.t. one element."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + step
        hi = float(fn())
        tensor[index] = orig - step
        lo = float(fn())
        tensor[index] = orig
    return (hi - lo) / (2 * step)


def relative_error(a: float, b: float, scale_floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), scale_floor)


@pytest.fixture(scope="session")
def simple_scene():
    """One rendered scene shared by read-only tests."""
    spec = sc.sample_scene_spec(42)
    frames_hi, frames_rgb, labels = sc.render_scene(spec)
    stream = ev.generate_events(frames_hi, C_DEFAULT, EPS_DEFAULT)
    return spec, frames_hi, frames_rgb, labels, stream
