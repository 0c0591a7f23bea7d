"""Event generation model, its integration inverse, slicing and voxelization.

An event fires at a pixel whenever the log intensity, tracked against a
per-pixel reference, changes by the contrast threshold C. The reference
moves by exactly +/-C per event (ladder semantics) so residual change is
carried forward instead of being discarded; this is what makes
``integrate_events(generate_events(...))`` land within C of the true
final log intensity. Log intensity between frame samples is interpolated
linearly in log space, giving events sub-frame timestamps.

All intensities enter the log domain as log(I + eps) with a small floor
eps, since rendered intensities may be exactly zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenes import Frame

# Emission tolerance in log units: absorbs log/exp and float32-storage
# rounding so a change of exactly k*C emits exactly k events.
_LADDER_TOL = 1e-6

EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<i8"), ("p", "i1")])


class EventStreamError(ValueError):
    """Invalid stream construction or an out-of-contract operation."""


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int  # microseconds
    p: int  # polarity, -1 or +1


@dataclass(frozen=True)
class EventStream:
    """Events sorted by (t, y, x, p) over a half-open window [t_begin, t_end).

    ``events`` is a structured array with EVENT_DTYPE fields; it is made
    read-only on construction so streams are safe to share.
    """

    events: np.ndarray
    t_begin: int
    t_end: int
    width: int
    height: int
    threshold: float

    def __post_init__(self):
        ev = self.events
        if ev.dtype != EVENT_DTYPE:
            ev = ev.astype(EVENT_DTYPE)
            object.__setattr__(self, "events", ev)
        if self.t_begin >= self.t_end:
            raise EventStreamError(
                f"empty window: t_begin={self.t_begin} >= t_end={self.t_end}")
        if self.threshold <= 0:
            raise EventStreamError(f"threshold must be positive, got {self.threshold}")
        if len(ev):
            if ev["t"].min() < self.t_begin or ev["t"].max() >= self.t_end:
                raise EventStreamError(
                    "event timestamps fall outside [t_begin, t_end)")
            if ev["x"].max() >= self.width or ev["y"].max() >= self.height:
                raise EventStreamError("event coordinates exceed resolution")
            if not np.isin(ev["p"], (-1, 1)).all():
                raise EventStreamError("polarities must be exactly -1 or +1")
        ev.setflags(write=False)

    def __len__(self) -> int:
        return len(self.events)

    def __getitem__(self, i: int) -> Event:
        r = self.events[i]
        return Event(int(r["x"]), int(r["y"]), int(r["t"]), int(r["p"]))

    @staticmethod
    def empty(t_begin: int, t_end: int, width: int, height: int,
              threshold: float) -> "EventStream":
        return EventStream(np.empty(0, dtype=EVENT_DTYPE), t_begin, t_end,
                           width, height, threshold)

    def signed_counts(self) -> np.ndarray:
        """Per-pixel signed polarity sum, shape (H, W) int64."""
        acc = np.zeros((self.height, self.width), dtype=np.int64)
        np.add.at(acc, (self.events["y"].astype(np.intp),
                        self.events["x"].astype(np.intp)),
                  self.events["p"].astype(np.int64))
        return acc


def _sort_events(ev: np.ndarray) -> np.ndarray:
    order = np.lexsort((ev["p"], ev["x"], ev["y"], ev["t"]))
    return ev[order]


def generate_events(frames: list[Frame], threshold: float, eps: float) -> EventStream:
    """Emit the event stream a contrast-threshold sensor would produce.

    Per pixel, a reference log intensity starts at the first frame; within
    each frame interval the log intensity moves linearly between samples,
    emitting one event (with the interpolated crossing time) each time it
    departs +/-threshold from the reference, which then steps by exactly
    +/-threshold.
    """
    if len(frames) < 2:
        raise EventStreamError(f"need at least 2 frames, got {len(frames)}")
    if threshold <= 0:
        raise EventStreamError(f"threshold must be positive, got {threshold}")
    if eps <= 0:
        raise EventStreamError(f"log floor eps must be positive, got {eps}")
    ts = np.array([f.t for f in frames], dtype=np.int64)
    if not (np.diff(ts) > 0).all():
        raise EventStreamError("frame timestamps must be strictly increasing")
    h, w = frames[0].pixels.shape
    for f in frames:
        if f.pixels.shape != (h, w):
            raise EventStreamError("all frames must share one resolution")

    c = float(threshold)
    log_prev = np.log(frames[0].pixels.astype(np.float64) + eps)
    ref = log_prev.copy()
    xs_all, ys_all, ts_all, ps_all = [], [], [], []
    for k in range(len(frames) - 1):
        log_next = np.log(frames[k + 1].pixels.astype(np.float64) + eps)
        delta = log_next - ref
        n_steps = np.floor((np.abs(delta) + _LADDER_TOL) / c).astype(np.int64)
        active = n_steps >= 1
        if active.any():
            ys, xs = np.nonzero(active)
            counts = n_steps[ys, xs]
            sign = np.sign(delta[ys, xs])
            rep_y = np.repeat(ys, counts)
            rep_x = np.repeat(xs, counts)
            rep_sign = np.repeat(sign, counts)
            # Ladder index 1..count_i within each pixel's run.
            offsets = np.repeat(np.cumsum(counts) - counts, counts)
            step_idx = np.arange(counts.sum()) - offsets + 1
            levels = ref[rep_y, rep_x] + rep_sign * c * step_idx
            la = log_prev[rep_y, rep_x]
            lb = log_next[rep_y, rep_x]
            ta, tb = float(ts[k]), float(ts[k + 1])
            t_ev = ta + (tb - ta) * (levels - la) / (lb - la)
            t_ev = np.clip(np.rint(t_ev), ts[k], ts[k + 1]).astype(np.int64)
            xs_all.append(rep_x.astype(np.uint16))
            ys_all.append(rep_y.astype(np.uint16))
            ts_all.append(t_ev)
            ps_all.append(rep_sign.astype(np.int8))
            ref[ys, xs] += sign * c * counts
        log_prev = log_next

    n = sum(len(a) for a in ts_all)
    ev = np.empty(n, dtype=EVENT_DTYPE)
    if n:
        ev["x"] = np.concatenate(xs_all)
        ev["y"] = np.concatenate(ys_all)
        ev["t"] = np.concatenate(ts_all)
        ev["p"] = np.concatenate(ps_all)
        ev = _sort_events(ev)
    # +1 so events landing exactly on the final frame time stay inside the
    # half-open window.
    return EventStream(ev, int(ts[0]), int(ts[-1]) + 1, w, h, c)


def integrate_events(image: Frame, stream: EventStream, threshold: float,
                     eps: float) -> Frame:
    """Predict the brightness at ``stream.t_end`` from an image plus events.

    Per pixel: out = (I + eps) * exp(signed_count * threshold) - eps,
    clipped to [0, 1].
    """
    if image.pixels.shape != (stream.height, stream.width):
        raise EventStreamError(
            f"image resolution {image.pixels.shape} does not match stream "
            f"({stream.height}, {stream.width})")
    if stream.t_begin < image.t:
        raise EventStreamError(
            f"stream begins at {stream.t_begin} before the image time {image.t}")
    counts = stream.signed_counts().astype(np.float64)
    out = (image.pixels.astype(np.float64) + eps) * np.exp(counts * threshold) - eps
    return Frame(np.clip(out, 0.0, 1.0).astype(np.float32), stream.t_end)


def slice_stream(stream: EventStream, t0: int, t1: int) -> EventStream:
    """Events with t0 <= t < t1, order preserved."""
    if not (stream.t_begin <= t0 < t1 <= stream.t_end):
        raise EventStreamError(
            f"slice [{t0}, {t1}) outside stream window "
            f"[{stream.t_begin}, {stream.t_end}) or inverted")
    lo = np.searchsorted(stream.events["t"], t0, side="left")
    hi = np.searchsorted(stream.events["t"], t1, side="left")
    return EventStream(stream.events[lo:hi].copy(), t0, t1,
                       stream.width, stream.height, stream.threshold)


def split_equal(stream: EventStream, t0: int, t1: int, k: int) -> list[EventStream]:
    """K contiguous equal-duration slices; the last absorbs the remainder.

    An event exactly on an internal boundary belongs to the later slice
    (half-open convention).
    """
    if k <= 0:
        raise EventStreamError(f"slice count must be >= 1, got {k}")
    width = (t1 - t0) // k
    if width <= 0:
        raise EventStreamError(
            f"window [{t0}, {t1}) too short for {k} slices")
    bounds = [t0 + j * width for j in range(k)] + [t1]
    return [slice_stream(stream, bounds[j], bounds[j + 1]) for j in range(k)]


@dataclass(frozen=True)
class VoxelGrid:
    """B temporal bins of bilinearly-deposited polarity, shape (B, H, W)."""

    data: np.ndarray  # float32
    t_begin: int
    t_end: int


def voxelize(stream: EventStream, t0: int, t1: int, n_bins: int) -> VoxelGrid:
    """Deposit each event's polarity onto the two nearest temporal bins.

    Normalized time t* = (t - t0) / (t1 - t0) * (n_bins - 1); the event
    contributes p * (1 - frac) to bin floor(t*) and p * frac to the next.
    All mass lands in bin 0 when n_bins == 1. The deposit conserves the
    signed polarity sum exactly (up to float accumulation).
    """
    if n_bins < 1:
        raise EventStreamError(f"bin count must be >= 1, got {n_bins}")
    if not (stream.t_begin <= t0 < t1 <= stream.t_end):
        raise EventStreamError(
            f"voxel window [{t0}, {t1}) outside stream window "
            f"[{stream.t_begin}, {stream.t_end}) or inverted")
    lo = np.searchsorted(stream.events["t"], t0, side="left")
    hi = np.searchsorted(stream.events["t"], t1, side="left")
    ev = stream.events[lo:hi]
    grid = np.zeros((n_bins, stream.height, stream.width), dtype=np.float64)
    if len(ev):
        xs = ev["x"].astype(np.intp)
        ys = ev["y"].astype(np.intp)
        ps = ev["p"].astype(np.float64)
        if n_bins == 1:
            np.add.at(grid, (np.zeros(len(ev), dtype=np.intp), ys, xs), ps)
        else:
            tstar = (ev["t"] - t0).astype(np.float64) * (n_bins - 1) / (t1 - t0)
            i0 = np.floor(tstar).astype(np.intp)  # always <= n_bins - 2
            frac = tstar - i0
            np.add.at(grid, (i0, ys, xs), ps * (1.0 - frac))
            np.add.at(grid, (i0 + 1, ys, xs), ps * frac)
    return VoxelGrid(grid.astype(np.float32), t0, t1)


# ---------------------------------------------------------------------------
# Binary event file.
#
# Little-endian header (44 bytes), then one packed record per event:
#   magic     4s      b"EVPL"
#   version   uint32  1
#   height    uint16
#   width     uint16
#   t_begin   int64   microseconds
#   t_end     int64   microseconds
#   threshold float64 log-intensity units
#   count     uint64  number of records
# record: x uint16, y uint16, t int64, p int8  (13 bytes, no padding)

_MAGIC = b"EVPL"
_VERSION = 1
_HEADER = struct.Struct("<4sIHHqqdQ")


def write_events(path: Path | str, stream: EventStream) -> None:
    path = Path(path)
    header = _HEADER.pack(_MAGIC, _VERSION, stream.height, stream.width,
                          stream.t_begin, stream.t_end, stream.threshold,
                          len(stream))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(stream.events.tobytes())


def read_events(path: Path | str) -> EventStream:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise EventStreamError(f"{path}: truncated header")
    magic, version, h, w, t_begin, t_end, threshold, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise EventStreamError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise EventStreamError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size:]
    if len(body) != count * EVENT_DTYPE.itemsize:
        raise EventStreamError(
            f"{path}: expected {count} records, found {len(body)} payload bytes")
    ev = np.frombuffer(body, dtype=EVENT_DTYPE).copy()
    return EventStream(ev, t_begin, t_end, w, h, threshold)
