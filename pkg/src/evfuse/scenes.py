"""Deterministic synthetic scene generation.

Renders high-frame-rate grayscale video of rigid shapes (disks, squares)
translating along parametric trajectories over a constant background,
together with a low-rate "RGB" subsample, exact per-timestamp labels
(sub-pixel centroids, foreground masks) and analytic optical flow.

Rendering is a pure function of the :class:`SceneSpec`: the same spec
always produces bit-identical frame stacks. Shape edges are anti-aliased
with 4x4 supersampling so sub-pixel motion produces smooth intensity
change, which keeps event timestamps non-degenerate downstream.

Conventions:
    - pixel centers sit at integer coordinates, pixel (x, y) covers
      [x-0.5, x+0.5) x [y-0.5, y+0.5)
    - all timestamps are integer microseconds
    - frames are float32 in [0, 1], grayscale canonical; 3-channel views
      are produced by channel replication
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SUPERSAMPLE = 4
US_PER_S = 1_000_000


class SceneSpecError(ValueError):
    """A SceneSpec violates one of its invariants."""


@dataclass(frozen=True)
class LinearPath:
    """Constant-velocity trajectory: position(t) = start + velocity * t."""

    start: tuple[float, float]
    velocity: tuple[float, float]

    kind = "linear"

    def position(self, t: float) -> tuple[float, float]:
        return (self.start[0] + self.velocity[0] * t,
                self.start[1] + self.velocity[1] * t)

    def speed(self) -> float:
        return math.hypot(*self.velocity)

    def to_json(self) -> dict:
        return {"kind": self.kind, "start": list(self.start),
                "velocity": list(self.velocity)}


@dataclass(frozen=True)
class CircularPath:
    """Orbit around a fixed center at constant angular velocity (rad/s)."""

    center: tuple[float, float]
    orbit_radius: float
    angular_velocity: float
    phase: float = 0.0

    kind = "circular"

    def position(self, t: float) -> tuple[float, float]:
        a = self.angular_velocity * t + self.phase
        return (self.center[0] + self.orbit_radius * math.cos(a),
                self.center[1] + self.orbit_radius * math.sin(a))

    def speed(self) -> float:
        return abs(self.orbit_radius * self.angular_velocity)

    def to_json(self) -> dict:
        return {"kind": self.kind, "center": list(self.center),
                "orbit_radius": self.orbit_radius,
                "angular_velocity": self.angular_velocity,
                "phase": self.phase}


def path_from_json(obj: dict) -> LinearPath | CircularPath:
    kind = obj.get("kind")
    if kind == "linear":
        return LinearPath(tuple(obj["start"]), tuple(obj["velocity"]))
    if kind == "circular":
        return CircularPath(tuple(obj["center"]), obj["orbit_radius"],
                            obj["angular_velocity"], obj.get("phase", 0.0))
    raise SceneSpecError(f"unknown trajectory kind: {kind!r}")


@dataclass(frozen=True)
class ShapeSpec:
    """A rigid shape translating along a trajectory.

    ``radius`` is the disk radius or the square half-side, in pixels.
    """

    kind: str  # "disk" | "square"
    radius: float
    intensity: float
    path: LinearPath | CircularPath

    def to_json(self) -> dict:
        return {"kind": self.kind, "radius": self.radius,
                "intensity": self.intensity, "path": self.path.to_json()}

    @staticmethod
    def from_json(obj: dict) -> "ShapeSpec":
        return ShapeSpec(obj["kind"], obj["radius"], obj["intensity"],
                         path_from_json(obj["path"]))


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    resolution: tuple[int, int]  # (H, W)
    duration: float              # seconds
    fps_hi: int
    fps_rgb: int
    shapes: tuple[ShapeSpec, ...]
    background_intensity: float

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "resolution": list(self.resolution),
            "duration": self.duration,
            "fps_hi": self.fps_hi,
            "fps_rgb": self.fps_rgb,
            "shapes": [s.to_json() for s in self.shapes],
            "background_intensity": self.background_intensity,
        }

    @staticmethod
    def from_json(obj: dict) -> "SceneSpec":
        return SceneSpec(
            seed=obj["seed"],
            resolution=tuple(obj["resolution"]),
            duration=obj["duration"],
            fps_hi=obj["fps_hi"],
            fps_rgb=obj["fps_rgb"],
            shapes=tuple(ShapeSpec.from_json(s) for s in obj["shapes"]),
            background_intensity=obj["background_intensity"],
        )


@dataclass(frozen=True)
class Frame:
    """Single grayscale intensity image with an integer-microsecond timestamp."""

    pixels: np.ndarray  # (H, W) float32 in [0, 1]
    t: int              # microseconds

    def to_rgb(self) -> np.ndarray:
        """3-channel view by replication (the pipeline is color-agnostic)."""
        return np.repeat(self.pixels[..., None], 3, axis=-1)


@dataclass(frozen=True)
class Label:
    centroids: tuple[tuple[float, float], ...]  # (x, y) per shape, spec order
    mask: np.ndarray                            # (H, W) bool, union of supports
    t: int


@dataclass(frozen=True)
class FlowField:
    """Pixel displacement from t0 to t1; zero over the background."""

    u: np.ndarray  # (H, W) float64, x displacement
    v: np.ndarray  # (H, W) float64, y displacement


def validate_scene_spec(spec: SceneSpec) -> None:
    """Raise SceneSpecError naming the first violated invariant."""
    h, w = spec.resolution
    if h <= 0 or w <= 0:
        raise SceneSpecError(f"resolution must be positive, got {spec.resolution}")
    if spec.duration <= 0:
        raise SceneSpecError(f"duration must be positive, got {spec.duration}")
    if spec.fps_hi <= 0 or spec.fps_rgb <= 0:
        raise SceneSpecError("frame rates must be positive")
    if spec.fps_hi % spec.fps_rgb != 0:
        raise SceneSpecError(
            f"fps_hi={spec.fps_hi} is not a multiple of fps_rgb={spec.fps_rgb}")
    n_hi = spec.duration * spec.fps_hi
    if abs(n_hi - round(n_hi)) > 1e-9:
        raise SceneSpecError(
            f"duration*fps_hi={n_hi} must be an integer frame count")
    if not (0.0 < spec.background_intensity < 1.0):
        raise SceneSpecError(
            f"background_intensity={spec.background_intensity} outside (0, 1)")
    for k, shape in enumerate(spec.shapes):
        if shape.kind not in ("disk", "square"):
            raise SceneSpecError(f"shape {k}: unknown kind {shape.kind!r}")
        if shape.radius <= 0:
            raise SceneSpecError(f"shape {k}: radius must be positive")
        if not (0.0 < shape.intensity <= 1.0):
            raise SceneSpecError(f"shape {k}: intensity outside (0, 1]")
        if abs(shape.intensity - spec.background_intensity) < 1e-6:
            raise SceneSpecError(
                f"shape {k}: intensity equals background (no events would fire)")
        # Bound check on a time grid 4x finer than the simulation rate.
        n_check = int(round(spec.duration * spec.fps_hi)) * 4 + 1
        for i in range(n_check):
            t = spec.duration * i / (n_check - 1)
            cx, cy = shape.path.position(t)
            if (cx - shape.radius < 0 or cx + shape.radius > w - 1
                    or cy - shape.radius < 0 or cy + shape.radius > h - 1):
                raise SceneSpecError(
                    f"shape {k}: trajectory exits bounds at t={t:.4f}s "
                    f"(center=({cx:.2f},{cy:.2f}), radius={shape.radius})")


def hi_timestamps(spec: SceneSpec) -> np.ndarray:
    """Integer-microsecond timestamps of the hi-rate frames (inclusive ends)."""
    n = int(round(spec.duration * spec.fps_hi))
    return np.rint(np.arange(n + 1) * (US_PER_S / spec.fps_hi)).astype(np.int64)


def shape_coverage(shape: ShapeSpec, t_s: float, resolution: tuple[int, int]) -> np.ndarray:
    """Anti-aliased coverage of one shape at time ``t_s`` (seconds).

    Returns an (H, W) float64 map in [0, 1]: the fraction of each pixel's
    4x4 subsample grid falling inside the shape.
    """
    h, w = resolution
    cx, cy = shape.path.position(t_s)
    cov = np.zeros((h, w), dtype=np.float64)
    r = shape.radius
    x0 = max(int(math.floor(cx - r - 1)), 0)
    x1 = min(int(math.ceil(cx + r + 1)), w - 1)
    y0 = max(int(math.floor(cy - r - 1)), 0)
    y1 = min(int(math.ceil(cy + r + 1)), h - 1)
    if x1 < x0 or y1 < y0:
        return cov
    s = SUPERSAMPLE
    offs = (np.arange(s) + 0.5) / s - 0.5
    xs = (np.arange(x0, x1 + 1)[:, None] + offs[None, :]).reshape(-1)  # (nx*s,)
    ys = (np.arange(y0, y1 + 1)[:, None] + offs[None, :]).reshape(-1)
    dx = xs[None, :] - cx  # (ny*s, nx*s) after broadcast below
    dy = ys[:, None] - cy
    if shape.kind == "disk":
        inside = (dx * dx + dy * dy) <= r * r
    else:  # square
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    ny = y1 - y0 + 1
    nx = x1 - x0 + 1
    patch = inside.reshape(ny, s, nx, s).mean(axis=(1, 3))
    cov[y0:y1 + 1, x0:x1 + 1] = patch
    return cov


def render_frame(spec: SceneSpec, t_us: int) -> np.ndarray:
    """Composite all shapes over the background at one timestamp."""
    t_s = t_us / US_PER_S
    h, w = spec.resolution
    img = np.full((h, w), spec.background_intensity, dtype=np.float64)
    for shape in spec.shapes:
        cov = shape_coverage(shape, t_s, spec.resolution)
        img = img * (1.0 - cov) + shape.intensity * cov
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _label_at(spec: SceneSpec, t_us: int) -> Label:
    t_s = t_us / US_PER_S
    h, w = spec.resolution
    centroids = tuple(s.path.position(t_s) for s in spec.shapes)
    mask = np.zeros((h, w), dtype=bool)
    for shape in spec.shapes:
        mask |= shape_coverage(shape, t_s, spec.resolution) > 0.5
    return Label(centroids=centroids, mask=mask, t=int(t_us))


def render_scene(spec: SceneSpec) -> tuple[list[Frame], list[Frame], list[Label]]:
    """Render the full hi-rate stack, the RGB-rate subsample, and labels.

    The RGB frames are the exact subsample of the hi-rate frames at
    ``fps_hi / fps_rgb`` stride; labels are provided at every hi-rate
    timestamp. Pure function of ``spec``.
    """
    validate_scene_spec(spec)
    ts = hi_timestamps(spec)
    frames_hi = [Frame(render_frame(spec, int(t)), int(t)) for t in ts]
    labels = [_label_at(spec, int(t)) for t in ts]
    step = spec.fps_hi // spec.fps_rgb
    frames_rgb = frames_hi[::step]
    return frames_hi, frames_rgb, labels


def label_at_time(spec: SceneSpec, t_us: int) -> Label:
    """Ground-truth label at an arbitrary microsecond timestamp."""
    return _label_at(spec, t_us)


def ground_truth_flow(spec: SceneSpec, t0_us: int, t1_us: int) -> FlowField:
    """Analytic displacement of each shape's pixels from t0 to t1.

    The displacement is attached to the shape's support at t0 (coverage
    above one half); later shapes in spec order overwrite earlier ones,
    matching the compositing z-order. Background flow is zero.
    """
    end_us = int(round(spec.duration * US_PER_S))
    if not (0 <= t0_us < t1_us <= end_us):
        raise SceneSpecError(
            f"flow interval [{t0_us}, {t1_us}] must satisfy 0 <= t0 < t1 <= {end_us}")
    h, w = spec.resolution
    u = np.zeros((h, w), dtype=np.float64)
    v = np.zeros((h, w), dtype=np.float64)
    t0_s, t1_s = t0_us / US_PER_S, t1_us / US_PER_S
    for shape in spec.shapes:
        x0, y0 = shape.path.position(t0_s)
        x1, y1 = shape.path.position(t1_s)
        support = shape_coverage(shape, t0_s, spec.resolution) > 0.5
        u[support] = x1 - x0
        v[support] = y1 - y0
    return FlowField(u=u, v=v)


# ---------------------------------------------------------------------------
# Random scene sampling (the dataset "profile")

@dataclass(frozen=True)
class SceneProfile:
    """Distribution the dataset sampler draws scenes from.

    The default profile puts a single bright shape on a mid-gray
    background so severe exposure corruption (alpha=4, beta=0.4)
    saturates shape and background alike, which is what makes the
    degraded condition genuinely hard for an image-only model.
    """

    resolution: tuple[int, int] = (64, 64)
    duration: float = 1.0
    fps_hi: int = 240
    fps_rgb: int = 24
    n_shapes: int = 1
    radius_range: tuple[float, float] = (5.0, 9.0)
    intensity_range: tuple[float, float] = (0.75, 0.95)
    background_range: tuple[float, float] = (0.35, 0.55)
    speed_range: tuple[float, float] = (15.0, 40.0)
    p_square: float = 0.25
    p_circular: float = 0.3

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["resolution"] = list(self.resolution)
        d["radius_range"] = list(self.radius_range)
        d["intensity_range"] = list(self.intensity_range)
        d["background_range"] = list(self.background_range)
        d["speed_range"] = list(self.speed_range)
        return d

    @staticmethod
    def from_json(obj: dict) -> "SceneProfile":
        kw = dict(obj)
        for k in ("resolution", "radius_range", "intensity_range",
                  "background_range", "speed_range"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return SceneProfile(**kw)


def sample_scene_spec(seed: int, profile: SceneProfile = SceneProfile()) -> SceneSpec:
    """Draw a valid SceneSpec; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    h, w = profile.resolution
    shapes = []
    for _ in range(profile.n_shapes):
        radius = rng.uniform(*profile.radius_range)
        intensity = rng.uniform(*profile.intensity_range)
        kind = "square" if rng.random() < profile.p_square else "disk"
        speed = rng.uniform(*profile.speed_range)
        margin = radius + 1.5
        if rng.random() < profile.p_circular:
            orbit = rng.uniform(4.0, min(h, w) / 2 - margin - 4.0)
            omega = speed / orbit * rng.choice([-1.0, 1.0])
            cx = rng.uniform(margin + orbit, w - 1 - margin - orbit)
            cy = rng.uniform(margin + orbit, h - 1 - margin - orbit)
            path = CircularPath((cx, cy), orbit, omega, rng.uniform(0, 2 * math.pi))
        else:
            theta = rng.uniform(0, 2 * math.pi)
            vx, vy = speed * math.cos(theta), speed * math.sin(theta)
            travel_x, travel_y = vx * profile.duration, vy * profile.duration
            lo_x = margin + max(0.0, -travel_x)
            hi_x = w - 1 - margin - max(0.0, travel_x)
            lo_y = margin + max(0.0, -travel_y)
            hi_y = h - 1 - margin - max(0.0, travel_y)
            if lo_x >= hi_x or lo_y >= hi_y:
                # Too fast to fit travelling straight; halve the speed.
                vx, vy = vx / 2, vy / 2
                lo_x = margin + max(0.0, -vx * profile.duration)
                hi_x = w - 1 - margin - max(0.0, vx * profile.duration)
                lo_y = margin + max(0.0, -vy * profile.duration)
                hi_y = h - 1 - margin - max(0.0, vy * profile.duration)
            path = LinearPath((rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)),
                              (vx, vy))
        shapes.append(ShapeSpec(kind, radius, intensity, path))
    spec = SceneSpec(
        seed=seed,
        resolution=profile.resolution,
        duration=profile.duration,
        fps_hi=profile.fps_hi,
        fps_rgb=profile.fps_rgb,
        shapes=tuple(shapes),
        background_intensity=rng.uniform(*profile.background_range),
    )
    validate_scene_spec(spec)
    return spec


# ---------------------------------------------------------------------------
# On-disk layout: one directory per sample.
#
#   spec.json        scene spec (exact JSON round-trip)
#   frames_hi.npz    pixels (T, H, W) float32, t (T,) int64
#   frames_rgb.npz   same layout at the RGB rate
#   labels.json      [{"t": us, "centroids": [[x, y], ...]}, ...]
#   masks.npz        mask (T, H, W) uint8, t (T,) int64
#   events.evpl      binary event stream (written by the events module)

def save_scene_dir(directory: Path | str, spec: SceneSpec,
                   frames_hi: list[Frame], frames_rgb: list[Frame],
                   labels: list[Label]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "spec.json").write_text(json.dumps(spec.to_json(), indent=1))
    for name, frames in (("frames_hi", frames_hi), ("frames_rgb", frames_rgb)):
        np.savez_compressed(
            directory / f"{name}.npz",
            pixels=np.stack([f.pixels for f in frames]),
            t=np.array([f.t for f in frames], dtype=np.int64))
    (directory / "labels.json").write_text(json.dumps(
        [{"t": lb.t, "centroids": [list(c) for c in lb.centroids]} for lb in labels]))
    np.savez_compressed(
        directory / "masks.npz",
        mask=np.stack([lb.mask for lb in labels]).astype(np.uint8),
        t=np.array([lb.t for lb in labels], dtype=np.int64))


def _load_frames(path: Path) -> list[Frame]:
    with np.load(path) as data:
        pixels, ts = data["pixels"], data["t"]
    return [Frame(pixels[i], int(ts[i])) for i in range(len(ts))]


def load_scene_dir(directory: Path | str, *, load_hi: bool = False,
                   load_masks: bool = True) -> tuple[SceneSpec, list[Frame] | None,
                                                     list[Frame], list[Label]]:
    """Load a sample directory. ``frames_hi`` are skipped unless requested."""
    directory = Path(directory)
    spec = SceneSpec.from_json(json.loads((directory / "spec.json").read_text()))
    frames_hi = _load_frames(directory / "frames_hi.npz") if load_hi else None
    frames_rgb = _load_frames(directory / "frames_rgb.npz")
    raw = json.loads((directory / "labels.json").read_text())
    if load_masks:
        with np.load(directory / "masks.npz") as data:
            masks = data["mask"].astype(bool)
    h, w = spec.resolution
    labels = []
    for i, entry in enumerate(raw):
        mask = masks[i] if load_masks else np.zeros((h, w), dtype=bool)
        labels.append(Label(
            centroids=tuple(tuple(c) for c in entry["centroids"]),
            mask=mask, t=entry["t"]))
    return spec, frames_hi, frames_rgb, labels
