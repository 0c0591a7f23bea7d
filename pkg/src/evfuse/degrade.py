"""Photometric image corruption: exposure/contrast shifts and flow-based blur.

These corruptions stand in for what HDR scenes and fast motion do to a
real camera: ``degrade_exposure`` applies a gain/offset then clips, and
``degrade_blur`` averages the image warped along fractions of an optical
flow field. Both are deterministic; the training-time schedule that
samples them lives in :class:`DegradeSchedule`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenes import FlowField, Frame


class DegradeError(ValueError):
    pass


@dataclass(frozen=True)
class DegradeSpec:
    mode: str = "none"  # none | exposure | blur
    alpha: float = 1.0
    beta: float = 0.0
    n_interp: int = 1
    flow: FlowField | None = None

    def __post_init__(self):
        if self.mode not in ("none", "exposure", "blur"):
            raise DegradeError(f"unknown degrade mode {self.mode!r}")
        if self.alpha <= 0:
            raise DegradeError(f"contrast gain alpha must be positive, got {self.alpha}")
        if self.n_interp < 1:
            raise DegradeError(f"n_interp must be >= 1, got {self.n_interp}")


def degrade_exposure(image: Frame, alpha: float, beta: float) -> Frame:
    """out = clip(alpha * pixels + beta, 0, 1); timestamp preserved."""
    if alpha <= 0:
        raise DegradeError(f"contrast gain alpha must be positive, got {alpha}")
    out = np.clip(alpha * image.pixels.astype(np.float64) + beta, 0.0, 1.0)
    return Frame(out.astype(np.float32), image.t)


def warp_bilinear(pixels: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Backward warp: out(x, y) = pixels(x - u, y - v), border-replicated."""
    h, w = pixels.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = np.clip(xs - u, 0.0, w - 1.0)
    sy = np.clip(ys - v, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    p = pixels.astype(np.float64)
    top = p[y0, x0] * (1 - fx) + p[y0, x1] * fx
    bot = p[y1, x0] * (1 - fx) + p[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def degrade_blur(image: Frame, flow: FlowField, n_interp: int) -> Frame:
    """Average of the image warped by k/n_interp of the flow, k = 0..n_interp."""
    if flow.u.shape != image.pixels.shape or flow.v.shape != image.pixels.shape:
        raise DegradeError(
            f"flow resolution {flow.u.shape} does not match image {image.pixels.shape}")
    if n_interp < 1:
        raise DegradeError(f"n_interp must be >= 1, got {n_interp}")
    acc = np.zeros_like(image.pixels, dtype=np.float64)
    for k in range(n_interp + 1):
        frac = k / n_interp
        if frac == 0.0:
            acc += image.pixels
        else:
            acc += warp_bilinear(image.pixels, frac * flow.u, frac * flow.v)
    out = acc / (n_interp + 1)
    return Frame(out.astype(np.float32), image.t)


def apply_degrade(image: Frame, spec: DegradeSpec) -> Frame:
    if spec.mode == "none":
        return image
    if spec.mode == "exposure":
        return degrade_exposure(image, spec.alpha, spec.beta)
    if spec.flow is None:
        raise DegradeError("blur degradation requires a flow field")
    return degrade_blur(image, spec.flow, spec.n_interp)


@dataclass(frozen=True)
class DegradeSchedule:
    """Training-time corruption sampler.

    Mode none with probability ``p_none``, otherwise exposure or blur with
    equal probability. Exposure draws alpha log-uniformly and beta
    uniformly; blur uses the ground-truth flow over the preceding RGB
    interval (materialized by the caller) with ``n_interp`` sub-steps.
    """

    p_none: float = 0.5
    alpha_range: tuple[float, float] = (0.1, 6.0)
    beta_range: tuple[float, float] = (-0.3, 0.5)
    n_interp: int = 8

    def draw(self, rng: np.random.Generator) -> DegradeSpec:
        """Draw mode and photometric parameters; blur flow is filled later."""
        r = rng.random()
        if r < self.p_none:
            return DegradeSpec()
        if rng.random() < 0.5:
            log_lo, log_hi = math.log(self.alpha_range[0]), math.log(self.alpha_range[1])
            alpha = math.exp(rng.uniform(log_lo, log_hi))
            beta = rng.uniform(*self.beta_range)
            return DegradeSpec(mode="exposure", alpha=alpha, beta=beta)
        return DegradeSpec(mode="blur", n_interp=self.n_interp)

    def to_json(self) -> dict:
        return {"p_none": self.p_none, "alpha_range": list(self.alpha_range),
                "beta_range": list(self.beta_range), "n_interp": self.n_interp}

    @staticmethod
    def from_json(obj: dict) -> "DegradeSchedule":
        return DegradeSchedule(
            p_none=obj.get("p_none", 0.5),
            alpha_range=tuple(obj.get("alpha_range", (0.1, 6.0))),
            beta_range=tuple(obj.get("beta_range", (-0.3, 0.5))),
            n_interp=obj.get("n_interp", 8))
