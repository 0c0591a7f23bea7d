"""Feature-matching and task losses, and the weighted training objective.

The plug is supervised purely by the frozen image branch: fused features
must reproduce the clean-image encoder features elementwise (reconstruction
loss) and in channel-correlation statistics (style loss via Gram matrices),
while task outputs must match the frozen head's predictions on the clean
image (pseudo-labels, never ground truth).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


class LossError(ValueError):
    pass


def gram(feat: torch.Tensor) -> torch.Tensor:
    """Channel Gram matrix, spatially pooled: (B, C, C) = F F^T / (H' W').

    Accepts (B, C, H, W) or a single (C, H, W) map.
    """
    squeeze = feat.dim() == 3
    if squeeze:
        feat = feat.unsqueeze(0)
    b, c, h, w = feat.shape
    flat = feat.reshape(b, c, h * w)
    g = torch.bmm(flat, flat.transpose(1, 2)) / (h * w)
    return g.squeeze(0) if squeeze else g


def recon_loss(feat: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if feat.shape != target.shape:
        raise LossError(f"feature shapes differ: {tuple(feat.shape)} vs "
                        f"{tuple(target.shape)}")
    return F.mse_loss(feat, target)


def style_loss(feat: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if feat.shape != target.shape:
        raise LossError(f"feature shapes differ: {tuple(feat.shape)} vs "
                        f"{tuple(target.shape)}")
    return F.mse_loss(gram(feat), gram(target))


def task_loss(task: str, pred: torch.Tensor, pseudo: torch.Tensor) -> torch.Tensor:
    """Centroid: coordinate MSE in normalized units. Segmentation: BCE of
    predicted logits against pseudo-label probabilities."""
    if pred.shape != pseudo.shape:
        raise LossError(f"prediction shapes differ: {tuple(pred.shape)} vs "
                        f"{tuple(pseudo.shape)}")
    if task == "centroid":
        return F.mse_loss(pred, pseudo)
    if task == "segmentation":
        return F.binary_cross_entropy_with_logits(pred, pseudo)
    raise LossError(f"unknown task kind {task!r}")


@dataclass(frozen=True)
class LossWeights:
    task: float = 1.0
    recon: float = 10.0
    style: float = 10.0

    def __post_init__(self):
        if min(self.task, self.recon, self.style) < 0:
            raise LossError("loss weights must be nonnegative")
        if self.task == self.recon == self.style == 0:
            raise LossError("at least one loss weight must be positive")

    def to_json(self) -> dict:
        return {"task": self.task, "recon": self.recon, "style": self.style}

    @staticmethod
    def from_json(obj: dict) -> "LossWeights":
        return LossWeights(obj.get("task", 1.0), obj.get("recon", 10.0),
                           obj.get("style", 10.0))


@dataclass
class LossReport:
    """Per-timestep loss terms plus the weighted total.

    ``steps`` maps timestep offset j (0 = anchor) to raw, unweighted term
    values. ``total`` equals the weighted sum of all terms.
    """

    steps: list[dict] = field(default_factory=list)
    weights: LossWeights = LossWeights()
    total: float = 0.0

    def check(self, rel_tol: float = 1e-6) -> None:
        acc = 0.0
        for s in self.steps:
            acc += (self.weights.task * s["task"] + self.weights.recon * s["recon"]
                    + self.weights.style * s["style"])
        if abs(acc - self.total) > rel_tol * max(abs(self.total), 1e-12):
            raise LossError(f"report total {self.total} != sum of terms {acc}")

    def to_json(self) -> dict:
        return {"steps": self.steps, "weights": self.weights.to_json(),
                "total": self.total}


def total_loss(weights: LossWeights,
               step_terms: list[dict[str, torch.Tensor]]) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum over timesteps (anchor step included).

    ``step_terms`` holds one dict per timestep with scalar tensors under
    keys "task", "recon", "style" and an integer "j". Returns the scalar
    total (differentiable) plus a float report.
    """
    if not step_terms:
        raise LossError("need at least one timestep of loss terms")
    total = None
    steps = []
    for terms in step_terms:
        contrib = (weights.task * terms["task"] + weights.recon * terms["recon"]
                   + weights.style * terms["style"])
        total = contrib if total is None else total + contrib
        steps.append({"j": int(terms.get("j", len(steps))),
                      "task": float(terms["task"].detach()),
                      "recon": float(terms["recon"].detach()),
                      "style": float(terms["style"].detach())})
    report = LossReport(steps=steps, weights=weights, total=float(total.detach()))
    return total, report
