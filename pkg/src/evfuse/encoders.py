"""Image/event encoders, task heads, and the frozen base model.

The event encoder shares the image encoder architecture except for the
input-channel count of the first convolution (1 grayscale channel vs B
voxel bins), which is what lets fused features live in the image-feature
space. The base model (image encoder + task head) is trained once on
clean frames with ground-truth labels, then frozen; a content digest over
its parameters witnesses that nothing downstream ever mutates it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .scenes import Frame


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Stage widths of the shared encoder; each stage halves resolution."""

    in_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64)
    feature_dim: int = 64

    def __post_init__(self):
        if len(self.widths) < 1:
            raise EncoderError("need at least one stage")
        if self.feature_dim != self.widths[-1]:
            raise EncoderError(
                f"feature_dim={self.feature_dim} must equal the last stage "
                f"width {self.widths[-1]}")

    @property
    def stages(self) -> int:
        return len(self.widths)

    @property
    def stride(self) -> int:
        return 2 ** self.stages

    def to_json(self) -> dict:
        return {"in_channels": self.in_channels, "widths": list(self.widths),
                "feature_dim": self.feature_dim}

    @staticmethod
    def from_json(obj: dict) -> "EncoderConfig":
        return EncoderConfig(obj["in_channels"], tuple(obj["widths"]),
                             obj["feature_dim"])


class ConvEncoder(nn.Module):
    """Stages of (3x3 conv, group norm, GELU, 2x average pool).

    The normalization keeps feature magnitudes comparable across inputs —
    without it, activations on out-of-distribution images (e.g. fully
    saturated frames) blow up and the Gram-based style loss explodes by
    three orders of magnitude. GELU keeps the map smooth everywhere,
    which the finite-difference gradient checks rely on.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        c = config.in_channels
        for width in config.widths:
            layers += [nn.Conv2d(c, width, 3, padding=1),
                       nn.GroupNorm(1, width), nn.GELU(), nn.AvgPool2d(2)]
            c = width
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise EncoderError(
                f"expected (B, {self.config.in_channels}, H, W) input, got "
                f"{tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if h % self.config.stride or w % self.config.stride:
            raise EncoderError(
                f"input {h}x{w} not divisible by encoder stride {self.config.stride}")
        return self.net(x)


class CentroidHead(nn.Module):
    """Feature map -> (B, n_shapes, 2) normalized centroid coordinates.

    Spatial soft-argmax over a per-shape heatmap: sub-token precision from
    an 8x8 feature grid, smooth everywhere, and it degrades gracefully (a
    flat heatmap predicts the image center).
    """

    def __init__(self, feature_dim: int, tokens_h: int, tokens_w: int,
                 n_shapes: int):
        super().__init__()
        self.n_shapes = n_shapes
        self.heat = nn.Conv2d(feature_dim, n_shapes, 1)
        gy, gx = torch.meshgrid(torch.arange(tokens_h), torch.arange(tokens_w),
                                indexing="ij")
        self.register_buffer("grid_x", ((gx.float() + 0.5) / tokens_w).reshape(-1))
        self.register_buffer("grid_y", ((gy.float() + 0.5) / tokens_h).reshape(-1))

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        heat = self.heat(feat).flatten(2)  # (B, n_shapes, H'W')
        attn = torch.softmax(heat, dim=-1)
        x = (attn * self.grid_x.to(feat.dtype)).sum(-1)
        y = (attn * self.grid_y.to(feat.dtype)).sum(-1)
        return torch.stack([x, y], dim=-1)


class SegmentationHead(nn.Module):
    """Feature map -> (B, 1, H, W) foreground logits at input resolution."""

    def __init__(self, feature_dim: int, stride: int, hidden: int = 32):
        super().__init__()
        self.stride = stride
        self.net = nn.Sequential(
            nn.Conv2d(feature_dim, hidden, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, 1, 1),
        )

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        logits = self.net(feat)
        return nn.functional.interpolate(
            logits, scale_factor=self.stride, mode="bilinear", align_corners=False)


def build_head(task: str, config: EncoderConfig, image_size: int,
               n_shapes: int) -> nn.Module:
    tokens = image_size // config.stride
    if task == "centroid":
        return CentroidHead(config.feature_dim, tokens, tokens, n_shapes)
    if task == "segmentation":
        return SegmentationHead(config.feature_dim, config.stride)
    raise EncoderError(f"unknown task kind {task!r}")


def parameter_digest(module: nn.Module, extra: dict | None = None) -> str:
    """SHA-256 over name-sorted parameter/buffer bytes plus metadata."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(str(tensor.dtype).encode())
        h.update(tensor.numpy().tobytes())
    if extra:
        h.update(json.dumps(extra, sort_keys=True).encode())
    return h.hexdigest()


@dataclass
class BaseModel:
    """Frozen image encoder plus task head (the model the plug attaches to)."""

    encoder: ConvEncoder
    head: nn.Module
    task: str
    n_shapes: int
    image_size: int
    digest: str = ""

    def modules_(self) -> nn.Module:
        holder = nn.Module()
        holder.encoder = self.encoder
        holder.head = self.head
        return holder

    def compute_digest(self) -> str:
        return parameter_digest(self.modules_(), {
            "task": self.task, "n_shapes": self.n_shapes,
            "image_size": self.image_size,
            "encoder": self.encoder.config.to_json()})

    def freeze(self) -> "BaseModel":
        for p in self.encoder.parameters():
            p.requires_grad_(False)
            p.grad = None
        for p in self.head.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.encoder.eval()
        self.head.eval()
        self.digest = self.compute_digest()
        return self

    def verify_digest(self) -> None:
        current = self.compute_digest()
        if current != self.digest:
            raise EncoderError(
                f"base model parameters changed: digest {current[:12]}... != "
                f"recorded {self.digest[:12]}...")


def frames_to_tensor(frames: list[Frame] | Frame, dtype=torch.float32) -> torch.Tensor:
    """Stack grayscale frames into a (B, 1, H, W) tensor."""
    if isinstance(frames, Frame):
        frames = [frames]
    return torch.from_numpy(np.stack([f.pixels for f in frames])).to(dtype).unsqueeze(1)


def im_encode(base: BaseModel, images: torch.Tensor | Frame | list[Frame]) -> torch.Tensor:
    """Frozen image features, shape (B, C, H/stride, W/stride)."""
    if not isinstance(images, torch.Tensor):
        images = frames_to_tensor(images)
    if images.shape[-1] != base.image_size or images.shape[-2] != base.image_size:
        raise EncoderError(
            f"image resolution {tuple(images.shape[-2:])} does not match the "
            f"base model's {base.image_size}")
    return base.encoder(images)


def task_head(base: BaseModel, feat: torch.Tensor) -> torch.Tensor:
    return base.head(feat)


def check_architecture_sharing(im_encoder: ConvEncoder, ev_encoder: ConvEncoder) -> None:
    """Parameter shapes must match except the first conv's input channels."""
    im_state = im_encoder.state_dict()
    ev_state = ev_encoder.state_dict()
    if im_state.keys() != ev_state.keys():
        raise EncoderError("encoders have different parameter sets")
    first_conv = "net.0.weight"
    for name in im_state:
        a, b = im_state[name].shape, ev_state[name].shape
        if name == first_conv:
            if a[0] != b[0] or a[2:] != b[2:]:
                raise EncoderError(
                    f"first conv differs beyond input channels: {a} vs {b}")
        elif a != b:
            raise EncoderError(f"parameter {name} shape differs: {a} vs {b}")


# ---------------------------------------------------------------------------
# Base-model pretraining (clean frames, ground-truth labels)

@dataclass(frozen=True)
class PretrainConfig:
    # Two epochs on the default 200-scene dataset land the base near 0.8 px
    # clean error: comfortably under the 2 px gate, while leaving the
    # one-step-ahead bound of the temporal-resolution contract above the
    # ~0.9 px information floor of the event stream itself.
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 2
    seed: int = 0

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_json(obj: dict) -> "PretrainConfig":
        return PretrainConfig(**obj)


def _centroid_targets(labels, image_size: int) -> np.ndarray:
    return np.array([[[c[0] / image_size, c[1] / image_size] for c in lb.centroids]
                     for lb in labels], dtype=np.float32)


def pretrain_base(images: np.ndarray, labels: list, task: str,
                  encoder_config: EncoderConfig, config: PretrainConfig,
                  log_fn=None) -> tuple[BaseModel, list[float]]:
    """Train the image encoder + head on clean frames, then freeze.

    ``images`` is (N, H, W) float32; ``labels`` the matching Label list.
    Returns the frozen model and per-epoch mean losses. Aborts on a
    non-finite loss.
    """
    torch.manual_seed(config.seed)
    image_size = images.shape[-1]
    n_shapes = len(labels[0].centroids)
    encoder = ConvEncoder(encoder_config)
    head = build_head(task, encoder_config, image_size, n_shapes)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)

    x_all = torch.from_numpy(images).unsqueeze(1)
    if task == "centroid":
        y_all = torch.from_numpy(_centroid_targets(labels, image_size))
    else:
        y_all = torch.from_numpy(
            np.stack([lb.mask for lb in labels]).astype(np.float32)).unsqueeze(1)

    rng = np.random.default_rng(config.seed)
    history = []
    n = len(x_all)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            pred = head(encoder(xb))
            if task == "centroid":
                loss = nn.functional.mse_loss(pred, yb)
            else:
                loss = nn.functional.binary_cross_entropy_with_logits(pred, yb)
            if not torch.isfinite(loss):
                raise EncoderError(
                    f"pretraining diverged at epoch {epoch}: loss={float(loss)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)))
        if log_fn:
            log_fn({"phase": "pretrain", "epoch": epoch, "loss": history[-1]})

    base = BaseModel(encoder=encoder, head=head, task=task,
                     n_shapes=n_shapes, image_size=image_size)
    return base.freeze(), history
