"""Cross-attention fusion of image/fused features with event features.

The fusion block stacks N transformer-decoder-style layers: flattened
image (or previously fused) feature tokens act as queries that self-attend,
then cross-attend to event feature tokens (keys and values), then pass a
pointwise MLP — each sublayer pre-normalized with a residual connection.
Separate learned positional tables for query and event tokens let
attention discover spatial correspondence without assuming pixel-wise
alignment between the two modalities.

The same weights serve both the initial image+event fusion and every
subsequent temporal update step; ``iterate_sequence`` feeds each output
back as the next query, ``fuse_no_iter`` keeps the anchor fixed (the
ablation baseline).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .encoders import ConvEncoder, EncoderConfig


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    n_layers: int = 3
    model_dim: int = 64
    n_heads: int = 4
    mlp_ratio: float = 2.0
    tokens_h: int = 8
    tokens_w: int = 8

    def __post_init__(self):
        if self.n_layers < 1:
            raise FusionError("need at least one fusion layer")
        if self.model_dim % self.n_heads:
            raise FusionError(
                f"model_dim={self.model_dim} not divisible by n_heads={self.n_heads}")

    @property
    def n_tokens(self) -> int:
        return self.tokens_h * self.tokens_w

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_json(obj: dict) -> "FusionConfig":
        return FusionConfig(**obj)


class MultiheadAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, keyval: torch.Tensor) -> torch.Tensor:
        b, nq, d = query.shape
        nk = keyval.shape[1]
        q = self.q_proj(query).reshape(b, nq, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(keyval).reshape(b, nk, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(keyval).reshape(b, nk, self.n_heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out_proj(out)


class DecoderLayer(nn.Module):
    """Pre-norm: self-attention, cross-attention to events, pointwise MLP."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.self_attn = MultiheadAttention(dim, n_heads)
        self.cross_attn = MultiheadAttention(dim, n_heads)
        self.norm_self = nn.LayerNorm(dim)
        self.norm_query = nn.LayerNorm(dim)
        self.norm_events = nn.LayerNorm(dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(),
                                 nn.Linear(hidden, dim))

    def forward(self, tokens: torch.Tensor, event_tokens: torch.Tensor) -> torch.Tensor:
        x = self.norm_self(tokens)
        tokens = tokens + self.self_attn(x, x)
        tokens = tokens + self.cross_attn(self.norm_query(tokens),
                                          self.norm_events(event_tokens))
        tokens = tokens + self.mlp(self.norm_mlp(tokens))
        return tokens


class CrossAttentionFusion(nn.Module):
    """Decoder-style fusion with two stabilizers.

    Tokens are normalized at entry so the learned positional tables
    (init std 0.5) are commensurate with content; without this, queries
    from a low-contrast image differ too little by position for attention
    to route event information anywhere specific. The output is the query
    feature plus a learned correction (global residual): the update starts
    at identity, so training capacity goes into what the events change
    rather than into reproducing the feature map wholesale. A per-token
    gate on the passthrough lets the block suppress query content it
    learns to distrust (e.g. features of a saturated image) instead of
    synthesizing a full-scale cancellation."""

    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        self.query_pos = nn.Parameter(torch.zeros(config.n_tokens, config.model_dim))
        self.event_pos = nn.Parameter(torch.zeros(config.n_tokens, config.model_dim))
        nn.init.normal_(self.query_pos, std=0.5)
        nn.init.normal_(self.event_pos, std=0.5)
        self.query_in_norm = nn.LayerNorm(config.model_dim)
        self.event_in_norm = nn.LayerNorm(config.model_dim)
        self.layers = nn.ModuleList(
            DecoderLayer(config.model_dim, config.n_heads, config.mlp_ratio)
            for _ in range(config.n_layers))
        self.final_norm = nn.LayerNorm(config.model_dim)
        self.out_proj = nn.Linear(config.model_dim, config.model_dim)
        self.gate = nn.Linear(config.model_dim, 1)
        with torch.no_grad():
            # near-identity start; nonzero so distinct inputs stay distinct
            self.out_proj.weight.mul_(0.1)
            self.out_proj.bias.zero_()
            self.gate.weight.zero_()
            self.gate.bias.fill_(3.0)  # passthrough open (sigmoid ~ 0.95)

    def forward(self, query_feat: torch.Tensor, event_feat: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        expected = (cfg.model_dim, cfg.tokens_h, cfg.tokens_w)
        if query_feat.shape[1:] != expected or event_feat.shape[1:] != expected:
            raise FusionError(
                f"features must be (B, {cfg.model_dim}, {cfg.tokens_h}, "
                f"{cfg.tokens_w}); got {tuple(query_feat.shape)} and "
                f"{tuple(event_feat.shape)}")
        b = query_feat.shape[0]
        normed = self.query_in_norm(query_feat.flatten(2).transpose(1, 2))
        tokens = normed + self.query_pos
        ev = self.event_in_norm(event_feat.flatten(2).transpose(1, 2)) + self.event_pos
        for layer in self.layers:
            tokens = layer(tokens, ev)
        correction = self.out_proj(self.final_norm(tokens))
        gate = torch.sigmoid(self.gate(normed))  # (B, N, 1)
        out = (gate * query_feat.flatten(2).transpose(1, 2) + correction)
        return out.transpose(1, 2).reshape(b, cfg.model_dim, cfg.tokens_h,
                                           cfg.tokens_w)


class PlugModule(nn.Module):
    """The attachable pair: event encoder + fusion block.

    Self-contained — attaching to a base model requires only a matching
    feature shape; no base parameters are referenced.
    """

    def __init__(self, encoder_config: EncoderConfig, fusion_config: FusionConfig):
        super().__init__()
        if encoder_config.feature_dim != fusion_config.model_dim:
            raise FusionError(
                f"event-encoder feature dim {encoder_config.feature_dim} must "
                f"equal fusion model_dim {fusion_config.model_dim}")
        self.encoder_config = encoder_config
        self.fusion_config = fusion_config
        self.ev_encoder = ConvEncoder(encoder_config)
        self.fusion = CrossAttentionFusion(fusion_config)
        # Sparse polarity deposits are O(1) at a few percent of pixels; the
        # gain lifts them out of the first GELU's attenuating small-signal
        # regime. Lives on the plug so the encoder stays architecture-shared.
        self.voxel_gain = nn.Parameter(torch.tensor(10.0))


def ev_encode(plug: PlugModule, voxels: torch.Tensor) -> torch.Tensor:
    """Event features from a (B, bins, H, W) voxel batch.

    Features are measured relative to the encoder's response to an empty
    stream, so an all-zero voxel grid maps to exactly-zero features and
    sparse event content is not drowned by the bias-driven background
    (which is orders of magnitude larger for typical event densities).
    """
    if voxels.shape[1] != plug.encoder_config.in_channels:
        raise FusionError(
            f"voxel has {voxels.shape[1]} bins, event encoder expects "
            f"{plug.encoder_config.in_channels}")
    zero_response = plug.ev_encoder(torch.zeros_like(voxels[:1]))
    return plug.ev_encoder(plug.voxel_gain * voxels) - zero_response


def fuse(plug: PlugModule, query_feat: torch.Tensor,
         ev_feat: torch.Tensor) -> torch.Tensor:
    """One fusion pass; output shape equals the query feature shape."""
    if query_feat.shape != ev_feat.shape:
        raise FusionError(
            f"query {tuple(query_feat.shape)} and event {tuple(ev_feat.shape)} "
            f"features must share a shape")
    return plug.fusion(query_feat, ev_feat)


def iterate_sequence(plug: PlugModule, feat_init: torch.Tensor,
                     ev_feats: list[torch.Tensor]) -> list[torch.Tensor]:
    """Temporal update chain: F_j = fuse(F_{j-1}, ev_feats[j]), F_0 = feat_init."""
    if not ev_feats:
        raise FusionError("need at least one event feature to iterate over")
    out = []
    feat = feat_init
    for ev in ev_feats:
        feat = fuse(plug, feat, ev)
        out.append(feat)
    return out


def fuse_no_iter(plug: PlugModule, feat_init: torch.Tensor,
                 ev_feats: list[torch.Tensor]) -> list[torch.Tensor]:
    """Ablation chain anchored at feat_init: F_j = fuse(feat_init, ev_feats[j])."""
    if not ev_feats:
        raise FusionError("need at least one event feature to fuse")
    return [fuse(plug, feat_init, ev) for ev in ev_feats]
