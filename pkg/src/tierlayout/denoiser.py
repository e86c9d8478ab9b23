"""Set transformer denoiser with AdaLN timestep/room conditioning.

Object slots carry no index encoding: the only geometric cue is a sinusoidal
encoding of each slot's own (noisy) translation, added with a learnable
scalar weight ``gamma_pos``.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .conditions import ConditionBundle


def sinusoidal_features(x: torch.Tensor, num_freqs: int) -> torch.Tensor:
    """(..., k) -> (..., 2 * k * num_freqs) with frequencies 2^i * pi."""
    freqs = (2.0 ** torch.arange(num_freqs, dtype=x.dtype)) * math.pi
    ang = x.unsqueeze(-1) * freqs
    return torch.cat([ang.sin(), ang.cos()], dim=-1).flatten(-2)


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class TimestepEmbedding(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))

    def forward(self, t):
        feats = timestep_features(torch.as_tensor(t), self.d)
        return self.mlp(feats.to(self.mlp[0].weight.dtype))


class TokenBuilder(nn.Module):
    def __init__(self, num_classes: int, d: int, num_freqs: int = 8,
                 gamma_init: float = 0.01, learn_gamma: bool = True):
        super().__init__()
        self.num_classes = num_classes
        self.num_freqs = num_freqs
        self.class_proj = nn.Linear(num_classes, d)
        self.translation_proj = nn.Linear(3, d)
        self.size_proj = nn.Linear(3, d)
        self.orientation_proj = nn.Linear(2, d)
        self.spatial_proj = nn.Linear(6 * num_freqs, d)
        self.gamma_pos = nn.Parameter(torch.tensor(float(gamma_init)), requires_grad=learn_gamma)

    def attribute_embedding(self, rows):
        C = self.num_classes
        return (self.class_proj(rows[..., :C]) + self.translation_proj(rows[..., C:C + 3])
                + self.size_proj(rows[..., C + 3:C + 6]) + self.orientation_proj(rows[..., C + 6:C + 8]))

    def spatial_embedding(self, rows):
        C = self.num_classes
        return self.spatial_proj(sinusoidal_features(rows[..., C:C + 3], self.num_freqs))

    def forward(self, rows):
        return self.attribute_embedding(rows) + self.gamma_pos * self.spatial_embedding(rows)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class AdaLNBlock(nn.Module):
    """Self-attention, cross-attention and MLP, each behind an AdaLN-gated residual."""

    def __init__(self, d: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.cross_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm3 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        hidden = int(d * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, d))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 9 * d))
        # small rather than zero init: gates must pass signal from the first step
        nn.init.normal_(self.ada[-1].weight, std=0.02)
        nn.init.zeros_(self.ada[-1].bias)

    def forward(self, x, cond, pad_mask, context, context_pad):
        (sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3) = self.ada(cond).chunk(9, dim=-1)
        h = modulate(self.norm1(x), sh1, sc1)
        h, _ = self.self_attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
        x = x + g1.unsqueeze(1) * h
        h = modulate(self.norm2(x), sh2, sc2)
        h, _ = self.cross_attn(h, context, context, key_padding_mask=context_pad, need_weights=False)
        x = x + g2.unsqueeze(1) * h
        h = modulate(self.norm3(x), sh3, sc3)
        return x + g3.unsqueeze(1) * self.mlp(h)


class LayoutDenoiser(nn.Module):
    """Predicts v for every noisy slot; clean anchor slots only provide context."""

    def __init__(self, num_classes: int, d_model: int = 256, depth: int = 4, heads: int = 4,
                 num_freqs: int = 8, gamma_init: float = 0.01, learn_gamma: bool = True):
        super().__init__()
        self.num_classes = num_classes
        self.dim = num_classes + 8
        self.d_model = d_model
        self.tokens = TokenBuilder(num_classes, d_model, num_freqs, gamma_init, learn_gamma)
        self.anchor_role = nn.Parameter(torch.zeros(d_model))
        self.time_embed = TimestepEmbedding(d_model)
        self.null_room = nn.Parameter(torch.zeros(d_model))
        self.null_graph = nn.Parameter(torch.randn(d_model) * 0.02)
        self.null_text = nn.Parameter(torch.randn(d_model) * 0.02)
        self.blocks = nn.ModuleList([AdaLNBlock(d_model, heads) for _ in range(depth)])
        self.final_norm = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d_model, 2 * d_model))
        nn.init.zeros_(self.final_ada[-1].weight)
        nn.init.zeros_(self.final_ada[-1].bias)
        self.out = nn.Linear(d_model, self.dim)
        nn.init.normal_(self.out.weight, std=0.02)
        nn.init.zeros_(self.out.bias)

    def context(self, cond: ConditionBundle):
        B = cond.batch_size
        text_on = cond.text_present.view(B, 1, 1)
        text = torch.where(text_on, cond.text_tokens, self.null_text.expand_as(cond.text_tokens))
        text_valid = torch.where(cond.text_present.view(B, 1), cond.text_mask, torch.zeros_like(cond.text_mask))
        # absent text: a single learned null token stands in
        text_valid = text_valid.clone()
        text_valid[~cond.text_present, 0] = True
        graph = torch.where(cond.graph_present.view(B, 1), cond.graph_token, self.null_graph.expand(B, -1))
        ctx = torch.cat([text, graph.unsqueeze(1)], dim=1)
        valid = torch.cat([text_valid, torch.ones(B, 1, dtype=torch.bool)], dim=1)
        return ctx, ~valid

    def forward(self, x_noisy, t, cond: ConditionBundle, anchors=None, anchor_mask=None):
        B, N, D = x_noisy.shape
        if D != self.dim:
            raise ValueError(f"slot width {D} != {self.dim}")
        if cond.batch_size != B:
            raise ValueError(f"conditions batch {cond.batch_size} != layout batch {B}")
        t = torch.as_tensor(t).expand(B) if torch.as_tensor(t).dim() == 0 else torch.as_tensor(t)
        h = self.tokens(x_noisy)
        pad = torch.zeros(B, N, dtype=torch.bool)
        M = 0
        if anchors is not None:
            M = anchors.shape[1]
            if anchors.shape[0] != B:
                raise ValueError("anchor batch does not match layout batch")
            a = self.tokens(anchors) + self.anchor_role
            h = torch.cat([a, h], dim=1)
            if anchor_mask is None:
                anchor_mask = torch.ones(B, M, dtype=torch.bool)
            pad = torch.cat([~anchor_mask.bool(), pad], dim=1)
        c = self.time_embed(t)
        c = c + torch.where(cond.room_present.view(B, 1), cond.room_embedding, self.null_room.expand(B, -1))
        ctx, ctx_pad = self.context(cond)
        for block in self.blocks:
            h = block(h, c, pad, ctx, ctx_pad)
        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        h = modulate(self.final_norm(h), shift, scale)
        return self.out(h[:, M:])
