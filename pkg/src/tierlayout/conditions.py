"""Encoders for the scene-graph, room-mask and text conditions."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .scene import NUM_RELATIONS

log = logging.getLogger(__name__)

PAD, UNK, NULL = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<unk>", "<null>")


@dataclass
class ConditionBundle:
    """Encoded conditions for a batch; absent entries carry a False flag."""

    graph_token: torch.Tensor  # (B, d)
    graph_present: torch.Tensor  # (B,) bool
    room_embedding: torch.Tensor  # (B, d)
    room_present: torch.Tensor  # (B,) bool
    text_tokens: torch.Tensor  # (B, L, d)
    text_mask: torch.Tensor  # (B, L) bool, True = real token
    text_present: torch.Tensor  # (B,) bool

    @property
    def batch_size(self) -> int:
        return self.graph_token.shape[0]

    def index(self, idx) -> "ConditionBundle":
        return ConditionBundle(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def detach(self) -> "ConditionBundle":
        return ConditionBundle(**{f.name: getattr(self, f.name).detach() for f in fields(self)})

    @classmethod
    def empty(cls, batch: int, d: int, text_len: int = 1) -> "ConditionBundle":
        no = torch.zeros(batch, dtype=torch.bool)
        return cls(torch.zeros(batch, d), no, torch.zeros(batch, d), no.clone(),
                   torch.zeros(batch, text_len, d), torch.zeros(batch, text_len, dtype=torch.bool), no.clone())


def _encoder(d: int, depth: int, heads: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(d, heads, dim_feedforward=2 * d, dropout=0.0,
                                       activation="gelu", batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)


class GraphEncoder(nn.Module):
    """Directed typed edges -> edge features -> edge transformer -> one pooled token."""

    def __init__(self, num_classes: int, d: int, max_instances: int = 8,
                 num_relations: int = NUM_RELATIONS, depth: int = 2, heads: int = 4):
        super().__init__()
        self.max_instances = max_instances
        self.num_classes = num_classes
        self.src_class = nn.Embedding(num_classes, d)
        self.src_instance = nn.Embedding(max_instances, d)
        self.dst_class = nn.Embedding(num_classes, d)
        self.dst_instance = nn.Embedding(max_instances, d)
        self.relation = nn.Embedding(num_relations, d)
        self.edge_mlp = nn.Sequential(nn.Linear(3 * d, d), nn.GELU(), nn.Linear(d, d))
        self.encoder = _encoder(d, depth, heads)

    def endpoint_embeddings(self, cls, k):
        return self.src_class(cls) + self.src_instance(k), self.dst_class(cls) + self.dst_instance(k)

    def edge_features(self, src_cls, src_k, dst_cls, dst_k, rel):
        e_src = self.src_class(src_cls) + self.src_instance(src_k)
        e_dst = self.dst_class(dst_cls) + self.dst_instance(dst_k)
        return self.edge_mlp(torch.cat([e_src, e_dst, self.relation(rel)], dim=-1))

    def forward(self, edges, edge_mask, vertices):
        """edges (B, E, 3) as (src, dst, relation); vertices (B, V, 2) as (class, instance)."""
        valid = edge_mask.bool()
        B = valid.shape[0]
        d = self.relation.embedding_dim
        if not bool(valid.any()):
            return torch.zeros(B, d), torch.zeros(B, dtype=torch.bool)
        src, dst, rel = edges.long().unbind(-1)
        V = vertices.shape[1]
        if rel[valid].min() < 0 or rel[valid].max() >= self.relation.num_embeddings:
            raise ValueError("relation type out of range")
        ends = torch.cat([src[valid], dst[valid]])
        if ends.min() < 0 or ends.max() >= V:
            raise ValueError("edge endpoint is not a vertex")
        # padded entries are redirected to vertex 0 / relation 0 and masked out below
        src, dst, rel = (torch.where(valid, x, 0) for x in (src, dst, rel))
        vcls, vk = vertices.long().unbind(-1)
        src_c, src_k = torch.gather(vcls, 1, src), torch.gather(vk, 1, src)
        dst_c, dst_k = torch.gather(vcls, 1, dst), torch.gather(vk, 1, dst)
        used_k = torch.cat([src_k[valid], dst_k[valid]])
        if used_k.min() < 0 or used_k.max() >= self.max_instances:
            raise ValueError(f"instance index exceeds table size {self.max_instances}")
        src_k = src_k.clamp(0, self.max_instances - 1)
        dst_k = dst_k.clamp(0, self.max_instances - 1)
        h = self.edge_features(src_c.clamp_min(0), src_k, dst_c.clamp_min(0), dst_k, rel)
        present = valid.any(dim=1)
        attn_valid = valid.clone()
        attn_valid[~present, 0] = True  # keep attention defined for empty graphs
        h = self.encoder(h, src_key_padding_mask=~attn_valid)
        w = valid.to(h.dtype).unsqueeze(-1)
        g = (h * w).sum(1) / w.sum(1).clamp_min(1.0)
        g = torch.where(present.unsqueeze(-1), g, torch.zeros_like(g))
        return g, present


class RoomEncoder(nn.Module):
    def __init__(self, d_room: int, width: int = 32, resolution: int = 64):
        super().__init__()
        self.resolution = resolution
        chans = [1, width // 2, width, 2 * width, 2 * width]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.GELU()]
        self.conv = nn.Sequential(*layers)
        self.proj = nn.Linear(chans[-1], d_room)

    def prepare(self, masks) -> torch.Tensor:
        m = torch.as_tensor(masks).float()
        if m.dim() == 2:
            m = m[None]
        m = m.unsqueeze(1)
        if m.shape[-2:] != (self.resolution, self.resolution):
            m = F.interpolate(m, size=(self.resolution, self.resolution), mode="bilinear", align_corners=False)
        return m.clamp(0, 1)

    def forward(self, masks):
        m = self.prepare(masks)
        if bool((m.flatten(1).amax(1) == 0).any()):
            log.warning("room mask with no free-space pixels")
        feat = self.conv(m).mean(dim=(-2, -1))
        return self.proj(feat)


class Vocabulary:
    def __init__(self, words: Sequence[str]):
        self.words = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        self.lookup = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, prompts: Sequence[str], max_len: int = 32):
        """Whitespace-tokenize; returns ids (B, L) and a validity mask."""
        rows = []
        for p in prompts:
            ids = [self.lookup.get(w, UNK) for w in p.lower().split()][:max_len]
            rows.append(ids)
        L = max(1, max(len(r) for r in rows)) if rows else 1
        ids = torch.full((len(rows), L), PAD, dtype=torch.long)
        mask = torch.zeros(len(rows), L, dtype=torch.bool)
        for i, r in enumerate(rows):
            if not r:
                ids[i, 0] = NULL
                continue
            ids[i, :len(r)] = torch.tensor(r)
            mask[i, :len(r)] = True
        return ids, mask

    def dump(self) -> str:
        return "\n".join(self.words[len(SPECIAL_TOKENS):]) + "\n"


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, d: int, max_len: int = 32, depth: int = 2, heads: int = 4):
        super().__init__()
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, d)
        self.position = nn.Embedding(max_len, d)
        self.encoder = _encoder(d, depth, heads)
        self.proj = nn.Linear(d, d)

    def forward(self, ids, mask):
        L = ids.shape[1]
        x = self.embed(ids) + self.position(torch.arange(L))
        attn_valid = mask.clone()
        attn_valid[:, 0] = True  # the null token stands in for empty prompts
        x = self.encoder(x, src_key_padding_mask=~attn_valid)
        return self.proj(x) * attn_valid.unsqueeze(-1).to(x.dtype)
