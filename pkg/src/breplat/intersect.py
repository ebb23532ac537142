"""Neural intersection: from an ordered pair of surface latents, decide whether
the surfaces meet and recover the oriented feature of their shared curve.

The ordered pair matters: the recovered half-curve is oriented for the first
surface's loop convention, so swapping the pair must produce the reversed
curve. Order is injected with a learned two-slot embedding on top of the
query/memory asymmetry of the cross-attention stack.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .blocks import CrossAttentionStack, SelfAttentionStack
from .brep import BRepModel

SURFACE_WIDTH = 32  # 2x2 spatial slots x 8 channels
CURVE_WIDTH = 16  # 2 spatial slots x 8 channels
LATENT_CHANNELS = 8


def pair_adjacency(model: BRepModel) -> np.ndarray:
    """m x m binary matrix: (i, j) = 1 iff a half-curve of i has its twin on j."""
    m, n = model.num_surfaces, model.num_half_curves
    owner = model.surf_curve_adj.argmax(axis=0)
    adj = np.zeros((m, m), dtype=np.uint8)
    for j in range(n):
        a, b = int(owner[j]), int(owner[int(model.twin[j])])
        if a != b:
            adj[a, b] = 1
    return adj


def balanced_sample(adjacency: np.ndarray, seed) -> list[tuple[int, int, int]]:
    """Equal numbers of positive and negative ordered pairs, both without
    replacement, capped by the minority class. Deterministic given seed."""
    adj = np.asarray(adjacency)
    m = adj.shape[0]
    off = ~np.eye(m, dtype=bool)
    pos = np.argwhere((adj > 0) & off)
    neg = np.argwhere((adj == 0) & off)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("balanced sampling needs at least one positive and one negative pair")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = min(len(pos), len(neg))
    pos = pos[rng.choice(len(pos), size=k, replace=False)]
    neg = neg[rng.choice(len(neg), size=k, replace=False)]
    out = [(int(i), int(j), 1) for i, j in pos] + [(int(i), int(j), 0) for i, j in neg]
    return out


def classify(logit, threshold: float = 0.5) -> bool:
    """Intersection decision: sigmoid(logit) >= threshold."""
    return bool(1.0 / (1.0 + np.exp(-float(logit))) >= threshold)


class LatentRefiner(nn.Module):
    """Self-attention over the m surface tokens, applied after latent sampling."""

    def __init__(self, width: int = 64, layers: int = 2, heads: int = 8, ffn: int = 128):
        super().__init__()
        self.lift = nn.Linear(SURFACE_WIDTH, width)
        self.encoder = SelfAttentionStack(width, heads, ffn, layers)
        self.proj = nn.Linear(width, SURFACE_WIDTH)

    def forward(self, z, padding_mask=None):
        # z: (B, M, 32); padding_mask True on padded slots
        h = self.encoder(self.lift(z), key_mask=padding_mask)
        return self.proj(h)


class PairIntersector(nn.Module):
    """Cross-attention between the spatial sub-tokens of an ordered latent pair.

    The first latent is the query stream, the second is key/value memory;
    a learned pair-slot embedding plus spatial-slot embeddings keep order and
    orientation information available.
    """

    def __init__(self, width: int = 64, layers: int = 2, heads: int = 8, ffn: int = 128):
        super().__init__()
        self.width = width
        self.slots = SURFACE_WIDTH // LATENT_CHANNELS  # 4 spatial sub-tokens
        self.lift = nn.Linear(LATENT_CHANNELS, width)
        self.order_embed = nn.Parameter(torch.zeros(2, width))
        self.slot_embed = nn.Parameter(torch.zeros(self.slots, width))
        self.stack = CrossAttentionStack(width, heads, ffn, layers)
        self.to_feature = nn.Linear(self.slots * width, CURVE_WIDTH)
        self.feature_mlp = nn.Sequential(
            nn.Linear(CURVE_WIDTH, CURVE_WIDTH * 2), nn.SiLU(), nn.Linear(CURVE_WIDTH * 2, CURVE_WIDTH)
        )
        self.logit_head = nn.Sequential(nn.Linear(CURVE_WIDTH, 32), nn.SiLU(), nn.Linear(32, 1))
        nn.init.normal_(self.order_embed, std=0.02)
        nn.init.normal_(self.slot_embed, std=0.02)

    def forward(self, z_first: torch.Tensor, z_second: torch.Tensor):
        """z_first/z_second: (P, 32). Returns (curve_feature (P,16), logit (P,))."""
        if z_first.shape != z_second.shape:
            raise ValueError("pair latents must have matching shapes")
        p = z_first.shape[0]
        q = self.lift(z_first.reshape(p, self.slots, LATENT_CHANNELS))
        kv = self.lift(z_second.reshape(p, self.slots, LATENT_CHANNELS))
        q = q + self.slot_embed + self.order_embed[0]
        kv = kv + self.slot_embed + self.order_embed[1]
        h = self.stack(q, kv)
        feat = self.feature_mlp(self.to_feature(h.reshape(p, -1)))
        logit = self.logit_head(feat).squeeze(-1)
        return feat, logit


class IntersectionModule(nn.Module):
    """Refine latents, then score/recover curves for ordered surface pairs."""

    def __init__(
        self,
        width: int = 64,
        layers: int = 2,
        heads: int = 8,
        ffn: int = 128,
        use_refine_attention: bool = True,
    ):
        super().__init__()
        self.use_refine_attention = use_refine_attention
        self.refiner = LatentRefiner(width, layers, heads, ffn)
        self.pairer = PairIntersector(width, layers, heads, ffn)

    def refine(self, z: torch.Tensor, padding_mask=None) -> torch.Tensor:
        if not self.use_refine_attention:
            return z
        if z.dim() == 2:
            return self.refiner(z.unsqueeze(0)).squeeze(0)
        return self.refiner(z, padding_mask)

    def pairs(self, z_ref: torch.Tensor, first_idx, second_idx):
        """Gather ordered pairs from refined latents laid out as (rows, 32)."""
        first = torch.as_tensor(first_idx)
        second = torch.as_tensor(second_idx)
        if (first == second).any():
            raise ValueError("intersection pair must use two distinct surfaces")
        return self.pairer(z_ref[first], z_ref[second])

    def all_pairs(self, z_ref: torch.Tensor):
        """Every ordered pair (i, j), i != j, for one model: (P,2) index list + outputs."""
        m = z_ref.shape[0]
        idx = [(i, j) for i in range(m) for j in range(m) if i != j]
        first = torch.tensor([a for a, _ in idx], dtype=torch.long, device=z_ref.device)
        second = torch.tensor([b for _, b in idx], dtype=torch.long, device=z_ref.device)
        feat, logit = self.pairer(z_ref[first], z_ref[second])
        return idx, feat, logit


def symmetrize_accepted(idx: list[tuple[int, int]], logits: np.ndarray, threshold: float = 0.5) -> set[tuple[int, int]]:
    """Keep an ordered pair only when both directions classify positive."""
    prob = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    accepted_dir = {p for p, s in zip(idx, prob) if s >= threshold}
    return {(i, j) for (i, j) in accepted_dir if (j, i) in accepted_dir}
