"""Variational autoencoder over B-Rep primitives with a single per-surface latent.

The encoder fuses surface geometry (2D conv stack), incident-curve geometry
(1D conv stack + bipartite graph attention onto surfaces) and longer-range
context (self-attention over surface tokens) into a Gaussian latent of shape
m x (2 x 2 x 8); the 2x2 spatial slots are kept so orientation survives
pooling. Decoding recovers surface grids directly from latents and recovers
every curve through the intersection module, so the latent must carry the
full model: geometry, curves and adjacency.

Loss: L = 1.0 * recon(L1) + 0.1 * intersection(BCE) + 1e-6 * KL.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import SelfAttentionStack
from .intersect import CURVE_WIDTH, LATENT_CHANNELS, SURFACE_WIDTH, IntersectionModule

W_RECON = 1.0
W_INTER = 0.1
W_REG = 1e-6


@dataclass
class VAEConfig:
    # widths sized for CPU training; the contract fixes only the latent layout
    conv_channels: tuple[int, int, int] = (16, 32, 64)
    attn_width: int = 96
    attn_layers: int = 3
    attn_heads: int = 8
    attn_ffn: int = 192
    gnn_rounds: int = 2
    intersect_width: int = 48
    intersect_layers: int = 2
    intersect_heads: int = 4
    intersect_ffn: int = 128
    logvar_clamp: float = 10.0
    # ablation toggles
    use_refine_attention: bool = True
    spatial_latent: bool = True
    oriented_curves: bool = True

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VAEConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d.get("conv_channels", (32, 64, 128)))
        return cls(**d)


def tiny_vae_config() -> VAEConfig:
    """Small widths for double-precision finite-difference checks."""
    return VAEConfig(
        conv_channels=(4, 8, 8),
        attn_width=16,
        attn_layers=1,
        attn_heads=2,
        attn_ffn=16,
        gnn_rounds=1,
        intersect_width=16,
        intersect_layers=1,
        intersect_heads=2,
        intersect_ffn=16,
    )


class SurfaceEncoder(nn.Module):
    """16x16x3 grid -> 32-wide latent feature, keeping a 2x2 spatial footprint."""

    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        c1, c2, c3 = channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c3, LATENT_CHANNELS, 1),
        )

    def forward(self, x):
        # x: (B, 3, 16, 16) -> (B, 32)
        if x.shape[0] == 0:
            raise ValueError("empty surface batch")
        return self.net(x).flatten(1)


class CurveEncoder(nn.Module):
    """16x3 polyline -> 16-wide feature with a 2-slot spatial footprint."""

    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        c1, c2, c3 = channels
        self.net = nn.Sequential(
            nn.Conv1d(3, c1, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv1d(c1, c2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv1d(c2, c3, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv1d(c3, LATENT_CHANNELS, 1),
        )

    def forward(self, x):
        # x: (B, 3, 16) -> (B, 16)
        return self.net(x).flatten(1)


class SurfaceDecoder(nn.Module):
    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        c1, c2, c3 = channels
        # kernel-2 stride-2 stages: exact learned 2x upsampling, light on CPU
        self.net = nn.Sequential(
            nn.ConvTranspose2d(LATENT_CHANNELS, c3, 2, stride=2),
            nn.SiLU(),
            nn.ConvTranspose2d(c3, c2, 2, stride=2),
            nn.SiLU(),
            nn.ConvTranspose2d(c2, c1, 2, stride=2),
            nn.SiLU(),
            nn.Conv2d(c1, 3, 3, padding=1),
        )

    def forward(self, z):
        # z: (B, 32) -> (B, 3, 16, 16)
        if z.shape[-1] != SURFACE_WIDTH:
            raise ValueError(f"surface latent width must be {SURFACE_WIDTH}")
        return self.net(z.reshape(-1, LATENT_CHANNELS, 2, 2))


class CurveDecoder(nn.Module):
    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        c1, c2, c3 = channels
        self.net = nn.Sequential(
            nn.ConvTranspose1d(LATENT_CHANNELS, c3, 2, stride=2),
            nn.SiLU(),
            nn.ConvTranspose1d(c3, c2, 2, stride=2),
            nn.SiLU(),
            nn.ConvTranspose1d(c2, c1, 2, stride=2),
            nn.SiLU(),
            nn.Conv1d(c1, 3, 3, padding=1),
        )

    def forward(self, f):
        # f: (B, 16) -> (B, 3, 16)
        if f.shape[0] == 0:
            return f.new_zeros((0, 3, 16))
        if f.shape[-1] != CURVE_WIDTH:
            raise ValueError(f"curve feature width must be {CURVE_WIDTH}")
        return self.net(f.reshape(-1, LATENT_CHANNELS, 2))


class CurveToSurface(nn.Module):
    """One bipartite attention round propagating curve features onto surfaces.

    With no incident curves the message is zero, so the output reduces to a
    transform of the surface feature alone.
    """

    def __init__(self):
        super().__init__()
        self.q = nn.Linear(SURFACE_WIDTH, SURFACE_WIDTH)
        self.k = nn.Linear(CURVE_WIDTH, SURFACE_WIDTH)
        self.v = nn.Linear(CURVE_WIDTH, SURFACE_WIDTH)
        self.score = nn.Linear(SURFACE_WIDTH, 1, bias=False)
        self.update = nn.Sequential(
            nn.Linear(2 * SURFACE_WIDTH, 2 * SURFACE_WIDTH),
            nn.SiLU(),
            nn.Linear(2 * SURFACE_WIDTH, SURFACE_WIDTH),
        )

    def forward(self, f_s, f_c, surf_idx, curve_idx):
        # f_s: (S, 32); f_c: (C, 16); incidence given as flat index pairs
        msg = torch.zeros_like(f_s)
        if surf_idx.numel() > 0:
            logits = self.score(torch.tanh(self.q(f_s)[surf_idx] + self.k(f_c)[curve_idx])).squeeze(-1)
            # segment softmax over each surface's incident curves
            seg_max = torch.full((f_s.shape[0],), -torch.inf, dtype=logits.dtype, device=logits.device)
            seg_max = seg_max.index_reduce(0, surf_idx, logits, "amax", include_self=False)
            ex = torch.exp(logits - seg_max[surf_idx])
            denom = torch.zeros(f_s.shape[0], dtype=ex.dtype, device=ex.device).index_add(0, surf_idx, ex)
            alpha = ex / denom.clamp_min(1e-12)[surf_idx]
            vals = self.v(f_c)[curve_idx] * alpha.unsqueeze(-1)
            msg = msg.index_add(0, surf_idx, vals)
        return f_s + self.update(torch.cat([f_s, msg], dim=-1))


class LatentHead(nn.Module):
    """Self-attention over surface tokens, then a per-token Gaussian map."""

    def __init__(self, cfg: VAEConfig):
        super().__init__()
        self.cfg = cfg
        self.lift = nn.Linear(SURFACE_WIDTH, cfg.attn_width)
        self.encoder = SelfAttentionStack(cfg.attn_width, cfg.attn_heads, cfg.attn_ffn, cfg.attn_layers)
        self.out = nn.Linear(cfg.attn_width, 2 * SURFACE_WIDTH)

    def forward(self, tokens, padding_mask=None):
        # tokens: (B, M, 32) -> mu, logvar each (B, M, 32)
        h = self.encoder(self.lift(tokens), key_mask=padding_mask)
        mu, logvar = self.out(h).chunk(2, dim=-1)
        logvar = logvar.clamp(-self.cfg.logvar_clamp, self.cfg.logvar_clamp)
        if not self.cfg.spatial_latent:
            # ablation: pool the 2x2 spatial slots and tile back
            def pool(x):
                shape = x.shape[:-1]
                x = x.reshape(*shape, -1, LATENT_CHANNELS).mean(dim=-2, keepdim=True)
                return x.expand(*shape, SURFACE_WIDTH // LATENT_CHANNELS, LATENT_CHANNELS).reshape(
                    *shape, SURFACE_WIDTH
                )

            mu, logvar = pool(mu), pool(logvar)
        return mu, logvar


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Elementwise KL(N(mu, sigma^2) || N(0, 1))."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)


@dataclass
class VAEOutput:
    mu: torch.Tensor
    logvar: torch.Tensor
    z: torch.Tensor
    surf_recon: torch.Tensor  # (S, 3, 16, 16)
    curve_recon: torch.Tensor  # (C, 3, 16)
    pair_logits: torch.Tensor
    pair_labels: torch.Tensor
    losses: dict = field(default_factory=dict)


class BRepVAE(nn.Module):
    def __init__(self, cfg: VAEConfig | None = None):
        super().__init__()
        self.cfg = cfg or VAEConfig()
        self.surface_encoder = SurfaceEncoder(self.cfg.conv_channels)
        self.curve_encoder = CurveEncoder(self.cfg.conv_channels)
        self.gnn = nn.ModuleList(CurveToSurface() for _ in range(self.cfg.gnn_rounds))
        self.latent_head = LatentHead(self.cfg)
        self.surface_decoder = SurfaceDecoder(self.cfg.conv_channels)
        self.curve_decoder = CurveDecoder(self.cfg.conv_channels)
        self.intersection = IntersectionModule(
            self.cfg.intersect_width,
            self.cfg.intersect_layers,
            self.cfg.intersect_heads,
            self.cfg.intersect_ffn,
            self.cfg.use_refine_attention,
        )

    # -- encoding ----------------------------------------------------------

    def encode_geometry(self, surfaces: torch.Tensor, curves: torch.Tensor):
        """surfaces (S,3,16,16), curves (C,3,16) -> f_s (S,32), f_c (C,16)."""
        if surfaces.shape[0] == 0:
            raise ValueError("encode_geometry needs at least one surface")
        f_s = self.surface_encoder(surfaces)
        f_c = self.curve_encoder(curves) if curves.shape[0] else curves.new_zeros((0, CURVE_WIDTH))
        return f_s, f_c

    def propagate_topology(self, f_s, f_c, surf_idx, curve_idx):
        """Bipartite attention rounds; incidence as flat (surface, curve) index pairs."""
        for layer in self.gnn:
            f_s = layer(f_s, f_c, surf_idx, curve_idx)
        return f_s

    def latent(self, f_cs_padded, padding_mask=None, noise=None, sample: bool = False):
        """(B, M, 32) padded tokens -> (mu, logvar, z). Eval/no-sample: z = mu."""
        mu, logvar = self.latent_head(f_cs_padded, padding_mask)
        if noise is not None:
            z = mu + torch.exp(0.5 * logvar) * noise
        elif sample and self.training:
            z = mu + torch.exp(0.5 * logvar) * torch.randn_like(mu)
        else:
            z = mu
        return mu, logvar, z

    # -- decoding ----------------------------------------------------------

    def decode_primitives(self, z_s: torch.Tensor, z_c: torch.Tensor):
        """(m,32),(n,16) -> surface grids (m,3,16,16) and curves (n,3,16)."""
        return self.surface_decoder(z_s), self.curve_decoder(z_c)

    def refine_latents(self, z: torch.Tensor, padding_mask=None) -> torch.Tensor:
        return self.intersection.refine(z, padding_mask)

    def intersect_pair(self, z_i: torch.Tensor, z_j: torch.Tensor):
        """Ordered single pair (post-refine latents) -> (curve_feature, logit)."""
        return self.intersection.pairer(z_i.reshape(1, -1), z_j.reshape(1, -1))

    # -- losses --------------------------------------------------------------

    @staticmethod
    def vae_loss(
        surf_target,
        curve_target,
        out: VAEOutput,
        token_mask: torch.Tensor | None = None,
    ) -> dict:
        """Weighted three-term loss; per-term means are per-element."""
        recon = (out.surf_recon - surf_target).abs().mean()
        if curve_target.numel():
            recon = recon + (out.curve_recon - curve_target).abs().mean()
        if out.pair_logits.numel():
            inter = F.binary_cross_entropy_with_logits(out.pair_logits, out.pair_labels)
        else:
            inter = out.surf_recon.new_zeros(())
        kl_tok = gaussian_kl(out.mu, out.logvar).sum(dim=-1)
        if token_mask is not None:
            reg = (kl_tok * token_mask).sum() / token_mask.sum().clamp_min(1.0)
        else:
            reg = kl_tok.mean()
        total = W_RECON * recon + W_INTER * inter + W_REG * reg
        return {"total": total, "recon": recon, "inter": inter, "reg": reg}
