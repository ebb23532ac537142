"""Latent DDPM over padded surface-latent sets with pluggable conditioning.

Linear beta schedule (1e-4 .. 0.02, T = 1000), epsilon-prediction, ancestral
sampling. The denoiser is a transformer over the M latent tokens with no
inter-token positional encoding, so generated surface sets stay unordered;
timestep and condition enter as per-token additive embeddings. Unconditional
runs use an exactly-zero condition vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .blocks import SelfAttentionStack
from .intersect import SURFACE_WIDTH

CONDITION_WIDTH = 256
MODALITIES = ("none", "points", "image", "sketch", "text")
DEFAULT_MAX_SURFACES = 30
DEFAULT_TAU_DUP = 0.15


@dataclass(frozen=True)
class DiffusionSchedule:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False)
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        if not (0.0 < self.beta_start < self.beta_end < 1.0):
            raise ValueError("need 0 < beta_start < beta_end < 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.timesteps, dtype=np.float64)
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))


def q_sample(schedule: DiffusionSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Forward marginal z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    t = torch.as_tensor(t, device=z0.device)
    if (t < 0).any() or (t >= schedule.timesteps).any():
        raise ValueError("timestep out of range")
    abar = torch.as_tensor(schedule.alpha_bars, device=z0.device, dtype=z0.dtype)[t]
    while abar.dim() < z0.dim():
        abar = abar.unsqueeze(-1)
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


# ---------------------------------------------------------------------------
# conditions
# ---------------------------------------------------------------------------


@dataclass
class ConditionVector:
    c: np.ndarray
    modality: str = "none"

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float32).reshape(-1)
        if self.c.shape != (CONDITION_WIDTH,):
            raise ValueError(f"condition vector must have width {CONDITION_WIDTH}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == "none" and np.any(self.c != 0):
            raise ValueError("unconditional vector must be exactly zero")


def no_condition() -> ConditionVector:
    return ConditionVector(np.zeros(CONDITION_WIDTH, dtype=np.float32), "none")


class PointCloudEncoder(nn.Module):
    """Permutation-invariant set encoder: shared pointwise MLP, max pool, 1024 -> 256."""

    def __init__(self, with_normals: bool = False):
        super().__init__()
        self.with_normals = with_normals
        in_dim = 6 if with_normals else 3
        self.pointwise = nn.Sequential(
            nn.Linear(in_dim, 128),
            nn.SiLU(),
            nn.Linear(128, 256),
            nn.SiLU(),
            nn.Linear(256, 1024),
        )
        self.head = nn.Sequential(nn.Linear(1024, 512), nn.SiLU(), nn.Linear(512, CONDITION_WIDTH))

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        # points: (B, P, 3[+3]) -> (B, 256)
        if points.dim() == 2:
            points = points.unsqueeze(0)
        if points.shape[1] < 1:
            raise ValueError("point cloud must contain at least one point")
        feat = self.pointwise(points).amax(dim=1)
        return self.head(feat)


def encode_condition_points(encoder: PointCloudEncoder, points: np.ndarray) -> ConditionVector:
    pts = np.asarray(points, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("point cloud must be (P, 3) with P >= 1")
    with torch.no_grad():
        c = encoder(torch.from_numpy(pts).unsqueeze(0)).squeeze(0).numpy()
    return ConditionVector(c, "points")


class ToyImageEncoder(nn.Module):
    """Small conv net over rendered depth images; multi-view features carry a
    sinusoidal view-pose code and are averaged. Stands in for a pretrained
    backbone, which is out of scope."""

    def __init__(self, image_size: int = 32):
        super().__init__()
        self.image_size = image_size
        self.conv = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(2),
        )
        self.to_vec = nn.Linear(64 * 4, 1024)
        self.head = nn.Sequential(nn.Linear(1024, 512), nn.SiLU(), nn.Linear(512, CONDITION_WIDTH))

    @staticmethod
    def _pose_code(view: int, width: int) -> torch.Tensor:
        k = torch.arange(width // 2, dtype=torch.float32)
        ang = view / (10000.0 ** (2 * k / width))
        return torch.cat([torch.sin(ang), torch.cos(ang)])

    def forward(self, images: torch.Tensor, modality: str = "image") -> torch.Tensor:
        # images: (V, H, W) depth renders of one shape -> (256,)
        if images.dim() == 2:
            images = images.unsqueeze(0)
        feats = []
        for v in range(images.shape[0]):
            f = self.to_vec(self.conv(images[v][None, None]).flatten(1)).squeeze(0)
            feats.append(f + self._pose_code(v, 1024).to(f.dtype))
        return self.head(torch.stack(feats).mean(dim=0))


class ToyTextEncoder(nn.Module):
    """Hashed bag-of-words text interface; a stand-in for a real text backbone."""

    def __init__(self, buckets: int = 512):
        super().__init__()
        self.buckets = buckets
        self.head = nn.Sequential(nn.Linear(buckets, 512), nn.SiLU(), nn.Linear(512, CONDITION_WIDTH))

    def forward(self, text: str) -> torch.Tensor:
        import hashlib

        vec = torch.zeros(self.buckets)
        for token in text.lower().split():
            h = int(hashlib.sha1(token.encode()).hexdigest(), 16)
            vec[h % self.buckets] += 1.0
        return self.head(vec)


# ---------------------------------------------------------------------------
# padding / dedup
# ---------------------------------------------------------------------------


def pad_latents(z: np.ndarray, max_surfaces: int, seed: int) -> np.ndarray:
    """Fixed-size latent set: originals first, then seeded uniform repeats."""
    z = np.asarray(z)
    m = z.shape[0]
    if not 1 <= m <= max_surfaces:
        raise ValueError(f"surface count {m} outside [1, {max_surfaces}]")
    if m == max_surfaces:
        return z.copy()
    rng = np.random.default_rng(seed)
    extra = rng.integers(0, m, size=max_surfaces - m)
    return np.concatenate([z, z[extra]], axis=0)


def dedup_latents(z: np.ndarray, tau_dup: float = DEFAULT_TAU_DUP) -> np.ndarray:
    """Greedy row clustering at L2 distance < tau_dup; cluster means survive.

    Rows are visited in order; a row joins the first cluster whose running
    mean is closer than tau_dup, so exact repeats collapse onto their
    original and the output keeps first-appearance order.
    """
    z = np.asarray(z, dtype=np.float64)
    sums: list[np.ndarray] = []
    counts: list[int] = []
    for row in z:
        placed = False
        for k in range(len(sums)):
            if np.linalg.norm(row - sums[k] / counts[k]) < tau_dup:
                sums[k] = sums[k] + row
                counts[k] += 1
                placed = True
                break
        if not placed:
            sums.append(row.copy())
            counts.append(1)
    return np.stack([s / c for s, c in zip(sums, counts)], axis=0)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


@dataclass
class DenoiserConfig:
    width: int = 96
    layers: int = 4
    heads: int = 8
    ffn: int = 192

    def to_dict(self):
        return self.__dict__.copy()

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def sinusoidal_embedding(t: torch.Tensor, width: int) -> torch.Tensor:
    half = width // 2
    k = torch.arange(half, dtype=torch.float32, device=t.device)
    ang = t.float()[:, None] / (10000.0 ** (k[None, :] / half))
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class Denoiser(nn.Module):
    """Noise predictor over M unordered latent tokens."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        w = self.cfg.width
        self.lift = nn.Linear(SURFACE_WIDTH, w)
        self.t_mlp = nn.Sequential(nn.Linear(w, w * 2), nn.SiLU(), nn.Linear(w * 2, w))
        self.c_proj = nn.Linear(CONDITION_WIDTH, w)
        self.encoder = SelfAttentionStack(w, self.cfg.heads, self.cfg.ffn, self.cfg.layers)
        self.head = nn.Linear(w, SURFACE_WIDTH)

    def forward(self, z_t: torch.Tensor, t, cond: torch.Tensor | None = None) -> torch.Tensor:
        # z_t: (B, M, 32); t: scalar or (B,); cond: (B, 256); None means exactly zero,
        # so conditional and unconditional runs share one forward path
        if z_t.dim() != 3 or z_t.shape[-1] != SURFACE_WIDTH:
            raise ValueError(f"latent tokens must be (B, M, {SURFACE_WIDTH})")
        b = z_t.shape[0]
        t = torch.as_tensor(t, device=z_t.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        if cond is None:
            cond = z_t.new_zeros((b, CONDITION_WIDTH))
        h = self.lift(z_t)
        h = h + self.t_mlp(sinusoidal_embedding(t, self.cfg.width).to(h.dtype))[:, None, :]
        h = h + self.c_proj(cond.to(h.dtype))[:, None, :]
        return self.head(self.encoder(h))


def diffusion_loss(
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
    z0: torch.Tensor,
    cond: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared error between true and predicted noise at uniform timesteps."""
    b = z0.shape[0]
    if t is None:
        t = torch.randint(0, schedule.timesteps, (b,), generator=generator, device=z0.device)
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, device=z0.device, dtype=z0.dtype)
    z_t = q_sample(schedule, z0, t, eps)
    eps_hat = denoiser(z_t, t, cond)
    return (eps - eps_hat).pow(2).mean()


@torch.no_grad()
def sample(
    schedule: DiffusionSchedule,
    denoiser,
    cond: torch.Tensor | None,
    seed: int,
    count: int = 1,
    max_surfaces: int = DEFAULT_MAX_SURFACES,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Ancestral DDPM sampling; deterministic given seed. Returns (count, M, 32).

    Noise draw order: initial state first, then one draw per timestep t > 0.
    Posterior noise scale is sqrt(beta_t).
    """
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((count, max_surfaces, SURFACE_WIDTH), generator=gen, dtype=dtype)
    betas = torch.as_tensor(schedule.betas, dtype=dtype)
    alphas = torch.as_tensor(schedule.alphas, dtype=dtype)
    abars = torch.as_tensor(schedule.alpha_bars, dtype=dtype)
    for t in range(schedule.timesteps - 1, -1, -1):
        eps_hat = denoiser(x, torch.full((count,), t), cond)
        mean = (x - betas[t] / torch.sqrt(1.0 - abars[t]) * eps_hat) / torch.sqrt(alphas[t])
        if t > 0:
            noise = torch.randn(x.shape, generator=gen, dtype=dtype)
            x = mean + torch.sqrt(betas[t]) * noise
        else:
            x = mean
    return x
