"""Sampling pipeline: diffusion latents -> primitives -> validated solids.

Each sampled latent set is deduplicated (the training-time padding repeats
rows), decoded into surface grids, and run through the intersection
classifier over all ordered pairs. An edge is accepted only when both
directions classify positive; accepted pairs contribute decoded half-curves
which are chained, oriented and validated by the solidifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .brep import BRepModel
from .diffusion import DEFAULT_TAU_DUP, dedup_latents, sample
from .intersect import symmetrize_accepted
from .solidify import SolidReport, assembly_to_model, solidify
from .vae import BRepVAE


@dataclass
class GenerationSettings:
    tau_dup: float = DEFAULT_TAU_DUP
    tau_e: float = 0.1
    tau_p: float = 0.1
    classify_threshold: float = 0.5
    min_surfaces: int = 4


@dataclass
class GeneratedSolid:
    model: BRepModel | None
    report: SolidReport | None
    valid: bool
    num_surfaces: int
    reason: str = ""


@torch.no_grad()
def decode_latents(
    vae: BRepVAE, z: np.ndarray, settings: GenerationSettings | None = None
) -> GeneratedSolid:
    """Decode one deduplicated latent set into a (possibly invalid) solid."""
    st = settings or GenerationSettings()
    vae.eval()
    z = np.asarray(z, dtype=np.float32)
    m = z.shape[0]
    if m < st.min_surfaces:
        return GeneratedSolid(None, None, False, m, "too few distinct latents")
    zt = torch.from_numpy(z)
    grids = vae.surface_decoder(zt).permute(0, 2, 3, 1).numpy().astype(np.float64)
    z_ref = vae.refine_latents(zt)
    idx, feats, logits = vae.intersection.all_pairs(z_ref)
    accepted = symmetrize_accepted(idx, logits.numpy(), st.classify_threshold)
    if not accepted:
        return GeneratedSolid(None, None, False, m, "no intersections accepted")
    pair_list = sorted(accepted)
    pos = {p: k for k, p in enumerate(idx)}
    feat_sel = feats[[pos[p] for p in pair_list]]
    curves = vae.curve_decoder(feat_sel).permute(0, 2, 1).numpy().astype(np.float64)
    curve_pts = {k: curves[k] for k in range(len(pair_list))}
    owners = {k: pair_list[k][0] for k in range(len(pair_list))}
    twin = {k: pair_list.index((j, i)) for k, (i, j) in enumerate(pair_list)}
    report, assembly = solidify(grids, curve_pts, owners, twin, st.tau_e, st.tau_p)
    model = assembly_to_model(grids, assembly) if report.valid else None
    return GeneratedSolid(model, report, report.valid, m, "" if report.valid else report.summary())


@torch.no_grad()
def generate(
    vae: BRepVAE,
    denoiser,
    schedule,
    latent_scale: float,
    count: int,
    seed: int,
    max_surfaces: int,
    cond: torch.Tensor | None = None,
    settings: GenerationSettings | None = None,
    batch: int = 64,
) -> list[GeneratedSolid]:
    """Draw `count` samples and solidify each; deterministic given seed."""
    st = settings or GenerationSettings()
    out: list[GeneratedSolid] = []
    for start in range(0, count, batch):
        k = min(batch, count - start)
        c = None
        if cond is not None:
            if cond.dim() == 2 and cond.shape[0] == count:
                c = cond[start : start + k]
            else:
                c = cond.reshape(1, -1).expand(k, -1)
        z_scaled = sample(schedule, denoiser, c, seed=seed + start, count=k, max_surfaces=max_surfaces)
        for i in range(k):
            rows = dedup_latents(z_scaled[i].numpy(), st.tau_dup)
            out.append(decode_latents(vae, rows / latent_scale, st))
    return out


def validity_ratio(solids: list[GeneratedSolid]) -> float:
    return sum(s.valid for s in solids) / max(len(solids), 1)
