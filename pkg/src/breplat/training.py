"""Training loops, checkpoints and evaluation helpers for the VAE and the LDM.

Records with different surface/curve counts are batched by concatenating all
primitives and carrying flat index tensors (graph incidence, ordered curve
pairs, padded-token positions), so a training step is a handful of batched
tensor ops instead of a per-record Python loop.

Checkpoints are named-array zip containers: "hola-vae-v1" holds the VAE (and
intersection) weights plus its config; "hola-ldm-v1" holds the denoiser, the
optional condition encoder, the schedule and the latent scale.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .archive import read_archive, write_archive
from .diffusion import (
    CONDITION_WIDTH,
    Denoiser,
    DenoiserConfig,
    DiffusionSchedule,
    PointCloudEncoder,
    diffusion_loss,
    pad_latents,
)
from .intersect import balanced_sample, pair_adjacency
from .synthgen import DatasetRecord
from .vae import BRepVAE, VAEConfig, VAEOutput

VAE_FORMAT = "hola-vae-v1"
LDM_FORMAT = "hola-ldm-v1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 32
    max_steps: int = 4000
    eval_every: int = 200
    patience: int = 8
    seed: int = 0
    log_every: int = 50
    max_curve_pairs: int | None = 640
    cosine_decay: bool = True
    lr_floor: float = 0.05  # final lr as a fraction of the peak


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if not cfg.cosine_decay:
        return cfg.lr
    frac = step / max(cfg.max_steps, 1)
    lo = cfg.lr * cfg.lr_floor
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * min(frac, 1.0)))


# ---------------------------------------------------------------------------
# record preparation
# ---------------------------------------------------------------------------


@dataclass
class RecordTensors:
    surfaces: torch.Tensor  # (m, 3, 16, 16)
    curves: torch.Tensor  # (n, 3, 16)
    gnn_surf: torch.Tensor  # flat incidence: surface index per (s, c) pair
    gnn_curve: torch.Tensor
    pair_first: torch.Tensor  # ordered pair per GT curve j: owner(j)
    pair_second: torch.Tensor  # owner(twin(j))
    adjacency: np.ndarray  # (m, m) surface-pair adjacency
    m: int
    n: int


def prepare_record(record: DatasetRecord, oriented_curves: bool = True) -> RecordTensors:
    model_adj = record.surf_curve_adj.astype(np.int64)
    owner = model_adj.argmax(axis=0)
    twin = record.twin.astype(np.int64)
    m, n = record.surfaces.shape[0], record.half_curves.shape[0]
    curves = record.half_curves.astype(np.float32)
    if not oriented_curves:
        # ablation: undirected curves, canonical endpoint-lexicographic direction
        curves = curves.copy()
        for j in range(n):
            if tuple(curves[j, 0]) > tuple(curves[j, -1]):
                curves[j] = curves[j, ::-1]
    s_idx, c_idx = np.nonzero(record.surf_curve_adj)
    adj = np.zeros((m, m), dtype=np.uint8)
    for j in range(n):
        a, b = int(owner[j]), int(owner[twin[j]])
        if a != b:
            adj[a, b] = 1
    return RecordTensors(
        surfaces=torch.from_numpy(record.surfaces.astype(np.float32)).permute(0, 3, 1, 2).contiguous(),
        curves=torch.from_numpy(curves).permute(0, 2, 1).contiguous(),
        gnn_surf=torch.from_numpy(s_idx.astype(np.int64)),
        gnn_curve=torch.from_numpy(c_idx.astype(np.int64)),
        pair_first=torch.from_numpy(owner),
        pair_second=torch.from_numpy(owner[twin]),
        adjacency=adj,
        m=m,
        n=n,
    )


@dataclass
class Batch:
    surfaces: torch.Tensor
    curves: torch.Tensor  # all curves, encoder input
    curve_targets: torch.Tensor  # targets aligned with pair_first/pair_second
    gnn_surf: torch.Tensor
    gnn_curve: torch.Tensor
    tokens_index: torch.Tensor  # padded-row index of every real surface
    padding_mask: torch.Tensor  # (B, Mmax) True where padded
    pair_first: torch.Tensor  # padded-row indices for GT curve pairs
    pair_second: torch.Tensor
    bce_first: torch.Tensor
    bce_second: torch.Tensor
    bce_labels: torch.Tensor
    b: int
    m_max: int


def make_batch(
    items: list[RecordTensors],
    rng: np.random.Generator | None,
    all_pairs: bool = False,
    max_curve_pairs: int | None = None,
) -> Batch:
    """Assemble one training batch.

    BCE pairs are balanced-sampled unless `all_pairs` (validation) covers
    every ordered pair. `max_curve_pairs` uniformly subsamples the GT curve
    reconstruction pairs, an unbiased estimate of the full curve L1.
    """
    b = len(items)
    m_max = max(it.m for it in items)
    surf_off, curve_off = 0, 0
    tokens_index, pf, ps, b1, b2, lbl = [], [], [], [], [], []
    gs, gc = [], []
    mask = np.ones((b, m_max), dtype=bool)
    for bi, it in enumerate(items):
        rows = bi * m_max + np.arange(it.m)
        tokens_index.append(rows)
        mask[bi, : it.m] = False
        gs.append(it.gnn_surf.numpy() + surf_off)
        gc.append(it.gnn_curve.numpy() + curve_off)
        pf.append(it.pair_first.numpy() + bi * m_max)
        ps.append(it.pair_second.numpy() + bi * m_max)
        if all_pairs:
            i_all, j_all = np.nonzero(~np.eye(it.m, dtype=bool))
            labels = it.adjacency[i_all, j_all].astype(np.float32)
            b1.append(i_all + bi * m_max)
            b2.append(j_all + bi * m_max)
            lbl.append(labels)
        else:
            sampled = balanced_sample(it.adjacency, rng)
            b1.append(np.array([p[0] for p in sampled]) + bi * m_max)
            b2.append(np.array([p[1] for p in sampled]) + bi * m_max)
            lbl.append(np.array([p[2] for p in sampled], dtype=np.float32))
        surf_off += it.m
        curve_off += it.n

    cat = np.concatenate
    curves = torch.cat([it.curves for it in items])
    curve_targets = curves
    pair_first = torch.from_numpy(cat(pf))
    pair_second = torch.from_numpy(cat(ps))
    if max_curve_pairs is not None and rng is not None and len(pair_first) > max_curve_pairs:
        keep = torch.from_numpy(rng.choice(len(pair_first), size=max_curve_pairs, replace=False))
        curve_targets = curves[keep]
        pair_first = pair_first[keep]
        pair_second = pair_second[keep]
    return Batch(
        surfaces=torch.cat([it.surfaces for it in items]),
        curves=curves,
        curve_targets=curve_targets,
        gnn_surf=torch.from_numpy(cat(gs)),
        gnn_curve=torch.from_numpy(cat(gc)),
        tokens_index=torch.from_numpy(cat(tokens_index)),
        padding_mask=torch.from_numpy(mask),
        pair_first=pair_first,
        pair_second=pair_second,
        bce_first=torch.from_numpy(cat(b1)),
        bce_second=torch.from_numpy(cat(b2)),
        bce_labels=torch.from_numpy(cat(lbl)),
        b=b,
        m_max=m_max,
    )


def vae_forward(model: BRepVAE, batch: Batch, noise: torch.Tensor | None = None, sample: bool = True) -> VAEOutput:
    """Full batched encode / intersect / decode pass."""
    f_s, f_c = model.encode_geometry(batch.surfaces, batch.curves)
    f_cs = model.propagate_topology(f_s, f_c, batch.gnn_surf, batch.gnn_curve)
    tokens = f_cs.new_zeros((batch.b * batch.m_max, f_cs.shape[-1]))
    tokens[batch.tokens_index] = f_cs
    tokens = tokens.reshape(batch.b, batch.m_max, -1)
    mu, logvar, z = model.latent(tokens, batch.padding_mask, noise=noise, sample=sample)
    z_rows = z.reshape(batch.b * batch.m_max, -1)
    surf_recon = model.surface_decoder(z_rows[batch.tokens_index])
    z_ref = model.refine_latents(z, batch.padding_mask).reshape(batch.b * batch.m_max, -1)
    # one pairer pass covers GT curve pairs and the sampled classification pairs
    first = torch.cat([batch.pair_first, batch.bce_first])
    second = torch.cat([batch.pair_second, batch.bce_second])
    feat_all, logit_all = model.intersection.pairer(z_ref[first], z_ref[second])
    n_gt = batch.pair_first.shape[0]
    curve_recon = model.curve_decoder(feat_all[:n_gt])
    logits = logit_all[n_gt:]
    flat_mask = (~batch.padding_mask).reshape(-1).to(mu.dtype)
    return VAEOutput(
        mu=mu.reshape(batch.b * batch.m_max, -1),
        logvar=logvar.reshape(batch.b * batch.m_max, -1),
        z=z_rows,
        surf_recon=surf_recon,
        curve_recon=curve_recon,
        pair_logits=logits,
        pair_labels=batch.bce_labels.to(logits.dtype),
        losses={"token_mask": flat_mask},
    )


def vae_loss_on_batch(model: BRepVAE, batch: Batch, noise=None, sample=True) -> dict:
    out = vae_forward(model, batch, noise=noise, sample=sample)
    losses = BRepVAE.vae_loss(batch.surfaces, batch.curve_targets, out, out.losses["token_mask"])
    return losses


def train_vae(
    train_records: list[DatasetRecord],
    val_records: list[DatasetRecord],
    vae_cfg: VAEConfig | None = None,
    cfg: TrainConfig | None = None,
    log=None,
    init_model: BRepVAE | None = None,
    start_step: int = 0,
) -> tuple[BRepVAE, list[dict]]:
    """Train (or, given init_model/start_step, resume) the VAE.

    Resumed runs keep counting steps from start_step so loss logs line up.
    """
    cfg = cfg or TrainConfig()
    torch.manual_seed(cfg.seed + start_step)
    model = init_model if init_model is not None else BRepVAE(vae_cfg)
    items = [prepare_record(r, model.cfg.oriented_curves) for r in train_records]
    val_items = [prepare_record(r, model.cfg.oriented_curves) for r in val_records] or items[:8]
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + start_step)
    history: list[dict] = []
    best_val, best_state, bad_evals = math.inf, None, 0
    t0 = time.time()

    for local_step in range(1, cfg.max_steps + 1):
        step = start_step + local_step
        model.train()
        for group in opt.param_groups:
            group["lr"] = _lr_at(cfg, local_step)
        idx = rng.choice(len(items), size=min(cfg.batch, len(items)), replace=False)
        batch = make_batch([items[i] for i in idx], rng, max_curve_pairs=cfg.max_curve_pairs)
        losses = vae_loss_on_batch(model, batch)
        if not torch.isfinite(losses["total"]):
            raise TrainingDiverged(f"non-finite VAE loss at step {step}")
        opt.zero_grad()
        losses["total"].backward()
        opt.step()

        if local_step % cfg.log_every == 0 or local_step == 1:
            row = {
                "step": step,
                "total": float(losses["total"].detach()),
                "recon": float(losses["recon"].detach()),
                "inter": float(losses["inter"].detach()),
                "reg": float(losses["reg"].detach()),
                "elapsed": time.time() - t0,
            }
            history.append(row)
            if log:
                log(row)

        if local_step % cfg.eval_every == 0 or local_step == cfg.max_steps:
            model.eval()
            with torch.no_grad():
                vb = make_batch(val_items[:64], None, all_pairs=True)
                vl = BRepVAE.vae_loss(
                    vb.surfaces, vb.curves, vae_forward(model, vb, sample=False),
                    (~vb.padding_mask).reshape(-1).float(),
                )
            val_total = float(vl["total"])
            history.append({"step": step, "val_total": val_total, "elapsed": time.time() - t0})
            if log:
                log(history[-1])
            if val_total < best_val - 1e-6:
                best_val, bad_evals = val_total, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


@torch.no_grad()
def encode_records(model: BRepVAE, records: list[DatasetRecord]) -> list[np.ndarray]:
    """Eval-mode latents (z = mu), one (m, 32) array per record."""
    model.eval()
    out = []
    for r in records:
        it = prepare_record(r, model.cfg.oriented_curves)
        batch = make_batch([it], None, all_pairs=True)
        res = vae_forward(model, batch, sample=False)
        out.append(res.mu[batch.tokens_index].numpy().astype(np.float32))
    return out


@torch.no_grad()
def reconstruction_report(model: BRepVAE, records: list[DatasetRecord]) -> dict:
    """Eval-mode quality: per-point L1, all-pair intersection accuracy, and
    the orientation consistency of swapped-order decoded curves.

    point_l1 is the mean over all sampled points (surface grid and curve
    samples pooled) of the L1 norm of the 3D error, in unit-cube coordinates.
    """
    model.eval()
    surf_err, curve_err, orient_err = [], [], []
    point_err_sum, point_count = 0.0, 0
    correct, total = 0, 0
    for r in records:
        it = prepare_record(r, model.cfg.oriented_curves)
        batch = make_batch([it], None, all_pairs=True)
        out = vae_forward(model, batch, sample=False)
        surf_err.append(float((out.surf_recon - batch.surfaces).abs().mean()))
        sdiff = (out.surf_recon - batch.surfaces).abs().sum(dim=1)  # L1 per grid point
        point_err_sum += float(sdiff.sum())
        point_count += sdiff.numel()
        if batch.curve_targets.numel():
            curve_err.append(float((out.curve_recon - batch.curve_targets).abs().mean()))
            cdiff = (out.curve_recon - batch.curve_targets).abs().sum(dim=1)
            point_err_sum += float(cdiff.sum())
            point_count += cdiff.numel()
        pred = (torch.sigmoid(out.pair_logits) >= 0.5).float()
        correct += int((pred == batch.bce_labels).sum())
        total += int(pred.numel())
        # orientation: decoded (i, j) vs reverse of decoded (j, i)
        z_ref = model.refine_latents(
            out.z.reshape(batch.b, batch.m_max, -1), batch.padding_mask
        ).reshape(batch.b * batch.m_max, -1)
        feat_fwd, _ = model.intersection.pairer(z_ref[batch.pair_first], z_ref[batch.pair_second])
        feat_rev, _ = model.intersection.pairer(z_ref[batch.pair_second], z_ref[batch.pair_first])
        c_fwd = model.curve_decoder(feat_fwd)
        c_rev = model.curve_decoder(feat_rev)
        orient_err.append(float((c_fwd - c_rev.flip(-1)).abs().mean()))
    return {
        "surface_l1": float(np.mean(surf_err)),
        "curve_l1": float(np.mean(curve_err)) if curve_err else 0.0,
        "point_l1": point_err_sum / max(point_count, 1),
        "intersection_accuracy": correct / max(total, 1),
        "orientation_l1": float(np.mean(orient_err)),
    }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _state_to_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _arrays_to_state(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, torch.Tensor]:
    out = {}
    for k, v in arrays.items():
        if k.startswith(prefix):
            out[k[len(prefix) :]] = torch.from_numpy(np.array(v))
    return out


def save_vae(path, model: BRepVAE, extra: dict | None = None) -> None:
    manifest = {"format": VAE_FORMAT, "config": model.cfg.to_dict(), "extra": extra or {}}
    write_archive(path, manifest, _state_to_arrays(model, "vae."))


def load_vae(path) -> BRepVAE:
    manifest, arrays = read_archive(path)
    if manifest.get("format") != VAE_FORMAT:
        raise ValueError(f"not a VAE checkpoint: {manifest.get('format')!r}")
    model = BRepVAE(VAEConfig.from_dict(manifest["config"]))
    model.load_state_dict(_arrays_to_state(arrays, "vae."))
    model.eval()
    return model


def save_ldm(
    path,
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
    latent_scale: float,
    max_surfaces: int,
    modality: str = "none",
    cond_encoder: PointCloudEncoder | None = None,
    extra: dict | None = None,
) -> None:
    manifest = {
        "format": LDM_FORMAT,
        "config": denoiser.cfg.to_dict(),
        "timesteps": schedule.timesteps,
        "beta_start": schedule.beta_start,
        "beta_end": schedule.beta_end,
        "latent_scale": latent_scale,
        "max_surfaces": max_surfaces,
        "modality": modality,
        "extra": extra or {},
    }
    arrays = _state_to_arrays(denoiser, "ldm.")
    if cond_encoder is not None:
        arrays.update(_state_to_arrays(cond_encoder, "cond."))
        manifest["cond_with_normals"] = cond_encoder.with_normals
    write_archive(path, manifest, arrays)


def load_ldm(path):
    manifest, arrays = read_archive(path)
    if manifest.get("format") != LDM_FORMAT:
        raise ValueError(f"not an LDM checkpoint: {manifest.get('format')!r}")
    denoiser = Denoiser(DenoiserConfig.from_dict(manifest["config"]))
    denoiser.load_state_dict(_arrays_to_state(arrays, "ldm."))
    denoiser.eval()
    schedule = DiffusionSchedule(
        timesteps=int(manifest["timesteps"]),
        beta_start=float(manifest["beta_start"]),
        beta_end=float(manifest["beta_end"]),
    )
    cond_encoder = None
    if any(k.startswith("cond.") for k in arrays):
        cond_encoder = PointCloudEncoder(with_normals=bool(manifest.get("cond_with_normals", False)))
        cond_encoder.load_state_dict(_arrays_to_state(arrays, "cond."))
        cond_encoder.eval()
    return {
        "denoiser": denoiser,
        "schedule": schedule,
        "latent_scale": float(manifest["latent_scale"]),
        "max_surfaces": int(manifest["max_surfaces"]),
        "modality": manifest.get("modality", "none"),
        "cond_encoder": cond_encoder,
    }


# ---------------------------------------------------------------------------
# LDM training
# ---------------------------------------------------------------------------


def train_ldm(
    latents: list[np.ndarray],
    max_surfaces: int,
    schedule: DiffusionSchedule | None = None,
    den_cfg: DenoiserConfig | None = None,
    cfg: TrainConfig | None = None,
    point_clouds: list[np.ndarray] | None = None,
    with_normals: bool = False,
    val_fraction: float = 0.05,
    log=None,
) -> tuple[Denoiser, float, PointCloudEncoder | None, list[dict]]:
    """Train the denoiser on padded, globally standardized latent sets.

    When `point_clouds` is given, a point encoder is trained jointly and the
    model becomes point-conditioned; otherwise the condition is exactly zero.
    """
    cfg = cfg or TrainConfig(batch=128)
    schedule = schedule or DiffusionSchedule()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    padded = np.stack([pad_latents(z, max_surfaces, seed=cfg.seed + i) for i, z in enumerate(latents)])
    scale = float(1.0 / max(np.std(padded), 1e-8))
    data = torch.from_numpy((padded * scale).astype(np.float32))

    clouds = None
    if point_clouds is not None:
        clouds = torch.from_numpy(np.stack(point_clouds).astype(np.float32))

    n = len(data)
    n_val = max(1, int(round(n * val_fraction)))
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    denoiser = Denoiser(den_cfg)
    cond_encoder = PointCloudEncoder(with_normals) if clouds is not None else None
    params = list(denoiser.parameters()) + (list(cond_encoder.parameters()) if cond_encoder else [])
    opt = torch.optim.Adam(params, lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    history: list[dict] = []
    best_val, best_state, bad = math.inf, None, 0
    t0 = time.time()

    def cond_for(idx_tensor):
        if cond_encoder is None:
            return None
        return cond_encoder(clouds[idx_tensor])

    for step in range(1, cfg.max_steps + 1):
        denoiser.train()
        for group in opt.param_groups:
            group["lr"] = _lr_at(cfg, step)
        idx = torch.from_numpy(rng.choice(train_idx, size=min(cfg.batch, len(train_idx)), replace=False))
        loss = diffusion_loss(denoiser, schedule, data[idx], cond_for(idx), generator=gen)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite LDM loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == 1:
            history.append({"step": step, "l2": float(loss.detach()), "elapsed": time.time() - t0})
            if log:
                log(history[-1])
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            denoiser.eval()
            vgen = torch.Generator().manual_seed(12345)
            with torch.no_grad():
                vidx = torch.from_numpy(val_idx)
                vloss = float(
                    diffusion_loss(denoiser, schedule, data[vidx], cond_for(vidx), generator=vgen)
                )
            history.append({"step": step, "val_l2": vloss, "elapsed": time.time() - t0})
            if log:
                log(history[-1])
            if vloss < best_val - 1e-6:
                best_val, bad = vloss, 0
                best_state = (
                    copy.deepcopy(denoiser.state_dict()),
                    copy.deepcopy(cond_encoder.state_dict()) if cond_encoder else None,
                )
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    if best_state is not None:
        denoiser.load_state_dict(best_state[0])
        if cond_encoder is not None and best_state[1] is not None:
            cond_encoder.load_state_dict(best_state[1])
    denoiser.eval()
    if cond_encoder is not None:
        cond_encoder.eval()
    return denoiser, scale, cond_encoder, history
