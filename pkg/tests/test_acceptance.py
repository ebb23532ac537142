"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Heavy artifacts (trained models) are cached under .acceptance_cache so a
re-run skips training; wall-clock budgets are recorded at training time and
asserted from the cached metadata. Set BREPLAT_ACCEPTANCE_CACHE to relocate
the cache, or delete it to retrain from scratch.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from breplat import metrics, synthgen, training
from breplat.brep import validate_topology
from breplat.diffusion import (
    DenoiserConfig,
    DiffusionSchedule,
    dedup_latents,
    pad_latents,
    q_sample,
    sample,
)
from breplat.generate import GenerationSettings, generate
from breplat.solidify import extract_mesh, select_best, solidify, solidify_model
from breplat.vae import BRepVAE, VAEConfig, tiny_vae_config

torch.set_num_threads(1)

CACHE = Path(os.environ.get("BREPLAT_ACCEPTANCE_CACHE", Path(__file__).resolve().parent.parent / ".acceptance_cache"))
CACHE.mkdir(parents=True, exist_ok=True)

# pinned acceptance tolerances
TAU_VALIDITY = 0.1
POINT_L1_LIMIT = 0.02
INTERSECTION_ACC_LIMIT = 0.99
ORIENTATION_L1_LIMIT = 0.05
VALIDITY_RATIO_LIMIT = 0.50
GRADIENT_REL_TOL_FRACTION = 0.99
TTA_POOLS = (1, 4, 16, 32)
TTA_CONDITIONS = 50
TTA_CHAMFER_FRACTION = 0.95

OVERFIT_VAE_CFG = dict(intersect_width=64, intersect_heads=8)
OVERFIT_TRAIN = dict(lr=3e-3, lr_floor=0.02, batch=32, max_steps=7000, eval_every=700, patience=99)
FULL_TRAIN = dict(lr=3e-3, lr_floor=0.02, batch=32, max_steps=6000, eval_every=600, patience=99)
LDM_UNCOND = dict(width=96, layers=4, heads=8, ffn=192)
LDM_POINTS = dict(width=64, layers=3, heads=8, ffn=128)
LDM_TRAIN = dict(lr=1e-3, lr_floor=0.05, batch=128, max_steps=3500, eval_every=500, patience=99)


def _report(criterion: int, ok: bool, detail: str):
    print(f"\nACCEPTANCE {criterion} {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def _meta_path(name: str) -> Path:
    return CACHE / f"{name}.meta.json"


def _cached_vae(name: str, records, vcfg: VAEConfig, tcfg: training.TrainConfig, val_records=None):
    ck = CACHE / f"{name}.zip"
    mp = _meta_path(name)
    if ck.exists() and mp.exists():
        return training.load_vae(ck), json.loads(mp.read_text())
    t0 = time.time()
    val = val_records if val_records is not None else records[: max(4, len(records) // 8)]
    model, _ = training.train_vae(records, val, vcfg, tcfg)
    minutes = (time.time() - t0) / 60.0
    rep = training.reconstruction_report(model, records)
    training.save_vae(ck, model)
    meta = {"train_minutes": minutes, "report": rep}
    mp.write_text(json.dumps(meta))
    return model, meta


def _cached_ldm(name: str, latents, max_surfaces, den_cfg, tcfg, point_clouds=None):
    ck = CACHE / f"{name}.zip"
    mp = _meta_path(name)
    if ck.exists() and mp.exists():
        bundle = training.load_ldm(ck)
        return bundle, json.loads(mp.read_text())
    t0 = time.time()
    schedule = DiffusionSchedule()
    denoiser, scale, cond_enc, _ = training.train_ldm(
        latents, max_surfaces, schedule, den_cfg, tcfg, point_clouds=point_clouds
    )
    minutes = (time.time() - t0) / 60.0
    training.save_ldm(
        ck, denoiser, schedule, scale, max_surfaces,
        "points" if point_clouds is not None else "none", cond_enc,
    )
    meta = {"train_minutes": minutes}
    mp.write_text(json.dumps(meta))
    return training.load_ldm(ck), meta


# ---------------------------------------------------------------------------
# shared corpora and models
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def corpus_1000():
    return synthgen.make_family(101, 1000, "mixed")


@pytest.fixture(scope="session")
def corpus_2000():
    return synthgen.make_family(202, 2000, "mixed")


@pytest.fixture(scope="session")
def overfit_records():
    return synthgen.make_family(7, 64, "mixed")


@pytest.fixture(scope="session")
def vae64(overfit_records):
    vcfg = VAEConfig(**OVERFIT_VAE_CFG)
    tcfg = training.TrainConfig(seed=0, **OVERFIT_TRAIN)
    return _cached_vae("vae64", overfit_records, vcfg, tcfg)


@pytest.fixture(scope="session")
def vae_full(corpus_2000):
    tr, va, _ = synthgen.split_indices(len(corpus_2000), 202)
    vcfg = VAEConfig(**OVERFIT_VAE_CFG)
    tcfg = training.TrainConfig(seed=0, **FULL_TRAIN)
    model, meta = _cached_vae(
        "vae_full", [corpus_2000[i] for i in tr], vcfg, tcfg,
        val_records=[corpus_2000[i] for i in va],
    )
    return model, meta


@pytest.fixture(scope="session")
def ldm_uncond(vae_full, corpus_2000):
    model, _ = vae_full
    tr, _, _ = synthgen.split_indices(len(corpus_2000), 202)
    latents = training.encode_records(model, [corpus_2000[i] for i in tr])
    tcfg = training.TrainConfig(seed=0, **LDM_TRAIN)
    return _cached_ldm("ldm_uncond", latents, 30, DenoiserConfig(**LDM_UNCOND), tcfg)


def _condition_cloud(record, count, seed):
    model = record.to_model()
    report, assembly = solidify_model(model)
    mesh = extract_mesh(report, assembly)
    return mesh.sample_points(count, seed).astype(np.float32)


@pytest.fixture(scope="session")
def ldm_points(vae_full, corpus_2000):
    model, _ = vae_full
    tr, _, _ = synthgen.split_indices(len(corpus_2000), 202)
    train_records = [corpus_2000[i] for i in tr]
    latents = training.encode_records(model, train_records)
    clouds_path = CACHE / "cond_clouds.npz"
    if clouds_path.exists():
        data = np.load(clouds_path)
        clouds = [data[k] for k in sorted(data.files)]
    else:
        clouds = [_condition_cloud(r, 512, 1000 + i) for i, r in enumerate(train_records)]
        np.savez(clouds_path, **{f"c{i:05d}": c for i, c in enumerate(clouds)})
    tcfg = training.TrainConfig(seed=1, **LDM_TRAIN)
    return _cached_ldm("ldm_points", latents, 30, DenoiserConfig(**LDM_POINTS), tcfg, point_clouds=clouds)


# ---------------------------------------------------------------------------
# 1. data integrity
# ---------------------------------------------------------------------------


def test_criterion_1_data_integrity(corpus_1000):
    t0 = time.time()
    bad = 0
    for rec in corpus_1000:
        model = rec.to_model()
        rep = validate_topology(model)
        chi_want = 0 if rec.label == "box_hole" else 2
        ok = rep.ok and rep.shell_euler == [chi_want]
        if ok:
            for j in range(rec.half_curves.shape[0]):
                if not np.array_equal(rec.half_curves[int(rec.twin[j])], rec.half_curves[j][::-1]):
                    ok = False
                    break
        bad += not ok
    elapsed = time.time() - t0
    _report(
        1,
        bad == 0 and elapsed < 60.0,
        f"1000 records, {bad} violations, Euler/twin checks exact, {elapsed:.1f}s (< 60s)",
    )


# ---------------------------------------------------------------------------
# 2. solidifier round trip
# ---------------------------------------------------------------------------


def test_criterion_2_solidifier_round_trip(corpus_1000):
    t0 = time.time()
    n_valid = 0
    for rec in corpus_1000:
        report, _ = solidify_model(rec.to_model(), TAU_VALIDITY, TAU_VALIDITY)
        n_valid += report.valid
    flipped = 0
    rng = np.random.default_rng(0)
    for k in range(100):
        rec = corpus_1000[int(rng.integers(0, len(corpus_1000)))]
        model = rec.to_model()
        grids = np.stack([s.points for s in model.surfaces])
        grids[int(rng.integers(0, len(grids)))] += 0.5
        cp = {j: model.half_curves[j].points for j in range(model.num_half_curves)}
        ow = {j: model.half_curves[j].owner_surface for j in range(model.num_half_curves)}
        tw = {j: int(model.twin[j]) for j in range(model.num_half_curves)}
        report, _ = solidify(grids, cp, ow, tw, TAU_VALIDITY, TAU_VALIDITY)
        flipped += not report.valid
    elapsed = time.time() - t0
    _report(
        2,
        n_valid == len(corpus_1000) and flipped == 100 and elapsed < 300.0,
        f"{n_valid}/1000 valid, {flipped}/100 corruptions flipped to invalid, {elapsed:.1f}s (< 300s)",
    )


# ---------------------------------------------------------------------------
# 3. DDPM math
# ---------------------------------------------------------------------------


def test_criterion_3_ddpm_math():
    schedule = DiffusionSchedule()
    prod = 1.0
    max_err = 0.0
    for t in range(schedule.timesteps):
        prod *= 1.0 - schedule.betas[t]
        max_err = max(max_err, abs(schedule.alpha_bars[t] - prod))

    var_ok = True
    draws = 100_000
    z0 = torch.zeros(1, 1, 8)
    gen = torch.Generator().manual_seed(0)
    var_details = []
    for t in (0, 500, 999):
        eps = torch.randn((draws, 1, 8), generator=gen)
        zt = q_sample(schedule, z0.expand(draws, -1, -1), torch.full((draws,), t), eps)
        var = float(zt.var())
        target = 1.0 - schedule.alpha_bars[t]
        var_details.append(f"t={t}: {var:.5f} vs {target:.5f}")
        var_ok &= abs(var - target) / target < 0.02

    class ZeroDenoiser(torch.nn.Module):
        def forward(self, z_t, t, cond=None):
            return torch.zeros_like(z_t)

    out = sample(schedule, ZeroDenoiser(), None, seed=11, count=1, max_surfaces=4, dtype=torch.float64)
    g = torch.Generator().manual_seed(11)
    x = torch.randn((1, 4, 32), generator=g, dtype=torch.float64)
    for t in range(schedule.timesteps - 1, -1, -1):
        x = x / np.sqrt(schedule.alphas[t])
        if t > 0:
            x = x + np.sqrt(schedule.betas[t]) * torch.randn(x.shape, generator=g, dtype=torch.float64)
    sampler_err = float((out - x).abs().max())

    _report(
        3,
        max_err < 1e-12 and var_ok and sampler_err < 1e-6,
        f"abar err {max_err:.2e} (<1e-12); variance {'; '.join(var_details)} (2%); "
        f"zero-denoiser oracle err {sampler_err:.2e} (<1e-6)",
    )


# ---------------------------------------------------------------------------
# 4. gradient correctness
# ---------------------------------------------------------------------------


def test_criterion_4_gradient_correctness():
    from fd_gradcheck import finite_diff_agreement
    from test_gradcheck import make_toy_batch

    torch.manual_seed(0)
    model = BRepVAE(tiny_vae_config()).double().train()
    batch = make_toy_batch()
    noise = torch.tensor(np.random.default_rng(5).normal(size=(1, 2, 32)), dtype=torch.float64)

    def vae_loss():
        return training.vae_loss_on_batch(model, batch, noise=noise)["total"]

    frac_vae, _ = finite_diff_agreement(model, vae_loss)

    from breplat.diffusion import Denoiser, diffusion_loss

    torch.manual_seed(0)
    den = Denoiser(DenoiserConfig(width=16, layers=1, heads=2, ffn=16)).double().train()
    schedule = DiffusionSchedule()
    rng = np.random.default_rng(3)
    z0 = torch.tensor(rng.normal(size=(2, 3, 32)), dtype=torch.float64)
    eps = torch.tensor(rng.normal(size=(2, 3, 32)), dtype=torch.float64)
    cond = torch.tensor(rng.normal(size=(2, 256)), dtype=torch.float64)
    t = torch.tensor([100, 900])

    def ldm_loss():
        return diffusion_loss(den, schedule, z0, cond, t=t, eps=eps)

    frac_ldm, _ = finite_diff_agreement(den, ldm_loss)
    _report(
        4,
        frac_vae >= GRADIENT_REL_TOL_FRACTION and frac_ldm >= GRADIENT_REL_TOL_FRACTION,
        f"VAE grad agreement {frac_vae:.4f}, LDM {frac_ldm:.4f} (>= 0.99 at rel 1e-4, float64)",
    )


# ---------------------------------------------------------------------------
# 5. overfit capability
# ---------------------------------------------------------------------------


def test_criterion_5_overfit(vae64):
    model, meta = vae64
    rep = meta["report"]
    ok = (
        rep["point_l1"] < POINT_L1_LIMIT
        and rep["intersection_accuracy"] >= INTERSECTION_ACC_LIMIT
        and rep["orientation_l1"] < ORIENTATION_L1_LIMIT
        and meta["train_minutes"] < 180.0
    )
    _report(
        5,
        ok,
        f"point L1 {rep['point_l1']:.4f} (<0.02), intersection acc {rep['intersection_accuracy']:.4f}"
        f" (>=0.99), swapped-order orientation L1 {rep['orientation_l1']:.4f} (<0.05),"
        f" trained in {meta['train_minutes']:.1f} min (<180 CPU)",
    )


# ---------------------------------------------------------------------------
# 6. desk-scale unconditional generation
# ---------------------------------------------------------------------------


def test_criterion_6_unconditional_generation(vae_full, ldm_uncond):
    vae, _ = vae_full
    bundle, meta = ldm_uncond
    t0 = time.time()
    solids = generate(
        vae, bundle["denoiser"], bundle["schedule"], bundle["latent_scale"],
        count=100, seed=606, max_surfaces=bundle["max_surfaces"],
    )
    ratio = sum(s.valid for s in solids) / len(solids)
    sample_minutes = (time.time() - t0) / 60.0
    total = meta["train_minutes"] + sample_minutes
    _report(
        6,
        ratio >= VALIDITY_RATIO_LIMIT and total < 120.0,
        f"validity {ratio:.2f} over 100 samples (>=0.50), train {meta['train_minutes']:.1f} min"
        f" + sampling {sample_minutes:.1f} min (< 120 total)",
    )


# ---------------------------------------------------------------------------
# 7. test-time augmentation monotonicity
# ---------------------------------------------------------------------------


def test_criterion_7_tta(vae_full, ldm_points, corpus_2000):
    vae, _ = vae_full
    bundle, _ = ldm_points
    _, _, te = synthgen.split_indices(len(corpus_2000), 202)
    test_records = [corpus_2000[i] for i in te[:TTA_CONDITIONS]]
    clouds = [_condition_cloud(r, 512, 9000 + i) for i, r in enumerate(test_records)]
    with torch.no_grad():
        cond = bundle["cond_encoder"](torch.from_numpy(np.stack(clouds)))

    # nested candidate pools: candidate k for every condition in one batch
    candidates = [[] for _ in range(len(clouds))]
    for k in range(max(TTA_POOLS)):
        batch = generate(
            vae, bundle["denoiser"], bundle["schedule"], bundle["latent_scale"],
            count=len(clouds), seed=7000 + k, max_surfaces=bundle["max_surfaces"],
            cond=cond, batch=len(clouds),
        )
        for ci, solid in enumerate(batch):
            candidates[ci].append(solid)

    from breplat.metrics import chamfer

    dist_cache: dict[tuple[int, int], float] = {}

    def cand_dist(ci, k):
        if (ci, k) not in dist_cache:
            s = candidates[ci][k]
            dist_cache[ci, k] = (
                chamfer(s.model.surface_points(), clouds[ci]) if s.model is not None else np.inf
            )
        return dist_cache[ci, k]

    def selected(ci, pool_size):
        pool = candidates[ci][:pool_size]
        dists = [cand_dist(ci, k) for k in range(pool_size)]
        valid_ids = [k for k in range(pool_size) if pool[k].valid]
        ids = valid_ids if valid_ids else list(range(pool_size))
        idx = min(ids, key=lambda k: dists[k])
        return pool[idx], dists[idx]

    ratios = []
    best1, best32 = [], []
    for pool_size in TTA_POOLS:
        valid_flags = []
        for ci in range(len(clouds)):
            sel, dist = selected(ci, pool_size)
            valid_flags.append(sel.valid)
            if pool_size == 1:
                best1.append(dist)
            if pool_size == max(TTA_POOLS):
                best32.append(dist)
        ratios.append(float(np.mean(valid_flags)))

    monotone = all(ratios[i] <= ratios[i + 1] + 1e-12 for i in range(len(ratios) - 1))
    improved = float(np.mean([b32 <= b1 for b1, b32 in zip(best1, best32)]))
    _report(
        7,
        monotone and improved >= TTA_CHAMFER_FRACTION,
        f"validity by pool {dict(zip(TTA_POOLS, [round(r, 2) for r in ratios]))} non-decreasing={monotone}; "
        f"best-of-32 chamfer <= best-of-1 for {improved:.2f} of conditions (>= 0.95)",
    )


# ---------------------------------------------------------------------------
# 8. metric oracles
# ---------------------------------------------------------------------------


def test_criterion_8_metric_oracles():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 3))
    ident = metrics.chamfer(x, x) == 0.0
    pair = abs(metrics.chamfer([[0, 0, 0]], [[1, 0, 0]]) - 1.0) < 1e-12
    shapes = [rng.normal(size=(30, 3)) * 0.1 + i * 0.1 for i in range(4)]
    cov = metrics.coverage(shapes, shapes) == 1.0
    mmd0 = metrics.mmd(shapes + [rng.normal(size=(30, 3)) + 9], shapes) == 0.0
    jsd0 = metrics.jsd(shapes, [s.copy() for s in shapes]) < 1e-12
    jsd1 = abs(metrics.jsd([np.full((5, 3), -0.9)], [np.full((5, 3), 0.9)]) - 1.0) < 1e-12

    cube = synthgen.make_box(2, 2, 2)
    from test_metrics import _cycle_space_rank, _wire_edges

    rank = _cycle_space_rank(_wire_edges(cube), len(cube.vertices))
    cc_ok = metrics.cyclomatic(cube) == rank + 1 == 6

    th = np.linspace(np.pi / 3, 2 * np.pi / 3, 16)
    ph = np.linspace(-np.pi / 6, np.pi / 6, 16)
    T, P = np.meshgrid(th, ph, indexing="ij")
    sphere = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1)
    ang = np.linspace(0, np.pi / 2, 16)
    z = np.linspace(0, 1, 16)
    A, Z = np.meshgrid(ang, z, indexing="ij")
    cyl = np.stack([0.5 * np.cos(A), 0.5 * np.sin(A), Z], axis=-1)
    from test_metrics import _point_model

    mc_sphere = metrics.mean_curvature(_point_model([sphere]))
    mc_cyl = metrics.mean_curvature(_point_model([cyl]))
    mc_ok = abs(mc_sphere - 1.0) < 0.05 and abs(mc_cyl - 1.0) < 0.05

    ok = ident and pair and cov and mmd0 and jsd0 and jsd1 and cc_ok and mc_ok
    _report(
        8,
        ok,
        f"chamfer/coverage/mmd/jsd identities exact; cyclomatic(cube)={metrics.cyclomatic(cube)} (=6, "
        f"cycle-space oracle); |H| sphere {mc_sphere:.3f}, cylinder {mc_cyl:.3f} (within 5%)",
    )


# ---------------------------------------------------------------------------
# 9. ablation harness
# ---------------------------------------------------------------------------


def test_criterion_9_ablation(overfit_records):
    steps = 1500
    tcfg = training.TrainConfig(seed=0, lr=3e-3, lr_floor=0.02, batch=32,
                                max_steps=steps, eval_every=steps, patience=99)
    full_cfg = VAEConfig(**OVERFIT_VAE_CFG)
    ablated_cfg = VAEConfig(**OVERFIT_VAE_CFG, spatial_latent=False, oriented_curves=False)
    _, meta_full = _cached_vae("vae64_abl_full", overfit_records, full_cfg, tcfg)
    _, meta_abl = _cached_vae("vae64_abl_off", overfit_records, ablated_cfg, tcfg)
    err_full = meta_full["report"]["orientation_l1"]
    err_abl = meta_abl["report"]["orientation_l1"]
    _report(
        9,
        err_abl > err_full,
        f"orientation error full {err_full:.4f} -> ablated (pooled latent, undirected curves) "
        f"{err_abl:.4f}; strictly increases",
    )
