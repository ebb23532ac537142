"""Command-line driver: data generation, training, sampling, solidification, eval.

Configuration lives in one JSON file (see README for the schema); command-line
flags override file keys, and the HOLA_SEED environment variable overrides the
seed. Exit codes: 0 success, 2 usage/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_TOLERANCES = {
    "tau_e": 0.1,
    "tau_p": 0.1,
    "tau_dup": 0.15,
    "tau_v": 1e-6,
    "classify_threshold": 0.5,
}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    max_surfaces: int = 30
    families: str = "mixed"
    count: int = 1000
    condition: str = "none"
    tta_runs: int = 1
    vae: dict = field(default_factory=dict)
    ldm: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))

    @classmethod
    def load(cls, path: str | None, overrides: dict | None = None) -> "RunConfig":
        data: dict = {}
        if path:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for k, v in (overrides or {}).items():
            if v is None:
                continue
            data[k] = v
        cfg = cls()
        for k, v in data.items():
            if not hasattr(cfg, k):
                raise ConfigError(f"unknown config key {k!r}")
            if isinstance(getattr(cfg, k), dict) and isinstance(v, dict):
                merged = dict(getattr(cfg, k))
                merged.update(v)
                setattr(cfg, k, merged)
            else:
                setattr(cfg, k, v)
        env_seed = os.environ.get("HOLA_SEED")
        if env_seed is not None:
            cfg.seed = int(env_seed)
        cfg.validate()
        return cfg

    def validate(self):
        for name, v in self.tolerances.items():
            if name != "classify_threshold" and v <= 0:
                raise ConfigError(f"tolerance {name} must be positive, got {v}")
        if self.max_surfaces < 1:
            raise ConfigError("max_surfaces must be >= 1")
        if self.condition not in ("none", "points", "image", "sketch", "text"):
            raise ConfigError(f"unknown condition modality {self.condition!r}")
        if self.tta_runs < 1:
            raise ConfigError("tta_runs must be >= 1")


def _setup_torch():
    import torch

    torch.set_num_threads(max(1, int(os.environ.get("BREPLAT_THREADS", "1"))))
    return torch


def _write_history(history: list[dict], path: Path):
    keys: list[str] = []
    for row in history:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(history)


def _record_point_cloud(record, count: int, seed: int) -> np.ndarray:
    """Surface point cloud of one record via its trimmed mesh."""
    from .solidify import extract_mesh, solidify_model

    model = record.to_model()
    report, assembly = solidify_model(model)
    if report.valid:
        return extract_mesh(report, assembly).sample_points(count, seed)
    pts = model.surface_points()
    rng = np.random.default_rng(seed)
    return pts[rng.integers(0, len(pts), size=count)]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from . import synthgen

    cfg = RunConfig.load(args.config, {"seed": args.seed, "count": args.count, "families": args.families})
    if cfg.families != "mixed" and cfg.families not in synthgen.FAMILIES:
        raise ConfigError(f"unknown family tag {cfg.families!r}")
    if cfg.count < 1:
        raise ConfigError("count must be >= 1")
    records = synthgen.make_family(cfg.seed, cfg.count, cfg.families)
    synthgen.write_dataset(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _load_dataset(path):
    from . import synthgen

    if not Path(path).exists():
        raise ConfigError(f"dataset not found: {path}")
    return synthgen.read_dataset(path)


def cmd_train_vae(args) -> int:
    from . import synthgen, training
    from .vae import VAEConfig

    _setup_torch()
    cfg = RunConfig.load(args.config, {"seed": args.seed})
    records = _load_dataset(args.dataset)
    tr, va, _ = synthgen.split_indices(len(records), cfg.seed)
    vae_cfg = VAEConfig.from_dict({k: v for k, v in cfg.vae.items() if k in VAEConfig().__dict__})
    tcfg = training.TrainConfig(
        lr=float(cfg.vae.get("lr", 1e-4)),
        batch=int(cfg.vae.get("batch", 32)),
        max_steps=int(cfg.vae.get("max_steps", 4000)),
        eval_every=int(cfg.vae.get("eval_every", 200)),
        patience=int(cfg.vae.get("patience", 8)),
        seed=cfg.seed,
    )
    init_model, start_step = None, 0
    if args.resume:
        from .archive import read_manifest

        init_model = training.load_vae(args.resume)
        start_step = int(read_manifest(args.resume).get("extra", {}).get("steps", 0))
        print(f"resuming from {args.resume} at step {start_step}")
    model, history = training.train_vae(
        [records[i] for i in tr],
        [records[i] for i in va],
        vae_cfg,
        tcfg,
        log=lambda row: print(row, flush=True),
        init_model=init_model,
        start_step=start_step,
    )
    final_step = max((row["step"] for row in history), default=start_step)
    training.save_vae(args.out, model, extra={"dataset": str(args.dataset), "steps": final_step})
    _write_history(history, Path(args.out).with_suffix(".loss.csv"))
    print(f"saved VAE checkpoint to {args.out}")
    return 0


def cmd_train_ldm(args) -> int:
    from . import training
    from .diffusion import DenoiserConfig, DiffusionSchedule

    _setup_torch()
    cfg = RunConfig.load(args.config, {"seed": args.seed, "condition": args.condition})
    records = _load_dataset(args.dataset)
    max_m = max(r.surfaces.shape[0] for r in records)
    if cfg.max_surfaces < max_m:
        raise ConfigError(f"max_surfaces {cfg.max_surfaces} < dataset maximum {max_m}")
    vae = training.load_vae(args.vae)
    latents = training.encode_records(vae, records)
    schedule = DiffusionSchedule(
        timesteps=int(cfg.ldm.get("timesteps", 1000)),
        beta_start=float(cfg.ldm.get("beta_start", 1e-4)),
        beta_end=float(cfg.ldm.get("beta_end", 0.02)),
    )
    den_cfg = DenoiserConfig(
        width=int(cfg.ldm.get("width", 96)),
        layers=int(cfg.ldm.get("layers", 4)),
        heads=int(cfg.ldm.get("heads", 8)),
        ffn=int(cfg.ldm.get("ffn", 192)),
    )
    tcfg = training.TrainConfig(
        lr=float(cfg.ldm.get("lr", 1e-4)),
        batch=int(cfg.ldm.get("batch", 128)),
        max_steps=int(cfg.ldm.get("max_steps", 4000)),
        eval_every=int(cfg.ldm.get("eval_every", 250)),
        patience=int(cfg.ldm.get("patience", 8)),
        seed=cfg.seed,
    )
    clouds = None
    if cfg.condition == "points":
        n_pts = int(cfg.ldm.get("condition_points", 512))
        clouds = [
            _record_point_cloud(r, n_pts, seed=cfg.seed + 1000 + i) for i, r in enumerate(records)
        ]
    elif cfg.condition != "none":
        raise ConfigError(f"training with modality {cfg.condition!r} is not wired (toy encoders only)")
    denoiser, scale, cond_enc, history = training.train_ldm(
        latents,
        cfg.max_surfaces,
        schedule,
        den_cfg,
        tcfg,
        point_clouds=clouds,
        log=lambda row: print(row, flush=True),
    )
    training.save_ldm(
        args.out, denoiser, schedule, scale, cfg.max_surfaces, cfg.condition, cond_enc,
        extra={"dataset": str(args.dataset), "vae": str(args.vae)},
    )
    _write_history(history, Path(args.out).with_suffix(".loss.csv"))
    print(f"saved LDM checkpoint to {args.out}")
    return 0


def _load_conditions(path, cond_encoder):
    import torch

    pts = np.load(path)
    if pts.ndim == 2:
        pts = pts[None]
    if pts.ndim != 3 or pts.shape[-1] != 3:
        raise ConfigError("condition file must hold (P,3) or (C,P,3) points")
    with torch.no_grad():
        c = cond_encoder(torch.from_numpy(pts.astype(np.float32)))
    return pts, c


def cmd_sample(args) -> int:
    from . import synthgen, training
    from .generate import GenerationSettings, generate, validity_ratio
    from .solidify import select_best

    torch = _setup_torch()
    cfg = RunConfig.load(args.config, {"seed": args.seed, "tta_runs": args.tta, "condition": args.condition})
    vae = training.load_vae(args.vae)
    bundle = training.load_ldm(args.ldm)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = GenerationSettings(
        tau_dup=cfg.tolerances["tau_dup"],
        tau_e=cfg.tolerances["tau_e"],
        tau_p=cfg.tolerances["tau_p"],
        classify_threshold=cfg.tolerances["classify_threshold"],
    )

    if cfg.condition == "none":
        solids = generate(
            vae, bundle["denoiser"], bundle["schedule"], bundle["latent_scale"],
            count=args.count, seed=cfg.seed, max_surfaces=bundle["max_surfaces"], settings=settings,
        )
        chosen = [s.model for s in solids if s.valid]
        ratio = validity_ratio(solids)
    else:
        if bundle["cond_encoder"] is None:
            raise ConfigError("checkpoint has no condition encoder; train with --condition points")
        if not args.condition_file:
            raise ConfigError("conditioned sampling needs --condition-file")
        clouds, cond = _load_conditions(args.condition_file, bundle["cond_encoder"])
        chosen = []
        selected_valid = []  # (condition, candidate) validity for pool-size sweep
        for ci in range(len(clouds)):
            cands = generate(
                vae, bundle["denoiser"], bundle["schedule"], bundle["latent_scale"],
                count=cfg.tta_runs, seed=cfg.seed + 7919 * ci,
                max_surfaces=bundle["max_surfaces"], cond=cond[ci], settings=settings,
            )
            selected_valid.append([c.valid for c in cands])
            models = [c.model for c in cands]
            valid = [c.valid for c in cands]
            pool = [k for k in range(len(cands)) if models[k] is not None]
            if not pool:
                continue
            best, _ = select_best([models[k] for k in pool], clouds[ci], [valid[k] for k in pool])
            chosen.append(best)
        # selected output is valid as soon as any pool member is valid
        ratio = float(np.mean([any(v) for v in selected_valid])) if selected_valid else 0.0
        if cfg.tta_runs > 1 and selected_valid:
            pools = [k for k in (1, 2, 4, 8, 16, 32, 64) if k <= cfg.tta_runs]
            ratios = [float(np.mean([any(v[:k]) for v in selected_valid])) for k in pools]
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt

            fig, ax = plt.subplots(figsize=(4, 3))
            ax.plot(pools, ratios, marker="o")
            ax.set_xscale("log", base=2)
            ax.set_xlabel("runs per condition")
            ax.set_ylabel("valid ratio of selected output")
            ax.set_ylim(0, 1.05)
            fig.tight_layout()
            fig.savefig(out_dir / "tta_validity.png", dpi=120)
            plt.close(fig)

    records = [synthgen.DatasetRecord.from_model(m) for m in chosen]
    synthgen.write_dataset(records, out_dir / "generated.zip")
    with open(out_dir / "reports.txt", "w") as fh:
        if cfg.condition == "none":
            for i, s in enumerate(solids):
                fh.write(f"sample {i}: {'valid' if s.valid else s.reason}\n")
        fh.write(f"validity_ratio {ratio:.4f}\n")
    print(f"validity ratio: {ratio:.4f} ({len(records)} models kept) -> {out_dir}")
    return 0


def cmd_solidify(args) -> int:
    from .solidify import solidify_model

    cfg = RunConfig.load(args.config, {})
    records = _load_dataset(args.dataset)
    out = Path(args.out) if args.out else None
    lines = []
    n_valid = 0
    for i, r in enumerate(records):
        report, _ = solidify_model(r.to_model(), cfg.tolerances["tau_e"], cfg.tolerances["tau_p"])
        n_valid += report.valid
        lines.append(f"record {i}: {report.summary()}")
    ratio = n_valid / max(len(records), 1)
    lines.append(f"validity_ratio {ratio:.4f}")
    text = "\n".join(lines) + "\n"
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    sys.stdout.write(text if len(lines) < 50 else lines[-1] + "\n")
    return 0


def cmd_eval(args) -> int:
    from . import metrics
    from .solidify import solidify_model

    cfg = RunConfig.load(args.config, {})
    gen_records = _load_dataset(args.gen)
    ref_records = _load_dataset(args.ref)
    if not gen_records or not ref_records:
        raise ConfigError("evaluation needs non-empty generated and reference sets")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    gen_models = [r.to_model() for r in gen_records]
    ref_models = [r.to_model() for r in ref_records]
    gen_clouds = [m.surface_points() for m in gen_models]
    ref_clouds = [m.surface_points() for m in ref_models]

    validity = float(
        np.mean([solidify_model(m, cfg.tolerances["tau_e"], cfg.tolerances["tau_p"])[0].valid for m in gen_models])
    )
    results = {
        "validity": validity,
        "coverage": metrics.coverage(gen_clouds, ref_clouds),
        "mmd": metrics.mmd(gen_clouds, ref_clouds),
        "jsd": metrics.jsd(gen_clouds, ref_clouds),
        "cyclomatic": float(np.mean([metrics.cyclomatic(m) for m in gen_models])),
        "mean_curvature": float(np.mean([metrics.mean_curvature(m) for m in gen_models])),
    }

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if args.train:
        train_records = _load_dataset(args.train)
        train_clouds = [r.to_model().surface_points() for r in train_records]
        novelty = metrics.novelty_distances(gen_clouds, train_clouds)
        results["novelty_mean"] = float(novelty.mean())
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.hist(novelty, bins=30)
        ax.set_xlabel("Chamfer distance to nearest training shape")
        ax.set_ylabel("count")
        fig.tight_layout()
        fig.savefig(out_dir / "novelty_hist.png", dpi=120)
        plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3))
    names = sorted(results)
    ax.barh(names, [results[k] for k in names])
    ax.set_xscale("log")
    fig.tight_layout()
    fig.savefig(out_dir / "metrics.png", dpi=120)
    plt.close(fig)

    (out_dir / "metrics.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    print(json.dumps(results, indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="breplat", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic B-Rep dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--families")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vae", help="train the surface-latent VAE")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from (step count carries on)")
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-ldm", help="train the latent diffusion model")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--condition", choices=["none", "points"])
    p.set_defaults(func=cmd_train_ldm)

    p = sub.add_parser("sample", help="sample and solidify new models")
    p.add_argument("--config")
    p.add_argument("--vae", required=True)
    p.add_argument("--ldm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.add_argument("--condition", choices=["none", "points"])
    p.add_argument("--condition-file")
    p.add_argument("--tta", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("solidify", help="validate a dataset with the solid checker")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_solidify)

    p = sub.add_parser("eval", help="evaluate generated models against a reference set")
    p.add_argument("--config")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train", help="training dataset for the novelty histogram")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures -> exit 3
        from .training import TrainingDiverged

        kind = "training diverged" if isinstance(exc, TrainingDiverged) else type(exc).__name__
        print(f"runtime failure ({kind}): {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
