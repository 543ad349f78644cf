"""Experiment stages: phantom -> train -> reconstruct -> attack -> transfer -> report.

Output directory layout::

    <out>/config.json                 resolved config + hash
    <out>/dataset/                    manifest.json + {index}.tnsr
    <out>/models/<name>/              model.json + param_XXX.tnsr
    <out>/results/reconstruct_<model>.csv
    <out>/results/attack_<source>.csv white-box rows (target == source)
    <out>/results/transfer.csv        every (source, target, epsilon, item)
    <out>/report/summary.csv          medians per (family, source, target, epsilon)
    <out>/report/<family>_<metric>.svg
    <out>/run_record.json             hash, row counts, timings, artifact paths

CSV rows are sorted by stable keys and carry the config hash and seeds.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..attack import AttackConfig, TransferReport, read_rows_csv, transfer_evaluate, write_rows_csv
from ..diffusion import (DiffusionRecon, LearnedScore, NoiseSchedule, SamplerConfig,
                         ScoreTrainConfig, load_score, save_score, train_score)
from ..errors import DependencyError, EmptyInputError, MriInstabilityError
from ..metrics import data_range_of, psnr, ssim
from ..mri_forward import MaskSpec, NoiseModel, forward
from ..phantom_data import build_dataset, load_dataset, save_dataset
from ..recon import (CGRecon, DenoiserNet, DenoiserRecon, TrainConfig, UnrolledConfig, UnrolledRecon,
                     ZeroFilledRecon, load_reconstructor, save_reconstructor, train_supervised)
from ..tensor_core import RngStream
from . import svg
from .config import ExperimentConfig, dataset_config

RECON_FIELDS = ("model", "acceleration", "item", "ssim", "psnr", "mae", "seed", "config_hash")
SUMMARY_FIELDS = ("family", "source", "target", "epsilon", "n", "median_dssim_adv",
                  "median_dssim_rand", "median_dpsnr_adv", "median_dpsnr_rand",
                  "mean_ssim_clean", "n_scales", "config_hash")
LEARNED = ("denoiser", "unrolled", "diffusion")


@dataclass
class RunRecord:
    config_hash: str
    rows: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)


class Workspace:
    def __init__(self, cfg: ExperimentConfig, out=None):
        self.cfg = cfg
        self.root = Path(out if out is not None else cfg.output_dir)

    dataset = property(lambda self: self.root / "dataset")
    models = property(lambda self: self.root / "models")
    results = property(lambda self: self.root / "results")
    report = property(lambda self: self.root / "report")

    def model_dir(self, name):
        return self.models / name

    def write_config(self):
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "config.json"
        path.write_text(json.dumps({"config_hash": self.cfg.hash, "config": self.cfg.to_dict()},
                                   indent=2, sort_keys=True))
        return path


def enabled_models(cfg: ExperimentConfig):
    m = cfg.models
    return {"denoiser": m.denoiser.enabled, "unrolled": m.unrolled.enabled,
            "diffusion": m.diffusion.enabled, "zero_filled": True, "cg": True}


# ------------------------------------------------------------------ stages

def stage_phantom(ws: Workspace):
    dcfg = dataset_config(ws.cfg)
    train, test = build_dataset(dcfg)
    save_dataset(ws.dataset, train, test, dcfg)
    return [str(ws.dataset / "manifest.json")]


def _load_data(ws: Workspace):
    if not (ws.dataset / "manifest.json").exists():
        raise DependencyError(f"no dataset at {ws.dataset}; run the `phantom` subcommand first")
    return load_dataset(ws.dataset)


def stage_train(ws: Workspace, only=None):
    cfg = ws.cfg
    train, _ = _load_data(ws)
    mask_spec = MaskSpec(cfg.mask.acceleration, cfg.mask.center_fraction)
    written = []
    m = cfg.models
    todo = [n for n in LEARNED if enabled_models(cfg)[n] and (only is None or n in only)]
    for name in todo:
        if name == "denoiser":
            t = m.denoiser.train
            net = DenoiserNet(hidden=m.denoiser.hidden, depth=m.denoiser.depth,
                              seed=cfg.seed_for(m.denoiser.init_seed))
            model = train_supervised(net, train, mask_spec,
                                     TrainConfig(t.lambda_fid, t.lr, t.batch_size, t.epochs,
                                                 cfg.seed_for(t.seed), cfg.mask.noise_sigma))
            save_reconstructor(model, ws.model_dir(name), {"config_hash": cfg.hash})
        elif name == "unrolled":
            u = m.unrolled
            ucfg = UnrolledConfig(u.n_iters, u.step_size, u.shared_weights)
            model = UnrolledRecon.create(ucfg, seed=cfg.seed_for(u.init_seed), hidden=u.hidden,
                                         depth=u.depth)
            t = u.train
            model = train_supervised(model, train, mask_spec,
                                     TrainConfig(t.lambda_fid, t.lr, t.batch_size, t.epochs,
                                                 cfg.seed_for(t.seed), cfg.mask.noise_sigma))
            save_reconstructor(model, ws.model_dir(name), {"config_hash": cfg.hash})
        else:
            d = m.diffusion
            net = DenoiserNet(in_channels=2, hidden=d.hidden, depth=d.depth, residual=False,
                              seed=cfg.seed_for(d.init_seed))
            t = d.train
            score = train_score(LearnedScore(net), train, _schedule(cfg),
                                ScoreTrainConfig(t.lr, t.batch_size, t.epochs, cfg.seed_for(t.seed)))
            save_score(score, ws.model_dir(name), {"config_hash": cfg.hash})
        written.append(str(ws.model_dir(name) / "model.json"))
    return written


def _schedule(cfg):
    d = cfg.models.diffusion
    return NoiseSchedule(d.sigma_min, d.sigma_max, d.n_scales)


def _sampler_cfg(cfg):
    d = cfg.models.diffusion
    return SamplerConfig(d.snr_eta, d.dc_lambda, d.corrector_steps, cfg.seed_for(d.sampler_seed),
                         d.noisy_measurement)


def load_model(ws: Workspace, name: str):
    cfg = ws.cfg
    if name == "zero_filled":
        return ZeroFilledRecon()
    if name == "cg":
        return CGRecon(cfg.reconstruct.cg_l2_reg, cfg.reconstruct.cg_iters)
    if not enabled_models(cfg).get(name, False):
        raise DependencyError(f"model {name!r} is disabled in the config")
    d = ws.model_dir(name)
    if not (d / "model.json").exists():
        raise DependencyError(f"model {name!r} has no checkpoint at {d}; run the `train` subcommand first")
    if name == "diffusion":
        return DiffusionRecon(load_score(d), _schedule(cfg), _sampler_cfg(cfg), name="diffusion")
    model = load_reconstructor(d)
    model.name = name
    return model


def test_items(ws: Workspace, acceleration=None, max_items=None):
    """``(ground_truth, Measurement)`` pairs; masks and noise are seeded per item."""
    cfg = ws.cfg
    _, test = _load_data(ws)
    acc = cfg.mask.acceleration if acceleration is None else acceleration
    spec = MaskSpec(acc, cfg.mask.center_fraction)
    base = RngStream(cfg.seed_for(cfg.mask.seed))
    items = []
    for i, ph in enumerate(test.items[:max_items] if max_items else test.items):
        rng = base.spawn(i)
        mask = spec.sample(ph.size, rng)
        items.append((ph.image, forward(ph.image, mask, NoiseModel(cfg.mask.noise_sigma), rng)))
    return items


def stage_reconstruct(ws: Workspace):
    cfg = ws.cfg
    ws.results.mkdir(parents=True, exist_ok=True)
    names = [n for n in cfg.reconstruct.models if enabled_models(cfg).get(n, False)]
    models = {n: load_model(ws, n) for n in names}
    rows = {n: [] for n in names}
    for acc in cfg.reconstruct.accelerations:
        items = test_items(ws, acc)
        if not items:
            continue
        ksp = np.stack([m.ksp for _, m in items])
        masks = np.stack([m.mask.matrix for _, m in items])
        for name, model in models.items():
            out = model(ksp, masks)
            seed = model.scfg.seed if hasattr(model, "scfg") else cfg.seed_for(cfg.mask.seed)
            for i, (gt, _) in enumerate(items):
                L = data_range_of(gt)
                rows[name].append({"model": name, "acceleration": float(acc), "item": i,
                                   "ssim": ssim(gt, out[i], L), "psnr": psnr(gt, out[i], L),
                                   "mae": float(np.mean(np.abs(gt - out[i]))), "seed": seed,
                                   "config_hash": cfg.hash})
    paths = []
    for name, rr in rows.items():
        rr.sort(key=lambda r: (r["acceleration"], r["item"]))
        p = ws.results / f"reconstruct_{name}.csv"
        write_rows_csv(p, rr, RECON_FIELDS)
        paths.append(str(p))
    return paths


def _attack_cfg(cfg, eps):
    a = cfg.attack
    return AttackConfig(float(eps), a.iters, a.lr, a.init_scale_c, cfg.seed_for(a.seed))


def _map(fn, units, jobs):
    if jobs <= 1 or len(units) <= 1:
        return [fn(u) for u in units]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, units))


def stage_attack(ws: Workspace, jobs=1):
    cfg = ws.cfg
    ws.results.mkdir(parents=True, exist_ok=True)
    items = test_items(ws, max_items=cfg.transfer.max_items)
    sources = [s for s in cfg.attack.sources if enabled_models(cfg).get(s, False)]
    paths = []
    for src in sources:
        model = load_model(ws, src)

        def unit(eps, model=model):
            return transfer_evaluate(model, [model], items, _attack_cfg(cfg, eps)).rows

        rows = [r for chunk in _map(unit, list(cfg.attack.epsilons), jobs) for r in chunk]
        report = TransferReport(rows)
        p = ws.results / f"attack_{src}.csv"
        report.to_csv(p, cfg.hash)
        paths.append(str(p))
    return paths


def stage_transfer(ws: Workspace, jobs=1):
    cfg = ws.cfg
    ws.results.mkdir(parents=True, exist_ok=True)
    en = enabled_models(cfg)
    items = test_items(ws, max_items=cfg.transfer.max_items)
    sources = [s for s in cfg.transfer.sources if en.get(s, False)]
    target_names = [t for t in cfg.transfer.targets if en.get(t, False)]
    targets = {t: load_model(ws, t) for t in target_names}
    units = [(s, e) for s in sources for e in cfg.transfer.epsilons]

    def unit(u):
        s, eps = u
        src = targets[s] if s in targets else load_model(ws, s)
        tlist = [targets[t] for t in target_names]
        seeds = cfg.transfer.sampler_seeds
        return transfer_evaluate(src, tlist, items, _attack_cfg(cfg, eps),
                                 sampler_seeds=None if seeds is None else list(seeds)).rows

    rows = [r for chunk in _map(unit, units, jobs) for r in chunk]
    p = ws.results / "transfer.csv"
    TransferReport(rows).to_csv(p, cfg.hash)
    return [str(p)]


def _summaries(rows, family, config_hash, n_scales):
    groups = {}
    for r in rows:
        groups.setdefault((r["source"], r["target"], r["epsilon"]), []).append(r)
    out = []
    for (s, t, e), rr in sorted(groups.items()):
        ds_adv = [r["ssim_clean"] - r["ssim_adv"] for r in rr]
        ds_rand = [r["ssim_clean"] - r["ssim_rand"] for r in rr]
        dp_adv = [r["psnr_clean"] - r["psnr_adv"] for r in rr]
        dp_rand = [r["psnr_clean"] - r["psnr_rand"] for r in rr]
        out.append({"family": family, "source": s, "target": t, "epsilon": e, "n": len(rr),
                    "median_dssim_adv": float(np.median(ds_adv)),
                    "median_dssim_rand": float(np.median(ds_rand)),
                    "median_dpsnr_adv": float(np.median(dp_adv)),
                    "median_dpsnr_rand": float(np.median(dp_rand)),
                    "mean_ssim_clean": float(np.mean([r["ssim_clean"] for r in rr])),
                    "n_scales": n_scales, "config_hash": config_hash})
    return out


def stage_report(ws: Workspace):
    cfg = ws.cfg
    families = {}
    for p in sorted(ws.results.glob("attack_*.csv")) if ws.results.exists() else []:
        families.setdefault("whitebox", []).extend(read_rows_csv(p))
    tp = ws.results / "transfer.csv"
    if tp.exists():
        families.setdefault("transfer", []).extend(read_rows_csv(tp))
    if not any(families.values()):
        raise EmptyInputError(
            f"no attack/transfer rows under {ws.results}; is the test split empty or were "
            "the `attack`/`transfer` subcommands skipped?")
    summary = []
    plots = {}
    for fam, rows in families.items():
        if not rows:
            continue
        sm = _summaries(rows, fam, cfg.hash, cfg.models.diffusion.n_scales)
        summary.extend(sm)
        for metric, col in (("delta_ssim", "median_dssim_adv"), ("delta_psnr", "median_dpsnr_adv")):
            series = {}
            for r in sm:
                xs, ys = series.setdefault(f"{r['source']} -> {r['target']}", ([], []))
                xs.append(r["epsilon"])
                ys.append(r[col])
            label = "median dSSIM" if metric == "delta_ssim" else "median dpSNR (dB)"
            plots[f"{fam}_{metric}.svg"] = svg.line_plot(
                series, f"{fam}: {label} vs perturbation budget", "epsilon (relative l2 budget)", label)
    ws.report.mkdir(parents=True, exist_ok=True)
    paths = [str(ws.report / "summary.csv")]
    write_rows_csv(ws.report / "summary.csv", summary, SUMMARY_FIELDS)
    for name, doc in sorted(plots.items()):
        (ws.report / name).write_text(doc)
        paths.append(str(ws.report / name))
    return paths


def end_to_end_pipeline(cfg: ExperimentConfig, out=None, jobs=1) -> RunRecord:
    """Run every stage in order; returns a :class:`RunRecord` (also written to disk)."""
    ws = Workspace(cfg, out)
    record = RunRecord(cfg.hash)
    record.artifacts.append(str(ws.write_config()))
    stages = [("phantom", lambda: stage_phantom(ws)),
              ("train", lambda: stage_train(ws)),
              ("reconstruct", lambda: stage_reconstruct(ws)),
              ("attack", lambda: stage_attack(ws, jobs)),
              ("transfer", lambda: stage_transfer(ws, jobs)),
              ("report", lambda: stage_report(ws))]
    for name, fn in stages:
        t0 = time.perf_counter()
        try:
            paths = fn()
        except MriInstabilityError as exc:
            raise type(exc)(f"stage {name}: {exc}") from exc
        record.timings[name] = time.perf_counter() - t0
        record.artifacts.extend(paths)
    for p in record.artifacts:
        if p.endswith(".csv"):
            with open(p) as fh:
                record.rows[Path(p).name] = sum(1 for _ in fh) - 1
    (ws.root / "run_record.json").write_text(json.dumps(asdict(record), indent=2, sort_keys=True))
    return record
