"""Worst-case k-space perturbations and the white-/black-box transfer protocol.

The attack maximises ``||f(ksp * M) - f((ksp + delta) * M)||^2`` over complex
``delta`` with ``||delta|| <= epsilon ||ksp||``: Adam ascent on the real and
imaginary parts, each step followed by radial projection onto the ball.
Batches of measurements are attacked jointly; since items do not interact and
Adam is elementwise, this is the same as attacking them one at a time.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import AttackDivergenceError, ConfigError, MriInstabilityError
from .metrics import data_range_of, psnr, ssim
from .mri_forward import Measurement
from .tensor_core import RngStream, l2_norm


@dataclass(frozen=True)
class AttackConfig:
    """``lr=None`` selects ``1e-3 * ||ksp|| / sqrt(m)`` per item (m = measured entries)."""

    epsilon: float = 0.01
    iters: int = 200
    lr: float | None = None
    init_scale_c: float = 1e4
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.iters < 0:
            raise ConfigError("iters must be >= 0")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.init_scale_c <= 0:
            raise ConfigError("init_scale_c must be > 0")


DEFAULT_EPSILONS = (0.005, 0.01, 0.02, 0.05, 0.1)


@dataclass
class PerturbationResult:
    delta: np.ndarray
    loss_history: list
    final_rel_norm: float
    final_distance: float = float("nan")
    seed: int = 0


def _rel_norms(delta, ksp):
    return l2_norm(delta, axis=(-1, -2)) / l2_norm(ksp, axis=(-1, -2))


def init_delta(ksp, c, rng: RngStream) -> np.ndarray:
    """Complex Gaussian draw rescaled to ``||delta|| = ||ksp|| / c``."""
    ksp = np.asarray(ksp)
    norm = l2_norm(ksp)
    if norm == 0:
        raise ConfigError("cannot initialise a perturbation for an all-zero k-space")
    d = rng.normal(ksp.shape) + 1j * rng.normal(ksp.shape)
    return d * (norm / (l2_norm(d) * c))


def project_delta(delta, ksp, epsilon) -> np.ndarray:
    """Radial projection onto ``||delta|| <= epsilon ||ksp||`` (per item for batches)."""
    delta = np.asarray(delta)
    ksp = np.asarray(ksp)
    dn = l2_norm(delta, axis=(-1, -2))
    budget = epsilon * l2_norm(ksp, axis=(-1, -2))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(dn > budget, budget / dn, 1.0)
    return delta * np.asarray(scale)[..., None, None]


def random_perturb(ksp, epsilon, rng: RngStream) -> np.ndarray:
    """Complex Gaussian direction with norm exactly ``epsilon ||ksp||``."""
    ksp = np.asarray(ksp)
    if epsilon == 0:
        return np.zeros(ksp.shape, dtype=np.complex128)
    d = rng.normal(ksp.shape) + 1j * rng.normal(ksp.shape)
    return d * (epsilon * l2_norm(ksp) / l2_norm(d))


def _default_lr(ksp, masks):
    m = np.broadcast_to(masks != 0, ksp.shape).sum(axis=(-1, -2))
    return 1e-3 * l2_norm(ksp, axis=(-1, -2)) / np.sqrt(m)


def worst_case_perturb(recon, meas, acfg: AttackConfig = AttackConfig(), seeds=None):
    """Craft per-sample worst-case perturbations against a differentiable reconstructor.

    ``meas`` is a :class:`Measurement` or a list of them.  Returns one
    :class:`PerturbationResult` (or a list).  ``seeds`` defaults to
    ``acfg.seed + index``.
    """
    if not getattr(recon, "differentiable", False):
        raise ConfigError(f"{getattr(recon, 'name', recon)!r} is not differentiable")
    single = isinstance(meas, Measurement)
    items = [meas] if single else list(meas)
    if seeds is None:
        seeds = [acfg.seed + i for i in range(len(items))]
    ksp = np.stack([m.ksp for m in items])
    masks = np.stack([m.mask.matrix for m in items])
    delta = np.stack([init_delta(k, acfg.init_scale_c, RngStream(s)) for k, s in zip(ksp, seeds)])
    lr = acfg.lr if acfg.lr is not None else _default_lr(ksp, masks)[:, None, None]
    x_ref = recon.graph(ad.Tape(), ksp, masks).value
    state = None
    histories = [[] for _ in items]
    for it in range(acfg.iters):
        tape = ad.Tape()
        dr = tape.leaf(delta.real.copy(), requires_grad=True)
        di = tape.leaf(delta.imag.copy(), requires_grad=True)
        k = ad.add(tape.leaf(ksp), ad.add(dr, ad.scalar_mul(1j, di)))
        x_hat = recon.graph(tape, k, masks)
        per_item = ad.batch_l2_squared(ad.sub(x_hat, x_ref))
        loss = ad.scalar_mul(-1.0, ad.sum_all(per_item))
        if not np.isfinite(loss.value):
            raise AttackDivergenceError(f"attack loss became non-finite at iteration {it}", it)
        for b, v in enumerate(per_item.value):
            histories[b].append(-float(v))
        ad.backward(tape, loss)
        if state is None:
            state = ad.AdamState.zeros_like([dr.value, di.value])
        (nr, ni), state = ad.adam_update([dr.value, di.value], [dr.grad, di.grad], state, lr)
        delta = project_delta(nr + 1j * ni, ksp, acfg.epsilon)
    final = recon.graph(ad.Tape(), (ksp + delta), masks).value
    dist = l2_norm(final - x_ref, axis=(-1, -2))
    rel = _rel_norms(delta, ksp)
    results = [PerturbationResult(delta[b], histories[b], float(rel[b]), float(dist[b]), int(seeds[b]))
               for b in range(len(items))]
    return results[0] if single else results


# ---------------------------------------------------------------- transfer

CSV_FIELDS = ("source", "target", "epsilon", "item", "ssim_clean", "ssim_adv", "ssim_rand",
              "psnr_clean", "psnr_adv", "psnr_rand", "delta_rel_norm", "seed", "config_hash")


@dataclass
class TransferReport:
    rows: list = field(default_factory=list)
    recons: dict = field(default_factory=dict, repr=False)

    def targets(self):
        return sorted({r["target"] for r in self.rows})

    def column(self, target, name, epsilon=None):
        return np.array([r[name] for r in self.rows if r["target"] == target
                         and (epsilon is None or r["epsilon"] == epsilon)])

    def delta_ssim(self, target, kind="adv", epsilon=None):
        return self.column(target, "ssim_clean", epsilon) - self.column(target, f"ssim_{kind}", epsilon)

    def delta_psnr(self, target, kind="adv", epsilon=None):
        return self.column(target, "psnr_clean", epsilon) - self.column(target, f"psnr_{kind}", epsilon)

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (r["source"], r["target"], r["epsilon"], r["item"], r["seed"]))

    def to_csv(self, path, config_hash=""):
        write_rows_csv(path, [dict(r, config_hash=r.get("config_hash", config_hash))
                              for r in self.sorted_rows()])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_rows_csv(path, rows, fields=CSV_FIELDS):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: _fmt(r.get(k, "")) for k in fields})


def read_rows_csv(path):
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = dict(r)
            for k in ("epsilon", "ssim_clean", "ssim_adv", "ssim_rand", "psnr_clean", "psnr_adv",
                      "psnr_rand", "delta_rel_norm"):
                if k in row and row[k] != "":
                    row[k] = float(row[k])
            for k in ("item", "seed"):
                if k in row and row[k] != "":
                    row[k] = int(row[k])
            out.append(row)
    return out


def _run_target(target, ksp, masks, seeds):
    if hasattr(target, "scfg"):
        return target(ksp, masks, seeds=seeds)
    return target(ksp, masks)


def transfer_evaluate(source, targets, items, acfg: AttackConfig = AttackConfig(),
                      sampler_seeds=None, keep_recons=False, perturbations=None):
    """Craft perturbations on ``source`` and score every target on clean/adversarial/random input.

    ``items`` is a list of ``(ground_truth, Measurement)``.  Diffusion-type
    targets (anything with an ``scfg``) run with the same sampler seed for the
    clean, adversarial and random reconstruction of an item; ``sampler_seeds``
    (default ``[target.scfg.seed]``) adds one row per seed.
    ``perturbations`` may supply precomputed results from ``worst_case_perturb``.
    """
    gts = [np.asarray(g) for g, _ in items]
    meas = [m for _, m in items]
    n = len(items)
    if n == 0:
        return TransferReport()
    if perturbations is None:
        perturbations = worst_case_perturb(source, meas, acfg)
    deltas = np.stack([p.delta for p in perturbations])
    ksp = np.stack([m.ksp for m in meas])
    masks = np.stack([m.mask.matrix for m in meas])
    rand = np.stack([random_perturb(ksp[b], acfg.epsilon,
                                    RngStream(perturbations[b].seed).spawn(1)) for b in range(n)])
    report = TransferReport()
    triple_ksp = np.concatenate([ksp, ksp + deltas, ksp + rand])
    triple_masks = np.concatenate([masks, masks, masks])
    for target in targets:
        name = getattr(target, "name", type(target).__name__)
        if hasattr(target, "scfg"):
            seed_list = list(sampler_seeds) if sampler_seeds is not None else [target.scfg.seed]
        else:
            seed_list = [None]
        for s in seed_list:
            try:
                recon = _run_target(target, triple_ksp, triple_masks,
                                    None if s is None else [s] * (3 * n))
            except MriInstabilityError as exc:
                raise type(exc)(f"target {name!r}: {exc}") from exc
            for b in range(n):
                gt = gts[b]
                L = data_range_of(gt)
                clean, adv, rnd = recon[b], recon[n + b], recon[2 * n + b]
                report.rows.append({
                    "source": source.name, "target": name, "epsilon": float(acfg.epsilon),
                    "item": b,
                    "ssim_clean": ssim(gt, clean, L), "ssim_adv": ssim(gt, adv, L),
                    "ssim_rand": ssim(gt, rnd, L),
                    "psnr_clean": psnr(gt, clean, L), "psnr_adv": psnr(gt, adv, L),
                    "psnr_rand": psnr(gt, rnd, L),
                    "delta_rel_norm": perturbations[b].final_rel_norm,
                    "seed": int(perturbations[b].seed if s is None else s),
                })
                if keep_recons:
                    report.recons[(name, b, s)] = (clean, adv, rnd)
    return report
