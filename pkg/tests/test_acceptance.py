"""Acceptance suite: ten criteria at their stated tolerances.

Run with ``pytest -v tests/test_acceptance.py``; the terminal summary prints
one PASS/FAIL line per criterion.  Criteria 7 to 9 train the desk-scale
denoiser and score model once per session (a few minutes on one CPU).
"""
import time

import numpy as np
import pytest

from gradcheck import max_rel_error
from mri_instability import autodiff as ad
from mri_instability.attack import DEFAULT_EPSILONS, init_delta
from mri_instability.diffusion import (AnalyticGMMScore, CountingScore, NoiseSchedule, SamplerConfig,
                                       data_consistency_kspace, pc_sample)
from mri_instability.harness import pipeline
from mri_instability.harness.config import config_from_dict
from mri_instability.metrics import lag1_autocorrelation
from mri_instability.mri_forward import forward, make_cartesian_mask
from mri_instability.phantom_data import shepp_logan
from mri_instability.recon import (DenoiserNet, DenoiserRecon, UnrolledConfig, UnrolledRecon,
                                   ZeroFilledRecon)
from mri_instability.tensor_core import RngStream, fft2, ifft2, l2_norm
from test_diffusion import dense_posterior_mean


def test_criterion_01_fft_and_operator_suite():
    t0 = time.perf_counter()
    g = np.random.default_rng(0)
    for p in range(9):
        n = 2**p
        x = g.standard_normal((n, n)) + 1j * g.standard_normal((n, n))
        assert np.max(np.abs(ifft2(fft2(x)) - x)) < 1e-10
        assert abs(l2_norm(fft2(x)) - l2_norm(x)) < 1e-9 * l2_norm(x)
    for n in (16, 64, 256):
        mask = make_cartesian_mask(n, 4, 0.08, RngStream(n)).matrix
        x = g.standard_normal((n, n))
        w = g.standard_normal((n, n)) + 1j * g.standard_normal((n, n))
        lhs = np.real(np.vdot(w, mask * fft2(x)))
        rhs = np.vdot(x, ifft2(mask * w).real)
        assert abs(lhs - rhs) <= 1e-9 * abs(lhs)
    assert time.perf_counter() - t0 < 10


def _scrambled(net, seed):
    g = np.random.default_rng(seed)
    net.params = [p + 0.2 * g.standard_normal(p.shape) for p in net.params]
    return net


def test_criterion_02_autodiff_finite_differences():
    t0 = time.perf_counter()
    g = np.random.default_rng(1)

    def c(*shape):
        return g.standard_normal(shape) + 1j * g.standard_normal(shape)

    mask = make_cartesian_mask(16, 4, 0.125, RngStream(0)).matrix
    ops = [
        (lambda t, a, b: ad.add(a, b), [c(16, 16), c(16, 16)]),
        (lambda t, a, b: ad.sub(a, b), [c(16, 16), c(16, 16)]),
        (lambda t, a: ad.scalar_mul(0.3 + 2j, a), [c(16, 16)]),
        (lambda t, a, b: ad.elementwise_mul(a, b), [c(16, 16), c(16, 16)]),
        (lambda t, a: ad.mask_mul(a, mask), [c(16, 16)]),
        (lambda t, a: ad.fft2_lin(a), [c(16, 16)]),
        (lambda t, a: ad.ifft2_lin(a), [c(16, 16)]),
        (lambda t, a: ad.real_part(a), [c(16, 16)]),
        (lambda t, a: ad.reshape(a, (16, 16, 1)), [g.standard_normal((16, 16))]),
        (lambda t, a, b: ad.concat([a, b]), [g.standard_normal((16, 16, 1))] * 2),
        (lambda t, a: ad.leaky_relu(a), [g.standard_normal((16, 16))]),
        (lambda t, x, w, b: ad.conv2d(x, w, b),
         [g.standard_normal((1, 16, 16, 1)), g.standard_normal((3, 3, 1, 2)), g.standard_normal(2)]),
        (lambda t, a: ad.sum_all(a), [c(16, 16)]),
        (lambda t, a: ad.l2_squared(a), [c(16, 16)]),
        (lambda t, a: ad.batch_l2_squared(a), [c(2, 16, 16)]),
        (lambda t, a, b: ad.mse(a, b), [g.standard_normal((16, 16))] * 2),
    ]
    for build, values in ops:
        assert max_rel_error(build, [np.array(v, copy=True) for v in values], g) < 1e-4
    recons = [ZeroFilledRecon(),
              DenoiserRecon(_scrambled(DenoiserNet(hidden=6, depth=3, seed=1), 1)),
              UnrolledRecon([_scrambled(DenoiserNet(hidden=4, depth=2, seed=2), 2)], UnrolledConfig(3, 0.7))]
    x = shepp_logan(16).image
    k0 = forward(x, make_cartesian_mask(16, 4, 0.125, RngStream(0))).ksp + 0.05 * c(16, 16)
    for model in recons:
        def build(tape, k, model=model):
            return model.graph(tape, k, mask)
        assert max_rel_error(build, [k0[None].copy()], g) < 1e-3
    assert time.perf_counter() - t0 < 60


def test_criterion_03_data_consistency_exact():
    g = np.random.default_rng(2)
    mask = make_cartesian_mask(64, 4, 0.08, RngStream(3)).matrix
    k = g.standard_normal((64, 64)) + 1j * g.standard_normal((64, 64))
    y_t = mask * (g.standard_normal((64, 64)) + 1j * g.standard_normal((64, 64)))
    out = data_consistency_kspace(k, y_t, mask, 1.0)
    on = mask != 0
    assert np.max(np.abs(out[on] - y_t[on])) <= 1e-12
    assert np.array_equal(out[~on], k[~on])
    assert np.array_equal(data_consistency_kspace(out, y_t, mask, 1.0), out)


def test_criterion_04_sampler_posterior_mean_oracle():
    t0 = time.perf_counter()
    n, tau = 16, 0.1
    mu = shepp_logan(n).image
    x_true = mu + tau * RngStream(3).normal((n, n))
    mask = make_cartesian_mask(n, 4, 0.125, RngStream(5))
    meas = forward(x_true, mask)
    post = dense_posterior_mean(mu, tau, mask.matrix, meas.ksp)
    samples = pc_sample(AnalyticGMMScore(mu, variance=tau**2), np.broadcast_to(meas.ksp, (32, n, n)),
                        mask.matrix, NoiseSchedule(), SamplerConfig(), seeds=list(range(32)))
    dr = x_true.max() - x_true.min()
    dev = np.abs(samples.mean(0) - post).mean() / dr
    print(f"posterior-mean deviation {dev:.4f} of dynamic range")
    assert dev < 0.05
    assert time.perf_counter() - t0 < 300


def test_criterion_05_two_thousand_score_evaluations():
    counter = CountingScore(AnalyticGMMScore(np.zeros((16, 16)), variance=0.05))
    mask = make_cartesian_mask(16, 4, 0.125, RngStream(0))
    pc_sample(counter, forward(shepp_logan(16).image, mask).ksp, mask.matrix)
    assert counter.calls == 2000


@pytest.fixture(scope="module")
def whitebox(desk):
    return desk.whitebox()


def test_criterion_06_attack_budget(whitebox, desk):
    sweep = whitebox
    for eps, (perts, _, _) in sweep.items():
        for p, (_, m) in zip(perts, desk.items):
            assert l2_norm(p.delta) <= eps * l2_norm(m.ksp) + 1e-9 * l2_norm(m.ksp)
    for p, (_, m) in zip(sweep[desk.cfg.attack.epsilons[0]][0], desk.items):
        d0 = init_delta(m.ksp, 1e4, RngStream(p.seed))
        assert abs(l2_norm(d0) / l2_norm(m.ksp) - 1e-4) < 1e-12


def test_criterion_07_whitebox_instability(whitebox, desk):
    sweep = whitebox
    assert len(desk.items) == 20
    assert tuple(sweep) == DEFAULT_EPSILONS
    medians = []
    for eps, (_, rep, _) in sweep.items():
        adv = np.median(rep.delta_ssim("denoiser", "adv"))
        rnd = np.median(rep.delta_ssim("denoiser", "rand"))
        medians.append(adv)
        print(f"eps={eps}: median dSSIM adv={adv:.5f} rand={rnd:.5f}")
        if eps == 0.05:
            assert adv >= 3 * rnd
    assert all(b >= a for a, b in zip(medians, medians[1:]))
    runtime = desk.timings["train_denoiser"] + sum(v[2] for v in sweep.values())
    print(f"runtime {runtime:.0f} s")
    assert runtime < 15 * 60


def test_criterion_08_blackbox_transfer(desk):
    assert desk.cfg.models.diffusion.n_scales == 200
    rep, seconds = desk.transfer(0.01)
    adv, rnd = rep.delta_ssim("diffusion", "adv"), rep.delta_ssim("diffusion", "rand")
    seeds = {r["seed"] for r in rep.rows if r["target"] == "diffusion"}
    assert seeds == {desk.cfg.seed_for(desk.cfg.models.diffusion.sampler_seed)}
    frac = float(np.mean(adv > rnd))
    print(f"adv > rand on {frac:.0%} of items; medians {np.median(adv):.5f} vs {np.median(rnd):.5f}")
    assert np.median(adv) > np.median(rnd)
    assert frac >= 0.7
    runtime = desk.timings["train_diffusion"] + seconds
    print(f"runtime {runtime:.0f} s")
    assert runtime < 30 * 60


def test_criterion_09_artifact_character(desk):
    rep, _ = desk.transfer(0.05)
    seed = desk.cfg.seed_for(desk.cfg.models.diffusion.sampler_seed)
    ac_diff, ac_sup = [], []
    for b in range(len(desk.items)):
        clean, adv, _ = rep.recons[("diffusion", b, seed)]
        ac_diff.append(lag1_autocorrelation(adv - clean))
        clean, adv, _ = rep.recons[("denoiser", b, None)]
        ac_sup.append(lag1_autocorrelation(adv - clean))
    print(f"median lag-1 autocorrelation: diffusion {np.median(ac_diff):.3f}, "
          f"supervised {np.median(ac_sup):.3f}")
    assert np.median(ac_diff) < np.median(ac_sup)


def test_criterion_10_reproducibility(tmp_path):
    cfg = config_from_dict({
        "dataset": {"n_items": 10, "size": 16},
        "models": {"denoiser": {"hidden": 4, "depth": 2, "train": {"epochs": 2, "batch_size": 4}},
                   "unrolled": {"hidden": 4, "depth": 2, "n_iters": 2, "train": {"epochs": 1}},
                   "diffusion": {"hidden": 4, "depth": 2, "n_scales": 10, "train": {"epochs": 1}}},
        "attack": {"epsilons": [0.01, 0.05], "iters": 5}})
    pipeline.end_to_end_pipeline(cfg, tmp_path / "a")
    pipeline.end_to_end_pipeline(cfg, tmp_path / "b", jobs=2)
    a = {p.relative_to(tmp_path / "a"): p.read_bytes() for p in (tmp_path / "a").rglob("*.csv")}
    b = {p.relative_to(tmp_path / "b"): p.read_bytes() for p in (tmp_path / "b").rglob("*.csv")}
    assert a and a == b
