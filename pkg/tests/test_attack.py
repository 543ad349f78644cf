import numpy as np
import pytest

from mri_instability.attack import (CSV_FIELDS, AttackConfig, TransferReport, init_delta,
                                    project_delta, random_perturb, read_rows_csv, transfer_evaluate,
                                    worst_case_perturb)
from mri_instability.diffusion import AnalyticGMMScore, DiffusionRecon, NoiseSchedule, SamplerConfig
from mri_instability.errors import ConfigError
from mri_instability.mri_forward import forward, make_cartesian_mask
from mri_instability.phantom_data import random_ellipses
from mri_instability.recon import CGRecon, DenoiserNet, DenoiserRecon, ZeroFilledRecon
from mri_instability.tensor_core import RngStream, l2_norm


def ksp16(seed=0):
    x = random_ellipses(16, seed=seed).image
    return x, forward(x, make_cartesian_mask(16, 4, 0.125, RngStream(seed)))


def small_model(seed=0):
    net = DenoiserNet(hidden=4, depth=2, seed=seed)
    g = np.random.default_rng(seed)
    net.params = [p + 0.3 * g.standard_normal(p.shape) for p in net.params]
    return DenoiserRecon(net, name="small")


def test_init_delta_relative_norm():
    _, meas = ksp16()
    d = init_delta(meas.ksp, 1e4, RngStream(0))
    assert abs(l2_norm(d) / l2_norm(meas.ksp) - 1e-4) < 1e-12


def test_init_delta_seeds_change_direction_not_norm():
    _, meas = ksp16()
    a, b = init_delta(meas.ksp, 1e4, RngStream(1)), init_delta(meas.ksp, 1e4, RngStream(2))
    assert not np.allclose(a, b)
    assert l2_norm(a) == pytest.approx(l2_norm(b), rel=1e-12)


def test_init_delta_vanishes_as_c_grows():
    _, meas = ksp16()
    norms = [l2_norm(init_delta(meas.ksp, c, RngStream(0))) for c in (1e2, 1e6, 1e12)]
    assert norms[0] > norms[1] > norms[2] and norms[2] < 1e-9


def test_init_delta_rejects_zero_kspace():
    with pytest.raises(ConfigError):
        init_delta(np.zeros((4, 4)), 1e4, RngStream(0))


def test_project_delta_rescales_and_preserves_direction(rng):
    ksp = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    d = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    eps = 0.05
    big = d * (2 * eps * l2_norm(ksp) / l2_norm(d))
    out = project_delta(big, ksp, eps)
    assert l2_norm(out) == pytest.approx(eps * l2_norm(ksp), rel=1e-12)
    ratio = out / big
    assert np.allclose(ratio, ratio.flat[0]) and abs(ratio.flat[0].imag) < 1e-15
    small = d * (0.5 * eps * l2_norm(ksp) / l2_norm(d))
    assert np.array_equal(project_delta(small, ksp, eps), small)


def test_project_delta_per_item(rng):
    ksp = rng.standard_normal((3, 8, 8)) * np.array([1.0, 10.0, 100.0])[:, None, None]
    d = rng.standard_normal((3, 8, 8)) * 50
    out = project_delta(d, ksp, 0.1)
    rel = l2_norm(out, axis=(-1, -2)) / l2_norm(ksp, axis=(-1, -2))
    assert np.all(rel <= 0.1 + 1e-12)


def test_random_perturb_norm_and_zero():
    _, meas = ksp16()
    d = random_perturb(meas.ksp, 0.02, RngStream(3))
    assert abs(l2_norm(d) / l2_norm(meas.ksp) - 0.02) < 1e-12
    assert np.all(random_perturb(meas.ksp, 0.0, RngStream(3)) == 0)


def test_random_directions_nearly_orthogonal():
    _, meas = ksp16()
    dots = []
    for s in range(50):
        a = random_perturb(meas.ksp, 1.0, RngStream(2 * s))
        b = random_perturb(meas.ksp, 1.0, RngStream(2 * s + 1))
        dots.append(np.real(np.vdot(a, b)) / (l2_norm(a) * l2_norm(b)))
    assert abs(np.mean(dots)) < 0.02


def test_budget_respected_and_history_recorded():
    items = [ksp16(s)[1] for s in range(3)]
    res = worst_case_perturb(small_model(), items, AttackConfig(0.02, iters=15, lr=0.5, seed=4))
    for r, m in zip(res, items):
        assert l2_norm(r.delta) <= 0.02 * l2_norm(m.ksp) * (1 + 1e-9)
        assert len(r.loss_history) == 15
    assert [r.seed for r in res] == [4, 5, 6]


def test_zero_iterations_returns_init():
    _, meas = ksp16()
    r = worst_case_perturb(small_model(), meas, AttackConfig(0.01, iters=0, seed=9))
    assert np.array_equal(r.delta, init_delta(meas.ksp, 1e4, RngStream(9)))
    assert r.final_rel_norm == pytest.approx(1e-4, abs=1e-12)


def test_attack_deterministic():
    _, meas = ksp16()
    acfg = AttackConfig(0.01, iters=5, seed=2)
    a, b = worst_case_perturb(small_model(), meas, acfg), worst_case_perturb(small_model(), meas, acfg)
    assert np.array_equal(a.delta, b.delta) and a.loss_history == b.loss_history


def test_batched_attack_equals_individual_attacks():
    items = [ksp16(s)[1] for s in range(2)]
    acfg = AttackConfig(0.02, iters=5, seed=1)
    joint = worst_case_perturb(small_model(), items, acfg)
    solo = worst_case_perturb(small_model(), items[1], acfg, seeds=[2])
    assert np.allclose(joint[1].delta, solo.delta, rtol=0, atol=1e-12 * l2_norm(solo.delta))


def test_attack_increases_distance_over_random():
    items = [ksp16(s)[1] for s in range(4)]
    model = small_model(1)
    res = worst_case_perturb(model, items, AttackConfig(0.05, iters=40, seed=0))
    for r, m in zip(res, items):
        x0 = model(m.ksp, m.mask)
        rnd = random_perturb(m.ksp, r.final_rel_norm, RngStream(99))
        d_rand = l2_norm(model(m.ksp + rnd, m.mask) - x0)
        assert r.final_distance > d_rand
        assert -r.loss_history[-1] >= -r.loss_history[0]


def test_only_masked_part_of_delta_matters():
    _, meas = ksp16()
    model = small_model()
    d = random_perturb(meas.ksp, 0.05, RngStream(1))
    m = meas.mask.matrix
    assert np.array_equal(model((meas.ksp + d) * m, m), model((meas.ksp + d * m) * m, m))
    assert np.array_equal(model(meas.ksp + d, m), model(meas.ksp + d * m, m))


def test_non_differentiable_target_rejected():
    _, meas = ksp16()
    with pytest.raises(ConfigError):
        worst_case_perturb(CGRecon(), meas)


def test_transfer_epsilon_zero_gives_zero_deltas():
    items = [ksp16(s) for s in range(2)]
    mu = random_ellipses(16, seed=0).image
    diff = DiffusionRecon(AnalyticGMMScore(mu, variance=0.01), NoiseSchedule(n_scales=10),
                          SamplerConfig(seed=3))
    rep = transfer_evaluate(small_model(), [ZeroFilledRecon(), diff], items,
                            AttackConfig(0.0, iters=3, seed=0))
    assert len(rep.rows) == 4
    for t in ("zero_filled", "diffusion"):
        assert np.all(rep.delta_ssim(t) == 0) and np.all(rep.delta_ssim(t, "rand") == 0)
        assert np.all(rep.delta_psnr(t) == 0)
    assert all(r["delta_rel_norm"] == 0 for r in rep.rows)


def test_transfer_report_rows_and_csv(tmp_path):
    items = [ksp16(s) for s in range(3)]
    src = small_model()
    mu = random_ellipses(16, seed=0).image
    diff = DiffusionRecon(AnalyticGMMScore(mu, variance=0.01), NoiseSchedule(n_scales=10),
                          SamplerConfig(seed=3))
    rep = transfer_evaluate(src, [src, diff], items, AttackConfig(0.02, iters=3, seed=0),
                            sampler_seeds=[3, 4], keep_recons=True)
    assert len(rep.rows) == 3 + 6
    assert rep.targets() == ["diffusion", "small"]
    for b in range(3):
        clean, _, _ = rep.recons[("diffusion", b, 3)]
        assert np.array_equal(clean, diff(items[b][1].ksp, items[b][1].mask.matrix, seeds=[3]))
    rep.to_csv(tmp_path / "t.csv", "abc")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",") == list(CSV_FIELDS)
    back = read_rows_csv(tmp_path / "t.csv")
    assert [(r["target"], r["item"], r["seed"]) for r in back] == \
        [(r["target"], r["item"], r["seed"]) for r in rep.sorted_rows()]
    assert all(r["config_hash"] == "abc" for r in back)
    assert back[0]["ssim_adv"] == rep.sorted_rows()[0]["ssim_adv"]
