import json
import re

import numpy as np
import pytest

from mri_instability.errors import ConfigError, DependencyError, EmptyInputError
from mri_instability.harness import cli, pipeline, svg
from mri_instability.harness.config import (ExperimentConfig, apply_overrides, config_from_dict,
                                            env_overrides, load_config)

TINY = {
    "dataset": {"n_items": 10, "size": 16},
    "models": {"denoiser": {"hidden": 4, "depth": 2, "train": {"epochs": 2, "batch_size": 4}},
               "unrolled": {"hidden": 4, "depth": 2, "n_iters": 2, "train": {"epochs": 1}},
               "diffusion": {"hidden": 4, "depth": 2, "n_scales": 10, "train": {"epochs": 1}}},
    "attack": {"epsilons": [0.01, 0.05], "iters": 5},
    "transfer": {"epsilons": [0.05]},
}


def tiny(**overrides):
    return config_from_dict(apply_overrides(TINY, overrides))


def csv_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def test_defaults_validate_and_hash_is_stable():
    cfg = ExperimentConfig().validate()
    assert cfg.hash == ExperimentConfig().hash
    assert len(cfg.hash) == 16
    assert cfg.reconstruct.accelerations == (4.0, 8.0, 12.0)
    assert cfg.attack.epsilons == (0.005, 0.01, 0.02, 0.05, 0.1)


def test_hash_ignores_output_dir_but_not_seed():
    a = config_from_dict({"output_dir": "a"})
    assert a.hash == config_from_dict({"output_dir": "b"}).hash
    assert a.hash != config_from_dict({"seed": 1}).hash


def test_unknown_keys_are_all_listed():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"bogus": 1, "attack": {"iterz": 3}, "models": {"denoiser": {"x": 1}}})
    msg = str(err.value)
    for key in ("bogus", "attack.iterz", "models.denoiser.x"):
        assert key in msg


def test_validation_rejects_non_differentiable_source():
    with pytest.raises(ConfigError):
        config_from_dict({"attack": {"sources": ["diffusion"]}})


def test_env_overrides():
    env = {"MRIINST_ATTACK__ITERS": "7", "MRIINST_MODELS__DIFFUSION__ENABLED": "false",
           "MRIINST_OUTPUT_DIR": "somewhere", "OTHER": "1"}
    assert env_overrides(env) == {"attack.iters": 7, "models.diffusion.enabled": False,
                                  "output_dir": "somewhere"}
    cfg = load_config(None, {"seed": 3}, env)
    assert cfg.attack.iters == 7 and not cfg.models.diffusion.enabled and cfg.seed == 3


def test_seed_override_shifts_all_streams():
    assert tiny(seed=5).seed_for(2) == 7


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_svg_has_one_polyline_per_series():
    doc = svg.line_plot({"a -> b": ([0.01, 0.05], [0.1, 0.2]), "a -> c": ([0.01, 0.05], [0.0, 0.1]),
                         "x": ([1], [float("nan")])}, "t", "eps", "y")
    assert doc.startswith("<svg") and doc.rstrip().endswith("</svg>")
    assert doc.count('class="series"') == 3
    assert "a -&gt; b" in doc


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    record = pipeline.end_to_end_pipeline(tiny(), out)
    return out, record


def test_pipeline_outputs(tiny_run):
    out, record = tiny_run
    saved = json.loads((out / "config.json").read_text())
    assert saved["config_hash"] == record.config_hash
    assert config_from_dict(saved["config"]).hash == record.config_hash
    names = set(record.rows)
    assert {"reconstruct_cg.csv", "attack_denoiser.csv", "attack_unrolled.csv", "transfer.csv",
            "summary.csv"} <= names
    assert set(json.loads((out / "run_record.json").read_text())["timings"]) == {
        "phantom", "train", "reconstruct", "attack", "transfer", "report"}
    for name in ("whitebox_delta_ssim.svg", "transfer_delta_psnr.svg"):
        assert (out / "report" / name).exists()


def test_reconstruct_csv_has_three_rows_per_item(tiny_run):
    out, record = tiny_run
    lines = (out / "results" / "reconstruct_denoiser.csv").read_text().splitlines()
    assert len(lines) - 1 == 3 * 2
    assert {ln.split(",")[1] for ln in lines[1:]} == {"4.0", "8.0", "12.0"}


def test_every_row_carries_hash_and_seed(tiny_run):
    out, record = tiny_run
    for path in (out / "results").glob("*.csv"):
        header, *rows = path.read_text().splitlines()
        cols = header.split(",")
        assert "config_hash" in cols and "seed" in cols
        for r in rows:
            vals = dict(zip(cols, r.split(",")))
            assert vals["config_hash"] == record.config_hash and vals["seed"] != ""


def test_transfer_matrix_complete(tiny_run):
    out, _ = tiny_run
    pairs = {tuple(ln.split(",")[:2]) for ln in (out / "results" / "transfer.csv").read_text().splitlines()[1:]}
    assert pairs == {("denoiser", t) for t in ("denoiser", "unrolled", "diffusion")}


def test_report_svg_line_count_matches_pairs(tiny_run):
    out, _ = tiny_run
    doc = (out / "report" / "transfer_delta_ssim.svg").read_text()
    assert doc.count('class="series"') == 3
    labels = set(re.findall(r'data-label="([^"]+)"', doc))
    assert labels == {f"denoiser -&gt; {t}" for t in ("denoiser", "unrolled", "diffusion")}


def test_rerun_is_bitwise_identical(tiny_run, tmp_path):
    out, _ = tiny_run
    pipeline.end_to_end_pipeline(tiny(), tmp_path, jobs=2)
    assert csv_bytes(out) == csv_bytes(tmp_path)


def test_diffusion_disabled_skips_sampler(tmp_path):
    cfg = tiny(**{"models.diffusion.enabled": False})
    record = pipeline.end_to_end_pipeline(cfg, tmp_path)
    assert "reconstruct_diffusion.csv" not in record.rows
    assert not (tmp_path / "models" / "diffusion").exists()
    text = (tmp_path / "results" / "transfer.csv").read_text()
    assert "diffusion" not in text and "unrolled" in text


def test_empty_test_split_report_writes_nothing(tmp_path):
    cfg = tiny(**{"dataset.train_fraction": 1.0})
    ws = pipeline.Workspace(cfg, tmp_path)
    pipeline.stage_phantom(ws)
    pipeline.stage_train(ws)
    pipeline.stage_attack(ws)
    pipeline.stage_transfer(ws)
    with pytest.raises(EmptyInputError):
        pipeline.stage_report(ws)
    assert not (tmp_path / "report").exists()


def test_missing_model_names_prior_subcommand(tmp_path):
    ws = pipeline.Workspace(tiny(), tmp_path)
    pipeline.stage_phantom(ws)
    with pytest.raises(DependencyError, match="train"):
        pipeline.stage_attack(ws)


def test_cli_exit_codes(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(TINY))
    out = tmp_path / "out"
    assert cli.run(["attack", "--config", str(cfg_path), "--out", str(out)]) == 3
    assert "phantom" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text(json.dumps({"nope": 1}))
    assert cli.run(["phantom", "--config", str(tmp_path / "bad.json")]) == 2
    assert cli.run(["phantom", "--config", str(cfg_path), "--out", str(out), "--seed", "4"]) == 0
    assert json.loads((out / "config.json").read_text())["config"]["seed"] == 4
    assert cli.run(["train", "--config", str(cfg_path), "--out", str(out), "--models", "denoiser"]) == 0
    assert (out / "models" / "denoiser" / "model.json").exists()
    assert not (out / "models" / "unrolled").exists()


def test_cli_divergence_exit_code(tmp_path, monkeypatch):
    from mri_instability.errors import TrainingDivergenceError

    def boom(ws, only=None):
        raise TrainingDivergenceError("loss became non-finite", 3)

    monkeypatch.setattr(pipeline, "stage_train", boom)
    assert cli.run(["train", "--out", str(tmp_path)]) == 4
