"""Config document, preset plumbing, and CLI surface."""

import json
import os

import pytest

from multibn import cli
from multibn.container import load_tensors
from multibn.data import load_dataset
from multibn.experiments import (
    BUILD_TAG,
    ConfigError,
    ExperimentConfig,
    PRESETS,
    config_hash,
    profiled_config,
    run_preset,
    write_csv,
)

MICRO = ["--set", "train_size=8", "--set", "test_size=4", "--set", "epochs=1",
         "--set", "t_max=1", "--set", "eval_t_max=1", "--set", "eval_subset=4",
         "--set", "batch_size=4", "--set", "channels=2,3,4",
         "--set", "detector_channels=2,3", "--set", "metric_subset=4"]

MICRO_KV = [s.split("=", 1) for s in MICRO[1::2]]


# ---------------------------------------------------------------------------
# config document


def test_from_mapping_coerces_types():
    cfg = ExperimentConfig.from_mapping(
        {"lr": "0.01", "epochs": "3", "channels": "4,6,8", "attacks": "pgd,af"})
    assert cfg.lr == 0.01 and cfg.epochs == 3
    assert cfg.channels == (4, 6, 8)
    assert cfg.attacks == ("pgd", "af")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig.from_mapping({"learning_rate": "0.1"})


def test_bad_value_rejected():
    with pytest.raises(ConfigError, match="bad value"):
        ExperimentConfig.from_mapping({"epochs": "three"})


def test_hash_stable_under_key_reordering():
    doc = {"lr": "0.01", "epochs": "3", "seed": "7", "scheme": "madry",
           "attacks": "pgd"}
    a = ExperimentConfig.from_mapping(doc).config_hash()
    b = ExperimentConfig.from_mapping(dict(reversed(list(doc.items())))).config_hash()
    assert a == b
    assert a != ExperimentConfig.from_mapping({**doc, "seed": "8"}).config_hash()


def test_hash_matches_canonical_document():
    cfg = ExperimentConfig(seed=5)
    assert cfg.config_hash() == config_hash(cfg.canonical())
    assert len(cfg.config_hash()) == 12


def test_from_sources_file_and_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"epochs": 4, "lr": 0.02, "channels": [4, 6, 8]}))
    cfg = ExperimentConfig.from_sources(path, overrides=["epochs=9"])
    assert cfg.epochs == 9 and cfg.lr == 0.02 and cfg.channels == (4, 6, 8)
    with pytest.raises(ConfigError, match="not key=value"):
        ExperimentConfig.from_sources(None, overrides=["epochs"])
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="flat object"):
        ExperimentConfig.from_sources(bad)


def test_train_config_trims_specs_for_single_attack_schemes():
    cfg = ExperimentConfig(attacks=("pgd", "roa"))
    assert len(cfg.train_config(scheme="madry").attack_specs) == 1
    assert len(cfg.train_config(scheme="avg").attack_specs) == 2
    tc = cfg.train_config(scheme="multibn")
    assert tc.K == 3


def test_eval_suite_carries_budget_fields():
    cfg = ExperimentConfig(eval_t_max=7, s_roa=11, seed=4)
    suite = cfg.eval_suite()
    assert [s.kind for s in suite] == ["pgd", "roa", "af", "spa"]
    assert all(s.t_max == 7 and s.seed == 4 for s in suite)
    assert suite[1].s_roa == 11


def test_profiled_config_rejects_unknown_profile():
    with pytest.raises(ConfigError, match="unknown profile"):
        profiled_config("galactic")
    cfg = profiled_config("tiny", seed=3)
    assert cfg.seed == 3 and cfg.data_seed == 3


# ---------------------------------------------------------------------------
# CSV artifacts


def test_write_csv_appends_traceability_columns(tmp_path):
    meta = {"config_hash": "abc123", "seed": 9, "build": BUILD_TAG}
    path = write_csv(tmp_path / "t.csv", [{"a": 1, "b": 0.123456}], ["a", "b"], meta)
    lines = path.read_text().splitlines()
    assert lines[0] == "a,b,config_hash,seed,build"
    assert lines[1] == f"1,0.1235,abc123,9,{BUILD_TAG}"


# ---------------------------------------------------------------------------
# presets


def test_unknown_preset_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown preset"):
        run_preset("table9", tmp_path / "x")


def test_fig8_preset_writes_size_csv(tmp_path):
    out = run_preset("fig8", tmp_path / "f8", profile="tiny")
    lines = (out / "fig8.csv").read_text().splitlines()
    assert lines[0].startswith("K,shared,bn_per_branch,multibn_total")
    assert len(lines) == 5
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["preset"] == "fig8"
    assert manifest["build"] == BUILD_TAG
    assert len(manifest["config_hash"]) == 12


def test_preset_rerun_is_byte_identical(tmp_path):
    a = run_preset("fig8", tmp_path / "a", profile="tiny", seed=2)
    b = run_preset("fig8", tmp_path / "b", profile="tiny", seed=2)
    assert (a / "fig8.csv").read_bytes() == (b / "fig8.csv").read_bytes()


def test_conflicting_dir_needs_force(tmp_path):
    out = tmp_path / "run"
    run_preset("fig8", out, profile="tiny", seed=0)
    with pytest.raises(ConfigError, match="--force"):
        run_preset("fig8", out, profile="tiny", seed=1)
    run_preset("fig8", out, profile="tiny", seed=1, force=True)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1


def test_table1_micro_run_resume_and_determinism(tmp_path):
    overrides = [f"{k}={v}" for k, v in MICRO_KV]
    out = run_preset("table1", tmp_path / "r1", profile="tiny", seed=0,
                     overrides=overrides)
    table = (out / "table1.csv").read_text()
    names = [line.split(",")[0] for line in table.splitlines()[1:]]
    assert names == ["no_defense", "at_pgd", "at_roa", "at_af", "at_spa",
                     "multibn_manual"]
    ckpts = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert ckpts == ["at_af.ntc", "at_pgd.ntc", "at_roa.ntc", "at_spa.ntc",
                     "multibn_manual.ntc", "no_defense.ntc"]
    stamp = os.path.getmtime(out / "checkpoints" / "no_defense.ntc")
    run_preset("table1", out, profile="tiny", seed=0, overrides=overrides)
    assert os.path.getmtime(out / "checkpoints" / "no_defense.ntc") == stamp
    assert (out / "table1.csv").read_text() == table
    fresh = run_preset("table1", tmp_path / "r2", profile="tiny", seed=0,
                       overrides=overrides)
    assert (fresh / "table1.csv").read_bytes() == (out / "table1.csv").read_bytes()


def test_preset_names_cover_tables_and_figures():
    assert PRESETS == ("table1", "table2", "table3", "table4", "table8",
                       "fig5", "fig6", "fig7", "fig8")


# ---------------------------------------------------------------------------
# CLI surface


def test_cli_data_roundtrip(tmp_path):
    out = tmp_path / "ds.ntc"
    rc = cli.main(["data", "--set", "train_size=6", "--set", "test_size=3",
                   "--out", str(out)])
    assert rc == 0
    ds = load_dataset(out)
    assert len(ds.train) == 6 and len(ds.test) == 3


def test_cli_rejects_unknown_key(tmp_path, capsys):
    rc = cli.main(["data", "--set", "nope=1", "--out", str(tmp_path / "d.ntc")])
    assert rc == 2
    assert "unknown config key" in capsys.readouterr().err


def test_cli_size_uses_config_arch(tmp_path):
    out = tmp_path / "size.csv"
    rc = cli.main(["size", "--set", "channels=8,16,32", "--kmax", "3",
                   "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 4
    assert lines[3].split(",")[3] == "18429"  # K=3 default backbone


def test_cli_train_eval_attack_pipeline(tmp_path):
    ds = tmp_path / "ds.ntc"
    ckpt = tmp_path / "m.ntc"
    assert cli.main(["data", *MICRO, "--out", str(ds)]) == 0
    assert cli.main(["train", *MICRO, "--scheme", "multibn", "--data", str(ds),
                     "--out", str(ckpt)]) == 0
    assert (tmp_path / "m_metrics.csv").exists()
    rc = cli.main(["eval", *MICRO, "--checkpoint", str(ckpt), "--data", str(ds),
                   "--mode", "auto", "--out", str(tmp_path / "e.csv")])
    assert rc == 0
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == ("model,mode,clean,pgd,roa,af,spa,mean,union,"
                      "config_hash,seed,build")
    assert json.loads((tmp_path / "e.json").read_text())["types"] == [
        "clean", "pgd", "roa", "af", "spa"]
    adv = tmp_path / "adv.ntc"
    rc = cli.main(["attack", *MICRO, "--kind", "roa", "--checkpoint", str(ckpt),
                   "--data", str(ds), "--out", str(adv)])
    assert rc == 0
    tensors, meta = load_tensors(adv)
    assert tensors["videos"].shape == (4, 3, 8, 32, 32)
    assert meta["kind"] == "roa" and meta["build"] == BUILD_TAG
    changed = tensors["videos"] != load_dataset(ds).test.videos[:4]
    assert changed.any()


def test_cli_auto_mode_needs_detector(tmp_path, capsys):
    ds = tmp_path / "ds.ntc"
    ckpt = tmp_path / "nat.ntc"
    cli.main(["data", *MICRO, "--out", str(ds)])
    cli.main(["train", *MICRO, "--scheme", "natural", "--data", str(ds),
              "--out", str(ckpt)])
    rc = cli.main(["eval", *MICRO, "--checkpoint", str(ckpt), "--data", str(ds),
                   "--mode", "auto", "--out", str(tmp_path / "e.csv")])
    assert rc == 2
    assert "no detector" in capsys.readouterr().err
