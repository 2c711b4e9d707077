import json
import os

import numpy as np
import pytest

from physseg.cli import main
from physseg.config import ConfigError, config_hash, load_config
from physseg.volumes import read_mvol, read_soft

MICRO_TOML = """
seed = 5
workdir = "run"

[phantom]
dims = [20, 20, 20]
n_train = 2
n_val = 1
n_test = 1

[model]
patch_size = [10, 10, 10]
steps_per_epoch = 4
max_epochs = 2
hidden_widths = [16, 16, 12]
embed_widths = [8, 8]
n_pregen = 3
n_val_realizations = 2

[uncertainty]
mc_samples = 4
grid_n1 = 2
grid_n2 = 2
calibration_realizations = 2

[report]
arms = ["phys_strat_aug"]
distributions = ["in"]
n_mprage = 3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One micro pipeline run shared by the read-only CLI assertions."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "micro.toml"
    cfg_path.write_text(MICRO_TOML)
    old = os.getcwd()
    os.chdir(root)
    try:
        for argv in (["phantom"], ["pgs"], ["train", "--arm", "phys_strat_aug"]):
            assert main(argv + ["--config", "micro.toml"]) == 0
    finally:
        os.chdir(old)
    return root


def run(root, argv):
    old = os.getcwd()
    os.chdir(root)
    try:
        return main(argv)
    finally:
        os.chdir(old)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_config_defaults_and_overrides(tmp_path):
    cfg = load_config(None, sets=["seed=9", "model.lr=0.5", "phantom.dims=[16,16,16]"])
    assert cfg["seed"] == 9
    assert cfg["model"]["lr"] == 0.5
    assert cfg["phantom"]["dims"] == [16, 16, 16]


def test_config_unknown_key_with_path(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[phantom]\ndimz = [4, 4, 4]\n")
    with pytest.raises(ConfigError, match="phantom.dimz"):
        load_config(p)


def test_config_type_error_with_path(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[model]\nlr = \"fast\"\n")
    with pytest.raises(ConfigError, match="model.lr"):
        load_config(p)


def test_config_env_seed_override():
    cfg = load_config(None, env={"PHYSSEG_SEED": "123"})
    assert cfg["seed"] == 123
    with pytest.raises(ConfigError, match="PHYSSEG_SEED"):
        load_config(None, env={"PHYSSEG_SEED": "xyz"})


def test_config_hash_stable_and_sensitive():
    a = load_config(None)
    b = load_config(None)
    assert config_hash(a) == config_hash(b)
    c = load_config(None, sets=["seed=1"])
    assert config_hash(a) != config_hash(c)


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------

def test_missing_config_file_is_validation_error(tmp_path):
    assert run(tmp_path, ["phantom", "--config", "nope.toml"]) == 1


def test_bad_set_value_is_validation_error(tmp_path):
    assert run(tmp_path, ["phantom", "--set", "seed=not-an-int"]) == 1


def test_missing_upstream_artifact_is_validation_error(tmp_path):
    (tmp_path / "m.toml").write_text(MICRO_TOML)
    assert run(tmp_path, ["train", "--config", "m.toml"]) == 1


def test_unknown_subcommand_is_usage_error(tmp_path):
    assert run(tmp_path, ["frobnicate"]) == 1


def test_version_flag(capsys):
    assert main(["--version"]) == 0


# ---------------------------------------------------------------------------
# Command behaviour
# ---------------------------------------------------------------------------

def test_simulate_records_params(workdir):
    assert run(workdir, ["simulate", "--config", "micro.toml",
                         "--mpm", "S0_s000", "--seq", "mprage",
                         "--ti", "900", "--ptd", "800", "-o", "simout"]) == 0
    channels, meta = read_mvol(workdir / "simout")
    assert set(channels) == {"signal", "mask"}
    assert meta["params"]["kind"] == "mprage"
    assert meta["params"]["ti_ms"] == 900.0
    assert meta["params"]["tr_ms"] == 1700.0
    assert "config_hash" in meta and "seed" in meta and "tool_version" in meta


def test_simulate_spgr_flags(workdir):
    assert run(workdir, ["simulate", "--config", "micro.toml",
                         "--mpm", "S0_s000", "--seq", "spgr",
                         "--tr", "50", "--te", "4", "--fa", "30",
                         "-o", "simspgr"]) == 0
    _, meta = read_mvol(workdir / "simspgr")
    assert meta["params"]["kind"] == "spgr"


def test_simulate_missing_args(workdir):
    assert run(workdir, ["simulate", "--config", "micro.toml",
                         "--mpm", "S0_s000", "--seq", "mprage",
                         "-o", "simbad"]) == 1


def test_phantom_artifacts(workdir):
    manifest = (workdir / "run" / "cohort" / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "subject_id,site_id,age,mpm_path,labels_path"
    assert len(manifest) == 1 + 4
    meta = json.loads((workdir / "run" / "cohort" / "manifest.csv.meta.json").read_text())
    assert meta["seed"] == 5


def test_pgs_artifacts(workdir):
    soft, meta = read_soft(workdir / "run" / "pgs" / "S0_s000_soft")
    inside = soft.mask.data > 0
    total = sum(g.data[inside] for g in soft.tissues)
    assert np.abs(total - 1.0).max() < 1e-5
    gmm = json.loads((workdir / "run" / "pgs" / "S0_s000_gmm.json").read_text())
    assert len(gmm["weights"]) == 3
    features = (workdir / "run" / "pgs" / "features.csv").read_text().splitlines()
    assert features[0] == "subject_id,site_id,age,csf,gm,wm"


def test_train_artifacts(workdir):
    ckpt = json.loads((workdir / "run" / "checkpoints" /
                       "phys_strat_aug.ckpt.json").read_text())
    assert ckpt["magic"] == "PSCKPT1"
    assert ckpt["conditioned"] is True
    assert ckpt["meta"]["arm"] == "phys_strat_aug"
    log = (workdir / "run" / "checkpoints" / "phys_strat_aug_log.csv").read_text()
    assert log.splitlines()[0].startswith("epoch,seg_loss,strat_loss")


def test_infer_mc_outputs(workdir):
    assert run(workdir, ["infer", "--config", "micro.toml",
                         "--arm", "phys_strat_aug",
                         "--mpm", "run/cohort/S0_s003", "--seq", "mprage",
                         "--ti", "900", "--ptd", "800",
                         "--mc", "3", "-o", "mcseg"]) == 0
    for i in range(3):
        seg, meta = read_soft(workdir / f"mcseg_{i:03d}")
        assert meta["params"]["ti_ms"] == 900.0


def test_calibrate_and_sweep_and_harmonize_and_report(workdir):
    assert run(workdir, ["calibrate", "--config", "micro.toml",
                         "--arm", "phys_strat_aug"]) == 0
    cal = json.loads((workdir / "run" / "calibration" /
                      "phys_strat_aug_calmap.json").read_text())
    assert cal["knots_nominal"][0] == 0.0
    assert cal["knots_nominal"][-1] == 100.0

    assert run(workdir, ["sweep", "--config", "micro.toml",
                         "--arm", "phys_strat_aug"]) == 0
    sweep_csv = (workdir / "run" / "sweep" /
                 "phys_strat_aug_mprage_sweep.csv").read_text().splitlines()
    assert sweep_csv[0] == "ti_ms,ptd_ms,mean_iqr_ml,log10_iqr"
    assert len(sweep_csv) == 1 + 4
    svg = (workdir / "run" / "sweep" / "phys_strat_aug_mprage_sweep.svg").read_text()
    assert svg.startswith("<svg")

    assert run(workdir, ["harmonize", "--config", "micro.toml"]) == 0
    combat = json.loads((workdir / "run" / "harmonize" / "combat.json").read_text())
    assert combat["features"] == ["csf", "gm", "wm"]

    assert run(workdir, ["report", "--config", "micro.toml"]) == 0
    ann = (workdir / "run" / "report" / "annealing.csv").read_text().splitlines()
    assert ann[0].startswith("arm,sequence,distribution,tissue")
    assert (workdir / "run" / "report" / "wilcoxon.csv").exists()
    assert (workdir / "run" / "report" / "volume_vs_ti_phys_strat_aug.svg").exists()


def test_report_refuses_mixed_hashes_without_force(workdir):
    # a different seed changes the config hash, so consuming the existing
    # checkpoints must fail fast without --force
    code = run(workdir, ["report", "--config", "micro.toml", "--set", "seed=6"])
    assert code == 1
    code = run(workdir, ["report", "--config", "micro.toml", "--set", "seed=6",
                         "--force"])
    assert code == 0


def test_report_specific_arms_flag(workdir):
    assert run(workdir, ["report", "--config", "micro.toml",
                         "--arms", "phys_strat_aug", "--dist", "in"]) == 0
    ann = (workdir / "run" / "report" / "annealing.csv").read_text().splitlines()
    rows = [r.split(",") for r in ann[1:]]
    assert {r[0] for r in rows} == {"phys_strat_aug"}
    assert {r[2] for r in rows} == {"in"}
