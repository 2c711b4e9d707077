"""Run configuration: TOML loading, schema validation with field paths,
dotted --set overrides, and the config hash embedded in artifacts.

The schema is the DEFAULTS tree itself: a user file may override any leaf
but cannot introduce unknown keys or change a leaf's type. The seed can be
overridden by the PHYSSEG_SEED environment variable.
"""

import copy
import hashlib
import json
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "workdir": "runs/demo",
    "arm": "phys_strat_aug",
    "jobs": 1,
    "phantom": {
        "dims": [48, 48, 48],
        "spacing_mm": [1.0, 1.0, 1.0],
        "n_train": 8,
        "n_val": 4,
        "n_test": 4,
        "age_range": [20.0, 80.0],
        "atrophy_rate": 0.002,
        "modulation": 0.03,
        "tissue_std_fraction": 0.05,
        "multisite_enabled": False,
        "multisite_subjects_per_site": 3,
        "multisite_dims": [32, 32, 32],
    },
    "simulate": {
        "sequence": "mprage",
        "ti": [600.0, 1200.0],
        "ptd": [800.0, 800.0],
        "tr": [15.0, 100.0],
        "te": [4.0, 10.0],
        "fa": [15.0, 75.0],
        "ood_ti": [100.0, 2000.0],
        "ood_ptd": [800.0, 800.0],
        "ood_tr": [10.0, 200.0],
        "ood_te": [2.0, 20.0],
        "ood_fa": [5.0, 90.0],
        "gain": 1.0,
        "bias_amplitude": 0.2,
        "noise_sigma": 0.02,
    },
    "pgs": {
        "max_iters": 200,
        "tol": 1e-7,
        "components_per_tissue": 1,
    },
    "model": {
        "batch_size": 4,
        "patch_size": [24, 24, 24],
        "steps_per_epoch": 100,
        "max_epochs": 50,
        "lr": 0.01,
        "momentum": 0.9,
        "patience": 7,
        "hidden_widths": [64, 64, 48],
        "embed_widths": [40, 40],
        "dropout_first": 0.05,
        "dropout_rest": 0.5,
        "heteroscedastic": True,
        "t_samples": 10,
        "lambda_strat": 0.1,
        "intensity_scale": 1.0,
        "n_pregen": 11,
        "n_val_realizations": 5,
        "fixed_ti": 900.0,
        "fixed_ptd": 800.0,
    },
    "uncertainty": {
        "mc_samples": 50,
        "sweep_kind": "mprage",
        "grid_n1": 20,
        "grid_n2": 20,
        "sweep_ti": [400.0, 2000.0],
        "sweep_ptd": [200.0, 2000.0],
        "sweep_tr": [5.0, 100.0],
        "sweep_fa": [5.0, 90.0],
        "sweep_te": 4.0,
        "calibration_realizations": 3,
    },
    "harmonize": {
        "feature": "ratio",
        "young_max": 16.0,
        "old_min": 22.0,
    },
    "report": {
        "arms": ["baseline", "phys_strat_aug"],
        "distributions": ["in", "ood"],
        "n_mprage": 11,
        "n_spgr": 40,
        "include_trends": False,
        "harmonize_arms": ["cnn_baseline", "phys_aug_base", "phys_strat_aug"],
        "baseline_arm": "cnn_baseline",
        "persist_segmentations": False,
    },
}


def _check_leaf(path, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {type(value).__name__}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {type(value).__name__}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {type(value).__name__}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {type(value).__name__}")
        return value
    raise ConfigError(f"{path}: unsupported config leaf")


def _merge(path, defaults, overrides):
    out = {}
    for key, dval in defaults.items():
        here = f"{path}.{key}" if path else key
        if key in overrides:
            oval = overrides[key]
            if isinstance(dval, dict):
                if not isinstance(oval, dict):
                    raise ConfigError(f"{here}: expected a table")
                out[key] = _merge(here, dval, oval)
            else:
                out[key] = _check_leaf(here, dval, oval)
        else:
            out[key] = copy.deepcopy(dval)
    for key in overrides:
        if key not in defaults:
            here = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {here}")
    return out


def load_config(path=None, sets=(), env=os.environ):
    """Resolve the full configuration from an optional TOML file plus
    ``--set key=value`` overrides (values parsed as TOML literals)."""
    user = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                user = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"--set {key}: cannot parse value {raw!r}: {exc}") from exc
        node = user
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a table")
        node[parts[-1]] = value
    cfg = _merge("", DEFAULTS, user)
    if "PHYSSEG_SEED" in env:
        try:
            cfg["seed"] = int(env["PHYSSEG_SEED"])
        except ValueError as exc:
            raise ConfigError(f"PHYSSEG_SEED must be an integer: {exc}") from exc
    return cfg


def config_hash(cfg):
    """Stable hash of the resolved configuration."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def artifact_meta(cfg, extra=None):
    from . import __version__
    meta = {
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "tool_version": __version__,
    }
    if extra:
        meta.update(extra)
    return meta


def write_sidecar_meta(path, meta):
    with open(str(path) + ".meta.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_sidecar_meta(path):
    sidecar = str(path) + ".meta.json"
    if not os.path.exists(sidecar):
        return {}
    with open(sidecar) as fh:
        return json.load(fh)
