"""Command-line entry point: seeded, reproducible pipeline runs.

Subcommands: phantom | simulate | pgs | train | infer | calibrate | sweep
| harmonize | report. All artifacts embed the resolved config hash, the
seed, and the tool version; rerunning any command with the same config and
seed reproduces every payload byte for byte (nothing writes timestamps).

Exit codes: 0 success, 1 validation error (bad config or missing inputs),
2 runtime error.
"""

import argparse
import os
import sys

import numpy as np

from . import __version__, analysis, svgplot
from .config import (ConfigError, artifact_meta, config_hash, load_config,
                     read_sidecar_meta, write_sidecar_meta)
from .harmonize import FeatureTable, apply_combat, feature_table_from_segmentations, fit_combat
from .model import (MlpConfig, TrainConfig, load_checkpoint, predict,
                    save_checkpoint, train, write_train_log)
from .phantom import (CohortSpec, TissueParams, generate_cohort,
                      multisite_cohort_spec, read_cohort_manifest,
                      write_cohort_manifest)
from .pgs import fit_gmm, label_pgs
from .simulate import (AugmentConfig, Mprage, ParamRange, Spgr, simulate_volume)
from .uncertainty import (CalibrationMap, SweepGrid, calibrate,
                          percentile_volumes, sweep_contour)
from .volumes import (TISSUES, read_mpm, read_soft, write_hard, write_mpm,
                      write_mvol, write_soft)


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _require(path, what):
    if not os.path.exists(path):
        raise ConfigError(f"missing {what}: {path} (run the upstream command first)")
    return path


def _range_from_config(cfg, dist="in"):
    sim = cfg["simulate"]
    prefix = "" if dist == "in" else "ood_"
    if sim["sequence"] == "mprage":
        return ParamRange("mprage", {
            "ti_ms": tuple(sim[prefix + "ti"]),
            "ptd_ms": tuple(sim[prefix + "ptd"]),
        }, gain=sim["gain"])
    return ParamRange("spgr", {
        "tr_ms": tuple(sim[prefix + "tr"]),
        "te_ms": tuple(sim[prefix + "te"]),
        "fa_deg": tuple(sim[prefix + "fa"]),
    }, gain=sim["gain"])


def _train_config(cfg, arm):
    m = cfg["model"]
    # images are presented to the model scaled by 1/(gain * max tissue PD);
    # the config value multiplies on top of that normalisation
    scale = m["intensity_scale"] / cfg["simulate"]["gain"]
    mlp = MlpConfig(
        hidden_widths=tuple(m["hidden_widths"]),
        embed_widths=tuple(m["embed_widths"]),
        dropout_first=m["dropout_first"],
        dropout_rest=m["dropout_rest"],
        heteroscedastic=m["heteroscedastic"],
        t_samples=m["t_samples"],
        lambda_strat=m["lambda_strat"],
        intensity_scale=scale,
    )
    return TrainConfig(
        mode=arm,
        batch_size=m["batch_size"],
        patch_size=tuple(m["patch_size"]),
        steps_per_epoch=m["steps_per_epoch"],
        max_epochs=m["max_epochs"],
        lr=m["lr"],
        momentum=m["momentum"],
        seed=cfg["seed"],
        patience=m["patience"],
        train_range=_range_from_config(cfg, "in"),
        val_range=_range_from_config(cfg, "in"),
        n_pregen=m["n_pregen"],
        n_val_realizations=m["n_val_realizations"],
        fixed_params=Mprage(ti_ms=m["fixed_ti"], ptd_ms=m["fixed_ptd"]),
        aug=AugmentConfig.enabled(cfg["simulate"]["bias_amplitude"],
                                  cfg["simulate"]["noise_sigma"]),
        mlp=mlp,
    )


def _cohort_dir(cfg, multisite=False):
    return os.path.join(cfg["workdir"], "msite" if multisite else "cohort")


def _manifest_path(cfg, multisite=False):
    return os.path.join(_cohort_dir(cfg, multisite), "manifest.csv")


def _pgs_dir(cfg):
    return os.path.join(cfg["workdir"], "pgs")


def _ckpt_path(cfg, arm):
    return os.path.join(cfg["workdir"], "checkpoints", arm)


def _load_cohort_subjects(cfg, multisite=False):
    rows = read_cohort_manifest(_require(_manifest_path(cfg, multisite), "cohort manifest"))
    out = []
    for row in rows:
        mpm = read_mpm(row["mpm_path"])
        out.append((row, mpm))
    return out


def _load_pgs_soft(cfg, subject_id):
    path = os.path.join(_pgs_dir(cfg), f"{subject_id}_soft")
    _require(path + ".mvol.json", f"PGS labels for {subject_id}")
    soft, _ = read_soft(path)
    return soft


def _split_rows(cfg, rows):
    n_train, n_val = cfg["phantom"]["n_train"], cfg["phantom"]["n_val"]
    return rows[:n_train], rows[n_train:n_train + n_val], rows[n_train + n_val:]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_phantom(cfg, args):
    ph = cfg["phantom"]
    meta = artifact_meta(cfg)
    n_total = ph["n_train"] + ph["n_val"] + ph["n_test"]
    spec = CohortSpec(
        n_subjects=n_total, dims=tuple(ph["dims"]), seed=cfg["seed"],
        age_range=tuple(ph["age_range"]), atrophy_rate=ph["atrophy_rate"],
        spacing_mm=tuple(ph["spacing_mm"]),
        tissue_params=TissueParams.default(ph["tissue_std_fraction"]),
        modulation=ph["modulation"],
    )
    jobs = [(spec, False)]
    if ph["multisite_enabled"]:
        jobs.append((multisite_cohort_spec(
            tuple(ph["multisite_dims"]), seed=cfg["seed"] + 1,
            subjects_per_site=ph["multisite_subjects_per_site"],
            age_range=tuple(ph["age_range"]), atrophy_rate=ph["atrophy_rate"],
            spacing_mm=tuple(ph["spacing_mm"]),
            tissue_params=TissueParams.default(ph["tissue_std_fraction"]),
            modulation=ph["modulation"]), True))
    for cohort_spec, multisite in jobs:
        outdir = _ensure_dir(_cohort_dir(cfg, multisite))
        manifest = []
        for subj in generate_cohort(cohort_spec):
            sid = subj.mpm.subject_id
            mpm_path = os.path.join(outdir, sid)
            lab_path = os.path.join(outdir, f"{sid}_labels")
            subj_meta = dict(meta)
            if subj.seq is not None:
                subj_meta["site_params"] = {
                    "kind": subj.seq.kind, "ti_ms": subj.seq.ti_ms,
                    "ptd_ms": subj.seq.ptd_ms, "tr_ms": subj.seq.tr_ms,
                }
            write_mpm(subj.mpm, mpm_path, meta=subj_meta)
            write_hard(subj.labels, lab_path, meta=subj_meta)
            manifest.append([sid, subj.site_id, repr(subj.age),
                             mpm_path + ".mvol.json", lab_path + ".mvol.json"])
        manifest_path = _manifest_path(cfg, multisite)
        write_cohort_manifest(manifest, manifest_path)
        write_sidecar_meta(manifest_path, meta)
        print(f"wrote {len(manifest)} subjects under {outdir}")
    return 0


def cmd_simulate(cfg, args):
    mpm_path = args.mpm
    if not os.path.exists(mpm_path) and not os.path.exists(mpm_path + ".mvol.json"):
        candidate = os.path.join(_cohort_dir(cfg), args.mpm)
        if os.path.exists(candidate + ".mvol.json"):
            mpm_path = candidate
        else:
            raise ConfigError(f"MPM not found: {args.mpm}")
    mpm = read_mpm(mpm_path)
    params = _params_from_args(cfg, args)
    img = simulate_volume(mpm, params)
    meta = artifact_meta(cfg, {
        "subject_id": mpm.subject_id,
        "params": _params_dict(params),
    })
    write_mvol({"signal": img, "mask": mpm.mask}, args.output, meta=meta)
    print(f"simulated {params.kind} image written to {args.output}.mvol.*")
    return 0


def _params_from_args(cfg, args):
    seq = args.seq or cfg["simulate"]["sequence"]
    gain = args.gain if args.gain is not None else cfg["simulate"]["gain"]
    if seq == "mprage":
        if args.ti is None or args.ptd is None:
            raise ConfigError("mprage needs --ti and --ptd")
        return Mprage(ti_ms=args.ti, ptd_ms=args.ptd, gain=gain)
    if seq == "spgr":
        if args.tr is None or args.te is None or args.fa is None:
            raise ConfigError("spgr needs --tr, --te and --fa")
        return Spgr(tr_ms=args.tr, te_ms=args.te, fa_deg=args.fa, gain=gain)
    raise ConfigError(f"unknown sequence {seq!r}")


def _params_dict(params):
    if params.kind == "mprage":
        return {"kind": "mprage", "ti_ms": params.ti_ms, "ptd_ms": params.ptd_ms,
                "tr_ms": params.tr_ms, "gain": params.gain}
    return {"kind": "spgr", "tr_ms": params.tr_ms, "te_ms": params.te_ms,
            "fa_deg": params.fa_deg, "gain": params.gain}


def cmd_pgs(cfg, args):
    pg = cfg["pgs"]
    outdir = _ensure_dir(_pgs_dir(cfg))
    meta = artifact_meta(cfg)
    manifests = [False]
    if os.path.exists(_manifest_path(cfg, True)):
        manifests.append(True)
    for multisite in manifests:
        entries = []
        for row, mpm in _load_cohort_subjects(cfg, multisite):
            sid = row["subject_id"]
            gmm = fit_gmm(mpm, init=TissueParams.default(),
                          max_iters=pg["max_iters"], tol=pg["tol"],
                          components_per_tissue=pg["components_per_tissue"])
            soft, hard = label_pgs(mpm, gmm)
            write_soft(soft, os.path.join(outdir, f"{sid}_soft"), meta=meta)
            write_hard(hard, os.path.join(outdir, f"{sid}_hard"), meta=meta)
            gmm_path = os.path.join(outdir, f"{sid}_gmm.json")
            gmm.to_json(gmm_path)
            write_sidecar_meta(gmm_path, meta)
            entries.append((sid, row["site_id"], float(row["age"]), hard))
        table = feature_table_from_segmentations(entries, ratios=True)
        name = "msite_features.csv" if multisite else "features.csv"
        table.to_csv(os.path.join(outdir, name))
        write_sidecar_meta(os.path.join(outdir, name), meta)
        print(f"labeled {len(entries)} subjects ({'multisite' if multisite else 'cohort'})")
    return 0


def cmd_train(cfg, args):
    arm = args.arm or cfg["arm"]
    tcfg = _train_config(cfg, arm)
    rows = read_cohort_manifest(_require(_manifest_path(cfg), "cohort manifest"))
    train_rows, val_rows, _ = _split_rows(cfg, rows)
    if not train_rows or not val_rows:
        raise ConfigError("cohort too small for the configured train/val split")

    def load(rows_):
        out = []
        for row in rows_:
            mpm = read_mpm(row["mpm_path"])
            out.append((mpm, _load_pgs_soft(cfg, row["subject_id"])))
        return out

    weights, log = train(tcfg, load(train_rows), load(val_rows))
    outdir = _ensure_dir(os.path.dirname(_ckpt_path(cfg, arm)))
    meta = artifact_meta(cfg, {"arm": arm, "mode": tcfg.mode,
                               "best_metric": max(r["metric"] for r in log)})
    save_checkpoint(weights, _ckpt_path(cfg, arm), meta=meta)
    write_train_log(log, os.path.join(outdir, f"{arm}_log.csv"))
    write_sidecar_meta(os.path.join(outdir, f"{arm}_log.csv"), meta)
    print(f"trained arm {arm}: {len(log)} epochs, "
          f"best metric {max(r['metric'] for r in log):.4f}")
    return 0


def cmd_infer(cfg, args):
    ckpt = args.checkpoint or _ckpt_path(cfg, args.arm or cfg["arm"])
    _require(ckpt + ".ckpt.json" if not ckpt.endswith(".ckpt.json") else ckpt,
             "checkpoint")
    weights, ckpt_meta = load_checkpoint(ckpt)
    mpm = read_mpm(_require(args.mpm + ".mvol.json"
                            if not args.mpm.endswith(".mvol.json") else args.mpm,
                            "MPM volume"))
    params = _params_from_args(cfg, args)
    n = args.mc or 1
    rng = np.random.default_rng([cfg["seed"], 71])
    segs = predict(weights, mpm, params, n_samples=n,
                   dropout=bool(args.dropout or (args.mc and args.mc > 1)), rng=rng)
    meta = artifact_meta(cfg, {"params": _params_dict(params),
                               "checkpoint": os.path.basename(ckpt)})
    if n == 1:
        write_soft(segs[0], args.output, meta=meta)
    else:
        for i, seg in enumerate(segs):
            write_soft(seg, f"{args.output}_{i:03d}", meta=meta)
    print(f"wrote {n} segmentation(s) to {args.output}*")
    return 0


def cmd_calibrate(cfg, args):
    arm = args.arm or cfg["arm"]
    weights, _ = load_checkpoint(_require(_ckpt_path(cfg, arm) + ".ckpt.json",
                                          "checkpoint"))
    rows = read_cohort_manifest(_require(_manifest_path(cfg), "cohort manifest"))
    _, val_rows, _ = _split_rows(cfg, rows)
    if not val_rows:
        raise ConfigError("no validation subjects available for calibration")
    un = cfg["uncertainty"]
    prange = _range_from_config(cfg, "in")
    params_list = analysis.realization_params(prange, un["calibration_realizations"],
                                              cfg["seed"] + 17)
    curves, truths = [], []
    for row in val_rows:
        mpm = read_mpm(row["mpm_path"])
        pgs_hard = _load_pgs_soft(cfg, row["subject_id"]).harden()
        for k, params in enumerate(params_list):
            rng = np.random.default_rng([cfg["seed"], 91, int(row["subject_id"].split("s")[-1]), k])
            samples = predict(weights, mpm, params, n_samples=un["mc_samples"],
                              dropout=True, rng=rng)
            for tissue in TISSUES:
                curves.append(percentile_volumes(samples, tissue))
                truths.append(pgs_hard.volume_ml(tissue))
    cal_map = calibrate(curves, truths)
    outdir = _ensure_dir(os.path.join(cfg["workdir"], "calibration"))
    path = os.path.join(outdir, f"{arm}_calmap.json")
    cal_map.to_json(path)
    write_sidecar_meta(path, artifact_meta(cfg, {"arm": arm,
                                                 "n_pairs": len(curves)}))
    print(f"calibration map written to {path}")
    return 0


def _load_calmap(cfg, arm):
    path = os.path.join(cfg["workdir"], "calibration", f"{arm}_calmap.json")
    if os.path.exists(path):
        return CalibrationMap.from_json(path)
    return CalibrationMap.identity()


def cmd_sweep(cfg, args):
    arm = args.arm or cfg["arm"]
    weights, _ = load_checkpoint(_require(_ckpt_path(cfg, arm) + ".ckpt.json",
                                          "checkpoint"))
    rows = read_cohort_manifest(_require(_manifest_path(cfg), "cohort manifest"))
    _, _, test_rows = _split_rows(cfg, rows)
    if not test_rows:
        raise ConfigError("no test subjects available for the sweep")
    mpms = [read_mpm(row["mpm_path"]) for row in test_rows]
    un = cfg["uncertainty"]
    grid = SweepGrid(
        kind=un["sweep_kind"], n1=un["grid_n1"], n2=un["grid_n2"],
        ti_ms=tuple(un["sweep_ti"]), ptd_ms=tuple(un["sweep_ptd"]),
        tr_ms=tuple(un["sweep_tr"]), fa_deg=tuple(un["sweep_fa"]),
        te_ms=un["sweep_te"], gain=cfg["simulate"]["gain"],
    )
    result = sweep_contour(weights, mpms, grid, k_samples=un["mc_samples"],
                           cal_map=_load_calmap(cfg, arm),
                           base_seed=cfg["seed"], jobs=cfg["jobs"])
    outdir = _ensure_dir(os.path.join(cfg["workdir"], "sweep"))
    csv_path = os.path.join(outdir, f"{arm}_{grid.kind}_sweep.csv")
    svg_path = os.path.join(outdir, f"{arm}_{grid.kind}_sweep.svg")
    result.to_csv(csv_path)
    write_sidecar_meta(csv_path, artifact_meta(cfg, {"arm": arm}))
    labels = {"mprage": ("TI (ms)", "pTD (ms)"), "spgr": ("TR (ms)", "FA (deg)")}
    svgplot.contour(result.log10_iqr, result.axis1, result.axis2, svg_path,
                    xlabel=labels[grid.kind][0], ylabel=labels[grid.kind][1],
                    title=f"log10 IQR width (ml), {arm}")
    print(f"sweep written to {csv_path} and {svg_path}")
    return 0


def cmd_harmonize(cfg, args):
    features = args.features
    if features is None:
        candidate = os.path.join(_pgs_dir(cfg), "msite_features.csv")
        features = candidate if os.path.exists(candidate) \
            else os.path.join(_pgs_dir(cfg), "features.csv")
    table = FeatureTable.from_csv(_require(features, "feature table"))
    model = fit_combat(table)
    harmonized = apply_combat(model, table)
    outdir = _ensure_dir(os.path.join(cfg["workdir"], "harmonize"))
    model_path = os.path.join(outdir, "combat.json")
    tab_path = os.path.join(outdir, "harmonized.csv")
    model.to_json(model_path)
    harmonized.to_csv(tab_path)
    meta = artifact_meta(cfg, {"source": os.path.basename(features)})
    write_sidecar_meta(model_path, meta)
    write_sidecar_meta(tab_path, meta)
    print(f"combat model and harmonized table written under {outdir}")
    return 0


def _check_hashes(cfg, metas, force):
    current = config_hash(cfg)
    mismatched = sorted({m.get("config_hash", "?") for m in metas
                         if m.get("config_hash") not in (None, current)})
    if mismatched and not force:
        raise ConfigError(
            "artifacts were produced under different configs "
            f"(hashes {mismatched} vs current {current}); rerun upstream "
            "commands or pass --force"
        )


def cmd_report(cfg, args):
    rp = cfg["report"]
    arms = args.arms.split(",") if args.arms else list(rp["arms"])
    dists = args.dist.split(",") if args.dist else list(rp["distributions"])
    rows = read_cohort_manifest(_require(_manifest_path(cfg), "cohort manifest"))
    _, _, test_rows = _split_rows(cfg, rows)
    if not test_rows:
        raise ConfigError("no test subjects for the report")

    checkpoints, metas = {}, [read_sidecar_meta(_manifest_path(cfg))]
    for arm in arms:
        weights, meta = load_checkpoint(_require(_ckpt_path(cfg, arm) + ".ckpt.json",
                                                 f"checkpoint for arm {arm}"))
        checkpoints[arm] = weights
        metas.append(meta)
    _check_hashes(cfg, metas, args.force)

    subjects = []
    for row in test_rows:
        mpm = read_mpm(row["mpm_path"])
        subjects.append((mpm, _load_pgs_soft(cfg, row["subject_id"])))

    ranges = {}
    for dist in dists:
        if dist not in ("in", "ood"):
            raise ConfigError(f"unknown distribution {dist!r}, use in|ood")
        ranges[dist] = _range_from_config(cfg, dist)

    outdir = _ensure_dir(os.path.join(cfg["workdir"], "report"))
    persist = os.path.join(outdir, "segmentations") \
        if rp["persist_segmentations"] else None
    result = analysis.run_annealing_study(
        subjects, checkpoints, ranges,
        n_mprage=rp["n_mprage"], n_spgr=rp["n_spgr"], seed=cfg["seed"],
        persist_dir=persist)
    meta = artifact_meta(cfg, {"arms": arms, "distributions": dists})
    ann_path = os.path.join(outdir, "annealing.csv")
    result.to_csv(ann_path)
    write_sidecar_meta(ann_path, meta)
    wil_path = os.path.join(outdir, "wilcoxon.csv")
    result.wilcoxon_to_csv(wil_path, arms)
    write_sidecar_meta(wil_path, meta)

    # Volume-vs-TI figure for the first test subject and arm, when the
    # configured sequence is MPRAGE.
    if cfg["simulate"]["sequence"] == "mprage":
        mpm, reference = subjects[0]
        lo, hi = cfg["simulate"]["ti"]
        tis = np.linspace(lo, hi, min(rp["n_mprage"], 7))
        analysis.plot_volume_vs_ti(
            checkpoints[arms[-1]], mpm, reference, "gm", tis,
            ptd_ms=0.5 * (cfg["simulate"]["ptd"][0] + cfg["simulate"]["ptd"][1]),
            path=os.path.join(outdir, f"volume_vs_ti_{arms[-1]}.svg"),
            k_samples=min(cfg["uncertainty"]["mc_samples"], 16),
            cal_map=_load_calmap(cfg, arms[-1]), seed=cfg["seed"],
            title=f"gm volume vs TI ({arms[-1]})")

    if rp["include_trends"] and os.path.exists(_manifest_path(cfg, True)):
        h_arms = list(rp["harmonize_arms"])
        h_ckpts = {}
        for arm in h_arms:
            weights, meta_h = load_checkpoint(
                _require(_ckpt_path(cfg, arm) + ".ckpt.json",
                         f"checkpoint for arm {arm}"))
            h_ckpts[arm] = weights
        study_subjects = []
        for row, mpm in _load_cohort_subjects(cfg, multisite=True):
            seq_meta = read_sidecar_meta(_manifest_path(cfg, True))
            soft = _load_pgs_soft(cfg, row["subject_id"])
            mpm_meta = {}
            from .volumes import read_mvol
            _, mpm_meta = read_mvol(row["mpm_path"])
            sp = mpm_meta.get("site_params", {})
            seq = Mprage(ti_ms=sp.get("ti_ms", 900.0), ptd_ms=sp.get("ptd_ms", 800.0))
            study_subjects.append(analysis.StudySubject(
                mpm=mpm, site_id=row["site_id"], age=float(row["age"]),
                seq=seq, reference=soft))
        study = analysis.run_harmonization_study(
            study_subjects, h_ckpts, seed=cfg["seed"],
            baseline_arm=rp["baseline_arm"])
        trends_path = os.path.join(outdir, "trends.csv")
        study.trends_to_csv(trends_path)
        write_sidecar_meta(trends_path, meta)
        levene_path = os.path.join(outdir, "levene.csv")
        study.levene_to_csv(levene_path)
        write_sidecar_meta(levene_path, meta)
        import csv as _csv
        rmse_path = os.path.join(outdir, "age_rmse.csv")
        with open(rmse_path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["arm", "variant", "mean_rmse", "std_rmse"])
            for (arm, variant), rmses in sorted(study.age_rmse.items()):
                writer.writerow([arm, variant, repr(float(rmses.mean())),
                                 repr(float(rmses.std(ddof=1)))])
        write_sidecar_meta(rmse_path, meta)
        for arm in h_arms:
            analysis.plot_ratio_vs_age(
                study.tables[(arm, "raw")], "wm",
                os.path.join(outdir, f"ratio_vs_age_{arm}.svg"),
                title=f"wm volume ratio vs age ({arm})")
    print(f"report written under {outdir}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config leaf (TOML literal value)")
    common.add_argument("--force", action="store_true",
                        help="proceed despite config-hash mismatches")

    parser = argparse.ArgumentParser(
        prog="physseg",
        description="physics-conditioned MR segmentation pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", parents=[common],
                   help="generate the phantom cohort(s)")

    p = sub.add_parser("simulate", parents=[common],
                       help="simulate one contrast from an MPM")
    _add_seq_args(p)
    p.add_argument("--mpm", required=True, help="MPM path or cohort subject id")
    p.add_argument("-o", "--output", required=True, help="output MVOL base path")

    sub.add_parser("pgs", parents=[common],
                   help="fit tissue mixtures and write reference labels")

    p = sub.add_parser("train", parents=[common], help="train one arm")
    p.add_argument("--arm", help="training mode (default: config arm)")

    p = sub.add_parser("infer", parents=[common], help="segment one MPM")
    _add_seq_args(p)
    p.add_argument("--arm", help="arm whose checkpoint to use")
    p.add_argument("--checkpoint", help="explicit checkpoint path")
    p.add_argument("--mpm", required=True)
    p.add_argument("--mc", type=int, help="Monte Carlo sample count")
    p.add_argument("--dropout", action="store_true", help="sample with dropout")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("calibrate", parents=[common],
                       help="fit the percentile calibration map")
    p.add_argument("--arm", help="arm whose checkpoint to calibrate")

    p = sub.add_parser("sweep", parents=[common],
                       help="uncertainty contour over sequence parameters")
    p.add_argument("--arm")

    p = sub.add_parser("harmonize", parents=[common],
                       help="fit and apply the site-effect model")
    p.add_argument("--features", help="feature table CSV (default: PGS volumetry)")

    p = sub.add_parser("report", parents=[common],
                       help="study tables and figures")
    p.add_argument("--arms", help="comma-separated arm list")
    p.add_argument("--dist", help="comma-separated distribution list (in,ood)")
    return parser


def _add_seq_args(p):
    p.add_argument("--seq", choices=("mprage", "spgr"))
    p.add_argument("--ti", type=float, help="inversion time, ms")
    p.add_argument("--ptd", type=float, help="pseudo delay (TD + tau), ms")
    p.add_argument("--tr", type=float, help="repetition time, ms")
    p.add_argument("--te", type=float, help="echo time, ms")
    p.add_argument("--fa", type=float, help="flip angle, degrees")
    p.add_argument("--gain", type=float, help="scanner gain")


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "pgs": cmd_pgs,
    "train": cmd_train,
    "infer": cmd_infer,
    "calibrate": cmd_calibrate,
    "sweep": cmd_sweep,
    "harmonize": cmd_harmonize,
    "report": cmd_report,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = load_config(args.config, sets=args.set)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
