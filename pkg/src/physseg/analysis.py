"""Experiment drivers: the contribution-ablation (annealing) study over
sequence-parameter sweeps, and the multi-site harmonization study.

Both drivers consume trained checkpoints (or any callable standing in for
a segmenter), emit every intermediate artifact, and are deterministic per
seed. Aggregation mirrors the reporting layout used across the package:
Dice and CoV cells are mean/std over subjects, trend dispersions are
across sites within an age group, and significance between arms uses the
paired signed-rank test (CoV, Dice) and Levene's test (trend spread).
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import svgplot
from .harmonize import (HarmonizeError, age_regression_rmse, apply_combat,
                        cov, dice, feature_table_from_segmentations,
                        fit_combat, fit_site_trends, levene_test,
                        partition_age_groups, trend_dispersion,
                        wilcoxon_signed_rank)
from .model import ModelWeights, predict
from .simulate import pregenerated_params
from .uncertainty import CalibrationMap, iqr_bounds, percentile_volumes
from .volumes import TISSUES, write_hard


class AnalysisError(ValueError):
    pass


def segment_subject(segmenter, mpm, params):
    """Run one segmenter (ModelWeights or a callable) on one acquisition."""
    if isinstance(segmenter, ModelWeights):
        return predict(segmenter, mpm, params)[0]
    if callable(segmenter):
        return segmenter(mpm, params)
    raise AnalysisError(f"cannot segment with {type(segmenter).__name__}")


def realization_params(prange, n, seed):
    """Deterministic evaluation contrasts: equally spaced TIs for MPRAGE,
    seeded random triples for SPGR (shared across arms so comparisons
    pair up)."""
    rng = np.random.default_rng([seed, 313])
    return pregenerated_params(prange, n, rng=rng)


# ---------------------------------------------------------------------------
# Annealing study
# ---------------------------------------------------------------------------

@dataclass
class AnnealingResult:
    rows: list = field(default_factory=list)
    per_subject: dict = field(default_factory=dict)  # (arm, dist, tissue) -> {"dice","cov"}
    sequence: str = "mprage"

    def cell(self, arm, dist, tissue):
        for row in self.rows:
            if (row["arm"], row["distribution"], row["tissue"]) == (arm, dist, tissue):
                return row
        raise KeyError((arm, dist, tissue))

    def wilcoxon(self, arm_a, arm_b, dist, tissue, metric="cov"):
        """Paired signed-rank p-value between two arms on per-subject
        values; all-zero differences report the p = 1 sentinel."""
        a = self.per_subject[(arm_a, dist, tissue)][metric]
        b = self.per_subject[(arm_b, dist, tissue)][metric]
        try:
            _, p = wilcoxon_signed_rank(a, b)
        except HarmonizeError:
            p = 1.0
        return p

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["arm", "sequence", "distribution", "tissue",
                             "mean_dice", "std_dice", "mean_cov_x1e3", "std_cov_x1e3"])
            for row in self.rows:
                writer.writerow([
                    row["arm"], row["sequence"], row["distribution"], row["tissue"],
                    repr(row["mean_dice"]), repr(row["std_dice"]),
                    repr(row["mean_cov"] * 1e3), repr(row["std_cov"] * 1e3),
                ])

    def wilcoxon_to_csv(self, path, arms):
        dists = sorted({row["distribution"] for row in self.rows})
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["arm_a", "arm_b", "distribution", "tissue", "metric", "p"])
            for i, a in enumerate(arms):
                for b in arms[i:]:
                    for dist in dists:
                        for tissue in TISSUES:
                            for metric in ("dice", "cov"):
                                writer.writerow([a, b, dist, tissue, metric,
                                                 repr(self.wilcoxon(a, b, dist, tissue, metric))])


def run_annealing_study(subjects, checkpoints, ranges, n_mprage=11, n_spgr=40,
                        seed=0, persist_dir=None):
    """Dice-vs-reference and volume CoV per arm, tissue and distribution.

    ``subjects`` is a list of (MpmVolume, reference SoftSegmentation);
    ``checkpoints`` maps arm name to ModelWeights or a segmenter callable;
    ``ranges`` maps distribution name ("in", "ood") to a ParamRange. Every
    subject is simulated across the realization contrasts of each range,
    segmented by each arm, and scored against its reference. With
    ``persist_dir`` every predicted hard segmentation is written out, so
    any table cell can be recomputed bit-exactly from disk.
    """
    if not subjects:
        raise AnalysisError("no subjects")
    if not checkpoints:
        raise AnalysisError("no checkpoints")
    if persist_dir is not None:
        os.makedirs(persist_dir, exist_ok=True)
    result = AnnealingResult()
    for dist, prange in ranges.items():
        n = n_mprage if prange.kind == "mprage" else n_spgr
        params_list = realization_params(prange, n, seed)
        result.sequence = prange.kind
        for arm, segmenter in checkpoints.items():
            dice_subj = {t: [] for t in TISSUES}
            cov_subj = {t: [] for t in TISSUES}
            for s_idx, (mpm, reference) in enumerate(subjects):
                ref_hard = reference.harden()
                dices = {t: [] for t in TISSUES}
                vols = {t: [] for t in TISSUES}
                for r_idx, params in enumerate(params_list):
                    pred = segment_subject(segmenter, mpm, params).harden()
                    if persist_dir is not None:
                        sid = mpm.subject_id or f"s{s_idx:03d}"
                        write_hard(pred, os.path.join(
                            persist_dir, f"{arm}_{dist}_{sid}_r{r_idx:03d}"))
                    for t in TISSUES:
                        dices[t].append(dice(pred, ref_hard, t))
                        vols[t].append(pred.volume_ml(t))
                for t in TISSUES:
                    dice_subj[t].append(float(np.mean(dices[t])))
                    v = vols[t]
                    cov_subj[t].append(cov(v) if np.mean(v) > 0 else 1.0)
            for t in TISSUES:
                d = np.array(dice_subj[t])
                c = np.array(cov_subj[t])
                result.per_subject[(arm, dist, t)] = {"dice": d, "cov": c}
                result.rows.append({
                    "arm": arm, "sequence": prange.kind, "distribution": dist,
                    "tissue": t,
                    "mean_dice": float(d.mean()),
                    "std_dice": float(d.std(ddof=1)) if d.size > 1 else 0.0,
                    "mean_cov": float(c.mean()),
                    "std_cov": float(c.std(ddof=1)) if c.size > 1 else 0.0,
                })
    return result


# ---------------------------------------------------------------------------
# Harmonization study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudySubject:
    """One multi-site cohort member with its reference labels."""
    mpm: object
    site_id: str
    age: float
    seq: object
    reference: object  # SoftSegmentation used as the segmentation reference


@dataclass
class HarmonizationStudyResult:
    trend_rows: list = field(default_factory=list)
    age_rmse: dict = field(default_factory=dict)      # (arm, variant) -> array
    dice_per_tissue: dict = field(default_factory=dict)  # arm -> {tissue: array}
    levene_p: dict = field(default_factory=dict)      # (arm, group, tissue, qty) -> p
    tables: dict = field(default_factory=dict)        # (arm, variant) -> FeatureTable
    groups: dict = field(default_factory=dict)

    def dispersion(self, arm, variant, group, tissue):
        for row in self.trend_rows:
            key = (row["arm"], row["variant"], row["group"], row["tissue"])
            if key == (arm, variant, group, tissue):
                return row
        raise KeyError((arm, variant, group, tissue))

    def trends_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["arm", "variant", "group", "tissue",
                             "mean_b", "std_b", "mean_m_x1e3", "std_m_x1e3"])
            for row in self.trend_rows:
                writer.writerow([
                    row["arm"], row["variant"], row["group"], row["tissue"],
                    repr(row["mean_b"]), repr(row["std_b"]),
                    repr(row["mean_m"] * 1e3), repr(row["std_m"] * 1e3),
                ])

    def levene_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["arm", "group", "tissue", "quantity", "p"])
            for (arm, group, tissue, qty), p in sorted(self.levene_p.items()):
                writer.writerow([arm, group, tissue, qty, repr(p)])


def _group_trends(table, groups, tissue):
    out = {}
    for group in ("young", "old"):
        sites = groups[group]
        if len(sites) >= 2:
            out[group] = fit_site_trends(table, tissue, sites=sites)
    return out


def run_harmonization_study(subjects, checkpoints, seed=0,
                            baseline_arm="cnn_baseline", age_seed=1234):
    """Segment a multi-site cohort per arm and score harmonization quality.

    Per arm: tissue-volume-ratio features per subject acquired with its
    site's sequence parameters, per-group per-tissue site trends and their
    dispersion, the same after removing fitted site effects ("combat"
    variant), holdout age-regression RMSE, Dice against each subject's
    reference labels, and Levene p-values of trend spread against
    ``baseline_arm``.
    """
    sites = {s.site_id for s in subjects}
    if not subjects:
        raise AnalysisError("no subjects")
    result = HarmonizationStudyResult()
    per_arm_group_trends = {}

    for arm, segmenter in checkpoints.items():
        entries = []
        dices = {t: [] for t in TISSUES}
        for idx, subj in enumerate(subjects):
            pred = segment_subject(segmenter, subj.mpm, subj.seq).harden()
            ref_hard = subj.reference.harden()
            for t in TISSUES:
                dices[t].append(dice(pred, ref_hard, t))
            entries.append((subj.mpm.subject_id or f"s{idx:03d}",
                            subj.site_id, subj.age, pred))
        result.dice_per_tissue[arm] = {t: np.array(v) for t, v in dices.items()}
        table = feature_table_from_segmentations(entries, ratios=True)
        groups = partition_age_groups(table)
        result.groups = groups

        variants = {"raw": table}
        if len(sites) >= 2:
            model = fit_combat(table)
            variants["combat"] = apply_combat(model, table)
        for variant, vtable in variants.items():
            result.tables[(arm, variant)] = vtable
            for tissue in TISSUES:
                trends = _group_trends(vtable, groups, tissue)
                if variant == "raw":
                    per_arm_group_trends.setdefault(arm, {})[tissue] = trends
                for group, tr in trends.items():
                    mean_b, std_b, mean_m, std_m = trend_dispersion(tr)
                    result.trend_rows.append({
                        "arm": arm, "variant": variant, "group": group,
                        "tissue": tissue, "mean_b": mean_b, "std_b": std_b,
                        "mean_m": mean_m, "std_m": std_m,
                    })
            if vtable.n >= 20:
                try:
                    result.age_rmse[(arm, variant)] = age_regression_rmse(
                        vtable, seed=age_seed)
                except HarmonizeError:
                    # a degenerate arm (a tissue never predicted) has no
                    # usable age model; the table is still reported
                    pass

    if baseline_arm in per_arm_group_trends:
        base = per_arm_group_trends[baseline_arm]
        for arm, tissues in per_arm_group_trends.items():
            if arm == baseline_arm:
                continue
            for tissue, trends in tissues.items():
                for group, tr in trends.items():
                    if group not in base.get(tissue, {}):
                        continue
                    base_tr = base[tissue][group]
                    for qty, pick in (("b", 0), ("m", 1)):
                        a_vals = [v[pick] for v in tr.values()]
                        b_vals = [v[pick] for v in base_tr.values()]
                        try:
                            _, p = levene_test(a_vals, b_vals)
                        except HarmonizeError:
                            p = 1.0
                        result.levene_p[(arm, group, tissue, qty)] = p
    return result


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def plot_ratio_vs_age(table, tissue, path, title=""):
    """Scatter of a tissue's volume ratio against age with per-site trend
    lines extrapolated across the full age range."""
    trends = fit_site_trends(table, tissue)
    ages = table.ages
    y = table.feature(tissue)
    pad = 0.05 * (y.max() - y.min() + 1e-9)
    fig = svgplot.SvgFigure(
        (float(ages.min()), float(ages.max())),
        (float(y.min() - pad), float(y.max() + pad)),
        xlabel="age (years)", ylabel=f"{tissue} volume ratio", title=title,
    )
    for si, site in enumerate(table.sites()):
        rows = table.site_rows(site)
        color = svgplot.color_for(si)
        fig.scatter(ages[rows], y[rows], color=color)
        b, m = trends[site]
        xs = np.array([ages.min(), ages.max()])
        fig.polyline(xs, b + m * xs, color=color, width=1.0)
        fig.label(ages.min() + 1, b + m * (ages.min() + 1), site, color=color, size=8)
    fig.save(path)


def plot_volume_vs_ti(weights, mpm, reference, tissue, tis, ptd_ms, path,
                      k_samples=50, cal_map=None, seed=0, title=""):
    """Predicted volume against inversion time with calibrated IQR bands
    and the reference volume as a dashed line."""
    from .simulate import Mprage
    cal_map = cal_map or CalibrationMap.identity()
    ref_vol = reference.harden().volume_ml(tissue)
    los, mids, his = [], [], []
    for k, ti in enumerate(tis):
        params = Mprage(ti_ms=float(ti), ptd_ms=float(ptd_ms))
        rng = np.random.default_rng([seed, k])
        samples = predict(weights, mpm, params, n_samples=k_samples,
                          dropout=True, rng=rng)
        curve = percentile_volumes(samples, tissue)
        lo, mid, hi = iqr_bounds(curve, cal_map)
        los.append(lo)
        mids.append(mid)
        his.append(hi)
    ymin = min(min(los), ref_vol)
    ymax = max(max(his), ref_vol)
    pad = 0.05 * (ymax - ymin + 1e-9)
    fig = svgplot.SvgFigure((float(min(tis)), float(max(tis))),
                            (ymin - pad, ymax + pad),
                            xlabel="TI (ms)", ylabel=f"{tissue} volume (ml)",
                            title=title)
    fig.band(tis, los, his)
    fig.polyline(tis, mids)
    fig.polyline([min(tis), max(tis)], [ref_vol, ref_vol], color="#555", dash="4,3")
    fig.save(path)
