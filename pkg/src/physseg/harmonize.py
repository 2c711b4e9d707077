"""Multi-site harmonization of tissue-volume features and the evaluation
statistics used throughout the studies.

The harmonization model is linear per feature v:

    y_ijv = alpha_v + X_ij beta_v + gamma_iv + delta_iv * eps_ijv

with additive (gamma) and multiplicative (delta) site effects around a
pooled covariate fit; harmonized values are

    y_harm = (y - alpha - X beta - gamma_i) / delta_i + alpha + X beta.

Estimation here is method-of-moments: pooled least squares for
(alpha, beta), site residual means for gamma, and site-vs-pooled residual
standard deviation ratios for delta. Empirical-Bayes shrinkage across
features is deliberately not applied (with three volume features there is
nothing to shrink across).

The statistics (Levene, signed-rank Wilcoxon, Dice, CoV, trend fits) are
implemented directly so they can be validated against independent
reference implementations in the tests.
"""

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .volumes import TISSUES


class HarmonizeError(ValueError):
    pass


FEATURES = TISSUES  # feature order in tables: gm follows csf, then wm


# ---------------------------------------------------------------------------
# Feature tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureTable:
    """Per-subject feature rows: ids, site, age, and one column per tissue.

    ``features`` has shape (n_subjects, n_features) with columns in
    TISSUES order; values are tissue volumes (ml) or volume ratios.
    """

    subject_ids: tuple
    site_ids: tuple
    ages: np.ndarray
    features: np.ndarray
    is_ratio: bool = True

    def __post_init__(self):
        n = len(self.subject_ids)
        ages = np.asarray(self.ages, dtype=np.float64)
        feats = np.asarray(self.features, dtype=np.float64)
        if len(self.site_ids) != n or ages.shape != (n,):
            raise HarmonizeError("table columns disagree in length")
        if feats.shape != (n, len(FEATURES)):
            raise HarmonizeError(
                f"features must be (n, {len(FEATURES)}), got {feats.shape}")
        if not np.isfinite(feats).all():
            raise HarmonizeError("features contain missing or non-finite values")
        if self.is_ratio and (feats.min() < 0 or feats.max() > 1):
            raise HarmonizeError("volume ratios must lie in [0, 1]")
        ages.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "features", feats)

    @property
    def n(self):
        return len(self.subject_ids)

    def sites(self):
        seen = []
        for s in self.site_ids:
            if s not in seen:
                seen.append(s)
        return seen

    def site_rows(self, site_id):
        return np.array([i for i, s in enumerate(self.site_ids) if s == site_id])

    def covariates(self):
        """Covariate design matrix (age only by default)."""
        return self.ages[:, None].copy()

    def feature(self, tissue):
        return self.features[:, FEATURES.index(tissue)].copy()

    def with_features(self, feats):
        return FeatureTable(self.subject_ids, self.site_ids, self.ages,
                            feats, is_ratio=self.is_ratio)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", "site_id", "age"] + list(FEATURES))
            for i in range(self.n):
                writer.writerow(
                    [self.subject_ids[i], self.site_ids[i], repr(float(self.ages[i]))]
                    + [repr(float(v)) for v in self.features[i]]
                )

    @classmethod
    def from_csv(cls, path, is_ratio=True):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            subject_ids, site_ids, ages, feats = [], [], [], []
            for row in reader:
                subject_ids.append(row["subject_id"])
                site_ids.append(row["site_id"])
                ages.append(float(row["age"]))
                feats.append([float(row[f]) for f in FEATURES])
        return cls(tuple(subject_ids), tuple(site_ids), np.array(ages),
                   np.array(feats), is_ratio=is_ratio)


def feature_table_from_segmentations(entries, ratios=True):
    """Build a FeatureTable from (subject_id, site_id, age, HardSegmentation).

    With ``ratios`` the features are tissue volume over total intracranial
    (all-tissue) volume, otherwise absolute ml.
    """
    subject_ids, site_ids, ages, rows = [], [], [], []
    for subject_id, site_id, age, seg in entries:
        vols = np.array([seg.volume_ml(t) for t in TISSUES])
        total = vols.sum()
        if ratios:
            if total <= 0:
                raise HarmonizeError(f"subject {subject_id} has an empty segmentation")
            rows.append(vols / total)
        else:
            rows.append(vols)
        subject_ids.append(subject_id)
        site_ids.append(site_id)
        ages.append(age)
    return FeatureTable(tuple(subject_ids), tuple(site_ids), np.array(ages),
                        np.array(rows), is_ratio=ratios)


# ---------------------------------------------------------------------------
# ComBat-style model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CombatModel:
    alpha: np.ndarray        # (F,) grand means
    beta: np.ndarray         # (P, F) covariate coefficients
    gamma: dict              # site -> (F,) additive effects
    delta: dict              # site -> (F,) multiplicative effects, > 0
    residual_scale: np.ndarray  # (F,) pooled residual std

    def to_json(self, path):
        payload = {
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "gamma": {k: v.tolist() for k, v in self.gamma.items()},
            "delta": {k: v.tolist() for k, v in self.delta.items()},
            "residual_scale": self.residual_scale.tolist(),
            "features": list(FEATURES),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            alpha=np.array(payload["alpha"]),
            beta=np.array(payload["beta"]),
            gamma={k: np.array(v) for k, v in payload["gamma"].items()},
            delta={k: np.array(v) for k, v in payload["delta"].items()},
            residual_scale=np.array(payload["residual_scale"]),
        )


def _pooled_fit(table):
    """Least squares y = alpha + X beta per feature; returns alpha, beta,
    fitted covariate part and residuals."""
    X = table.covariates()
    design = np.concatenate([np.ones((table.n, 1)), X], axis=1)
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise HarmonizeError("rank-deficient covariate design")
    coef, *_ = np.linalg.lstsq(design, table.features, rcond=None)
    alpha = coef[0]
    beta = coef[1:]
    fitted_cov = X @ beta
    resid = table.features - alpha - fitted_cov
    return alpha, beta, fitted_cov, resid


def fit_combat(table, min_site_subjects=3):
    """Fit site effects; single-site tables yield gamma 0, delta 1.

    Each site needs at least ``min_site_subjects`` subjects. The
    subject-count-weighted mean of gamma over sites is zero by
    construction (pooled residuals average to zero).
    """
    sites = table.sites()
    if len(sites) > 1:
        for s in sites:
            if table.site_rows(s).size < min_site_subjects:
                raise HarmonizeError(
                    f"site {s} has fewer than {min_site_subjects} subjects")
    alpha, beta, _, resid = _pooled_fit(table)

    gamma = {}
    centered = np.empty_like(resid)
    for s in sites:
        rows = table.site_rows(s)
        gamma[s] = resid[rows].mean(axis=0)
        centered[rows] = resid[rows] - gamma[s]
    pooled_std = np.sqrt((centered ** 2).mean(axis=0))
    pooled_std[pooled_std == 0] = 1.0

    delta = {}
    for s in sites:
        rows = table.site_rows(s)
        site_std = np.sqrt((centered[rows] ** 2).mean(axis=0))
        d = site_std / pooled_std
        d[d <= 0] = 1.0  # a site with zero spread keeps its values
        delta[s] = d
    return CombatModel(alpha=alpha, beta=beta, gamma=gamma, delta=delta,
                       residual_scale=pooled_std)


def apply_combat(model, table):
    """Remove the fitted site effects while re-adding the covariate part."""
    X = table.covariates()
    fitted_cov = X @ model.beta
    out = np.empty_like(table.features)
    for i in range(table.n):
        s = table.site_ids[i]
        if s not in model.gamma:
            raise HarmonizeError(f"unknown site_id {s!r} in table")
        eps = table.features[i] - model.alpha - fitted_cov[i] - model.gamma[s]
        out[i] = eps / model.delta[s] + model.alpha + fitted_cov[i]
    harmonized = table.with_features(np.clip(out, 0.0, 1.0) if table.is_ratio else out)
    return harmonized


# ---------------------------------------------------------------------------
# Trends and age grouping
# ---------------------------------------------------------------------------

def fit_site_trends(table, tissue, sites=None):
    """Per-site ordinary least squares of feature vs age.

    Returns {site: (intercept b, slope m per year)}.
    """
    sites = sites if sites is not None else table.sites()
    y_all = table.feature(tissue)
    out = {}
    for s in sites:
        rows = table.site_rows(s)
        if rows.size == 0:
            raise HarmonizeError(f"site {s!r} not present in table")
        ages = table.ages[rows]
        if np.unique(ages).size < 2:
            raise HarmonizeError(f"site {s} has a constant age, trend undefined")
        A = np.stack([np.ones(rows.size), ages], axis=1)
        coef, *_ = np.linalg.lstsq(A, y_all[rows], rcond=None)
        out[s] = (float(coef[0]), float(coef[1]))
    return out


def partition_age_groups(table, young_max=16.0, old_min=22.0):
    """Split sites by mean age: young below ``young_max``, old above
    ``old_min``, anything in between excluded."""
    if table.n == 0:
        raise HarmonizeError("empty table")
    groups = {"young": [], "old": [], "excluded": []}
    for s in table.sites():
        mean_age = float(table.ages[table.site_rows(s)].mean())
        if mean_age < young_max:
            groups["young"].append(s)
        elif mean_age > old_min:
            groups["old"].append(s)
        else:
            groups["excluded"].append(s)
    return groups


def trend_dispersion(trends):
    """Mean and sample std of intercepts and slopes across sites."""
    if len(trends) < 2:
        raise HarmonizeError("trend dispersion needs at least 2 sites")
    b = np.array([v[0] for v in trends.values()])
    m = np.array([v[1] for v in trends.values()])
    return (float(b.mean()), float(b.std(ddof=1)),
            float(m.mean()), float(m.std(ddof=1)))


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def _rank_average_ties(x):
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    ranks[order] = np.arange(1, x.size + 1)
    # average the ranks within tied groups
    vals, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.zeros(vals.size)
    np.add.at(sums, inv, ranks)
    return sums[inv] / counts[inv], counts


def levene_test(sample_a, sample_b, center="mean"):
    """Two-sample Levene test on spread (one-way ANOVA on absolute
    deviations from the sample centre).

    ``center`` is "mean" for the classical test or "median" for the
    Brown-Forsythe variant. Returns (W statistic, p-value from the F
    distribution with (1, N-2) dof).
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise HarmonizeError("each sample needs at least 2 values")
    centre = np.median if center == "median" else np.mean
    za = np.abs(a - centre(a))
    zb = np.abs(b - centre(b))
    n_a, n_b = za.size, zb.size
    N = n_a + n_b
    zbar = (za.sum() + zb.sum()) / N
    between = n_a * (za.mean() - zbar) ** 2 + n_b * (zb.mean() - zbar) ** 2
    within = ((za - za.mean()) ** 2).sum() + ((zb - zb.mean()) ** 2).sum()
    if within == 0:
        if between == 0:
            return 0.0, 1.0
        raise HarmonizeError("degenerate samples: no within-group spread")
    W = (N - 2) * between / within
    p = float(special.fdtrc(1.0, N - 2.0, W))
    return float(W), p


def wilcoxon_signed_rank(sample_a, sample_b):
    """Two-sided paired signed-rank test via the tie-corrected normal
    approximation (zero differences dropped, no continuity correction).

    Returns (statistic, p). The statistic is the smaller of the positive
    and negative rank sums. Fewer than 6 non-zero differences is refused
    because the normal approximation is meaningless there.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.shape != b.shape:
        raise HarmonizeError("paired samples must have equal length")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        raise HarmonizeError("all paired differences are zero")
    if d.size < 6:
        raise HarmonizeError(
            f"only {d.size} non-zero differences; need >= 6 for the normal approximation")
    ranks, counts = _rank_average_ties(np.abs(d))
    r_plus = ranks[d > 0].sum()
    r_minus = ranks[d < 0].sum()
    stat = min(r_plus, r_minus)
    n = d.size
    mn = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    var -= (counts.astype(np.float64) ** 3 - counts).sum() / 48.0
    if var <= 0:
        raise HarmonizeError("degenerate variance in signed-rank test")
    z = (stat - mn) / math.sqrt(var)
    p = float(min(1.0, special.erfc(abs(z) / math.sqrt(2.0))))
    return float(stat), p


def dice(a, b, tissue):
    """Dice overlap of one tissue between two hard segmentations; defined
    as 1 when the tissue is empty in both."""
    if a.labels.dims != b.labels.dims:
        raise HarmonizeError("segmentations must share dims")
    ma = a.tissue_mask(tissue)
    mb = b.tissue_mask(tissue)
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / denom


def cov(volumes):
    """Coefficient of variation: sample std over mean."""
    v = np.asarray(volumes, dtype=np.float64)
    if v.size < 2:
        raise HarmonizeError("CoV needs at least 2 volumes")
    mean = v.mean()
    if mean <= 0:
        raise HarmonizeError("CoV undefined for non-positive mean volume")
    return float(v.std(ddof=1) / mean)


def age_regression_rmse(table, train_fraction=0.8, seed=0, repeats=50):
    """Holdout RMSE distribution of a linear age-from-volumes model.

    Each repeat draws a random train/test split, fits OLS age ~ tissue
    features on the training rows, and records the test RMSE. Ratio
    features sum to one, so their span already contains the constant and
    an explicit intercept would make the design singular; absolute-volume
    tables get an intercept column. Deterministic per seed.
    """
    if table.n < 20:
        raise HarmonizeError("age regression needs at least 20 subjects")
    rng = np.random.default_rng(seed)
    if table.is_ratio:
        design = table.features.copy()
    else:
        design = np.concatenate([np.ones((table.n, 1)), table.features], axis=1)
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise HarmonizeError("singular design: features are collinear")
    n_train = max(2, int(round(train_fraction * table.n)))
    n_train = min(n_train, table.n - 1)
    rmses = np.empty(repeats)
    for r in range(repeats):
        perm = rng.permutation(table.n)
        tr, te = perm[:n_train], perm[n_train:]
        coef, *_ = np.linalg.lstsq(design[tr], table.ages[tr], rcond=None)
        err = design[te] @ coef - table.ages[te]
        rmses[r] = math.sqrt(float((err ** 2).mean()))
    return rmses
