import math

import numpy as np
import pytest
import scipy.stats

from physseg.harmonize import (CombatModel, FeatureTable, HarmonizeError,
                               age_regression_rmse, apply_combat, cov, dice,
                               feature_table_from_segmentations, fit_combat,
                               fit_site_trends, levene_test,
                               partition_age_groups, trend_dispersion,
                               wilcoxon_signed_rank)
from physseg.volumes import Grid3, HardSegmentation


def make_table(site_ids, ages, features, is_ratio=True):
    n = len(site_ids)
    return FeatureTable(
        subject_ids=tuple(f"s{i:03d}" for i in range(n)),
        site_ids=tuple(site_ids),
        ages=np.asarray(ages, dtype=float),
        features=np.asarray(features, dtype=float),
        is_ratio=is_ratio,
    )


def synthetic_two_site(n_per_site=200, offset=0.02, delta_ratio=1.0,
                       noise=1e-4, seed=0, slope=0.001, exact=True):
    """Construct-and-recover oracle: y = 0.5 + slope*age + site offset +
    site-scaled noise, balanced over two sites.

    With ``exact`` the injected noise is re-standardized per site and
    feature, so the injected mean offset and std ratio hold exactly and
    the test checks the estimator's algebra rather than sampling noise.
    """
    rng = np.random.default_rng(seed)
    site_ids, ages, rows = [], [], []
    for site, off, scale in (("A", 0.0, 1.0), ("B", offset, delta_ratio)):
        age = rng.uniform(8.0, 40.0, size=n_per_site)
        eps = rng.normal(0.0, 1.0, size=(n_per_site, 3))
        if exact:
            eps = (eps - eps.mean(axis=0)) / eps.std(axis=0)
        feats = (0.5 + slope * age + off)[:, None] + scale * noise * eps
        site_ids.extend([site] * n_per_site)
        ages.extend(age.tolist())
        rows.extend(feats.tolist())
    return make_table(site_ids, ages, rows)


# ---------------------------------------------------------------------------
# ComBat
# ---------------------------------------------------------------------------

def test_single_site_identity():
    table = synthetic_two_site(n_per_site=50)
    single = make_table(["A"] * table.n, table.ages, table.features)
    model = fit_combat(single)
    assert np.allclose(model.gamma["A"], 0.0, atol=1e-12)
    assert np.allclose(model.delta["A"], 1.0, atol=1e-12)
    out = apply_combat(model, single)
    assert np.allclose(out.features, single.features, atol=1e-12)


def test_combat_recovers_offset():
    table = synthetic_two_site(offset=0.02)
    model = fit_combat(table)
    diff = model.gamma["B"] - model.gamma["A"]
    assert np.allclose(diff, 0.02, rtol=0.05)


def test_combat_recovers_scale():
    table = synthetic_two_site(offset=0.0, delta_ratio=2.0)
    model = fit_combat(table)
    ratio = model.delta["B"] / model.delta["A"]
    assert np.allclose(ratio, 2.0, rtol=0.05)


def test_combat_weighted_gamma_mean_zero():
    table = synthetic_two_site(offset=0.03, n_per_site=120)
    model = fit_combat(table)
    n_a = table.site_rows("A").size
    n_b = table.site_rows("B").size
    weighted = (n_a * model.gamma["A"] + n_b * model.gamma["B"]) / (n_a + n_b)
    assert np.abs(weighted).max() < 1e-10


def test_apply_combat_removes_site_means():
    table = synthetic_two_site(offset=0.02, delta_ratio=2.0)
    model = fit_combat(table)
    out = apply_combat(model, table)
    X = out.covariates()
    resid = out.features - model.alpha - X @ model.beta
    gap = np.abs(resid[out.site_rows("A")].mean(axis=0)
                 - resid[out.site_rows("B")].mean(axis=0))
    assert gap.max() < 1e-3


def test_apply_combat_preserves_age_slope():
    slope = 0.001
    table = synthetic_two_site(offset=0.02, slope=slope)
    model = fit_combat(table)
    out = apply_combat(model, table)
    # pooled OLS slope on harmonized features
    A = np.stack([np.ones(out.n), out.ages], axis=1)
    coef, *_ = np.linalg.lstsq(A, out.features[:, 0], rcond=None)
    assert coef[1] == pytest.approx(slope, rel=0.05)


def test_apply_combat_unknown_site():
    table = synthetic_two_site(n_per_site=30)
    model = fit_combat(table)
    other = make_table(["C"] * 4, [10, 20, 30, 40], np.full((4, 3), 0.5))
    with pytest.raises(HarmonizeError, match="unknown site"):
        apply_combat(model, other)


def test_combat_reduces_site_dispersion():
    table = synthetic_two_site(offset=0.05)
    model = fit_combat(table)
    out = apply_combat(model, table)

    def site_mean_std(t):
        means = [t.features[t.site_rows(s)].mean(axis=0) for s in t.sites()]
        return np.std(np.stack(means), axis=0)

    assert np.all(site_mean_std(out) < site_mean_std(table))


def test_combat_requires_site_size():
    table = make_table(["A", "A", "A", "B"], [10, 20, 30, 40],
                       np.full((4, 3), 0.5) + np.eye(4, 3) * 0.01)
    with pytest.raises(HarmonizeError, match="fewer than"):
        fit_combat(table)


def test_combat_no_site_effect_near_identity():
    table = synthetic_two_site(offset=0.0, delta_ratio=1.0, noise=5e-4)
    model = fit_combat(table)
    out = apply_combat(model, table)
    # changes stay within 3 pooled standard errors of a site mean
    for s in table.sites():
        rows = table.site_rows(s)
        se = table.features[rows].std(axis=0, ddof=1) / math.sqrt(rows.size)
        shift = np.abs(out.features[rows].mean(axis=0)
                       - table.features[rows].mean(axis=0))
        assert np.all(shift < 3 * se)


def test_combat_json_roundtrip(tmp_path):
    model = fit_combat(synthetic_two_site(n_per_site=40))
    model.to_json(tmp_path / "c.json")
    back = CombatModel.from_json(tmp_path / "c.json")
    assert np.allclose(back.alpha, model.alpha)
    assert np.allclose(back.gamma["B"], model.gamma["B"])
    assert np.allclose(back.delta["B"], model.delta["B"])


# ---------------------------------------------------------------------------
# Trends and grouping
# ---------------------------------------------------------------------------

def test_trend_exact_line():
    ages = np.array([10.0, 20.0, 30.0, 40.0, 55.0])
    y = 0.5 - 0.003 * ages
    feats = np.stack([y, y, y], axis=1)
    table = make_table(["A"] * 5, ages, feats)
    b, m = fit_site_trends(table, "gm")["A"]
    assert b == pytest.approx(0.5, abs=1e-12)
    assert m == pytest.approx(-0.003, abs=1e-12)


def test_trend_symmetric_noise_unchanged():
    ages = np.array([10.0, 20.0, 30.0, 10.0, 20.0, 30.0])
    y = 0.4 + 0.002 * ages
    eps = np.array([0.01, -0.02, 0.03, -0.01, 0.02, -0.03])
    feats = np.stack([y + eps] * 3, axis=1)
    table = make_table(["A"] * 6, ages, feats)
    b, m = fit_site_trends(table, "gm")["A"]
    assert b == pytest.approx(0.4, abs=1e-9)
    assert m == pytest.approx(0.002, abs=1e-9)


def test_trend_constant_age_rejected():
    table = make_table(["A", "A"], [30.0, 30.0], np.full((2, 3), 0.5))
    with pytest.raises(HarmonizeError, match="constant age"):
        fit_site_trends(table, "gm")


def test_partition_thresholds():
    sites = ["young1"] * 3 + ["mid"] * 3 + ["old1"] * 3
    ages = [15.8, 15.9, 16.0,  18.0, 19.0, 20.0,  22.0, 22.2, 22.3]
    table = make_table(sites, ages, np.full((9, 3), 0.4))
    groups = partition_age_groups(table)
    assert groups["young"] == ["young1"]   # mean 15.9
    assert groups["excluded"] == ["mid"]   # mean 19
    assert groups["old"] == ["old1"]       # mean 22.17


def test_trend_dispersion_hand_case():
    trends = {"A": (0.4, 1.0), "B": (0.6, 3.0)}
    mean_b, std_b, mean_m, std_m = trend_dispersion(trends)
    assert mean_b == pytest.approx(0.5)
    assert std_b == pytest.approx(math.sqrt(0.02), rel=1e-9)  # 0.1414
    assert mean_m == pytest.approx(2.0)
    assert std_m == pytest.approx(math.sqrt(2.0), rel=1e-9)


def test_trend_dispersion_identical_sites_zero_std():
    trends = {"A": (0.4, 1.0), "B": (0.4, 1.0), "C": (0.4, 1.0)}
    _, std_b, _, std_m = trend_dispersion(trends)
    assert std_b == pytest.approx(0.0, abs=1e-12)
    assert std_m == pytest.approx(0.0, abs=1e-12)


def test_trend_dispersion_order_invariant():
    a = trend_dispersion({"A": (0.1, 1.0), "B": (0.5, 2.0), "C": (0.3, 0.5)})
    b = trend_dispersion({"C": (0.3, 0.5), "A": (0.1, 1.0), "B": (0.5, 2.0)})
    assert a == b


# ---------------------------------------------------------------------------
# Statistics against reference implementations
# ---------------------------------------------------------------------------

LEVENE_CASES = [
    ([1.0, 2, 3, 4, 5], [-4.0, -2, 0, 2, 4]),
    ([2.1, 2.2, 1.9, 2.0, 2.05, 2.15], [1.0, 3.0, 2.0, 0.5, 3.5, 2.5]),
    ([10.0, 11, 12, 13], [10.0, 14, 8, 16, 12]),
    ([0.5, 0.51, 0.49, 0.52, 0.48, 0.5, 0.53], [0.4, 0.6, 0.5, 0.45, 0.55]),
]


@pytest.mark.parametrize("a,b", LEVENE_CASES)
def test_levene_matches_reference(a, b):
    W, p = levene_test(a, b, center="mean")
    W_ref, p_ref = scipy.stats.levene(a, b, center="mean")
    assert W == pytest.approx(W_ref, abs=1e-6)
    assert p == pytest.approx(p_ref, abs=1e-6)


@pytest.mark.parametrize("a,b", LEVENE_CASES[:2])
def test_levene_median_variant_matches_reference(a, b):
    W, p = levene_test(a, b, center="median")
    W_ref, p_ref = scipy.stats.levene(a, b, center="median")
    assert W == pytest.approx(W_ref, abs=1e-6)
    assert p == pytest.approx(p_ref, abs=1e-6)


def test_levene_identical_samples():
    W, p = levene_test([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
    assert W == 0.0 and p == 1.0


def test_levene_scale_equivariant():
    a = [1.0, 2, 3, 4, 5]
    b = [-4.0, -2, 0, 2, 4]
    W1, _ = levene_test(a, b)
    W2, _ = levene_test([7 * x for x in a], [7 * x for x in b])
    assert W1 == pytest.approx(W2, rel=1e-12)


def test_levene_needs_two_per_sample():
    with pytest.raises(HarmonizeError):
        levene_test([1.0], [1.0, 2.0])


WILCOXON_CASES = [
    ([125.0, 115, 130, 140, 140, 115, 140, 125, 140, 135],
     [110.0, 122, 125, 120, 140, 124, 123, 137, 135, 145]),
    ([1.5, 2.4, 3.3, 4.1, 5.8, 6.2, 7.9, 8.3], [1.0, 2.0, 3.0, 5.0, 5.0, 7.0, 7.0, 9.0]),
    ([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], [0.15, 0.1, 0.4, 0.3, 0.55, 0.5, 0.8]),
]


@pytest.mark.parametrize("a,b", WILCOXON_CASES)
def test_wilcoxon_matches_reference(a, b):
    stat, p = wilcoxon_signed_rank(a, b)
    ref = scipy.stats.wilcoxon(a, b, zero_method="wilcox", correction=False,
                               alternative="two-sided", method="approx")
    assert stat == pytest.approx(ref.statistic, abs=1e-6)
    assert p == pytest.approx(ref.pvalue, abs=1e-6)


def test_wilcoxon_all_zero_differences():
    a = [1.0] * 8
    with pytest.raises(HarmonizeError, match="zero"):
        wilcoxon_signed_rank(a, a)


def test_wilcoxon_too_few_pairs():
    with pytest.raises(HarmonizeError, match=">= 6"):
        wilcoxon_signed_rank([1.0, 2, 3, 4, 5], [2.0, 3, 4, 5, 6])


def test_wilcoxon_symmetric_two_sided():
    a, b = WILCOXON_CASES[0]
    _, p_ab = wilcoxon_signed_rank(a, b)
    _, p_ba = wilcoxon_signed_rank(b, a)
    assert p_ab == pytest.approx(p_ba, rel=1e-12)


# ---------------------------------------------------------------------------
# Dice / CoV
# ---------------------------------------------------------------------------

def _seg_from_labels(labels):
    return HardSegmentation(Grid3(labels.shape, (1, 1, 1),
                                  labels.astype(np.float32)))


def test_dice_cases():
    base = np.zeros((10, 10, 1))
    a = base.copy()
    a[:5, :, :] = 2  # 50 gm voxels
    b = base.copy()
    b[2:7, :, :] = 2  # 50 gm voxels, overlap rows 2..4 = 30 voxels
    sa, sb = _seg_from_labels(a), _seg_from_labels(b)
    assert dice(sa, sa, "gm") == 1.0
    assert dice(sa, sb, "gm") == pytest.approx(2 * 30 / (50 + 50))
    disjoint = base.copy()
    disjoint[7:, :, :] = 2
    assert dice(sa, _seg_from_labels(disjoint), "gm") == 0.0
    assert dice(sa, sb, "wm") == 1.0  # empty in both


def test_dice_exact_half():
    # |A| = |B| = 100 csf voxels with overlap 50 gives dice 0.5
    a = np.zeros((10, 10, 2))
    b = np.zeros((10, 10, 2))
    a[:5, :, :] = 1
    b[:5, :, 0] = 1
    b[5:, :, 0] = 1
    W = dice(_seg_from_labels(a), _seg_from_labels(b), "csf")
    assert W == pytest.approx(2 * 50 / (100 + 100))


def test_dice_dim_mismatch():
    a = _seg_from_labels(np.zeros((4, 4, 4)))
    b = _seg_from_labels(np.zeros((4, 4, 5)))
    with pytest.raises(HarmonizeError):
        dice(a, b, "gm")


def test_cov_cases():
    assert cov([5.0, 5.0, 5.0]) == 0.0
    assert cov([90.0, 110.0]) == pytest.approx(math.sqrt(200.0) / 100.0)
    assert cov([3.0, 4.0, 5.0]) == pytest.approx(cov([6.0, 8.0, 10.0]), rel=1e-12)
    with pytest.raises(HarmonizeError):
        cov([5.0])
    with pytest.raises(HarmonizeError):
        cov([1.0, -1.0])


# ---------------------------------------------------------------------------
# Age regression
# ---------------------------------------------------------------------------

def test_age_regression_exact_linear():
    rng = np.random.default_rng(4)
    n = 60
    feats = rng.uniform(0.2, 0.6, size=(n, 3))
    ages = 5.0 + 30.0 * feats[:, 0] + 10.0 * feats[:, 1] - 8.0 * feats[:, 2]
    table = make_table(["A"] * n, ages, feats, is_ratio=False)
    rmses = age_regression_rmse(table, seed=1, repeats=20)
    assert rmses.max() < 1e-9


def test_age_regression_permutation_null():
    rng = np.random.default_rng(9)
    n = 400
    feats = rng.uniform(0.2, 0.6, size=(n, 3))
    ages = rng.uniform(10.0, 60.0, size=n)  # independent of features
    table = make_table(["A"] * n, ages, feats, is_ratio=False)
    rmses = age_regression_rmse(table, seed=2, repeats=40)
    assert rmses.mean() == pytest.approx(ages.std(), rel=0.10)


def test_age_regression_deterministic():
    table = synthetic_two_site(n_per_site=30)
    a = age_regression_rmse(table, seed=3, repeats=10)
    b = age_regression_rmse(table, seed=3, repeats=10)
    assert np.array_equal(a, b)


def test_age_regression_needs_subjects():
    table = make_table(["A"] * 10, range(10), np.full((10, 3), 0.5))
    with pytest.raises(HarmonizeError, match="20"):
        age_regression_rmse(table)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def test_feature_table_csv_roundtrip(tmp_path):
    table = synthetic_two_site(n_per_site=10)
    table.to_csv(tmp_path / "t.csv")
    back = FeatureTable.from_csv(tmp_path / "t.csv")
    assert back.subject_ids == table.subject_ids
    assert back.site_ids == table.site_ids
    assert np.array_equal(back.ages, table.ages)
    assert np.array_equal(back.features, table.features)


def test_feature_table_from_segmentations():
    labels = np.zeros((10, 10, 10))
    labels[:5] = 1   # 500 csf
    labels[5:8] = 2  # 300 gm
    labels[8:] = 3   # 200 wm
    seg = _seg_from_labels(labels)
    table = feature_table_from_segmentations([("s0", "A", 30.0, seg)])
    assert table.features[0] == pytest.approx([0.5, 0.3, 0.2])


def test_feature_table_validation():
    with pytest.raises(HarmonizeError, match="ratios"):
        make_table(["A", "A"], [1.0, 2.0], np.full((2, 3), 1.5))
    with pytest.raises(HarmonizeError, match="disagree"):
        FeatureTable(("a",), ("A", "B"), np.array([1.0]), np.full((1, 3), 0.5))
