import math

import numpy as np
import pytest

from physseg.simulate import (BiasFieldConfig, Mprage,
                              NoiseConfig, ParamRange, SimulateError, Spgr,
                              apply_bias_field, apply_noise, make_batch,
                              pregenerated_params, sample_params,
                              signal_mprage, signal_mprage_ir, signal_spgr,
                              simulate_volume)
from physseg.volumes import Grid3, TISSUES

# Frozen scalar oracles, computed with a 50-digit evaluation of the signal
# equations ahead of the implementation.
MPRAGE_ORACLE = 0.28070009351501590   # T1=830, PD=0.7, TI=900, pTD=800, gain=1
SPGR_ORACLE = 0.037948753684192602    # T1=830, T2*=53, PD=0.7, TR=50, TE=4, FA=90
WM_NULL_TI = 399.686102929014         # root of the MPRAGE bracket for T1=830, pTD=800


def test_mprage_scalar_oracle():
    v = signal_mprage(830.0, 0.7, Mprage(ti_ms=900.0, ptd_ms=800.0))
    assert v == pytest.approx(MPRAGE_ORACLE, rel=1e-12)


def test_mprage_zero_pd():
    for ti, ptd in ((600.0, 500.0), (1200.0, 1600.0), (100.0, 200.0)):
        assert signal_mprage(830.0, 0.0, Mprage(ti, ptd)) == 0.0


def test_mprage_long_ti_limit():
    v = signal_mprage(830.0, 0.7, Mprage(ti_ms=1e9, ptd_ms=800.0))
    assert v == pytest.approx(0.7, abs=1e-12)


def test_mprage_rejects_bad_t1():
    with pytest.raises(SimulateError):
        signal_mprage(0.0, 0.7, Mprage(900.0, 800.0))
    with pytest.raises(SimulateError):
        signal_mprage(np.array([830.0, -1.0]), 0.7, Mprage(900.0, 800.0))


def test_mprage_ir_form_bit_identical(rng):
    for _ in range(500):
        t1 = rng.uniform(300.0, 4500.0)
        pd = rng.uniform(0.0, 1.2)
        ti = rng.uniform(100.0, 2000.0)
        td = rng.uniform(100.0, 1500.0)
        tau = rng.uniform(1.0, 500.0)
        a = signal_mprage_ir(t1, pd, ti, td, tau)
        b = signal_mprage(t1, pd, Mprage(ti_ms=ti, ptd_ms=td + tau))
        assert a == b  # bit identical, same float ops


def test_mprage_monotone_to_gain_pd_limit():
    # continuous in TI and approaching gain*pd from below as TI grows
    tis = np.linspace(200.0, 50000.0, 400)
    vals = [signal_mprage(830.0, 0.7, Mprage(ti, 800.0)) for ti in tis]
    assert np.all(np.diff(vals) > -1e-12)
    assert vals[-1] == pytest.approx(0.7, abs=1e-6)


def test_spgr_scalar_oracle():
    v = signal_spgr(830.0, 53.0, 0.7, Spgr(tr_ms=50.0, te_ms=4.0, fa_deg=90.0))
    assert v == pytest.approx(SPGR_ORACLE, rel=1e-12)


def test_spgr_small_angle_limit():
    v = signal_spgr(830.0, 53.0, 0.7, Spgr(50.0, 4.0, 1e-7))
    assert v == pytest.approx(0.0, abs=1e-8)


def test_spgr_validation():
    with pytest.raises(SimulateError):
        Spgr(tr_ms=50.0, te_ms=60.0, fa_deg=30.0)  # TE >= TR
    with pytest.raises(SimulateError):
        Spgr(tr_ms=50.0, te_ms=4.0, fa_deg=180.0)
    with pytest.raises(SimulateError):
        signal_spgr(830.0, -1.0, 0.7, Spgr(50.0, 4.0, 30.0))


def test_spgr_vectorized_matches_scalar(rng):
    t1 = rng.uniform(500.0, 4000.0, size=50)
    t2s = rng.uniform(30.0, 1500.0, size=50)
    pd = rng.uniform(0.1, 1.2, size=50)
    params = Spgr(50.0, 4.0, 30.0)
    vec = signal_spgr(t1, t2s, pd, params)
    for i in range(50):
        assert vec[i] == signal_spgr(t1[i], t2s[i], pd[i], params)


def test_spgr_ernst_grid_argmax():
    # dense grid argmax against the closed form
    fas = np.arange(0.01, 90.0, 0.01)
    t1, tr = 830.0, 50.0
    sig = [signal_spgr(t1, 53.0, 0.7, Spgr(tr, 4.0, float(fa))) for fa in fas]
    best = fas[int(np.argmax(sig))]
    expect = math.degrees(math.acos(math.exp(-tr / t1)))
    assert abs(best - expect) <= 0.01 + 1e-9
    assert expect == pytest.approx(19.6886, abs=1e-3)


def test_gain_linearity(small_phantom):
    mpm, _ = small_phantom
    one = simulate_volume(mpm, Mprage(900.0, 800.0, gain=1.0))
    two = simulate_volume(mpm, Mprage(900.0, 800.0, gain=2.0))
    inside = mpm.mask_bool()
    assert np.allclose(two.data[inside], 2.0 * one.data[inside], rtol=1e-6)


def test_simulate_volume_constant_inside_mask():
    dims = (16, 16, 16)
    mask = np.zeros(dims, dtype=np.float32)
    mask[4:12, 4:12, 4:12] = 1.0
    t1 = np.where(mask > 0, 830.0, 0.0).astype(np.float32)
    t2s = np.where(mask > 0, 53.0, 0.0).astype(np.float32)
    pd = np.where(mask > 0, 0.7, 0.0).astype(np.float32)
    from physseg.volumes import MpmVolume
    mpm = MpmVolume(*(Grid3(dims, (1, 1, 1), a) for a in (t1, t2s, pd, mask)))
    img = simulate_volume(mpm, Mprage(900.0, 800.0))
    inside = mask > 0
    assert np.allclose(img.data[inside], img.data[inside][0])
    assert np.abs(img.data[~inside]).max() == 0.0


def test_simulate_volume_deterministic(small_phantom):
    mpm, _ = small_phantom
    a = simulate_volume(mpm, Mprage(900.0, 800.0))
    b = simulate_volume(mpm, Mprage(900.0, 800.0))
    assert np.array_equal(a.data, b.data)


def test_wm_null_point(small_phantom):
    mpm, hard = small_phantom
    # bisection oracle for the null TI of T1=830 at pTD=800
    ptd = 800.0
    f = lambda ti: 2.0 * math.exp(-ti / 830.0) - 1.0 - math.exp(-(ti + ptd) / 830.0)
    lo, hi = 100.0, 2000.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    assert 0.5 * (lo + hi) == pytest.approx(WM_NULL_TI, abs=1e-6)

    img = simulate_volume(mpm, Mprage(WM_NULL_TI, ptd))
    labels = hard.as_int()
    wm = np.abs(img.data[labels == TISSUES.index("wm") + 1])
    csf = np.abs(img.data[labels == TISSUES.index("csf") + 1])
    # WM sits at its null: tiny signals; CSF is far from its null
    assert np.median(wm) < 0.01
    assert np.median(csf) > 5 * np.median(wm)


# ---------------------------------------------------------------------------
# Parameter sampling
# ---------------------------------------------------------------------------

def test_param_range_validation():
    with pytest.raises(SimulateError):
        ParamRange("mprage", {"ti_ms": (1200.0, 600.0), "ptd_ms": (800.0, 800.0)})
    with pytest.raises(SimulateError):
        ParamRange("spgr", {"tr_ms": (15.0, 100.0), "te_ms": (4.0, 10.0),
                            "fa_deg": (0.0, 75.0)})
    with pytest.raises(SimulateError, match="unknown sequence"):
        ParamRange("flair", {})


def test_degenerate_range_constant(rng):
    prange = ParamRange("mprage", {"ti_ms": (900.0, 900.0), "ptd_ms": (800.0, 800.0)})
    for _ in range(10):
        p = sample_params(prange, rng)
        assert p.ti_ms == 900.0 and p.ptd_ms == 800.0


def test_uniform_mean_within_three_sigma():
    rng = np.random.default_rng(123)
    prange = ParamRange.mprage_in()
    n = 100_000
    tis = np.array([sample_params(prange, rng).ti_ms for _ in range(n)])
    sigma_mean = (600.0 / math.sqrt(12.0)) / math.sqrt(n)
    assert abs(tis.mean() - 900.0) < 3.0 * sigma_mean
    assert tis.min() >= 600.0 and tis.max() <= 1200.0


def test_unsatisfiable_spgr_range(rng):
    prange = ParamRange("spgr", {"tr_ms": (15.0, 40.0), "te_ms": (50.0, 60.0),
                                 "fa_deg": (15.0, 75.0)})
    with pytest.raises(SimulateError, match="no valid sample"):
        sample_params(prange, rng)


def test_spgr_rejection_respects_te_lt_tr(rng):
    prange = ParamRange.spgr_ood()  # TE and TR overlap, rejection needed
    for _ in range(200):
        p = sample_params(prange, rng)
        assert p.te_ms < p.tr_ms


def test_pregenerated_pool_mprage():
    pool = pregenerated_params(ParamRange.mprage_in(), 11)
    assert len(pool) == 11
    assert pool[0].ti_ms == 600.0 and pool[-1].ti_ms == 1200.0
    assert all(p.ptd_ms == 800.0 for p in pool)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _toy_image(rng):
    dims = (16, 16, 16)
    mask = np.zeros(dims, dtype=np.float32)
    mask[3:13, 3:13, 3:13] = 1.0
    img = np.where(mask > 0, 1.0 + 0.05 * rng.normal(size=dims), 0.0)
    return (Grid3(dims, (1, 1, 1), img.astype(np.float32)),
            Grid3(dims, (1, 1, 1), mask))


def test_bias_zero_amplitude_identity(rng):
    img, mask = _toy_image(rng)
    out = apply_bias_field(img, mask, BiasFieldConfig(True, 0.0), rng)
    assert np.array_equal(out.data, img.data)


def test_bias_bounded_multiplier(rng):
    img, mask = _toy_image(rng)
    a = 0.3
    out = apply_bias_field(img, mask, BiasFieldConfig(True, a), rng)
    inside = mask.data > 0
    ratio = out.data[inside] / img.data[inside]
    assert ratio.min() >= 1.0 - a - 1e-5
    assert ratio.max() <= 1.0 + a + 1e-5
    assert ratio.max() - ratio.min() > 0.01  # actually does something


def test_bias_deterministic_per_seed():
    rng_img = np.random.default_rng(5)
    img, mask = _toy_image(rng_img)
    cfg = BiasFieldConfig(True, 0.2)
    a = apply_bias_field(img, mask, cfg, np.random.default_rng(77))
    b = apply_bias_field(img, mask, cfg, np.random.default_rng(77))
    assert np.array_equal(a.data, b.data)


def test_noise_zero_sigma_identity(rng):
    img, mask = _toy_image(rng)
    out = apply_noise(img, mask, NoiseConfig(True, 0.0), rng)
    assert np.array_equal(out.data, img.data)


def test_noise_std_matches_target():
    rng_img = np.random.default_rng(6)
    dims = (64, 64, 64)
    mask = Grid3(dims, (1, 1, 1), np.ones(dims, dtype=np.float32))
    img = Grid3(dims, (1, 1, 1), np.full(dims, 2.0, dtype=np.float32))
    frac = 0.05
    out = apply_noise(img, mask, NoiseConfig(True, frac), np.random.default_rng(8))
    target = frac * 2.0
    measured = (out.data - img.data).std()
    assert measured == pytest.approx(target, rel=0.05)


def test_noise_not_added_outside_mask(rng):
    img, mask = _toy_image(rng)
    out = apply_noise(img, mask, NoiseConfig(True, 0.1), rng)
    outside = mask.data == 0
    assert np.array_equal(out.data[outside], img.data[outside])


# ---------------------------------------------------------------------------
# Batch construction
# ---------------------------------------------------------------------------

def test_make_batch_contracts(labeled_phantom, rng):
    mpm, _, _, soft, _ = labeled_phantom
    batch = make_batch(mpm, soft, n=4, patch_size=(10, 10, 10),
                       prange=ParamRange.mprage_in(), rng=rng)
    assert len(batch) == 4
    first = batch[0].labels
    for sample in batch[1:]:
        for ga, gb in zip(first.tissues, sample.labels.tissues):
            assert np.array_equal(ga.data, gb.data)
        assert np.array_equal(first.mask.data, sample.labels.mask.data)
    # images differ because params differ
    assert not np.array_equal(batch[0].image.data, batch[1].image.data)


def test_make_batch_single(labeled_phantom, rng):
    mpm, _, _, soft, _ = labeled_phantom
    batch = make_batch(mpm, soft, n=1, patch_size=(8, 8, 8),
                       prange=ParamRange.mprage_in(), rng=rng)
    assert len(batch) == 1


def test_make_batch_degenerate_range_identical_images(labeled_phantom, rng):
    mpm, _, _, soft, _ = labeled_phantom
    prange = ParamRange("mprage", {"ti_ms": (900.0, 900.0), "ptd_ms": (800.0, 800.0)})
    batch = make_batch(mpm, soft, n=3, patch_size=(8, 8, 8), prange=prange, rng=rng)
    for sample in batch[1:]:
        assert np.array_equal(batch[0].image.data, sample.image.data)


def test_make_batch_patch_too_large(labeled_phantom, rng):
    mpm, _, _, soft, _ = labeled_phantom
    with pytest.raises(SimulateError, match="does not fit"):
        make_batch(mpm, soft, n=1, patch_size=(99, 99, 99),
                   prange=ParamRange.mprage_in(), rng=rng)
