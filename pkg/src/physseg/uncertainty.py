"""Epistemic uncertainty: percentile volumes, calibration, IQR bounds, and
sequence-parameter uncertainty sweeps.

Monte Carlo segmentations of one volume are aggregated per tissue into a
percentile-volume curve: each voxel's inclusion fraction (how often it was
labelled as the tissue across the K samples) is thresholded at q/100 for
q = 1..99, and the surviving voxel volume is recorded; the curve is
non-increasing in q by construction. A monotone piecewise-linear
calibration map with decile knots then remaps nominal percentiles so that
central intervals achieve their nominal coverage on a calibration set, and
the calibrated 25/50/75 points give the reported IQR volume bounds.
"""

import json
import math
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from .model import predict
from .simulate import Mprage, Spgr, simulate_volume
from .volumes import HardSegmentation, SoftSegmentation, TISSUES

PERCENTILES = np.arange(1, 100)  # 1..99
LOG_FLOOR_ML = 1e-6


class UncertaintyError(ValueError):
    pass


@dataclass(frozen=True)
class PercentileVolumeCurve:
    tissue: str
    percentiles: np.ndarray   # (99,) the nominal grid 1..99
    volumes_ml: np.ndarray    # (99,) non-increasing

    def volume_at(self, q):
        """Linear interpolation over the integer percentile grid, clamped
        at the ends."""
        return float(np.interp(q, self.percentiles, self.volumes_ml))

    def is_flat(self):
        return float(self.volumes_ml.max() - self.volumes_ml.min()) == 0.0


def _harden(sample):
    if isinstance(sample, SoftSegmentation):
        return sample.harden()
    if isinstance(sample, HardSegmentation):
        return sample
    raise UncertaintyError(f"cannot harden {type(sample).__name__}")


def percentile_volumes(samples, tissue):
    """Percentile-volume curve for one tissue from K Monte Carlo samples.

    Counting is exact integer arithmetic: a voxel with inclusion count c
    of K survives threshold q iff 100 c >= q K, so duplicating the sample
    set never changes the curve.
    """
    if len(samples) < 2:
        raise UncertaintyError("need at least 2 Monte Carlo samples")
    hard = [_harden(s) for s in samples]
    dims = hard[0].labels.dims
    for h in hard[1:]:
        if h.labels.dims != dims:
            raise UncertaintyError("samples disagree in dims")
    K = len(hard)
    target = TISSUES.index(tissue) + 1
    counts = np.zeros(dims, dtype=np.int64)
    for h in hard:
        counts += h.as_int() == target
    voxvol = hard[0].labels.voxel_volume_ml()
    hist = np.bincount(counts.ravel(), minlength=K + 1)
    vols = np.empty(PERCENTILES.size)
    for qi, q in enumerate(PERCENTILES):
        # smallest count c with 100 c >= q K
        c_min = (int(q) * K + 99) // 100
        vols[qi] = hist[c_min:].sum() * voxvol
    return PercentileVolumeCurve(tissue=tissue, percentiles=PERCENTILES.astype(float),
                                 volumes_ml=vols)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationMap:
    """Monotone piecewise-linear map from nominal to calibrated percentile,
    anchored at (0, 0) and (100, 100) with knots at the deciles."""

    knots_nominal: np.ndarray
    knots_calibrated: np.ndarray

    def __post_init__(self):
        kn = np.asarray(self.knots_nominal, dtype=np.float64)
        kc = np.asarray(self.knots_calibrated, dtype=np.float64)
        if kn[0] != 0 or kn[-1] != 100 or kc[0] != 0 or kc[-1] != 100:
            raise UncertaintyError("calibration map must fix 0 and 100")
        if (np.diff(kn) <= 0).any() or (np.diff(kc) < 0).any():
            raise UncertaintyError("calibration map must be non-decreasing")
        kn.setflags(write=False)
        kc.setflags(write=False)
        object.__setattr__(self, "knots_nominal", kn)
        object.__setattr__(self, "knots_calibrated", kc)

    @classmethod
    def identity(cls):
        k = np.linspace(0.0, 100.0, 11)
        return cls(k, k.copy())

    def apply(self, q):
        return np.interp(q, self.knots_nominal, self.knots_calibrated)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({"knots_nominal": self.knots_nominal.tolist(),
                       "knots_calibrated": self.knots_calibrated.tolist()},
                      fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        return cls(np.array(payload["knots_nominal"]),
                   np.array(payload["knots_calibrated"]))


def truth_crossing_percentile(curve, true_volume_ml):
    """Largest percentile whose volume still reaches the true volume.

    0 means even the loosest threshold undershoots the truth; 100 means
    every threshold overshoots. Uniformly distributed crossings correspond
    to a perfectly calibrated sampler.
    """
    above = curve.volumes_ml >= true_volume_ml
    if not above.any():
        return 0.0
    if above.all():
        return 100.0
    return float(curve.percentiles[above][-1])


def calibrate(curves, true_volumes_ml):
    """Fit a CalibrationMap from held-out curves and their true volumes.

    The map's decile knots are the empirical quantiles of the truth
    crossing percentiles, made monotone; with uniform crossings the map is
    the identity. All-flat curve sets cannot be calibrated and fall back
    to the identity with a warning.
    """
    if len(curves) < 5:
        raise UncertaintyError("calibration needs at least 5 subjects")
    if len(curves) != len(true_volumes_ml):
        raise UncertaintyError("curves and true volumes disagree in length")
    if all(c.is_flat() for c in curves):
        warnings.warn("all calibration curves are flat; using the identity map")
        return CalibrationMap.identity()
    u = np.array([truth_crossing_percentile(c, v)
                  for c, v in zip(curves, true_volumes_ml)])
    deciles = np.linspace(0.0, 100.0, 11)
    knots = np.empty(11)
    knots[0], knots[-1] = 0.0, 100.0
    knots[1:-1] = np.quantile(u, deciles[1:-1] / 100.0)
    knots = np.maximum.accumulate(np.clip(knots, 0.0, 100.0))
    knots[0], knots[-1] = 0.0, 100.0
    return CalibrationMap(deciles, knots)


def iqr_bounds(curve, cal_map=None):
    """Volumes at the calibrated 25/50/75 percentiles, as (lo, mid, hi)."""
    cal_map = cal_map or CalibrationMap.identity()
    q = cal_map.apply(np.array([25.0, 50.0, 75.0]))
    vals = sorted(curve.volume_at(x) for x in q)
    return vals[0], vals[1], vals[2]


def iqr_width_ml(curve, cal_map=None):
    lo, _, hi = iqr_bounds(curve, cal_map)
    return hi - lo


def ernst_angle(tr_ms, t1_ms):
    """Flip angle (degrees) maximising the SPGR signal for given TR, T1."""
    if tr_ms <= 0 or t1_ms <= 0:
        raise UncertaintyError("TR and T1 must be > 0")
    return math.degrees(math.acos(math.exp(-tr_ms / t1_ms)))


# ---------------------------------------------------------------------------
# Sequence-parameter sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepGrid:
    """Rectangular parameter grid for one sequence kind.

    MPRAGE sweeps (TI, pTD); SPGR sweeps (TR, FA) at fixed TE.
    """

    kind: str
    n1: int = 20
    n2: int = 20
    ti_ms: tuple = (400.0, 2000.0)
    ptd_ms: tuple = (200.0, 2000.0)
    tr_ms: tuple = (5.0, 100.0)
    fa_deg: tuple = (5.0, 90.0)
    te_ms: float = 4.0
    gain: float = 1.0

    def axes(self):
        if self.kind == "mprage":
            return (("ti_ms", np.linspace(*self.ti_ms, self.n1)),
                    ("ptd_ms", np.linspace(*self.ptd_ms, self.n2)))
        if self.kind == "spgr":
            return (("tr_ms", np.linspace(*self.tr_ms, self.n1)),
                    ("fa_deg", np.linspace(*self.fa_deg, self.n2)))
        raise UncertaintyError(f"unknown sweep kind {self.kind!r}")

    def params_at(self, v1, v2):
        if self.kind == "mprage":
            return Mprage(ti_ms=float(v1), ptd_ms=float(v2), gain=self.gain)
        if float(v2) <= 0 or float(v2) >= 180:
            raise UncertaintyError("flip angle grid point outside (0, 180)")
        return Spgr(tr_ms=float(v1), te_ms=self.te_ms, fa_deg=float(v2),
                    gain=self.gain)


@dataclass(frozen=True)
class SweepResult:
    param_names: tuple
    axis1: np.ndarray
    axis2: np.ndarray
    mean_iqr_ml: np.ndarray   # (n1, n2)
    log10_iqr: np.ndarray     # (n1, n2)

    def to_csv(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([self.param_names[0], self.param_names[1],
                             "mean_iqr_ml", "log10_iqr"])
            for i, v1 in enumerate(self.axis1):
                for j, v2 in enumerate(self.axis2):
                    writer.writerow([repr(float(v1)), repr(float(v2)),
                                     repr(float(self.mean_iqr_ml[i, j])),
                                     repr(float(self.log10_iqr[i, j]))])


def _subject_key(mpm, index):
    """Stable per-subject seed component: the id when present (this makes
    grid values independent of subject order), else the position."""
    if getattr(mpm, "subject_id", ""):
        return zlib.crc32(mpm.subject_id.encode())
    return index


def _sweep_point(weights, mpms, grid, i, j, v1, v2, k_samples, cal_map, base_seed):
    params = grid.params_at(v1, v2)
    widths = []
    for s_idx, mpm in enumerate(mpms):
        rng = np.random.default_rng([base_seed, i, j, _subject_key(mpm, s_idx)])
        image = simulate_volume(mpm, params)
        samples = predict(weights, image, params, mask=mpm.mask,
                          n_samples=k_samples, dropout=True, rng=rng)
        for tissue in TISSUES:
            curve = percentile_volumes(samples, tissue)
            widths.append(iqr_width_ml(curve, cal_map))
    return float(np.mean(widths))


def sweep_contour(weights, mpms, grid, k_samples=50, cal_map=None,
                  base_seed=0, jobs=1):
    """Mean calibrated IQR width over a sequence-parameter grid.

    Every grid point simulates each subject, draws ``k_samples`` Monte
    Carlo segmentations, and averages the calibrated IQR width over
    tissues and subjects. Points use index-derived seeds, so results are
    identical regardless of evaluation order or worker count.
    """
    cal_map = cal_map or CalibrationMap.identity()
    (name1, axis1), (name2, axis2) = grid.axes()
    mean_iqr = np.zeros((axis1.size, axis2.size))
    points = [(i, j) for i in range(axis1.size) for j in range(axis2.size)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                (i, j): pool.submit(_sweep_point, weights, mpms, grid, i, j,
                                    axis1[i], axis2[j], k_samples, cal_map,
                                    base_seed)
                for i, j in points
            }
            for (i, j), fut in futures.items():
                mean_iqr[i, j] = fut.result()
    else:
        for i, j in points:
            mean_iqr[i, j] = _sweep_point(weights, mpms, grid, i, j,
                                          axis1[i], axis2[j], k_samples,
                                          cal_map, base_seed)
    log10 = np.log10(np.maximum(mean_iqr, LOG_FLOOR_ML))
    return SweepResult(param_names=(name1, name2), axis1=axis1, axis2=axis2,
                       mean_iqr_ml=mean_iqr, log10_iqr=log10)
