"""Procedural brain-like MPM phantoms with known tissue labels.

A phantom is a deformed-ellipsoid head mask carved into CSF / GM / WM by
thresholding a smooth random field at quantiles, with GM forming a
cortical shell. Voxel quantitative values (T1, T2*, PD) are drawn from
per-tissue Gaussians around configurable literature means, optionally
modulated by a smooth spatial field that is mean-centred per tissue so the
generating means stay recoverable. Ageing shifts the GM/WM threshold so
the GM volume fraction falls linearly with age.

Cohorts add per-site acquisition parameters and age ranges on top, which
is what the multi-site harmonization experiments consume.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .simulate import Mprage, SequenceParams
from .volumes import Grid3, HardSegmentation, MpmVolume, TISSUES

CHANNELS = ("t1_ms", "t2s_ms", "pd")


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class TissueParams:
    """Per-tissue Gaussian parameters over (t1_ms, t2s_ms, pd).

    ``means`` and ``stds`` are (n_tissues, 3) arrays in TISSUES order and
    CHANNELS order. Means must be positive and pairwise distinct in at
    least one channel, otherwise the tissues are unseparable.
    """

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64)
        stds = np.array(self.stds, dtype=np.float64)
        shape = (len(TISSUES), len(CHANNELS))
        if means.shape != shape or stds.shape != shape:
            raise PhantomError(f"means/stds must have shape {shape}")
        if (means <= 0).any():
            raise PhantomError("tissue means must be > 0")
        if (stds < 0).any():
            raise PhantomError("tissue stds must be >= 0")
        for a in range(len(TISSUES)):
            for b in range(a + 1, len(TISSUES)):
                if np.allclose(means[a], means[b]):
                    raise PhantomError(
                        f"degenerate tissue_params: {TISSUES[a]} and {TISSUES[b]} "
                        "coincide in every channel"
                    )
        means.setflags(write=False)
        stds.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    @classmethod
    def default(cls, std_fraction=0.05):
        """3T literature values: rows CSF/GM/WM, columns T1 ms, T2* ms, PD."""
        means = np.array([
            [4000.0, 1500.0, 1.00],
            [1330.0,   66.0, 0.82],
            [ 830.0,   53.0, 0.70],
        ])
        return cls(means=means, stds=std_fraction * means)

    def mean(self, tissue, channel):
        return float(self.means[TISSUES.index(tissue), CHANNELS.index(channel)])


@dataclass(frozen=True)
class SiteSpec:
    """One acquisition site: id, sequence parameters, cohort slice."""

    site_id: str
    seq: SequenceParams
    n_subjects: int
    age_range: tuple = None  # falls back to the cohort-wide range


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int
    dims: tuple
    seed: int
    age_range: tuple = (20.0, 80.0)
    sites: tuple = ()
    atrophy_rate: float = 0.002
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    tissue_params: TissueParams = field(default_factory=TissueParams.default)
    modulation: float = 0.03

    def __post_init__(self):
        if self.age_range[0] >= self.age_range[1]:
            raise PhantomError("age_range must satisfy lo < hi")
        if self.sites:
            total = sum(s.n_subjects for s in self.sites)
            if total > self.n_subjects:
                raise PhantomError(
                    f"site subject counts sum to {total} > n_subjects {self.n_subjects}"
                )


def _smooth_field(rng, dims, n_waves=30, min_periods=1.0, max_periods=3.0):
    """Band-limited sum of random-phase cosines, normalised to zero mean,
    unit std over the volume."""
    nx, ny, nz = dims
    ax = np.linspace(-1.0, 1.0, nx)
    ay = np.linspace(-1.0, 1.0, ny)
    az = np.linspace(-1.0, 1.0, nz)
    X, Y, Z = np.meshgrid(ax, ay, az, indexing="ij")
    out = np.zeros(dims, dtype=np.float64)
    for _ in range(n_waves):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        k = np.pi * rng.uniform(min_periods, max_periods)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.normal()
        out += amp * np.cos(k * (direction[0] * X + direction[1] * Y + direction[2] * Z) + phase)
    out -= out.mean()
    std = out.std()
    if std > 0:
        out /= std
    return out


def _head_mask(rng, dims, shape_field):
    """Deformed ellipsoid, clipped one voxel away from the volume faces."""
    nx, ny, nz = dims
    ax = np.linspace(-1.0, 1.0, nx)
    ay = np.linspace(-1.0, 1.0, ny)
    az = np.linspace(-1.0, 1.0, nz)
    X, Y, Z = np.meshgrid(ax, ay, az, indexing="ij")
    radii = (0.82, 0.78, 0.74)
    ellip = (X / radii[0]) ** 2 + (Y / radii[1]) ** 2 + (Z / radii[2]) ** 2
    mask = (ellip + 0.12 * shape_field) <= 1.0
    border = np.zeros(dims, dtype=bool)
    border[0, :, :] = border[-1, :, :] = True
    border[:, 0, :] = border[:, -1, :] = True
    border[:, :, 0] = border[:, :, -1] = True
    mask &= ~border
    return mask, ellip


def generate_phantom(seed, dims, tissue_params=None, age=0.0,
                     atrophy_rate=0.0, spacing_mm=(1.0, 1.0, 1.0),
                     modulation=0.03, subject_id=""):
    """Generate one (MpmVolume, HardSegmentation) pair.

    Deterministic for a fixed seed. The carved tissue fractions are set by
    quantile thresholds on a smooth field combined with the ellipsoid
    coordinate: a central CSF blob, a WM core, a GM shell, and an outer CSF
    rim. ``atrophy_rate`` shifts the GM/WM threshold so the GM fraction at
    age a is (1 - atrophy_rate * a) times the age-0 fraction.
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 16:
        raise PhantomError(f"dims must each be >= 16, got {dims}")
    params = tissue_params if tissue_params is not None else TissueParams.default()
    rng = np.random.default_rng(seed)

    shape_field = _smooth_field(rng, dims)
    carve_field = _smooth_field(rng, dims)
    value_field = _smooth_field(rng, dims)

    mask, ellip = _head_mask(rng, dims, shape_field)
    n_mask = int(mask.sum())
    if n_mask == 0:
        raise PhantomError("empty head mask, dims too small for the ellipsoid")

    # Depth-like coordinate: small in the core, large near the rim.
    s = ellip + 0.35 * carve_field
    s_in = s[mask]

    gm_frac0 = 0.45
    gm_frac = gm_frac0 * (1.0 - atrophy_rate * age)
    if gm_frac <= 0.02:
        raise PhantomError(f"age {age} with atrophy_rate {atrophy_rate} leaves no GM")
    vent_frac = 0.06
    rim_frac = 0.15
    wm_frac = 1.0 - vent_frac - rim_frac - gm_frac
    q_vent, q_wm, q_gm = np.quantile(
        s_in, [vent_frac, vent_frac + wm_frac, vent_frac + wm_frac + gm_frac]
    )

    labels = np.zeros(dims, dtype=np.int32)
    csf_i, gm_i, wm_i = (TISSUES.index(t) + 1 for t in ("csf", "gm", "wm"))
    inside_vent = mask & (s <= q_vent)
    inside_wm = mask & (s > q_vent) & (s <= q_wm)
    inside_gm = mask & (s > q_wm) & (s <= q_gm)
    inside_rim = mask & (s > q_gm)
    labels[inside_vent | inside_rim] = csf_i
    labels[inside_wm] = wm_i
    labels[inside_gm] = gm_i

    for ti, tissue in enumerate(TISSUES):
        frac = float((labels == ti + 1).sum()) / n_mask
        if frac < 0.02:
            raise PhantomError(f"tissue {tissue} occupies {frac:.1%} < 2% of the mask")

    grids = {}
    for ci, channel in enumerate(CHANNELS):
        vals = np.zeros(dims, dtype=np.float64)
        noise = rng.standard_normal(dims)
        for ti in range(len(TISSUES)):
            region = labels == ti + 1
            if not region.any():
                continue
            mean = params.means[ti, ci]
            std = params.stds[ti, ci]
            v = mean + std * noise[region]
            if modulation > 0:
                # Mean-centre the modulation per tissue so the realised
                # tissue mean stays at the generating mean.
                mod = value_field[region]
                v = v + mean * modulation * (mod - mod.mean())
            vals[region] = v
        if channel == "pd":
            vals[mask] = np.clip(vals[mask], 0.01, 1.2)
        else:
            vals[mask] = np.maximum(vals[mask], 1.0)
        grids[channel] = Grid3(dims, spacing_mm, vals.astype(np.float32))

    mask_grid = Grid3(dims, spacing_mm, mask.astype(np.float32))
    mpm = MpmVolume(
        t1_ms=grids["t1_ms"], t2s_ms=grids["t2s_ms"], pd=grids["pd"],
        mask=mask_grid, subject_id=subject_id, age_years=float(age),
    )
    hard = HardSegmentation(Grid3(dims, spacing_mm, labels.astype(np.float32)))
    return mpm, hard


@dataclass(frozen=True)
class CohortSubject:
    mpm: MpmVolume
    labels: HardSegmentation
    site_id: str
    age: float
    seq: SequenceParams = None


def generate_cohort(spec):
    """Generate the full cohort described by ``spec``.

    Subjects are deterministic functions of (spec.seed, subject index);
    ages are uniform over the per-site range when given, else over the
    cohort range. With no sites configured a single anonymous site "S0"
    holding all subjects is used.
    """
    sites = spec.sites
    if spec.sites == () and spec.n_subjects > 0:
        sites = (SiteSpec("S0", Mprage(ti_ms=900.0, ptd_ms=800.0), spec.n_subjects),)
    if not sites:
        raise PhantomError("cohort needs at least one site")
    out = []
    k = 0
    for site in sites:
        lo, hi = site.age_range if site.age_range is not None else spec.age_range
        for _ in range(site.n_subjects):
            rng = np.random.default_rng([spec.seed, k])
            age = float(rng.uniform(lo, hi))
            subject_id = f"{site.site_id}_s{k:03d}"
            mpm, hard = generate_phantom(
                seed=[spec.seed, k, 1], dims=spec.dims,
                tissue_params=spec.tissue_params, age=age,
                atrophy_rate=spec.atrophy_rate, spacing_mm=spec.spacing_mm,
                modulation=spec.modulation, subject_id=subject_id,
            )
            out.append(CohortSubject(mpm, hard, site.site_id, age, site.seq))
            k += 1
    return out


def multisite_presets():
    """MPRAGE acquisition presets for ten Siemens sites of the public ABIDE
    multi-site study, as (site_id, TI ms, pTD ms = TR - TI, mean-age group).

    Age ranges are chosen so the young/old grouping used downstream is
    unambiguous: young sites get [8, 16], old sites [22, 40], and the one
    in-between site [17, 21].
    """
    young = (8.0, 16.0)
    old = (22.0, 40.0)
    mid = (17.0, 21.0)
    rows = [
        ("CALTECH", 800.0, 1590.0, old),
        ("CMU", 1100.0, 1870.0, old),
        ("NYU", 1100.0, 2530.0, young),
        ("OLIN", 900.0, 2500.0, old),
        ("OHSU", 900.0, 2300.0, young),
        ("UCLA_1", 853.0, 2300.0, young),
        ("UCLA_2", 853.0, 2300.0, young),
        ("PITT", 1000.0, 2100.0, mid),
        ("USM", 900.0, 2300.0, old),
        ("YALE", 624.0, 1230.0, young),
    ]
    return [
        (site_id, Mprage(ti_ms=ti, ptd_ms=tr - ti), age_range)
        for site_id, ti, tr, age_range in rows
    ]


def multisite_cohort_spec(dims, seed, subjects_per_site=5, **kwargs):
    """CohortSpec over the ten preset sites."""
    sites = tuple(
        SiteSpec(site_id, seq, subjects_per_site, age_range)
        for site_id, seq, age_range in multisite_presets()
    )
    return CohortSpec(
        n_subjects=subjects_per_site * len(sites), dims=tuple(dims), seed=seed,
        sites=sites, **kwargs,
    )


def write_cohort_manifest(rows, path):
    """Write the cohort manifest CSV: subject_id, site_id, age, file paths."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "site_id", "age", "mpm_path", "labels_path"])
        for row in rows:
            writer.writerow(row)


def read_cohort_manifest(path):
    if not os.path.exists(path):
        raise PhantomError(f"missing cohort manifest {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [dict(r) for r in reader]
