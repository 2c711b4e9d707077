"""Static-equation MR signal simulation and the training augmentation layer.

Two sequences are modelled. MPRAGE, parameterised by inversion time TI and
the pseudo delay pTD (the delay time plus the echo-spacing time), with
repetition time TR = TI + pTD:

    b = G * PD * (1 - 2 exp(-TI/T1) / (1 + exp(-TR/T1)))

and spoiled gradient echo (SPGR) with repetition time TR, echo time TE and
flip angle theta:

    b = G * PD * sin(theta) * (1 - E1) / (1 - cos(theta) E1) * exp(-TE/T2*),
    E1 = exp(-TR/T1)

Signals are kept signed (an MPRAGE voxel below its null point goes
negative); magnitude reconstruction is deliberately not modelled. The
batch builder composes the simulation with bias-field and noise
augmentation to produce single-subject batches that share one patch
location, so the labels in a batch are identical while the contrasts vary.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .volumes import Grid3, SoftSegmentation, extract_patch


class SimulateError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Sequence parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mprage:
    ti_ms: float
    ptd_ms: float
    gain: float = 1.0

    def __post_init__(self):
        if self.ti_ms <= 0 or self.ptd_ms <= 0 or self.gain <= 0:
            raise SimulateError(f"MPRAGE parameters must be > 0, got {self}")

    @property
    def tr_ms(self):
        # Derived, never stored independently.
        return self.ti_ms + self.ptd_ms

    @property
    def kind(self):
        return "mprage"


@dataclass(frozen=True)
class Spgr:
    tr_ms: float
    te_ms: float
    fa_deg: float
    gain: float = 1.0

    def __post_init__(self):
        if self.tr_ms <= 0 or self.te_ms <= 0 or self.gain <= 0:
            raise SimulateError(f"SPGR times and gain must be > 0, got {self}")
        if not (0.0 < self.fa_deg < 180.0):
            raise SimulateError(f"flip angle must be in (0, 180) degrees, got {self.fa_deg}")
        if self.te_ms >= self.tr_ms:
            raise SimulateError(f"TE must be < TR, got TE={self.te_ms}, TR={self.tr_ms}")

    @property
    def kind(self):
        return "spgr"


SequenceParams = Mprage | Spgr


# ---------------------------------------------------------------------------
# Signal equations
# ---------------------------------------------------------------------------

def signal_mprage(t1_ms, pd, params):
    """MPRAGE static signal; accepts scalars or arrays for t1_ms / pd."""
    t1 = np.asarray(t1_ms, dtype=np.float64)
    if (t1 <= 0).any():
        raise SimulateError("t1_ms must be > 0")
    pd = np.asarray(pd, dtype=np.float64)
    ti = float(params.ti_ms)
    tr = float(params.tr_ms)
    out = params.gain * pd * (1.0 - 2.0 * np.exp(-ti / t1) / (1.0 + np.exp(-tr / t1)))
    return out if out.ndim else float(out)


def signal_mprage_ir(t1_ms, pd, ti_ms, td_ms, tau_ms, gain=1.0):
    """MPRAGE signal in the (TI, TD, tau) parameterisation.

    Identical to :func:`signal_mprage` with pTD = TD + tau; the sum is
    formed first so the two forms agree bit for bit.
    """
    return signal_mprage(t1_ms, pd, Mprage(ti_ms=ti_ms, ptd_ms=td_ms + tau_ms, gain=gain))


def signal_spgr(t1_ms, t2s_ms, pd, params):
    """SPGR static signal; accepts scalars or arrays for the tissue maps."""
    t1 = np.asarray(t1_ms, dtype=np.float64)
    t2s = np.asarray(t2s_ms, dtype=np.float64)
    if (t1 <= 0).any():
        raise SimulateError("t1_ms must be > 0")
    if (t2s <= 0).any():
        raise SimulateError("t2s_ms must be > 0")
    pd = np.asarray(pd, dtype=np.float64)
    theta = math.radians(float(params.fa_deg))
    e1 = np.exp(-float(params.tr_ms) / t1)
    out = (
        params.gain * pd * math.sin(theta)
        * (1.0 - e1) / (1.0 - math.cos(theta) * e1)
        * np.exp(-float(params.te_ms) / t2s)
    )
    return out if out.ndim else float(out)


def simulate_volume(mpm, params):
    """Apply the matching signal equation voxelwise inside the mask.

    Returns a Grid3 image; voxels outside the mask are exactly zero.
    Deterministic: the equations carry no randomness.
    """
    inside = mpm.mask_bool()
    out = np.zeros(mpm.dims, dtype=np.float64)
    if inside.any():
        t1 = mpm.t1_ms.data[inside].astype(np.float64)
        pd = mpm.pd.data[inside].astype(np.float64)
        if params.kind == "mprage":
            out[inside] = signal_mprage(t1, pd, params)
        else:
            t2s = mpm.t2s_ms.data[inside].astype(np.float64)
            out[inside] = signal_spgr(t1, t2s, pd, params)
    return Grid3(mpm.dims, mpm.spacing_mm, out.astype(np.float32))


# ---------------------------------------------------------------------------
# Parameter ranges and sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamRange:
    """Closed uniform sampling intervals per sequence parameter.

    ``kind`` selects the sequence; ``intervals`` maps parameter name to
    (lo, hi). Joint constraints (TE < TR for SPGR) are enforced by
    rejection at sampling time, not by the box itself.
    """

    kind: str
    intervals: dict
    gain: float = 1.0

    _REQUIRED = {"mprage": ("ti_ms", "ptd_ms"), "spgr": ("tr_ms", "te_ms", "fa_deg")}

    def __post_init__(self):
        if self.kind not in self._REQUIRED:
            raise SimulateError(f"unknown sequence kind {self.kind!r}")
        for name in self._REQUIRED[self.kind]:
            if name not in self.intervals:
                raise SimulateError(f"{self.kind} range needs interval for {name!r}")
        for name, (lo, hi) in self.intervals.items():
            if lo > hi:
                raise SimulateError(f"interval for {name!r} has lo > hi")
            if name == "fa_deg":
                if lo <= 0 or hi >= 180:
                    raise SimulateError("fa_deg interval must lie inside (0, 180)")
            elif lo <= 0:
                raise SimulateError(f"interval for {name!r} must be positive")

    # Training-time and out-of-distribution defaults used by the studies.
    @classmethod
    def mprage_in(cls, ptd=(800.0, 800.0)):
        return cls("mprage", {"ti_ms": (600.0, 1200.0), "ptd_ms": tuple(ptd)})

    @classmethod
    def mprage_ood(cls, ptd=(800.0, 800.0)):
        return cls("mprage", {"ti_ms": (100.0, 2000.0), "ptd_ms": tuple(ptd)})

    @classmethod
    def mprage_multisite(cls):
        # TI and pTD both vary, giving TR in [1100, 2800].
        return cls("mprage", {"ti_ms": (600.0, 1200.0), "ptd_ms": (500.0, 1600.0)})

    @classmethod
    def spgr_in(cls):
        return cls("spgr", {"tr_ms": (15.0, 100.0), "te_ms": (4.0, 10.0),
                            "fa_deg": (15.0, 75.0)})

    @classmethod
    def spgr_ood(cls):
        return cls("spgr", {"tr_ms": (10.0, 200.0), "te_ms": (2.0, 20.0),
                            "fa_deg": (5.0, 90.0)})


def sample_params(prange, rng, max_rejections=1000):
    """Draw SequenceParams with independent uniforms per interval.

    Draws violating joint invariants (SPGR TE >= TR) are rejected and
    retried; after ``max_rejections`` failures the range is reported as
    unsatisfiable.
    """
    for _ in range(max_rejections):
        vals = {name: float(rng.uniform(lo, hi))
                for name, (lo, hi) in prange.intervals.items()}
        try:
            if prange.kind == "mprage":
                return Mprage(ti_ms=vals["ti_ms"], ptd_ms=vals["ptd_ms"], gain=prange.gain)
            return Spgr(tr_ms=vals["tr_ms"], te_ms=vals["te_ms"],
                        fa_deg=vals["fa_deg"], gain=prange.gain)
        except SimulateError:
            continue
    raise SimulateError(
        f"no valid sample from {prange.kind} range after {max_rejections} rejections"
    )


def pregenerated_params(prange, n, rng=None):
    """Discrete contrast pool standing in for pre-simulated training images.

    MPRAGE pools are n equally spaced TIs (pTD at the interval midpoint);
    SPGR pools are n random draws from the box. ``rng`` is only needed for
    SPGR.
    """
    if prange.kind == "mprage":
        lo, hi = prange.intervals["ti_ms"]
        plo, phi = prange.intervals["ptd_ms"]
        ptd = 0.5 * (plo + phi)
        tis = np.linspace(lo, hi, n) if n > 1 else [0.5 * (lo + hi)]
        return [Mprage(ti_ms=float(ti), ptd_ms=ptd, gain=prange.gain) for ti in tis]
    if rng is None:
        raise SimulateError("SPGR pools need an rng")
    return [sample_params(prange, rng) for _ in range(n)]


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiasFieldConfig:
    enabled: bool = False
    max_amplitude: float = 0.2
    smoothness: int = 2  # polynomial order

    def __post_init__(self):
        if self.max_amplitude < 0:
            raise SimulateError("bias max_amplitude must be >= 0")


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = False
    sigma: float = 0.02  # fraction of the mean masked signal

    def __post_init__(self):
        if self.sigma < 0:
            raise SimulateError("noise sigma must be >= 0")


@dataclass(frozen=True)
class AugmentConfig:
    bias_field: BiasFieldConfig = field(default_factory=BiasFieldConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    @classmethod
    def enabled(cls, bias_amplitude=0.2, noise_sigma=0.02):
        return cls(BiasFieldConfig(True, bias_amplitude),
                   NoiseConfig(True, noise_sigma))


def _polynomial_field(rng, dims, order):
    """Random polynomial over normalized [-1, 1]^3 coordinates."""
    nx, ny, nz = dims
    ax = np.linspace(-1.0, 1.0, nx) if nx > 1 else np.zeros(1)
    ay = np.linspace(-1.0, 1.0, ny) if ny > 1 else np.zeros(1)
    az = np.linspace(-1.0, 1.0, nz) if nz > 1 else np.zeros(1)
    X, Y, Z = np.meshgrid(ax, ay, az, indexing="ij")
    out = np.zeros(dims, dtype=np.float64)
    for i in range(order + 1):
        for j in range(order + 1 - i):
            for k in range(order + 1 - i - j):
                if i == j == k == 0:
                    continue  # constant offset is a gain, not a bias shape
                out += rng.normal() * (X ** i) * (Y ** j) * (Z ** k)
    return out


def apply_bias_field(img, mask, config, rng):
    """Multiply by exp(P) with P a random low-order polynomial, scaled so
    the multiplicative deviation inside the mask never exceeds
    ``max_amplitude``."""
    if not config.enabled or config.max_amplitude == 0:
        return img
    inside = mask.data > 0
    p = _polynomial_field(rng, img.dims, config.smoothness)
    pin = p[inside]
    if pin.size == 0 or np.abs(pin).max() == 0:
        return img
    a = config.max_amplitude
    scale = np.inf
    pmax, pmin = pin.max(), pin.min()
    if pmax > 0:
        scale = min(scale, math.log1p(a) / pmax)
    if pmin < 0:
        # log1p(-a) and pmin are both negative, the bound is positive
        scale = min(scale, math.log1p(-a) / pmin)
    mult = np.exp(scale * p)
    out = img.data.astype(np.float64)
    out = np.where(inside, out * mult, out)
    return img.with_data(out.astype(np.float32))


def apply_noise(img, mask, config, rng):
    """Add zero-mean Gaussian noise inside the mask.

    The noise std is ``config.sigma`` times the mean masked intensity
    (absolute value taken so contrasts with a negative mean still get the
    intended magnitude)."""
    if not config.enabled or config.sigma == 0:
        return img
    inside = mask.data > 0
    if not inside.any():
        return img
    level = abs(float(img.data[inside].mean(dtype=np.float64)))
    sigma = config.sigma * level
    noise = rng.normal(0.0, 1.0, size=img.dims)
    out = img.data.astype(np.float64)
    out = np.where(inside, out + sigma * noise, out)
    return img.with_data(out.astype(np.float32))


# ---------------------------------------------------------------------------
# Batch construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchSample:
    image: Grid3
    params: SequenceParams
    labels: SoftSegmentation


def _sample_patch_corner(mask_data, patch_size, rng, max_tries=100):
    """Uniform patch corner inside the mask bounding box with at least one
    masked interior voxel (interior: one-voxel margin for featurization)."""
    dims = mask_data.shape
    idx = np.argwhere(mask_data > 0)
    if idx.size == 0:
        raise SimulateError("mask is empty")
    lo = idx.min(axis=0)
    hi = idx.max(axis=0) + 1
    corner_lo, corner_hi = [], []
    for d in range(3):
        if patch_size[d] > dims[d]:
            raise SimulateError(
                f"patch size {tuple(patch_size)} does not fit in volume {dims}"
            )
        clo = int(lo[d])
        chi = int(hi[d]) - patch_size[d]
        if chi < clo:  # bounding box smaller than the patch: allow any fit
            clo, chi = 0, dims[d] - patch_size[d]
        corner_lo.append(clo)
        corner_hi.append(max(chi, clo))
    for _ in range(max_tries):
        corner = tuple(int(rng.integers(corner_lo[d], corner_hi[d] + 1)) for d in range(3))
        sub = mask_data[
            corner[0] + 1:corner[0] + patch_size[0] - 1,
            corner[1] + 1:corner[1] + patch_size[1] - 1,
            corner[2] + 1:corner[2] + patch_size[2] - 1,
        ]
        if (sub > 0).any():
            return corner
    raise SimulateError("could not find a patch overlapping the mask")


def make_batch(mpm, labels, n, patch_size, prange, aug=None, rng=None,
               param_pool=None):
    """Build one single-subject batch of n simulated patches.

    One patch corner is drawn, then n parameter draws; every sample shares
    the corner so the label patches are identical across the batch. When
    ``param_pool`` is given, parameters come from that discrete pool
    (standing in for pre-generated images) instead of the continuous range.
    """
    if n < 1:
        raise SimulateError("batch size must be >= 1")
    if rng is None:
        rng = np.random.default_rng()
    aug = aug or AugmentConfig()
    patch_size = tuple(int(p) for p in patch_size)
    corner = _sample_patch_corner(mpm.mask.data, patch_size, rng)

    mask_patch = extract_patch(mpm.mask, corner, patch_size)
    label_patch = SoftSegmentation(
        tuple(extract_patch(g, corner, patch_size) for g in labels.tissues),
        mask_patch,
    )
    t1_patch = extract_patch(mpm.t1_ms, corner, patch_size)
    t2s_patch = extract_patch(mpm.t2s_ms, corner, patch_size)
    pd_patch = extract_patch(mpm.pd, corner, patch_size)
    from .volumes import MpmVolume  # local import to avoid cycle at module load
    sub_mpm = MpmVolume(t1_patch, t2s_patch, pd_patch, mask_patch,
                        subject_id=mpm.subject_id, age_years=mpm.age_years)

    out = []
    for _ in range(n):
        if param_pool is not None:
            params = param_pool[int(rng.integers(0, len(param_pool)))]
        else:
            params = sample_params(prange, rng)
        img = simulate_volume(sub_mpm, params)
        img = apply_bias_field(img, mask_patch, aug.bias_field, rng)
        img = apply_noise(img, mask_patch, aug.noise, rng)
        out.append(BatchSample(image=img, params=params, labels=label_patch))
    return out
