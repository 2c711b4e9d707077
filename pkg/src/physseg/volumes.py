"""Core 3D grid data model and bit-exact MVOL file I/O.

Every other module works in terms of the types defined here: a ``Grid3``
is an immutable 3D scalar field, an ``MpmVolume`` bundles the quantitative
tissue maps (T1, T2*, PD) with a brain mask, and segmentations come in a
soft (per-tissue probability) and a hard (integer label) flavour.

On disk a volume is a pair of files, ``<name>.mvol.json`` (header) and
``<name>.mvol.raw`` (little-endian float32 payload, channel-major, x
fastest-varying). Round trips are byte-exact.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

MVOL_MAGIC = "MVOL1"
MVOL_DTYPE = "f32le"

#: Canonical tissue channel order. Hard labels are 0=background then 1-based
#: indices into this tuple.
TISSUES = ("csf", "gm", "wm")

MPM_CHANNELS = ("t1_ms", "t2s_ms", "pd", "mask")


class VolumeError(ValueError):
    """Invalid grid data or malformed MVOL file."""


def _first_nonfinite(flat):
    """Flat index of the first non-finite entry, or None."""
    bad = ~np.isfinite(flat)
    if bad.any():
        return int(np.argmax(bad))
    return None


def _unravel_xfast(flat_index, dims):
    nx, ny, _ = dims
    ix = flat_index % nx
    iy = (flat_index // nx) % ny
    iz = flat_index // (nx * ny)
    return (ix, iy, iz)


@dataclass(frozen=True)
class Grid3:
    """Immutable 3D scalar grid.

    ``data`` is float32 with shape ``dims = (nx, ny, nz)``; the flat storage
    order used on disk is x fastest, then y, then z. The array is marked
    read-only after construction so grids can be shared across workers.
    """

    dims: tuple
    spacing_mm: tuple
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise VolumeError(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise VolumeError(f"spacing_mm must be 3 positive reals, got {self.spacing_mm}")
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.size != dims[0] * dims[1] * dims[2]:
            raise VolumeError(
                f"payload length mismatch: dims {dims} need "
                f"{dims[0] * dims[1] * dims[2]} values, got {arr.size}"
            )
        arr = arr.reshape(dims) if arr.ndim == 1 else arr
        if arr.shape != dims:
            raise VolumeError(f"data shape {arr.shape} does not match dims {dims}")
        idx = _first_nonfinite(arr.ravel(order="F"))
        if idx is not None:
            raise VolumeError(
                f"non-finite value at voxel {_unravel_xfast(idx, dims)}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, dims, spacing_mm, flat):
        """Build from a flat x-fastest array (the on-disk order)."""
        dims = tuple(int(d) for d in dims)
        arr = np.asarray(flat, dtype=np.float32)
        if arr.size != dims[0] * dims[1] * dims[2]:
            raise VolumeError(
                f"payload length mismatch: dims {dims} need "
                f"{dims[0] * dims[1] * dims[2]} values, got {arr.size}"
            )
        return cls(dims, spacing_mm, arr.reshape(dims, order="F"))

    @classmethod
    def filled(cls, dims, spacing_mm, value=0.0):
        dims = tuple(int(d) for d in dims)
        return cls(dims, spacing_mm, np.full(dims, value, dtype=np.float32))

    def flat(self):
        """Flat copy in canonical x-fastest order."""
        return np.asarray(self.data, dtype=np.float32).ravel(order="F").copy()

    def with_data(self, data):
        """New grid with the same geometry and different values."""
        return Grid3(self.dims, self.spacing_mm, data)

    def voxel_volume_ml(self):
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz / 1000.0

    def same_geometry(self, other):
        return self.dims == other.dims and self.spacing_mm == other.spacing_mm


def extract_patch(grid, corner, size):
    """Copy a ``size``-shaped patch whose lowest corner is ``corner``.

    The patch must lie fully inside the grid; raises VolumeError otherwise.
    """
    ix, iy, iz = (int(c) for c in corner)
    px, py, pz = (int(s) for s in size)
    nx, ny, nz = grid.dims
    if min(ix, iy, iz) < 0 or min(px, py, pz) < 1:
        raise VolumeError(f"patch corner {corner} / size {size} out of bounds")
    if ix + px > nx or iy + py > ny or iz + pz > nz:
        raise VolumeError(
            f"patch corner {corner} size {size} exceeds grid dims {grid.dims}"
        )
    sub = grid.data[ix:ix + px, iy:iy + py, iz:iz + pz]
    return Grid3((px, py, pz), grid.spacing_mm, sub)


@dataclass(frozen=True)
class MpmVolume:
    """Quantitative multiparametric maps plus brain mask for one subject.

    Channels are stored as relaxation times in ms (T1, T2*) and a
    dimensionless proton density; use :func:`t1_ms_from_rate` and friends
    when ingesting rate maps (R1, R2* in 1/s).
    """

    t1_ms: Grid3
    t2s_ms: Grid3
    pd: Grid3
    mask: Grid3
    subject_id: str = ""
    age_years: float = 0.0

    def __post_init__(self):
        grids = (self.t1_ms, self.t2s_ms, self.pd, self.mask)
        for g in grids[1:]:
            if not grids[0].same_geometry(g):
                raise VolumeError("MPM channels must share dims and spacing")
        m = self.mask.data
        if not np.isin(m, (0.0, 1.0)).all():
            raise VolumeError("mask values must be 0 or 1")
        inside = m > 0
        if inside.any():
            if not (self.t1_ms.data[inside] > 0).all():
                raise VolumeError("t1_ms must be > 0 inside the mask")
            if not (self.t2s_ms.data[inside] > 0).all():
                raise VolumeError("t2s_ms must be > 0 inside the mask")
            if not (self.pd.data[inside] >= 0).all():
                raise VolumeError("pd must be >= 0 inside the mask")
        if self.age_years < 0:
            raise VolumeError("age_years must be >= 0")

    @property
    def dims(self):
        return self.t1_ms.dims

    @property
    def spacing_mm(self):
        return self.t1_ms.spacing_mm

    def mask_bool(self):
        return self.mask.data > 0


@dataclass(frozen=True)
class SoftSegmentation:
    """Per-tissue probability grids in TISSUES order plus the mask.

    Inside the mask the probabilities are in [0, 1] and sum to 1 (within
    1e-5); outside they are exactly zero.
    """

    tissues: tuple
    mask: Grid3

    def __post_init__(self):
        if len(self.tissues) != len(TISSUES):
            raise VolumeError(f"expected {len(TISSUES)} tissue channels")
        for g in self.tissues:
            if not self.mask.same_geometry(g):
                raise VolumeError("segmentation channels must share geometry")
        probs = self.stack()
        inside = self.mask.data > 0
        if inside.any():
            p = probs[:, inside]
            if p.min() < -1e-6 or p.max() > 1 + 1e-6:
                raise VolumeError("tissue probabilities must lie in [0, 1]")
            s = p.sum(axis=0)
            if np.abs(s - 1.0).max() > 1e-5:
                raise VolumeError("tissue probabilities must sum to 1 inside the mask")
        if (~inside).any() and np.abs(probs[:, ~inside]).max() > 0:
            raise VolumeError("tissue probabilities must be 0 outside the mask")

    def stack(self):
        """(n_tissues, nx, ny, nz) float32 view-copy of the probabilities."""
        return np.stack([g.data for g in self.tissues], axis=0)

    def harden(self):
        """Argmax labels; ties resolve to the lowest tissue index."""
        probs = self.stack()
        labels = np.argmax(probs, axis=0).astype(np.float32) + 1.0
        labels[self.mask.data <= 0] = 0.0
        return HardSegmentation(self.mask.with_data(labels))

    @classmethod
    def from_probs(cls, probs, mask):
        """Build from a (n_tissues, nx, ny, nz) array, zeroing outside the mask."""
        probs = np.asarray(probs, dtype=np.float32).copy()
        probs[:, mask.data <= 0] = 0.0
        return cls(tuple(mask.with_data(p) for p in probs), mask)


@dataclass(frozen=True)
class HardSegmentation:
    """Integer tissue labels: 0 background, then 1-based TISSUES indices."""

    labels: Grid3

    def __post_init__(self):
        vals = self.labels.data
        if not np.isin(vals, tuple(float(i) for i in range(len(TISSUES) + 1))).all():
            raise VolumeError("labels must be integers in 0..%d" % len(TISSUES))

    def as_int(self):
        return self.labels.data.astype(np.int32)

    def mask_bool(self):
        return self.labels.data > 0

    def tissue_mask(self, tissue):
        return self.as_int() == (TISSUES.index(tissue) + 1)

    def volume_ml(self, tissue):
        return float(self.tissue_mask(tissue).sum()) * self.labels.voxel_volume_ml()


def t1_ms_from_rate(r1_per_s):
    """Convert a longitudinal rate map (1/s) to T1 in ms."""
    r1 = np.asarray(r1_per_s, dtype=np.float64)
    if (r1 <= 0).any():
        raise VolumeError("relaxation rates must be > 0")
    return 1000.0 / r1


def t2s_ms_from_rate(r2s_per_s):
    """Convert an effective transverse rate map (1/s) to T2* in ms."""
    return t1_ms_from_rate(r2s_per_s)


# ---------------------------------------------------------------------------
# MVOL file format
# ---------------------------------------------------------------------------

def _mvol_paths(path):
    path = str(path)
    for suffix in (".mvol.json", ".mvol.raw"):
        if path.endswith(suffix):
            path = path[: -len(suffix)]
    return path + ".mvol.json", path + ".mvol.raw"


def write_mvol(channels, path, meta=None):
    """Write named channels (dict name -> Grid3) as an MVOL pair.

    The payload is one little-endian float32 block per channel, each block
    in x-fastest order. ``meta`` must be JSON-serializable.
    """
    names = list(channels)
    if not names:
        raise VolumeError("cannot write an MVOL with no channels")
    grids = [channels[n] for n in names]
    for g in grids[1:]:
        if not grids[0].same_geometry(g):
            raise VolumeError("all MVOL channels must share dims and spacing")
    header = {
        "magic": MVOL_MAGIC,
        "dims": list(grids[0].dims),
        "channels": len(names),
        "channel_names": names,
        "dtype": MVOL_DTYPE,
        "spacing_mm": list(grids[0].spacing_mm),
        "meta": meta or {},
    }
    json_path, raw_path = _mvol_paths(path)
    payload = b"".join(g.flat().astype("<f4").tobytes() for g in grids)
    with open(json_path, "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(raw_path, "wb") as fh:
        fh.write(payload)


def read_mvol(path):
    """Read an MVOL pair back into (channels dict, meta dict).

    Raises VolumeError on malformed headers, payload length mismatches, or
    non-finite payload values (reported with the offending location).
    """
    json_path, raw_path = _mvol_paths(path)
    if not os.path.exists(json_path):
        raise VolumeError(f"missing MVOL header {json_path}")
    if not os.path.exists(raw_path):
        raise VolumeError(f"missing MVOL payload {raw_path}")
    with open(json_path) as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise VolumeError(f"malformed MVOL header {json_path}: {exc}") from exc
    for key in ("magic", "dims", "channels", "channel_names", "dtype", "spacing_mm"):
        if key not in header:
            raise VolumeError(f"malformed MVOL header: missing '{key}'")
    if header["magic"] != MVOL_MAGIC:
        raise VolumeError(f"bad magic {header['magic']!r}, expected {MVOL_MAGIC!r}")
    if header["dtype"] != MVOL_DTYPE:
        raise VolumeError(f"unsupported dtype {header['dtype']!r}")
    dims = tuple(int(d) for d in header["dims"])
    names = list(header["channel_names"])
    if len(names) != int(header["channels"]):
        raise VolumeError("channel_names length disagrees with channel count")
    n_vox = dims[0] * dims[1] * dims[2]
    raw = np.fromfile(raw_path, dtype="<f4")
    if raw.size != n_vox * len(names):
        raise VolumeError(
            f"payload length mismatch: expected {n_vox * len(names)} floats, "
            f"got {raw.size}"
        )
    spacing = tuple(float(s) for s in header["spacing_mm"])
    channels = {}
    for ci, name in enumerate(names):
        block = raw[ci * n_vox:(ci + 1) * n_vox]
        bad = _first_nonfinite(block)
        if bad is not None:
            raise VolumeError(
                f"non-finite value in channel '{name}' at voxel "
                f"{_unravel_xfast(bad, dims)}"
            )
        channels[name] = Grid3.from_flat(dims, spacing, block)
    return channels, dict(header.get("meta", {}))


def write_mpm(mpm, path, meta=None):
    meta = dict(meta or {})
    meta.update({"subject_id": mpm.subject_id, "age_years": mpm.age_years})
    write_mvol(
        {"t1_ms": mpm.t1_ms, "t2s_ms": mpm.t2s_ms, "pd": mpm.pd, "mask": mpm.mask},
        path, meta=meta,
    )


def read_mpm(path):
    channels, meta = read_mvol(path)
    missing = [c for c in MPM_CHANNELS if c not in channels]
    if missing:
        raise VolumeError(f"MPM file is missing channels {missing}")
    return MpmVolume(
        t1_ms=channels["t1_ms"], t2s_ms=channels["t2s_ms"], pd=channels["pd"],
        mask=channels["mask"],
        subject_id=str(meta.get("subject_id", "")),
        age_years=float(meta.get("age_years", 0.0)),
    )


def write_soft(seg, path, meta=None):
    channels = {name: g for name, g in zip(TISSUES, seg.tissues)}
    channels["mask"] = seg.mask
    write_mvol(channels, path, meta=meta)


def read_soft(path):
    channels, meta = read_mvol(path)
    try:
        tissues = tuple(channels[name] for name in TISSUES)
        mask = channels["mask"]
    except KeyError as exc:
        raise VolumeError(f"soft segmentation missing channel {exc}") from exc
    return SoftSegmentation(tissues, mask), meta


def write_hard(seg, path, meta=None):
    write_mvol({"labels": seg.labels}, path, meta=meta)


def read_hard(path):
    channels, meta = read_mvol(path)
    if "labels" not in channels:
        raise VolumeError("hard segmentation missing 'labels' channel")
    return HardSegmentation(channels["labels"]), meta
