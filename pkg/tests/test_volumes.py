import json
import struct

import numpy as np
import pytest

from physseg.volumes import (Grid3, HardSegmentation, MpmVolume,
                             SoftSegmentation, VolumeError, extract_patch,
                             read_mpm, read_mvol, t1_ms_from_rate, write_mpm,
                             write_mvol)


def grid_of(arr, spacing=(1.0, 1.0, 1.0)):
    arr = np.asarray(arr, dtype=np.float32)
    return Grid3(arr.shape, spacing, arr)


def test_grid_validation():
    with pytest.raises(VolumeError):
        Grid3((2, 2), (1, 1, 1), np.zeros((2, 2)))
    with pytest.raises(VolumeError):
        Grid3((2, 2, 2), (1, 0, 1), np.zeros((2, 2, 2)))
    with pytest.raises(VolumeError, match="payload length mismatch"):
        Grid3.from_flat((3, 4, 5), (1, 1, 1), np.zeros(59, dtype=np.float32))


def test_grid_rejects_nonfinite_with_location():
    data = np.zeros((3, 3, 3), dtype=np.float32)
    data[2, 0, 1] = np.nan
    with pytest.raises(VolumeError, match=r"\(2, 0, 1\)"):
        grid_of(data)


def test_grid_is_immutable():
    g = grid_of(np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        g.data[0, 0, 0] = 5.0


def test_flat_order_x_fastest():
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4, order="F")
    g = Grid3((2, 3, 4), (1, 1, 1), data)
    assert np.array_equal(g.flat(), np.arange(24, dtype=np.float32))
    # round trip through from_flat
    g2 = Grid3.from_flat((2, 3, 4), (1, 1, 1), g.flat())
    assert np.array_equal(g2.data, g.data)


def test_single_float_payload_bytes(tmp_path):
    g = grid_of(np.ones((1, 1, 1)))
    write_mvol({"v": g}, tmp_path / "one")
    payload = (tmp_path / "one.mvol.raw").read_bytes()
    assert payload == bytes.fromhex("0000803f")
    assert struct.unpack("<f", payload)[0] == 1.0


def test_zero_volume_roundtrip(tmp_path):
    g = grid_of(np.zeros((2, 2, 2)))
    write_mvol({"v": g}, tmp_path / "z")
    channels, meta = read_mvol(tmp_path / "z")
    assert list(channels) == ["v"]
    assert np.array_equal(channels["v"].data, np.zeros((2, 2, 2), np.float32))


def test_roundtrip_bit_exact(tmp_path, rng):
    for k in range(5):
        dims = tuple(int(d) for d in rng.integers(1, 7, size=3))
        grids = {
            f"c{i}": grid_of(rng.normal(size=dims).astype(np.float32))
            for i in range(int(rng.integers(1, 4)))
        }
        write_mvol(grids, tmp_path / f"a{k}", meta={"k": k})
        channels, meta = read_mvol(tmp_path / f"a{k}")
        write_mvol(channels, tmp_path / f"b{k}", meta=meta)
        raw_a = (tmp_path / f"a{k}.mvol.raw").read_bytes()
        raw_b = (tmp_path / f"b{k}.mvol.raw").read_bytes()
        assert raw_a == raw_b
        hdr_a = (tmp_path / f"a{k}.mvol.json").read_bytes()
        hdr_b = (tmp_path / f"b{k}.mvol.json").read_bytes()
        assert hdr_a == hdr_b


def test_payload_length_mismatch(tmp_path):
    g = grid_of(np.zeros((3, 4, 5)))
    write_mvol({"v": g}, tmp_path / "bad")
    raw = (tmp_path / "bad.mvol.raw").read_bytes()
    (tmp_path / "bad.mvol.raw").write_bytes(raw[:-4])  # drop one float
    with pytest.raises(VolumeError, match="payload length mismatch"):
        read_mvol(tmp_path / "bad")


def test_malformed_header(tmp_path):
    g = grid_of(np.zeros((2, 2, 2)))
    write_mvol({"v": g}, tmp_path / "hdr")
    hdr = json.loads((tmp_path / "hdr.mvol.json").read_text())
    del hdr["dims"]
    (tmp_path / "hdr.mvol.json").write_text(json.dumps(hdr))
    with pytest.raises(VolumeError, match="missing 'dims'"):
        read_mvol(tmp_path / "hdr")


def test_read_rejects_nonfinite_payload(tmp_path):
    g = grid_of(np.zeros((2, 2, 2)))
    write_mvol({"v": g}, tmp_path / "nan")
    bad = np.zeros(8, dtype="<f4")
    bad[3] = np.nan  # flat index 3 -> voxel (1, 1, 0)
    (tmp_path / "nan.mvol.raw").write_bytes(bad.tobytes())
    with pytest.raises(VolumeError, match=r"'v' at voxel \(1, 1, 0\)"):
        read_mvol(tmp_path / "nan")


def test_extract_patch_identity_and_values():
    ramp = np.arange(64, dtype=np.float32).reshape(4, 4, 4)
    g = grid_of(ramp)
    full = extract_patch(g, (0, 0, 0), (4, 4, 4))
    assert np.array_equal(full.data, g.data)
    sub = extract_patch(g, (1, 1, 1), (2, 2, 2))
    # direct index arithmetic oracle
    expect = np.empty((2, 2, 2), dtype=np.float32)
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                expect[dx, dy, dz] = ramp[1 + dx, 1 + dy, 1 + dz]
    assert np.array_equal(sub.data, expect)


def test_extract_patch_out_of_bounds():
    g = grid_of(np.zeros((4, 4, 4)))
    with pytest.raises(VolumeError):
        extract_patch(g, (3, 3, 3), (2, 2, 2))


def test_extract_patch_composes_as_corner_addition(rng):
    g = grid_of(rng.normal(size=(8, 8, 8)).astype(np.float32))
    a = extract_patch(extract_patch(g, (1, 2, 0), (6, 5, 7)), (2, 1, 3), (3, 3, 3))
    b = extract_patch(g, (3, 3, 3), (3, 3, 3))
    assert np.array_equal(a.data, b.data)


def test_extract_patch_source_unmodified():
    src = np.arange(27, dtype=np.float32).reshape(3, 3, 3)
    g = grid_of(src)
    before = g.data.copy()
    _ = extract_patch(g, (0, 0, 0), (2, 2, 2))
    assert np.array_equal(g.data, before)


def test_mpm_invariants():
    dims = (3, 3, 3)
    ones = grid_of(np.ones(dims))
    mask = grid_of(np.ones(dims))
    bad_t1 = grid_of(np.zeros(dims))
    with pytest.raises(VolumeError, match="t1_ms"):
        MpmVolume(t1_ms=bad_t1, t2s_ms=ones, pd=ones, mask=mask)
    small = grid_of(np.ones((2, 2, 2)))
    with pytest.raises(VolumeError, match="share dims"):
        MpmVolume(t1_ms=ones, t2s_ms=small, pd=ones, mask=mask)


def test_mpm_write_requires_valid_channels(tmp_path, small_phantom):
    mpm, _ = small_phantom
    write_mpm(mpm, tmp_path / "subj", meta={"note": "x"})
    back = read_mpm(tmp_path / "subj")
    assert back.subject_id == mpm.subject_id
    assert back.age_years == mpm.age_years
    assert np.array_equal(back.t1_ms.data, mpm.t1_ms.data)
    # second write is byte-identical
    write_mpm(back, tmp_path / "subj2", meta={"note": "x"})
    assert (tmp_path / "subj.mvol.raw").read_bytes() == \
        (tmp_path / "subj2.mvol.raw").read_bytes()


def test_soft_segmentation_validation():
    dims = (2, 2, 2)
    mask = grid_of(np.ones(dims))
    half = grid_of(np.full(dims, 0.5))
    quarter = grid_of(np.full(dims, 0.25))
    seg = SoftSegmentation((half, quarter, quarter), mask)
    hard = seg.harden()
    assert np.all(hard.as_int() == 1)  # argmax tie-free: csf has 0.5
    with pytest.raises(VolumeError, match="sum to 1"):
        SoftSegmentation((half, half, half), mask)


def test_soft_zero_outside_mask():
    dims = (2, 2, 2)
    mask_data = np.zeros(dims)
    mask_data[0, 0, 0] = 1.0
    mask = grid_of(mask_data)
    p = np.zeros((3,) + dims)
    p[1] = 0.3  # junk outside the mask must be cleared by from_probs
    p[0, 0, 0, 0] = 0.7  # the single in-mask voxel sums to 1
    seg = SoftSegmentation.from_probs(p, mask)
    assert seg.tissues[1].data[1, 1, 1] == 0.0
    labels = seg.harden()
    assert labels.as_int()[1, 1, 1] == 0
    assert labels.as_int()[0, 0, 0] == 1


def test_hard_segmentation_volume():
    labels = np.zeros((4, 4, 4), dtype=np.float32)
    labels[:2, 0, 0] = 2  # two GM voxels
    seg = HardSegmentation(Grid3((4, 4, 4), (2.0, 2.0, 2.0), labels))
    assert seg.volume_ml("gm") == pytest.approx(2 * 8.0 / 1000.0)


def test_rate_conversion():
    assert t1_ms_from_rate(1.0) == pytest.approx(1000.0)
    assert t1_ms_from_rate(0.5) == pytest.approx(2000.0)
    with pytest.raises(VolumeError):
        t1_ms_from_rate(0.0)
