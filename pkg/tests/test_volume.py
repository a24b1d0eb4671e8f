import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrreg.volume import (
    CorruptFileError, UnsupportedFormatError, Volume, crop_pad_center, load_volume, make_phantom,
    resample_isotropic, save_volume,
)


def test_volume_validates_input():
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), np.nan))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


def test_dims_are_xyz():
    v = Volume(np.zeros((5, 4, 3)))
    assert v.dims == (3, 4, 5)
    assert v.data.dtype == np.float32


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(rng.random((6, 5, 4)).astype(np.float32), (0.5, 1.0, 2.0), (1.0, -2.0, 3.0))
    save_volume(v, tmp_path / "vol")
    w = load_volume(tmp_path / "vol.json")
    assert np.array_equal(v.data, w.data)
    assert w.spacing_mm == v.spacing_mm and w.origin_mm == v.origin_mm


def test_load_rejects_bad_payload_and_dtype(tmp_path):
    v = make_phantom("sphere", 8, r=3.0)
    save_volume(v, tmp_path / "a")
    (tmp_path / "a.raw").write_bytes(b"\0" * 10)
    with pytest.raises(CorruptFileError):
        load_volume(tmp_path / "a")
    save_volume(v, tmp_path / "b")
    hdr = json.loads((tmp_path / "b.json").read_text())
    hdr["dtype"] = "i16le"
    (tmp_path / "b.json").write_text(json.dumps(hdr))
    with pytest.raises(UnsupportedFormatError):
        load_volume(tmp_path / "b")
    (tmp_path / "c.json").write_text("{not json")
    (tmp_path / "c.raw").write_bytes(b"")
    with pytest.raises(CorruptFileError):
        load_volume(tmp_path / "c")


def test_sphere_volume_close_to_analytic():
    v = make_phantom("sphere", 48, r=15.0)
    assert float(v.data.sum()) == pytest.approx(4 / 3 * np.pi * 15.0**3, rel=0.02)
    assert make_phantom("sphere", 8, r=0.0).data.sum() == 0.0


def test_box_voxel_count():
    v = make_phantom("box", 20, half=(4.0, 2.0, 6.0))
    # voxel centres sit at half-integers, so |x| <= 4 covers 8 of them
    assert int(v.data.sum()) == 8 * 4 * 12


def test_phantom_centred_origin():
    v = make_phantom("blob", (8, 10, 12), spacing=2.0)
    assert np.allclose(v.center_mm, 0.0)
    with pytest.raises(ValueError):
        make_phantom("torus", 8)


def test_tube_stack_has_no_mirror_symmetry():
    v = make_phantom("tube_stack", 64, spacing=2.0).data
    for axis in range(3):
        flipped = np.flip(v, axis=axis)
        assert np.abs(flipped - v).max() > 0.3


def test_resample_preserves_centre_and_mass():
    v = make_phantom("blob", (20, 24, 16), spacing=(1.0, 1.0, 2.0), sigma=5.0)
    r = resample_isotropic(v, 1.0)
    assert r.spacing_mm == (1.0, 1.0, 1.0)
    assert np.allclose(r.center_mm, v.center_mm)
    mass = lambda u: float(u.data.sum()) * np.prod(u.spacing_mm)  # noqa: E731
    assert mass(r) == pytest.approx(mass(v), rel=0.02)
    with pytest.raises(ValueError):
        resample_isotropic(v, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.integers(2, 9)] * 3), st.tuples(*[st.integers(1, 12)] * 3))
def test_crop_pad_keeps_world_positions(dims, target):
    rng = np.random.default_rng(1)
    v = Volume(rng.random(dims[::-1]).astype(np.float32), (1.0, 2.0, 0.5), (3.0, 4.0, 5.0))
    w = crop_pad_center(v, target)
    assert w.dims == tuple(target)
    # a voxel present in both grids holds the same value at the same world position
    idx_w = np.argwhere(w.data != 0)
    for kz, ky, kx in idx_w[:20]:
        world = np.asarray(w.origin_mm) + np.array([kx, ky, kz]) * np.asarray(w.spacing_mm)
        ix, iy, iz = np.round((world - np.asarray(v.origin_mm)) / np.asarray(v.spacing_mm)).astype(int)
        assert w.data[kz, ky, kx] == v.data[iz, iy, ix]
