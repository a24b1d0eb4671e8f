"""CT volume container, raw+JSON file I/O, resampling and analytic phantoms.

Volumes are stored as ``data[z, y, x]`` (z slowest, row-major). ``dims`` and
``spacing_mm`` are listed in (x, y, z) order, and ``origin_mm`` is the world
position of the centre of voxel (0, 0, 0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

SUPPORTED_DTYPES = {"f32le": np.dtype("<f4")}


class CorruptFileError(IOError):
    pass


class UnsupportedFormatError(IOError):
    pass


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError("volume data must be 3-D")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume values must be finite")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError("spacing must be three positive values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))

    @property
    def dims(self) -> tuple:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def center_mm(self) -> np.ndarray:
        """World position of the geometric centre of the voxel grid."""
        return np.asarray(self.origin_mm) + 0.5 * (np.asarray(self.dims) - 1) * np.asarray(self.spacing_mm)

    @property
    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.dims) * np.asarray(self.spacing_mm)

    def corner_landmarks(self) -> np.ndarray:
        """Bounding-box corners of the voxel centres plus the centre, relative to the centre."""
        half = 0.5 * (np.asarray(self.dims) - 1) * np.asarray(self.spacing_mm)
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return np.vstack([signs * half, np.zeros((1, 3))])


def save_volume(v: Volume, path) -> None:
    """Write ``<path>.json`` header and ``<path>.raw`` payload (``path`` without suffix)."""
    base = Path(path).with_suffix("")
    header = {"dims": list(v.dims), "spacing_mm": list(v.spacing_mm),
              "origin_mm": list(v.origin_mm), "dtype": "f32le"}
    base.with_suffix(".json").write_text(json.dumps(header, indent=2))
    base.with_suffix(".raw").write_bytes(v.data.astype("<f4").tobytes(order="C"))


def load_volume(path) -> Volume:
    base = Path(path).with_suffix("")
    try:
        header = json.loads(base.with_suffix(".json").read_text())
        payload = base.with_suffix(".raw").read_bytes()
    except json.JSONDecodeError as e:
        raise CorruptFileError(f"{base}.json: {e}") from e
    dtype = header.get("dtype")
    if dtype not in SUPPORTED_DTYPES:
        raise UnsupportedFormatError(f"dtype {dtype!r} not in {sorted(SUPPORTED_DTYPES)}")
    nx, ny, nz = (int(d) for d in header["dims"])
    np_dtype = SUPPORTED_DTYPES[dtype]
    if len(payload) != nx * ny * nz * np_dtype.itemsize:
        raise CorruptFileError(
            f"{base}.raw holds {len(payload)} bytes, header dims {[nx, ny, nz]} need "
            f"{nx * ny * nz * np_dtype.itemsize}")
    data = np.frombuffer(payload, dtype=np_dtype).reshape(nz, ny, nx).astype(np.float32)
    return Volume(data, tuple(header["spacing_mm"]), tuple(header.get("origin_mm", (0.0, 0.0, 0.0))))


def resample_isotropic(v: Volume, spacing: float) -> Volume:
    """Trilinear resampling onto an isotropic grid sharing the old grid's centre."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    old_sp = np.asarray(v.spacing_mm)
    new_dims = np.maximum(1, np.round(np.asarray(v.dims) * old_sp / spacing).astype(int))
    new_origin = v.center_mm - 0.5 * (new_dims - 1) * spacing
    # new voxel centres in old index coordinates, per axis (x, y, z)
    axes = [(new_origin[k] + spacing * np.arange(new_dims[k]) - v.origin_mm[k]) / old_sp[k] for k in range(3)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    out = ndimage.map_coordinates(v.data.astype(np.float64), [zz, yy, xx], order=1, mode="nearest")
    return Volume(out.astype(np.float32), (spacing,) * 3, tuple(new_origin))


def crop_pad_center(v: Volume, target_dims) -> Volume:
    """Crop or zero-pad each axis evenly; world positions of kept voxels are unchanged."""
    target = np.asarray(target_dims, dtype=int).reshape(-1)
    if target.size == 1:
        target = np.repeat(target, 3)
    if np.any(target <= 0):
        raise ValueError("target dims must be positive")
    out = np.zeros(tuple(target[::-1]), dtype=np.float32)
    src_sl, dst_sl, shift = [], [], []
    for n_old, n_new in zip(v.dims[::-1], target[::-1]):
        # offset of old index 0 in the new grid
        off = (n_new - n_old) // 2
        lo_src, lo_dst = max(0, -off), max(0, off)
        n = min(n_old - lo_src, n_new - lo_dst)
        src_sl.append(slice(lo_src, lo_src + n))
        dst_sl.append(slice(lo_dst, lo_dst + n))
        shift.append(off)
    out[tuple(dst_sl)] = v.data[tuple(src_sl)]
    off_xyz = np.asarray(shift[::-1], dtype=float)
    origin = np.asarray(v.origin_mm) - off_xyz * np.asarray(v.spacing_mm)
    return Volume(out, v.spacing_mm, tuple(origin))


def _grid_mm(dims, spacing):
    """Voxel-centre coordinates relative to the grid centre, as (x, y, z) arrays in [z, y, x] layout."""
    nx, ny, nz = dims
    sx, sy, sz = spacing
    z = (np.arange(nz) - 0.5 * (nz - 1)) * sz
    y = (np.arange(ny) - 0.5 * (ny - 1)) * sy
    x = (np.arange(nx) - 0.5 * (nx - 1)) * sx
    zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")
    return xx, yy, zz


def _smooth_step(d, width):
    """1 inside (d < 0), 0 outside, logistic transition of the given width in mm."""
    if width <= 0:
        return (d < 0).astype(np.float64)
    return 0.5 * (1.0 - np.tanh(d / width))


def make_phantom(kind: str, dims, spacing=1.0, **params) -> Volume:
    """Analytic test volumes centred on the grid.

    kind:
      ``sphere``     radius ``r`` (mm), optional ``center`` offset (mm).
      ``box``        half sizes ``half`` (mm, scalar or 3-vector).
      ``blob``       Gaussian, ``sigma`` (mm) scalar or 3-vector, optional ``center``.
      ``tube_stack`` stacked cylinders along y with distinct radii and intensities,
                     plus off-axis posterior rods so no rotation maps it onto itself.
                     ``edge`` (mm) softens boundaries; default 2.0. ``processes``
                     (default True) adds lateral rods of unequal length per body.
    """
    d = np.asarray(dims, dtype=int).reshape(-1)
    if d.size == 1:
        d = np.repeat(d, 3)
    if np.any(d <= 0):
        raise ValueError("dims must be positive")
    sp = tuple(np.broadcast_to(np.asarray(spacing, dtype=float), (3,)))
    xx, yy, zz = _grid_mm(d, sp)
    if kind == "sphere":
        r = float(params.get("r", 10.0))
        c = np.asarray(params.get("center", (0.0, 0.0, 0.0)), dtype=float)
        if r <= 0:
            data = np.zeros_like(xx)
        else:
            dist = np.sqrt((xx - c[0]) ** 2 + (yy - c[1]) ** 2 + (zz - c[2]) ** 2)
            data = (dist <= r).astype(np.float64)
    elif kind == "box":
        half = np.broadcast_to(np.asarray(params.get("half", 10.0), dtype=float), (3,))
        data = ((np.abs(xx) <= half[0]) & (np.abs(yy) <= half[1]) & (np.abs(zz) <= half[2])).astype(np.float64)
    elif kind == "blob":
        s = np.broadcast_to(np.asarray(params.get("sigma", 8.0), dtype=float), (3,))
        c = np.asarray(params.get("center", (0.0, 0.0, 0.0)), dtype=float)
        data = np.exp(-0.5 * (((xx - c[0]) / s[0]) ** 2 + ((yy - c[1]) / s[1]) ** 2 + ((zz - c[2]) / s[2]) ** 2))
    elif kind == "tube_stack":
        data = _tube_stack(xx, yy, zz, extent=np.asarray(d) * np.asarray(sp),
                           edge=float(params.get("edge", 2.0)),
                           processes=bool(params.get("processes", True)))
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    origin = tuple(-0.5 * (d - 1) * np.asarray(sp))
    return Volume(data.astype(np.float32), sp, origin)


def _tube_stack(xx, yy, zz, extent, edge, processes=True):
    """Vertebra-like cylinders stacked cranio-caudally (y), scaled to the grid extent."""
    scale = float(min(extent)) / 128.0
    out = np.zeros_like(xx)
    n = 4
    # unequal gaps (24, 28, 32 mm) so a one-level shift does not re-align the stack
    centres_y = np.array([-40.0, -16.0, 12.0, 44.0]) * scale
    radii = np.array([13.0, 15.0, 17.0, 19.0]) * scale
    heights = np.array([9.0, 10.0, 11.0, 12.0]) * scale
    levels = np.array([1.0, 0.85, 0.7, 0.55])
    # a gentle curve in x and a tilt so the stack is not a surface of revolution
    for i in range(n):
        yc = centres_y[i]
        xc = (4.0 + 3.0 * i) * scale
        zc = -4.0 * scale
        rho = np.sqrt((xx - xc) ** 2 + ((zz - zc) / 0.7) ** 2)  # bodies wider than deep
        body = _smooth_step(rho - radii[i], edge) * _smooth_step(np.abs(yy - yc) - heights[i], edge)
        out += levels[i] * body
        # posterior process: a rod behind each body, alternating left/right
        px = xc + (6.0 if i % 2 == 0 else -6.0) * scale
        rod = np.sqrt((xx - px) ** 2 + (yy - yc) ** 2)
        out += 0.9 * _smooth_step(rod - 4.0 * scale, edge) * _smooth_step(
            np.abs(zz - (zc + radii[i] + 10.0 * scale)) - 10.0 * scale, edge)
        if processes:
            # transverse processes: lateral rods, the left one shorter
            rod = np.sqrt((yy - yc) ** 2 + (zz - (zc + 0.6 * radii[i])) ** 2)
            span = np.where(xx < xc, 26.0 + 2.0 * i, 34.0 - 2.0 * i) * scale
            out += 0.8 * _smooth_step(rod - 3.0 * scale, edge) * _smooth_step(np.abs(xx - xc) - span, edge)
    # a thin lateral marker rod breaks the remaining mirror symmetry
    marker = np.sqrt((yy + 28.0 * scale) ** 2 + (zz - zc) ** 2)
    out += 0.6 * _smooth_step(marker - 3.0 * scale, edge) * _smooth_step(
        np.abs(xx - 41.0 * scale) - 12.0 * scale, edge)
    return out
