"""Scalar 3D volumes, trilinear interpolation and resampling.

Coordinates are continuous voxel indices with voxel centers at integers.
Volumes store their samples as a C-ordered float64 array of shape
``(nx, ny, nz)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BOUNDARIES = ("clamp", "zero")


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable scalar volume on a regular grid.

    Parameters
    ----------
    data : array_like, shape (nx, ny, nz)
        Voxel values. Copied and converted to float64.
    spacing : tuple of float
        Voxel size in mm along each axis.
    affine : array_like, shape (4, 4), optional
        Grid-to-world matrix carried along for file output only.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains NaN or Inf")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        if self.affine is not None:
            aff = np.array(self.affine, dtype=np.float64)
            if aff.shape != (4, 4):
                raise ValueError("affine must be 4x4")
            aff.flags.writeable = False
            object.__setattr__(self, "affine", aff)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def geometry(self) -> "GridGeometry":
        return GridGeometry(self.dims, self.spacing)

    def with_data(self, data) -> "Volume":
        """Same geometry, new samples."""
        return Volume(data, self.spacing, self.affine)


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple
    spacing: tuple

    def matches(self, other: "GridGeometry", rtol: float = 1e-6) -> bool:
        return tuple(self.dims) == tuple(other.dims) and np.allclose(
            self.spacing, other.spacing, rtol=rtol, atol=0.0)


def check_same_dims(*items):
    dims = [tuple(x.dims) for x in items]
    if any(d != dims[0] for d in dims[1:]):
        raise ValueError(f"dimension mismatch: {dims}")


# ---------------------------------------------------------------------------
# interpolation kernel

def _axis_setup(x, n, boundary):
    """Lower cell index, fractional offset and derivative mask for one axis."""
    if boundary == "clamp":
        xc = np.clip(x, 0.0, n - 1.0)
        if n == 1:
            i0 = np.zeros(x.shape, dtype=np.intp)
            return i0, i0, np.zeros_like(xc), np.zeros(x.shape, dtype=bool)
        i0 = np.minimum(np.floor(xc).astype(np.intp), n - 2)
        frac = xc - i0
        # right derivative: zero wherever x + eps is clamped
        inside = (x >= 0.0) & (x < n - 1.0)
        return i0, i0 + 1, frac, inside
    if boundary == "zero":
        i0 = np.floor(x).astype(np.intp)
        frac = x - i0
        return i0, i0 + 1, frac, np.ones(x.shape, dtype=bool)
    raise ValueError(f"unknown boundary policy {boundary!r}, expected one of {BOUNDARIES}")


def _gather(data, ix, iy, iz, boundary):
    if boundary == "clamp":
        return data[ix, iy, iz]
    nx, ny, nz = data.shape
    ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
    out = np.zeros(ix.shape, dtype=np.float64)
    out[ok] = data[ix[ok], iy[ok], iz[ok]]
    return out


def interpolate(data, coords, boundary="clamp", grad=False):
    """Trilinear interpolation of ``data`` at ``coords`` (shape (3, ...)).

    Returns values, or ``(values, gradient)`` with gradient of shape
    ``(3, ...)`` when ``grad`` is set. The value path is identical in both
    modes, so values agree bit for bit.
    """
    data = np.asarray(data, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    shape = coords.shape[1:]
    cx, cy, cz = (c.reshape(-1) for c in coords)
    x0, x1, fx, mx = _axis_setup(cx, data.shape[0], boundary)
    y0, y1, fy, my = _axis_setup(cy, data.shape[1], boundary)
    z0, z1, fz, mz = _axis_setup(cz, data.shape[2], boundary)
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz

    d000 = _gather(data, x0, y0, z0, boundary)
    d100 = _gather(data, x1, y0, z0, boundary)
    d010 = _gather(data, x0, y1, z0, boundary)
    d110 = _gather(data, x1, y1, z0, boundary)
    d001 = _gather(data, x0, y0, z1, boundary)
    d101 = _gather(data, x1, y0, z1, boundary)
    d011 = _gather(data, x0, y1, z1, boundary)
    d111 = _gather(data, x1, y1, z1, boundary)

    val = (d000 * gx * gy * gz + d100 * fx * gy * gz
           + d010 * gx * fy * gz + d110 * fx * fy * gz
           + d001 * gx * gy * fz + d101 * fx * gy * fz
           + d011 * gx * fy * fz + d111 * fx * fy * fz)
    if not grad:
        return val.reshape(shape)

    dx = ((d100 - d000) * gy * gz + (d110 - d010) * fy * gz
          + (d101 - d001) * gy * fz + (d111 - d011) * fy * fz)
    dy = ((d010 - d000) * gx * gz + (d110 - d100) * fx * gz
          + (d011 - d001) * gx * fz + (d111 - d101) * fx * fz)
    dz = ((d001 - d000) * gx * gy + (d101 - d100) * fx * gy
          + (d011 - d010) * gx * fy + (d111 - d110) * fx * fy)
    g = np.stack([np.where(mx, dx, 0.0), np.where(my, dy, 0.0), np.where(mz, dz, 0.0)])
    return val.reshape(shape), g.reshape((3,) + shape)


def interpolate_adjoint(values, coords, dims, boundary="clamp"):
    """Transpose of :func:`interpolate` with respect to the sampled data.

    Scatters ``values`` (one per sample point) back onto a grid of shape
    ``dims`` with the trilinear weights used by :func:`interpolate`.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    cx, cy, cz = (np.asarray(c, dtype=np.float64).reshape(-1) for c in coords)
    nx, ny, nz = dims
    x0, x1, fx, _ = _axis_setup(cx, nx, boundary)
    y0, y1, fy, _ = _axis_setup(cy, ny, boundary)
    z0, z1, fz, _ = _axis_setup(cz, nz, boundary)
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    out = np.zeros(nx * ny * nz)
    corners = (
        (x0, y0, z0, gx * gy * gz), (x1, y0, z0, fx * gy * gz),
        (x0, y1, z0, gx * fy * gz), (x1, y1, z0, fx * fy * gz),
        (x0, y0, z1, gx * gy * fz), (x1, y0, z1, fx * gy * fz),
        (x0, y1, z1, gx * fy * fz), (x1, y1, z1, fx * fy * fz),
    )
    for ix, iy, iz, w in corners:
        ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
        flat = np.ravel_multi_index((ix[ok], iy[ok], iz[ok]), (nx, ny, nz))
        out += np.bincount(flat, weights=values[ok] * w[ok], minlength=out.size)
    return out.reshape(dims)


def sample_trilinear(v: Volume, x, boundary="clamp") -> float:
    """Interpolated value of ``v`` at the continuous voxel point ``x``."""
    pt = np.asarray(x, dtype=np.float64).reshape(3, 1)
    return float(interpolate(v.data, pt, boundary)[0])


def sample_trilinear_grad(v: Volume, x, boundary="clamp"):
    """Value and exact gradient of the trilinear interpolant at ``x``.

    At cell faces the derivative of the cell containing ``x + eps`` is used;
    along clamped axes the derivative is zero.
    """
    pt = np.asarray(x, dtype=np.float64).reshape(3, 1)
    val, g = interpolate(v.data, pt, boundary, grad=True)
    return float(val[0]), g[:, 0].copy()


def identity_grid(dims) -> np.ndarray:
    return np.indices(dims, dtype=np.float64)


# ---------------------------------------------------------------------------
# resampling

def resample_to(v: Volume, dims, spacing) -> Volume:
    """Resample onto a grid sharing the world origin (voxel 0 centers coincide)."""
    dims = tuple(int(n) for n in dims)
    spacing = tuple(float(s) for s in spacing)
    axes = [np.arange(n, dtype=np.float64) * (s_out / s_in)
            for n, s_out, s_in in zip(dims, spacing, v.spacing)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    affine = None
    if v.affine is not None:
        affine = v.affine.copy()
        affine[:3, :3] = affine[:3, :3] * (np.array(spacing) / np.array(v.spacing))
    return Volume(interpolate(v.data, coords), spacing, affine)


def resample_isotropic(v: Volume, target_spacing: float) -> Volume:
    """Resample to isotropic voxels of ``target_spacing`` mm."""
    if not target_spacing > 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    dims = tuple(max(1, int(round(n * s / target_spacing))) for n, s in zip(v.dims, v.spacing))
    if dims == v.dims and all(s == target_spacing for s in v.spacing):
        return Volume(v.data, v.spacing, v.affine)
    return resample_to(v, dims, (target_spacing,) * 3)


def center_crop_or_pad(v: Volume, target_dims) -> Volume:
    """Symmetric crop or zero pad to ``target_dims``; the low side gets the smaller half."""
    target_dims = tuple(int(t) for t in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise ValueError(f"target dims must be three values >= 1, got {target_dims}")
    out = np.zeros(target_dims)
    src, dst = [], []
    for n, t in zip(v.dims, target_dims):
        if n >= t:
            lo = (n - t) // 2
            src.append(slice(lo, lo + t))
            dst.append(slice(0, t))
        else:
            lo = (t - n) // 2
            src.append(slice(0, n))
            dst.append(slice(lo, lo + n))
    out[tuple(dst)] = v.data[tuple(src)]
    return Volume(out, v.spacing, v.affine)


def spatial_gradient(v: Volume):
    """Central differences inside, one-sided at the borders, in voxel units."""
    if min(v.dims) < 2:
        raise ValueError(f"spatial gradient needs at least 2 voxels per axis, got {v.dims}")
    return tuple(v.with_data(g) for g in np.gradient(v.data))


def gradient_adjoint(r: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of ``np.gradient(., axis=axis)`` applied to ``r``."""
    r = np.moveaxis(np.asarray(r, dtype=np.float64), axis, 0)
    out = np.zeros_like(r)
    n = r.shape[0]
    if n == 2:
        out[0] = -r[0] - r[1]
        out[1] = r[0] + r[1]
        return np.moveaxis(out, 0, axis)
    out[0] -= r[0]
    out[1] += r[0]
    out[-1] += r[-1]
    out[-2] -= r[-1]
    half = 0.5 * r[1:-1]
    out[2:] += half
    out[:-2] -= half
    return np.moveaxis(out, 0, axis)
