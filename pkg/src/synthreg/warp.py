"""Dense displacement fields and the spatial transformer.

A field ``u`` stores per-voxel displacements in voxel units; the
transformation is ``phi(x) = x + u(x)`` and images are warped backward,
``(m o phi)(x) = m(x + u(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Volume, check_same_dims, identity_grid, interpolate, interpolate_adjoint


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Displacement vectors, array of shape ``(3, nx, ny, nz)``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 4 or data.shape[0] != 3:
            raise ValueError(f"field data must have shape (3, nx, ny, nz), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains NaN or Inf")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape[1:])

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "DisplacementField":
        return cls(np.zeros((3,) + tuple(dims)), spacing)


def sample_coords(u: DisplacementField) -> np.ndarray:
    """Absolute sampling positions ``x + u(x)``."""
    return identity_grid(u.dims) + u.data


def warp_volume(m: Volume, u: DisplacementField, boundary="clamp") -> Volume:
    """Backward-warp ``m`` by ``u`` with trilinear interpolation."""
    check_same_dims(m, u)
    return m.with_data(interpolate(m.data, sample_coords(u), boundary))


def warp_volume_grad(m: Volume, u: DisplacementField, boundary="clamp"):
    """Warped values and the image gradient at the displaced positions."""
    check_same_dims(m, u)
    return interpolate(m.data, sample_coords(u), boundary, grad=True)


def warp_adjoint(g: np.ndarray, u: DisplacementField, boundary="clamp") -> np.ndarray:
    """Transpose of warping (linear in intensities) applied to ``g``."""
    return interpolate_adjoint(g, sample_coords(u), u.dims, boundary)


def warp_labels_nearest(labels: Volume, u: DisplacementField) -> Volume:
    """Nearest-neighbour warp of an integer label map, clamped to the grid."""
    check_same_dims(labels, u)
    if not np.array_equal(labels.data, np.round(labels.data)):
        raise ValueError("label volume contains non-integer values")
    pos = sample_coords(u)
    idx = [np.clip(np.floor(p + 0.5).astype(np.intp), 0, n - 1) for p, n in zip(pos, u.dims)]
    return labels.with_data(labels.data[idx[0], idx[1], idx[2]])


def upsample_field(u: DisplacementField, target_dims, spacing=None) -> DisplacementField:
    """Resample ``u`` onto a finer grid and rescale displacements to its voxel units.

    Grids are aligned at their outer cell edges, so fine coordinate ``x``
    maps to coarse coordinate ``(x + 0.5) / r - 0.5`` with ``r`` the per-axis
    dimension ratio.
    """
    target_dims = tuple(int(n) for n in target_dims)
    if any(t < n for t, n in zip(target_dims, u.dims)):
        raise ValueError(f"target dims {target_dims} smaller than field dims {u.dims}")
    ratio = np.array(target_dims, dtype=np.float64) / np.array(u.dims, dtype=np.float64)
    axes = [(np.arange(t, dtype=np.float64) + 0.5) / r - 0.5 for t, r in zip(target_dims, ratio)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    out = np.stack([interpolate(u.data[c], coords) * ratio[c] for c in range(3)])
    if spacing is None:
        spacing = tuple(s / r for s, r in zip(u.spacing, ratio))
    return DisplacementField(out, spacing)


def jacobian_matrix(u: DisplacementField) -> np.ndarray:
    """``I + grad u`` per voxel, shape ``(nx, ny, nz, 3, 3)``; row = component."""
    if min(u.dims) < 2:
        raise ValueError(f"jacobian needs at least 2 voxels per axis, got {u.dims}")
    jac = np.empty(u.dims + (3, 3))
    for c in range(3):
        grads = np.gradient(u.data[c])
        for a in range(3):
            jac[..., c, a] = grads[a] + (1.0 if a == c else 0.0)
    return jac


def jacobian_determinant(u: DisplacementField) -> Volume:
    j = jacobian_matrix(u)
    det = (j[..., 0, 0] * (j[..., 1, 1] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 1])
           - j[..., 0, 1] * (j[..., 1, 0] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 0])
           + j[..., 0, 2] * (j[..., 1, 0] * j[..., 2, 1] - j[..., 1, 1] * j[..., 2, 0]))
    return Volume(det, u.spacing)
