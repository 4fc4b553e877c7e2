"""Contrast synthesis: monotone intensity transfer times a smooth gain field.

The synthetic image is

    I_s(x) = lo + (hi - lo) * gain(x) * T(q(x))

with ``q`` the min-max normalized moving intensity, ``T`` a monotone
piecewise-linear transfer with ``K`` knots and ``gain`` a trilinearly
upsampled grid of positive gains. ``(lo, hi)`` is the fixed image range.

Raw parameters are unconstrained: knot increments are squares of the raw
transfer values and gains are exponentials of the raw gain values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .grid import Volume, interpolate, interpolate_adjoint

MAGIC = b"XSYN"
VERSION = 1
_HEAD = struct.Struct("<4sHI3I2d")


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SynthesisModel:
    transfer_raw: np.ndarray
    gain_raw: np.ndarray
    out_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        t = np.array(self.transfer_raw, dtype=np.float64).reshape(-1)
        g = np.array(self.gain_raw, dtype=np.float64)
        if t.size < 2:
            raise SynthesisError("transfer needs at least 2 knots")
        if g.ndim != 3 or min(g.shape) < 1:
            raise SynthesisError(f"gain grid must be 3D, got shape {g.shape}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(g))):
            raise SynthesisError("non-finite synthesis parameters")
        t.flags.writeable = False
        g.flags.writeable = False
        object.__setattr__(self, "transfer_raw", t)
        object.__setattr__(self, "gain_raw", g)
        object.__setattr__(self, "out_range", (float(self.out_range[0]), float(self.out_range[1])))

    @classmethod
    def identity(cls, n_knots=16, grid=(4, 4, 4), out_range=(0.0, 1.0)) -> "SynthesisModel":
        raw = np.full(n_knots, np.sqrt(1.0 / (n_knots - 1)))
        raw[0] = 0.0
        return cls(raw, np.zeros(grid), out_range)

    @property
    def n_knots(self) -> int:
        return self.transfer_raw.size

    @property
    def grid_dims(self) -> tuple:
        return tuple(int(n) for n in self.gain_raw.shape)

    @property
    def n_params(self) -> int:
        return self.n_knots + self.gain_raw.size

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.transfer_raw, self.gain_raw.reshape(-1)])

    def with_params(self, p) -> "SynthesisModel":
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (self.n_params,):
            raise SynthesisError(f"expected {self.n_params} parameters, got shape {p.shape}")
        k = self.n_knots
        return SynthesisModel(p[:k], p[k:].reshape(self.grid_dims), self.out_range)

    def knots(self) -> np.ndarray:
        """Transfer values at the knot positions ``k / (K - 1)``."""
        c = np.cumsum(self.transfer_raw ** 2)
        return c / _knot_scale(c)

    def transfer(self, q) -> np.ndarray:
        idx, f = _knot_cell(np.asarray(q, dtype=np.float64), self.n_knots)
        t = self.knots()
        lo, hi = t[idx], t[idx + 1]
        # clamped to the cell's knot values so rounding cannot break monotonicity
        return np.clip(lo + f * (hi - lo), lo, hi)

    def gain(self, dims) -> np.ndarray:
        return interpolate(np.exp(self.gain_raw), _gain_coords(dims, self.grid_dims))

    # -- serialization ----------------------------------------------------

    def to_bytes(self) -> bytes:
        head = _HEAD.pack(MAGIC, VERSION, self.n_knots, *self.grid_dims, *self.out_range)
        return head + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SynthesisModel":
        if len(blob) < _HEAD.size:
            raise SynthesisError("synthesis blob truncated")
        magic, version, k, gx, gy, gz, lo, hi = _HEAD.unpack_from(blob)
        if magic != MAGIC:
            raise SynthesisError(f"bad synthesis magic {magic!r}")
        if version != VERSION:
            raise SynthesisError(f"unsupported synthesis blob version {version}")
        n = k + gx * gy * gz
        if len(blob) != _HEAD.size + 8 * n:
            raise SynthesisError(f"synthesis blob size {len(blob)} does not match header")
        p = np.frombuffer(blob, dtype="<f8", count=n, offset=_HEAD.size).astype(np.float64)
        return cls(p[:k], p[k:].reshape(gx, gy, gz), (lo, hi))


def _knot_scale(c):
    return c[-1] if c[-1] > 0 else 1.0


def _knot_cell(q, k):
    s = q * (k - 1)
    idx = np.clip(np.floor(s).astype(np.intp), 0, k - 2)
    return idx, s - idx


def _gain_coords(dims, grid):
    """Gain-grid coordinates of every voxel; both grids span the same box."""
    axes = [(np.arange(n, dtype=np.float64) + 0.5) * (g / n) - 0.5 for n, g in zip(dims, grid)]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def normalized(v: Volume) -> np.ndarray:
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi == lo:
        return np.zeros_like(v.data)
    return (v.data - lo) / (hi - lo)


def synthesize(model: SynthesisModel, moving: Volume) -> Volume:
    lo, hi = model.out_range
    q = normalized(moving)
    return moving.with_data(lo + (hi - lo) * model.gain(moving.dims) * model.transfer(q))


def _knot_jacobian(model):
    """dT_k / d raw_j, shape (K, K)."""
    r = model.transfer_raw
    c = np.cumsum(r ** 2)
    scale = _knot_scale(c)
    t = c / scale
    k = r.size
    ind = (np.arange(k)[None, :] <= np.arange(k)[:, None]).astype(np.float64)
    return (2.0 * r[None, :] / scale) * (ind - t[:, None])


def synth_vjp(model: SynthesisModel, moving: Volume, w) -> np.ndarray:
    """``J^T w`` for image-shaped ``w``, with ``J = dI_s / d params``."""
    w = np.asarray(w, dtype=np.float64).reshape(moving.dims)
    lo, hi = model.out_range
    q = normalized(moving)
    gain = model.gain(moving.dims)
    idx, f = _knot_cell(q, model.n_knots)
    k = model.n_knots
    wg = (hi - lo) * w * gain
    a = (np.bincount(idx.ravel(), weights=(wg * (1.0 - f)).ravel(), minlength=k)
         + np.bincount(idx.ravel() + 1, weights=(wg * f).ravel(), minlength=k))
    g_transfer = _knot_jacobian(model).T @ a
    wt = (hi - lo) * w * model.transfer(q)
    coords = _gain_coords(moving.dims, model.grid_dims)
    g_gain = np.exp(model.gain_raw) * interpolate_adjoint(wt, coords, model.grid_dims)
    return np.concatenate([g_transfer, g_gain.reshape(-1)])


def synth_param_jacobian(model: SynthesisModel, moving: Volume, voxels=None) -> np.ndarray:
    """Rows ``dI_s(x) / d params`` for the flat voxel indices in ``voxels`` (all if None)."""
    lo, hi = model.out_range
    n = int(np.prod(moving.dims))
    voxels = np.arange(n) if voxels is None else np.asarray(voxels, dtype=np.intp).reshape(-1)
    q = normalized(moving).reshape(-1)[voxels]
    gain = model.gain(moving.dims).reshape(-1)[voxels]
    idx, f = _knot_cell(q, model.n_knots)
    k = model.n_knots
    weights = np.zeros((voxels.size, k))
    rows = np.arange(voxels.size)
    weights[rows, idx] += 1.0 - f
    weights[rows, idx + 1] += f
    jt = (hi - lo) * gain[:, None] * (weights @ _knot_jacobian(model))

    coords = _gain_coords(moving.dims, model.grid_dims).reshape(3, -1)[:, voxels]
    eg = np.exp(model.gain_raw).reshape(-1)
    tq = model.transfer(q)
    jg = np.empty((voxels.size, eg.size))
    for r in range(voxels.size):
        b = interpolate_adjoint(np.ones(1), coords[:, r:r + 1], model.grid_dims).reshape(-1)
        jg[r] = (hi - lo) * tq[r] * b * eg
    return np.concatenate([jt, jg], axis=1)


def pretrain_histogram_match(model: SynthesisModel, moving: Volume, fixed: Volume) -> SynthesisModel:
    """Initialize the transfer by CDF matching of moving onto fixed; gains reset to 1.

    Knot ``k`` at normalized moving intensity ``s_k`` is sent to the fixed
    quantile at the moving CDF value ``F_m(s_k)``. The targets are then
    projected onto non-decreasing sequences.
    """
    for name, v in (("moving", moving), ("fixed", fixed)):
        if float(v.data.max()) == float(v.data.min()):
            raise SynthesisError(f"{name} volume is constant")
    k = model.n_knots
    qm = np.sort(normalized(moving).reshape(-1))
    qf = normalized(fixed).reshape(-1)
    s = np.arange(k) / (k - 1)
    cdf = np.searchsorted(qm, s, side="right") / qm.size
    target = np.quantile(qf, cdf, method="inverted_cdf")
    target = np.maximum.accumulate(np.clip(target, 0.0, 1.0))
    raw = np.sqrt(np.diff(np.concatenate([[0.0], target])))
    lo, hi = float(fixed.data.min()), float(fixed.data.max())
    return SynthesisModel(raw, np.zeros(model.grid_dims), (lo, hi))
