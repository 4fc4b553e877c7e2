"""Similarity terms, field regularizer and the joint registration objective.

The objective combines three terms::

    L = S_moving(I_f, I_m o phi) + lambda1 * (1 - NCC(I_f, I_s o phi))
        + lambda2 * smooth(u)

where ``S_moving`` is ``-MI``, ``1 - NCC`` or their sum. Every term comes
with an exact derivative with respect to the warped intensities so the
field and synthesis gradients are obtained by the chain rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.ndimage import correlate1d

from .grid import BOUNDARIES, Volume, check_same_dims, gradient_adjoint, interpolate
from .warp import DisplacementField, sample_coords, warp_adjoint, warp_volume_grad

SIM_CHOICES = ("MI", "NCC", "MI+NCC")

# C1 truncation of the Gaussian Parzen kernel at 3 sigma
_TAIL = float(np.exp(-4.5))


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    mu_l2: float = 0.01
    sim_moving: str = "MI"
    sim_synth: str = "NCC"
    ncc_window: int = 9
    ncc_eps: float = 1e-5
    mi_bins: int = 32
    mi_sigma: float = 0.5
    boundary: str = "clamp"

    def validate(self) -> "LossConfig":
        for key in ("lambda1", "lambda2", "mu_l2"):
            if not getattr(self, key) >= 0:
                raise ValueError(f"{key} must be >= 0, got {getattr(self, key)}")
        if self.sim_moving not in SIM_CHOICES:
            raise ValueError(f"sim_moving must be one of {SIM_CHOICES}, got {self.sim_moving!r}")
        if self.sim_synth != "NCC":
            raise ValueError(f"sim_synth must be 'NCC', got {self.sim_synth!r}")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError(f"ncc_window must be odd and >= 3, got {self.ncc_window}")
        if not self.ncc_eps > 0:
            raise ValueError(f"ncc_eps must be > 0, got {self.ncc_eps}")
        if self.mi_bins < 8:
            raise ValueError(f"mi_bins must be >= 8, got {self.mi_bins}")
        if not self.mi_sigma > 1.0 / 6.0:
            raise ValueError(f"mi_sigma must exceed 1/6 bin, got {self.mi_sigma}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")
        return self

    def replace(self, **kw) -> "LossConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return LossConfig(**vals)


# ---------------------------------------------------------------------------
# local normalized cross-correlation

def box_sum(x: np.ndarray, window: int) -> np.ndarray:
    """Sum over the cubic window centred at each voxel, clipped at the borders."""
    k = np.ones(window)
    for ax in range(x.ndim):
        x = correlate1d(x, k, axis=ax, mode="constant", cval=0.0)
    return x


def _check_window(dims, window):
    if window > min(dims):
        raise ValueError(f"NCC window {window} larger than volume dims {dims}")


def _ncc(a, b, window, eps, grad=False):
    n = box_sum(np.ones_like(a), window)
    sa, sb = box_sum(a, window), box_sum(b, window)
    ma, mb = sa / n, sb / n
    cross = box_sum(a * b, window) - sa * mb
    va = box_sum(a * a, window) - sa * ma
    vb = box_sum(b * b, window) - sb * mb
    den = va * vb + eps
    cc = cross * cross / den
    value = float(cc.mean())
    if not grad:
        return value, None
    alpha = 2.0 * cross / den
    beta = -cross * cross * va / (den * den)
    g = (a * box_sum(alpha, window) - box_sum(alpha * ma, window)
         + 2.0 * (b * box_sum(beta, window) - box_sum(beta * mb, window)))
    return value, g / a.size


def ncc_local(a: Volume, b: Volume, window: int = 9, eps: float = 1e-5) -> float:
    """Mean squared local NCC over windows of ``window``^3 voxels, in [0, 1]."""
    check_same_dims(a, b)
    _check_window(a.dims, window)
    return _ncc(a.data, b.data, window, eps)[0]


# ---------------------------------------------------------------------------
# Parzen-window mutual information

def _normalize(x):
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x), lo, 0.0
    return (x - lo) / (hi - lo), lo, hi - lo


def parzen_kernel(d, sigma):
    """Gaussian of width ``sigma`` cut to zero (with zero slope) at ``3 sigma``."""
    d2 = d * d / (2.0 * sigma * sigma)
    k = np.exp(-d2) - _TAIL * (5.5 - d2)
    return np.where(np.abs(d) < 3.0 * sigma, k, 0.0)


def _parzen_kernel_deriv(d, sigma):
    s2 = sigma * sigma
    dk = (d / s2) * (_TAIL - np.exp(-d * d / (2.0 * s2)))
    return np.where(np.abs(d) < 3.0 * sigma, dk, 0.0)


def parzen_weights(q, bins, sigma, grad=False):
    """Per-sample bin weights (each row sums to 1) for intensities ``q`` in [0, 1]."""
    t = q.reshape(-1) * (bins - 1)
    d = t[:, None] - np.arange(bins, dtype=np.float64)[None, :]
    k = parzen_kernel(d, sigma)
    s = k.sum(axis=1)
    w = k / s[:, None]
    if not grad:
        return w, None
    dk = _parzen_kernel_deriv(d, sigma)
    dw = (dk - w * dk.sum(axis=1)[:, None]) / s[:, None]
    # d/dq = (bins - 1) d/dt
    return w, dw * (bins - 1)


def _parzen_taps(q, bins, sigma, grad=False):
    """Sparse form of :func:`parzen_weights`: the few bins inside each sample's kernel support.

    Returns ``(idx, w, dw)`` of shape ``(n, taps)``; unused taps carry zero weight.
    """
    t = q.reshape(-1) * (bins - 1)
    taps = int(np.ceil(6.0 * sigma)) + 1
    first = np.floor(t - 3.0 * sigma).astype(np.intp) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    d = t[:, None] - idx
    inside = (idx >= 0) & (idx < bins)
    k = np.where(inside, parzen_kernel(d, sigma), 0.0)
    s = k.sum(axis=1)
    w = k / s[:, None]
    idx = np.clip(idx, 0, bins - 1)
    if not grad:
        return idx, w, None
    dk = np.where(inside, _parzen_kernel_deriv(d, sigma), 0.0)
    dw = (dk - w * dk.sum(axis=1)[:, None]) / s[:, None]
    return idx, w, dw * (bins - 1)


def _joint_from_taps(ia, wa, ib, wb, bins):
    n = ia.shape[0]
    cells = (ia[:, :, None] * bins + ib[:, None, :]).reshape(-1)
    mass = (wa[:, :, None] * wb[:, None, :]).reshape(-1)
    return np.bincount(cells, weights=mass, minlength=bins * bins).reshape(bins, bins) / n


def joint_density(a: Volume, b: Volume, bins: int = 32, sigma: float = 0.5):
    """Joint Parzen density of the min-max normalized intensities and its marginals."""
    check_same_dims(a, b)
    ia, wa, _ = _parzen_taps(_normalize(a.data)[0], bins, sigma)
    ib, wb, _ = _parzen_taps(_normalize(b.data)[0], bins, sigma)
    p = _joint_from_taps(ia, wa, ib, wb, bins)
    return p, p.sum(axis=1), p.sum(axis=0)


def _mi_from_joint(p):
    pa, pb = p.sum(axis=1), p.sum(axis=0)
    nz = p > 0
    i, j = np.nonzero(nz)
    return float(np.sum(p[nz] * np.log(p[nz] / (pa[i] * pb[j]))))


def _mi(a, b, bins, sigma, grad=False, b_range=None):
    """MI of ``a`` and ``b``. ``b_range = (lo, hi)`` fixes the binning range of ``b``
    instead of its own min and max, so the bins cannot move with ``b``."""
    qa, _, ra = _normalize(a)
    if ra == 0.0:
        return 0.0, (np.zeros_like(b) if grad else None)
    if b_range is None:
        qb, _, rb = _normalize(b)
    else:
        lo, rb = b_range[0], b_range[1] - b_range[0]
        inside = (b >= lo) & (b <= b_range[1])
        qb = np.clip((b - lo) / rb, 0.0, 1.0) if rb > 0 else None
    if rb == 0.0:
        return 0.0, (np.zeros_like(b) if grad else None)
    n = a.size
    ia, wa, _ = _parzen_taps(qa, bins, sigma)
    ib, wb, dwb = _parzen_taps(qb, bins, sigma, grad=grad)
    p = _joint_from_taps(ia, wa, ib, wb, bins)
    value = _mi_from_joint(p)
    if not grad:
        return value, None
    pb = p.sum(axis=0)
    logp = np.log(np.where(p > 0, p, 1.0))
    logpb = np.log(np.where(pb > 0, pb, 1.0))
    # dMI / d wb(x, j) at the taps of b; the marginal of `a` does not depend on b
    gw = np.einsum("xs,xst->xt", wa, logp[ia[:, :, None], ib[:, None, :]]) - logpb[ib]
    gq = (np.sum(gw * dwb, axis=1) / n).reshape(b.shape)
    if b_range is not None:
        return value, np.where(inside, gq / rb, 0.0)
    # chain through the min-max normalization of b
    flat_b = b.reshape(-1)
    g = gq / rb
    qflat = qb.reshape(-1)
    gflat = g.reshape(-1)
    gqf = gq.reshape(-1)
    gflat[np.argmin(flat_b)] += np.sum(gqf * (qflat - 1.0)) / rb
    gflat[np.argmax(flat_b)] -= np.sum(gqf * qflat) / rb
    return value, gflat.reshape(b.shape)


def mutual_information(a: Volume, b: Volume, bins: int = 32, sigma: float = 0.5) -> float:
    """Mutual information (nats) of the Parzen joint density; 0 for a constant input."""
    check_same_dims(a, b)
    return _mi(a.data, b.data, bins, sigma)[0]


# ---------------------------------------------------------------------------
# regularizer

def _smoothness(u, mu_l2, grad=False):
    n = u[0].size
    val = 0.0
    g = np.zeros_like(u) if grad else None
    for c in range(3):
        for ax, d in enumerate(np.gradient(u[c])):
            val += float(np.sum(d * d))
            if grad:
                g[c] += gradient_adjoint(2.0 * d, ax)
    val = val / (3 * n) + mu_l2 * float(np.sum(u * u)) / n
    if grad:
        g = g / (3 * n) + (2.0 * mu_l2 / n) * u
    return val, g


def smoothness(u: DisplacementField, mu_l2: float = 0.0) -> float:
    """Mean over voxels and components of ``|grad u_c|^2``, plus ``mu_l2 * mean |u|^2``."""
    if min(u.dims) < 2:
        raise ValueError(f"smoothness needs at least 2 voxels per axis, got {u.dims}")
    return _smoothness(u.data, mu_l2)[0]


# ---------------------------------------------------------------------------
# objective

def _similarity(fixed, warped, metric, cfg, grad, warped_range=None):
    """Similarity as a loss (lower is better) and its derivative wrt ``warped``."""
    val = 0.0
    g = np.zeros_like(warped) if grad else None
    if metric in ("NCC", "MI+NCC"):
        ncc, gn = _ncc(fixed, warped, cfg.ncc_window, cfg.ncc_eps, grad)
        val = 1.0 - ncc
        if grad:
            g -= gn
    if metric in ("MI", "MI+NCC"):
        mi, gm = _mi(fixed, warped, cfg.mi_bins, cfg.mi_sigma, grad, warped_range)
        val = -mi if metric == "MI" else val - mi
        if grad:
            g -= gm
    return val, g


def similarity_loss(fixed: Volume, warped: Volume, metric: str, cfg: LossConfig,
                    warped_range=None) -> float:
    """``1 - NCC``, ``-MI`` or their sum, as used inside the objective.

    ``warped_range = (lo, hi)`` sets the MI binning range of ``warped``; the
    objective passes the intensity range of the unwarped moving image.
    """
    check_same_dims(fixed, warped)
    if metric in ("NCC", "MI+NCC"):
        _check_window(fixed.dims, cfg.ncc_window)
    return _similarity(fixed.data, warped.data, metric, cfg, False, warped_range)[0]


TERMS = ("sim_moving", "sim_synth", "smooth")


def _warp(img, u, boundary, grad):
    if grad:
        return warp_volume_grad(img, u, boundary)
    return interpolate(img.data, sample_coords(u), boundary), None


def mi_range(img: np.ndarray, boundary: str = "clamp") -> tuple:
    """MI binning range for a warped copy of ``img``: its unwarped min and max.

    Fixing the bins to the unwarped image means a warp cannot raise MI by
    trimming the extremes that would otherwise set the range. With zero
    padding the range also covers 0.
    """
    lo, hi = float(img.min()), float(img.max())
    if boundary == "zero":
        lo, hi = min(lo, 0.0), max(hi, 0.0)
    return lo, hi


@dataclass
class LossEvaluation:
    total: float
    terms: dict
    grad_field: np.ndarray | None = None
    grad_warped_synth: np.ndarray | None = field(default=None, repr=False)
    warped_moving: np.ndarray | None = field(default=None, repr=False)
    warped_synth: np.ndarray | None = field(default=None, repr=False)


def evaluate(fixed: Volume, moving: Volume, synth: Volume | None, u: DisplacementField,
             cfg: LossConfig, grad: bool = False) -> LossEvaluation:
    """Objective value, weighted term breakdown and (optionally) gradients.

    ``grad_field`` is dL/du; ``grad_warped_synth`` is dL/d(I_s o phi), the
    quantity the synthesis parameters are trained on.
    """
    items = [fixed, moving, u] + ([synth] if synth is not None else [])
    check_same_dims(*items)
    if cfg.sim_moving in ("NCC", "MI+NCC") or (cfg.lambda1 > 0 and synth is not None):
        _check_window(fixed.dims, cfg.ncc_window)
    f = fixed.data
    wm, dwm = _warp(moving, u, cfg.boundary, grad)
    sim_m, g_m = _similarity(f, wm, cfg.sim_moving, cfg, grad, mi_range(moving.data, cfg.boundary))

    sim_s, g_s, ws = 0.0, None, None
    g_field = g_m * dwm if grad else None
    if synth is not None and cfg.lambda1 > 0:
        ws, dws = _warp(synth, u, cfg.boundary, grad)
        ncc, gn = _ncc(f, ws, cfg.ncc_window, cfg.ncc_eps, grad)
        sim_s = cfg.lambda1 * (1.0 - ncc)
        if grad:
            g_s = -cfg.lambda1 * gn
            g_field = g_field + g_s * dws

    sm, g_sm = _smoothness(u.data, cfg.mu_l2, grad)
    sm = cfg.lambda2 * sm
    if grad:
        g_field = g_field + cfg.lambda2 * g_sm

    terms = {"sim_moving": sim_m, "sim_synth": sim_s, "smooth": sm}
    total = sim_m + sim_s + sm
    return LossEvaluation(total, terms, g_field, g_s, wm, ws)


def total_loss(fixed: Volume, moving: Volume, synth: Volume | None, u: DisplacementField,
               cfg: LossConfig):
    """Objective value and its weighted breakdown; ``total == sum(breakdown.values())``."""
    ev = evaluate(fixed, moving, synth, u, cfg)
    return ev.total, dict(ev.terms)


def grad_wrt_field(fixed: Volume, moving: Volume, synth: Volume | None, u: DisplacementField,
                   cfg: LossConfig) -> DisplacementField:
    ev = evaluate(fixed, moving, synth, u, cfg, grad=True)
    return DisplacementField(ev.grad_field, u.spacing)


def grad_wrt_synth(fixed: Volume, model, moving: Volume, u: DisplacementField,
                   cfg: LossConfig) -> np.ndarray:
    """Gradient of ``lambda1 * (1 - NCC(I_f, S(I_m) o phi))`` wrt the raw synthesis parameters."""
    from .synth import synth_vjp, synthesize

    if cfg.lambda1 == 0:
        return np.zeros(model.n_params)
    check_same_dims(fixed, moving, u)
    _check_window(fixed.dims, cfg.ncc_window)
    synth = synthesize(model, moving)
    ws = _warp(synth, u, cfg.boundary, False)[0]
    _, gn = _ncc(fixed.data, ws, cfg.ncc_window, cfg.ncc_eps, grad=True)
    img_grad = warp_adjoint(-cfg.lambda1 * gn, u, cfg.boundary)
    return synth_vjp(model, moving, img_grad)
