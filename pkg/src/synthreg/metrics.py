"""Overlap, surface distance, folding and endpoint-error measures."""

from __future__ import annotations

import csv

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from .grid import Volume, check_same_dims
from .warp import DisplacementField, jacobian_determinant

LABEL_NAMES = {1: "white_matter", 2: "cortex", 3: "ventricle", 4: "deep_gray"}
TABLE_COLUMNS = ("region", "dice", "asd_mm")

# below this many voxels surface distances are computed pairwise
BRUTE_FORCE_LIMIT = 32 ** 3


def _data(x):
    return x.data if isinstance(x, Volume) else np.asarray(x)


def _mask(labels, label):
    d = _data(labels)
    if label == "foreground":
        return d > 0
    return d == label


def dice_masks(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


def dice(a, b, label) -> float:
    """Dice overlap of ``label`` (or ``"foreground"`` for all labels > 0)."""
    check_same_dims(a, b)
    return dice_masks(_mask(a, label), _mask(b, label))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with a face neighbour outside the mask; outside the grid counts as outside."""
    return mask & ~binary_erosion(mask, structure=generate_binary_structure(3, 1), border_value=0)


def _mean_min_dist_brute(src, dst, spacing):
    ps = np.argwhere(src) * spacing
    pd = np.argwhere(dst) * spacing
    out = np.empty(len(ps))
    for start in range(0, len(ps), 512):
        block = ps[start:start + 512]
        d2 = ((block[:, None, :] - pd[None, :, :]) ** 2).sum(-1)
        out[start:start + 512] = np.sqrt(d2.min(axis=1))
    return float(out.mean())


def _mean_min_dist_edt(src, dst, spacing):
    dist = distance_transform_edt(~dst, sampling=spacing)
    return float(dist[src].mean())


def asd_masks(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0), method="auto") -> float:
    if not a.any() or not b.any():
        raise ValueError("ASD undefined for an empty mask")
    ba, bb = boundary(a), boundary(b)
    spacing = np.asarray(spacing, dtype=np.float64)
    if method == "auto":
        method = "brute" if a.size < BRUTE_FORCE_LIMIT else "edt"
    fn = {"brute": _mean_min_dist_brute, "edt": _mean_min_dist_edt}[method]
    return 0.5 * (fn(ba, bb, spacing) + fn(bb, ba, spacing))


def asd(a, b, label, spacing=None, method="auto") -> float:
    """Symmetric average surface distance in mm between the ``label`` surfaces."""
    check_same_dims(a, b)
    if spacing is None:
        spacing = a.spacing if isinstance(a, Volume) else (1.0, 1.0, 1.0)
    ma, mb = _mask(a, label), _mask(b, label)
    if not ma.any() or not mb.any():
        raise ValueError(f"label {label!r} is empty in at least one label map")
    return asd_masks(ma, mb, spacing, method)


def folding_fraction(u: DisplacementField) -> float:
    """Share of interior voxels whose Jacobian determinant is <= 0."""
    if min(u.dims) < 3:
        return 0.0
    det = jacobian_determinant(u).data[1:-1, 1:-1, 1:-1]
    return float(np.count_nonzero(det <= 0)) / det.size


def endpoint_error(u_est: DisplacementField, u_true: DisplacementField, mask=None, spacing=None):
    """Mean and max displacement error in mm over ``mask`` (all voxels if None)."""
    check_same_dims(u_est, u_true)
    spacing = np.asarray(spacing if spacing is not None else u_true.spacing, dtype=np.float64)
    diff = (u_est.data - u_true.data) * spacing[:, None, None, None]
    err = np.sqrt((diff ** 2).sum(axis=0))
    if mask is not None:
        err = err[_data(mask).astype(bool)]
    if err.size == 0:
        raise ValueError("empty mask")
    return float(err.mean()), float(err.max())


def label_table(reference, warped, labels=None, spacing=None, names=None):
    """Rows ``(region, dice, asd_mm)`` per label plus the whole foreground."""
    names = {**LABEL_NAMES, **(names or {})}
    ref, mov = _data(reference), _data(warped)
    if spacing is None:
        spacing = reference.spacing if isinstance(reference, Volume) else (1.0, 1.0, 1.0)
    if labels is None:
        labels = sorted(int(v) for v in np.union1d(np.unique(ref), np.unique(mov)) if v > 0)
    rows = []
    for label in list(labels) + ["foreground"]:
        ma, mb = _mask(ref, label), _mask(mov, label)
        d = dice_masks(ma, mb)
        dist = asd_masks(ma, mb, spacing) if ma.any() and mb.any() else float("nan")
        region = "whole_foreground" if label == "foreground" else names.get(label, f"label_{label}")
        rows.append((region, d, dist))
    return rows


def write_table(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for region, d, dist in rows:
            w.writerow([region, f"{d:.6f}", f"{dist:.6f}"])
