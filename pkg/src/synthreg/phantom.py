"""Synthetic two-contrast brain phantoms with a known deformation.

Labels: 0 background, 1 white matter, 2 cortex, 3 ventricle, 4 deep gray
blob. The fixed image renders the anatomy in contrast B (T1w-like) and the
moving image renders it in contrast A (b0-like), pulled back through the
inverse of the ground-truth field so that

    moving(x + u_true(x)) == render_A(x)

up to bias and noise.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from .grid import Volume, identity_grid, interpolate
from .metrics import dice
from .warp import DisplacementField, jacobian_determinant, warp_labels_nearest

# per-label means: background, white matter, cortex, ventricle, deep gray
CONTRAST_B0 = (0.0, 0.35, 0.55, 1.0, 0.45)
CONTRAST_T1 = (0.0, 1.0, 0.6, 0.15, 0.75)

MAX_ATTEMPTS = 10
MIN_SELF_DICE = 0.97


class PhantomError(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    dims: tuple = (48, 48, 48)
    spacing: float = 1.25
    brain_radii: tuple = (0.80, 0.86, 0.74)
    wm_radii: tuple = (0.56, 0.62, 0.50)
    ventricle_radii: tuple = (0.13, 0.30, 0.15)
    ventricle_offset: float = 0.16
    gyri_amplitude: float = 0.06
    gyri_frequency: int = 4
    blob: bool = True
    blob_center: tuple = (0.30, -0.25, 0.10)
    blob_radius: float = 0.14
    intensity_a: tuple = CONTRAST_B0
    intensity_b: tuple = CONTRAST_T1
    noise_sigma: float = 0.02
    bias_amplitude: float = 0.2
    psf_sigma: float = 0.75
    texture_amplitude: float = 0.15
    texture_sigma: float = 1.5
    supersample: int = 3
    skull_strip: bool = True
    deform_sigma: float = 6.0
    deform_max: float = 4.0
    seed: int = 0

    @classmethod
    def preset(cls, name: str, **kw) -> "PhantomSpec":
        """``inversion`` (b0 vs T1w contrasts, the default) or ``same`` (T1w on both sides)."""
        if name == "inversion":
            return cls(**kw)
        if name == "same":
            return cls(intensity_a=CONTRAST_T1, intensity_b=CONTRAST_T1, **kw)
        raise ValueError(f"unknown phantom preset {name!r}")

    def validate(self) -> "PhantomSpec":
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"dims must be three values >= 8, got {self.dims}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be > 0, got {self.spacing}")
        for key in ("intensity_a", "intensity_b"):
            if len(getattr(self, key)) != 5:
                raise ValueError(f"{key} needs 5 values (background + 4 labels)")
        for key in ("brain_radii", "wm_radii", "ventricle_radii", "blob_center"):
            if len(getattr(self, key)) != 3:
                raise ValueError(f"{key} needs 3 values")
        for key in ("noise_sigma", "deform_max", "psf_sigma", "gyri_amplitude"):
            if not getattr(self, key) >= 0:
                raise ValueError(f"{key} must be >= 0, got {getattr(self, key)}")
        if not 0 <= self.bias_amplitude < 1:
            raise ValueError(f"bias_amplitude must be in [0, 1), got {self.bias_amplitude}")
        if not self.deform_sigma > 0:
            raise ValueError(f"deform_sigma must be > 0, got {self.deform_sigma}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.supersample < 1:
            raise ValueError(f"supersample must be >= 1, got {self.supersample}")
        return self

    def replace(self, **kw) -> "PhantomSpec":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return PhantomSpec(**vals)

    def contrast_inverted(self) -> bool:
        """True when the label ranking by intensity differs between the two contrasts."""
        a = np.argsort(np.asarray(self.intensity_a[1:]), kind="stable")
        b = np.argsort(np.asarray(self.intensity_b[1:]), kind="stable")
        return not np.array_equal(a, b)


@dataclass
class PhantomPair:
    fixed: Volume
    moving: Volume
    labels_fixed: Volume
    labels_moving: Volume
    u_true: DisplacementField
    spec: PhantomSpec


def label_map(spec: PhantomSpec, coords=None) -> np.ndarray:
    """Integer labels of the analytic anatomy at voxel coordinates ``coords``."""
    dims = np.asarray(spec.dims, dtype=np.float64)
    if coords is None:
        coords = identity_grid(spec.dims)
    c = (dims - 1.0) / 2.0
    r = [(coords[i] - c[i]) / (dims[i] / 2.0) for i in range(3)]
    rad = np.sqrt(r[0] ** 2 + r[1] ** 2 + r[2] ** 2)
    theta = np.arctan2(r[1], r[0])
    phi = np.arccos(np.clip(r[2] / np.maximum(rad, 1e-12), -1.0, 1.0))
    wave = np.sin(spec.gyri_frequency * theta) * np.sin(spec.gyri_frequency * phi)

    def ellipsoid(radii, center=(0.0, 0.0, 0.0)):
        return np.sqrt(sum(((r[i] - center[i]) / radii[i]) ** 2 for i in range(3)))

    out = np.zeros(coords.shape[1:], dtype=np.float64)
    out[ellipsoid(spec.brain_radii) <= 1.0 + spec.gyri_amplitude * wave] = 2
    out[ellipsoid(spec.wm_radii) <= 1.0 + 0.5 * spec.gyri_amplitude * wave] = 1
    for side in (-1.0, 1.0):
        centre = (side * spec.ventricle_offset, 0.05, 0.05)
        out[ellipsoid(spec.ventricle_radii, centre) <= 1.0] = 3
    if spec.blob:
        rb = (spec.blob_radius,) * 3
        out[ellipsoid(rb, spec.blob_center) <= 1.0] = 4
    return out


def render_partial_volume(spec: PhantomSpec, table, texture=None, pull=None) -> np.ndarray:
    """Voxel averages of the analytic anatomy over ``supersample``^3 points, then the PSF.

    With ``pull`` (a 3-vector field) each sample point ``y`` reads the anatomy
    at ``y + pull(y)``. Averaging inside the voxel avoids the aliasing of
    point-sampled edges, which would otherwise differ between the two grids.
    """
    n = spec.supersample
    offsets = (np.arange(n) + 0.5) / n - 0.5
    grid = identity_grid(spec.dims)
    table = np.asarray(table, dtype=np.float64)
    acc = np.zeros(tuple(spec.dims))
    for dx in offsets:
        for dy in offsets:
            for dz in offsets:
                pts = grid + np.array([dx, dy, dz])[:, None, None, None]
                if pull is not None:
                    pts = pts + np.stack([interpolate(pull[c], pts) for c in range(3)])
                val = table[label_map(spec, pts).astype(np.intp)]
                if texture is not None:
                    val = val * interpolate(texture, pts)
                acc += val
    img = acc / n ** 3
    if spec.psf_sigma > 0:
        img = gaussian_filter(img, spec.psf_sigma, mode="nearest")
    return img


def _texture(spec):
    if spec.texture_amplitude == 0:
        return None
    rng = np.random.default_rng([spec.seed, MAX_ATTEMPTS + 1])
    t = gaussian_filter(rng.standard_normal(tuple(spec.dims)), spec.texture_sigma, mode="reflect")
    return 1.0 + spec.texture_amplitude * t / np.abs(t).max()


def _smooth_field(rng, spec):
    noise = rng.standard_normal((3,) + tuple(spec.dims))
    u = np.stack([gaussian_filter(c, spec.deform_sigma, mode="reflect") for c in noise])
    mag = np.sqrt((u ** 2).sum(axis=0)).max()
    return u * (spec.deform_max / mag) if mag > 0 else np.zeros_like(u)


def invert_field(u: np.ndarray, iters=200, tol=1e-10) -> np.ndarray:
    """Fixed-point inverse: ``v(y) = -u(y + v(y))``."""
    grid = identity_grid(u.shape[1:])
    v = -u.copy()
    for _ in range(iters):
        pos = grid + v
        nv = -np.stack([interpolate(u[c], pos) for c in range(3)])
        delta = np.abs(nv - v).max()
        v = nv
        if delta < tol:
            break
    return v


def _bias(rng, dims, amplitude):
    if amplitude == 0:
        return np.ones(dims)
    x, y, z = np.meshgrid(*[np.linspace(-1.0, 1.0, n) for n in dims], indexing="ij")
    terms = (x, y, z, x * x, y * y, z * z, x * y, x * z, y * z)
    coef = rng.standard_normal(len(terms))
    p = sum(c * t for c, t in zip(coef, terms))
    return 1.0 + amplitude * p / np.abs(p).max()


def _brain_mask(labels):
    return binary_dilation(labels > 0, iterations=1)


def _corrupt(img, rng, spec, table):
    img = img * _bias(rng, img.shape, spec.bias_amplitude)
    if spec.noise_sigma > 0:
        span = max(table) - min(table)
        img = img + rng.normal(0.0, spec.noise_sigma * span, img.shape)
    return img


def generate(spec: PhantomSpec | None = None) -> PhantomPair:
    """Build a phantom pair; deterministic for a given spec (including seed)."""
    spec = (spec or PhantomSpec()).validate()
    spacing = (float(spec.spacing),) * 3
    labels = label_map(spec)
    labels_fixed = Volume(labels, spacing)

    u = v = None
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        cand = _smooth_field(rng, spec)
        if spec.deform_max == 0:
            u, v = cand, np.zeros_like(cand)
            break
        if np.min(jacobian_determinant(DisplacementField(cand)).data) <= 0:
            continue
        inv = invert_field(cand)
        if np.min(jacobian_determinant(DisplacementField(inv)).data) <= 0:
            continue
        u, v = cand, inv
        break
    if u is None:
        raise PhantomError(f"no fold-free deformation after {MAX_ATTEMPTS} draws "
                           f"(deform_max={spec.deform_max}, deform_sigma={spec.deform_sigma})")

    u_true = DisplacementField(u, spacing)
    # the moving image is rendered from the anatomy evaluated at x + v(x)
    # rather than resampled, so both images carry the same partial-volume
    # blur; its label map is resampled so the round trip stays consistent
    pulled = identity_grid(spec.dims) + v
    labels_moving = warp_labels_nearest(labels_fixed, DisplacementField(v, spacing))
    texture = _texture(spec)
    render_b = render_partial_volume(spec, spec.intensity_b, texture)
    moving = render_partial_volume(spec, spec.intensity_a, texture, v)

    rng = np.random.default_rng([spec.seed, MAX_ATTEMPTS])
    fixed = _corrupt(render_b, rng, spec, spec.intensity_b)
    moving = _corrupt(moving, rng, spec, spec.intensity_a)
    if spec.skull_strip:
        fixed = fixed * _brain_mask(labels)
        moving = moving * _brain_mask(label_map(spec, pulled))

    pair = PhantomPair(Volume(fixed, spacing), Volume(moving, spacing), labels_fixed,
                       labels_moving, u_true, spec)
    check_pair(pair)
    return pair


def check_pair(pair: PhantomPair, min_dice=MIN_SELF_DICE):
    """Verify the ground-truth field maps the moving labels back onto the fixed ones."""
    back = warp_labels_nearest(pair.labels_moving, pair.u_true)
    for label in np.unique(pair.labels_fixed.data):
        if label == 0:
            continue
        d = dice(back, pair.labels_fixed, label)
        if d < min_dice:
            raise PhantomError(f"label {int(label)} self-consistency Dice {d:.4f} < {min_dice}")
