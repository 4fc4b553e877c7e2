"""Joint synthesis/registration loop.

Per image pair the displacement field and the synthesis parameters are
optimized directly with Adam on a Gaussian pyramid. The synthesis
parameters use a learning rate ``synth_lr_ratio`` times the field rate.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import Volume, interpolate
from .losses import TERMS, LossConfig, evaluate
from .synth import SynthesisModel, pretrain_histogram_match, synth_vjp, synthesize
from .warp import DisplacementField, upsample_field, warp_adjoint, warp_volume

log = logging.getLogger(__name__)

MODES = ("joint", "frozen_synthesis", "no_synthesis")


class GeometryError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class EngineConfig:
    levels: int = 3
    iters_per_level: tuple = (150, 100, 80)
    base_lr: float = 0.1
    synth_lr_ratio: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: str = "joint"
    seed: int = 0
    n_knots: int = 16
    gain_grid: tuple = (4, 4, 4)
    presmooth_sigma: float = 0.0

    def validate(self) -> "EngineConfig":
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        iters = tuple(self.iters_per_level)
        if len(iters) != self.levels or min(iters) < 1:
            raise ValueError(f"iters_per_level must list {self.levels} counts >= 1, got {iters}")
        for key in ("base_lr", "synth_lr_ratio", "adam_eps"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be > 0, got {getattr(self, key)}")
        for key in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ValueError(f"{key} must be in [0, 1), got {getattr(self, key)}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if not self.presmooth_sigma >= 0:
            raise ValueError(f"presmooth_sigma must be >= 0, got {self.presmooth_sigma}")
        if self.n_knots < 2:
            raise ValueError(f"n_knots must be >= 2, got {self.n_knots}")
        if len(self.gain_grid) != 3 or min(self.gain_grid) < 1:
            raise ValueError(f"gain_grid must be three counts >= 1, got {self.gain_grid}")
        return self

    def replace(self, **kw) -> "EngineConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return EngineConfig(**vals)

    @property
    def factors(self) -> tuple:
        return tuple(2 ** (self.levels - 1 - i) for i in range(self.levels))


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        p = np.asarray(params, dtype=np.float64)
        return cls(np.zeros_like(p), np.zeros_like(p), 0)


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, "
                         f"state {state.m.shape}")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    return params - lr * mhat / (np.sqrt(vhat) + eps), AdamState(m, v, t)


# ---------------------------------------------------------------------------
# pyramid

def downsample(v: Volume, factor: int) -> Volume:
    """Gaussian smoothing (sigma = factor / 2) and trilinear subsampling."""
    if factor == 1:
        return v
    dims = tuple(max(1, int(round(n / factor))) for n in v.dims)
    smooth = gaussian_filter(v.data, sigma=factor / 2.0, mode="nearest", truncate=3.0)
    ratio = [n / d for n, d in zip(v.dims, dims)]
    axes = [(np.arange(d, dtype=np.float64) + 0.5) * r - 0.5 for d, r in zip(dims, ratio)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    spacing = tuple(s * r for s, r in zip(v.spacing, ratio))
    return Volume(interpolate(smooth, coords), spacing)


def presmooth(v: Volume, sigma: float) -> Volume:
    """Optional Gaussian smoothing of the inputs before the pyramid is built."""
    if sigma == 0:
        return v
    return v.with_data(gaussian_filter(v.data, sigma=sigma, mode="nearest", truncate=3.0))


def build_pyramid(v: Volume, levels: int, factors=None) -> list:
    """Volumes for each pyramid level, coarsest first."""
    if factors is None:
        factors = tuple(2 ** (levels - 1 - i) for i in range(levels))
    if len(factors) != levels:
        raise ValueError(f"{levels} levels but {len(factors)} factors")
    coarsest = max(factors)
    if min(v.dims) // coarsest < 4:
        raise ValueError(f"volume {v.dims} too small for downsampling factor {coarsest}")
    return [downsample(v, f) for f in factors]


# ---------------------------------------------------------------------------
# registration

@dataclass
class RegistrationResult:
    field: DisplacementField
    synth_initial: SynthesisModel
    synth_final: SynthesisModel
    loss_trace: list
    warped_moving: Volume
    warped_synth: Volume
    initial_loss: dict = field(default_factory=dict)
    final_loss: dict = field(default_factory=dict)


def _level_cfg(cfg: LossConfig, dims) -> LossConfig:
    w = min(cfg.ncc_window, min(dims) if min(dims) % 2 else min(dims) - 1)
    return cfg.replace(ncc_window=max(w, 3))


def _check_finite(ev, level, it):
    if np.isfinite(ev.total):
        return
    bad = [k for k, v in ev.terms.items() if not np.isfinite(v)]
    raise DivergenceError(f"non-finite loss at level {level} iteration {it}: "
                          f"offending term(s) {', '.join(bad) or 'total'}")


def _synthesize_checked(synth_init, theta, m_l, use_synth, level, it):
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(f"non-finite synthesis parameters at level {level} iteration {it}")
    model = synth_init.with_params(theta)
    if not use_synth:
        return model, None
    try:
        return model, synthesize(model, m_l)
    except ValueError:
        raise DivergenceError(f"non-finite synthetic image at level {level} "
                              f"iteration {it}") from None


def _breakdown(ev) -> dict:
    out = dict(ev.terms)
    out["total"] = ev.total
    return out


def register(fixed: Volume, moving: Volume, loss_cfg: LossConfig | None = None,
             engine_cfg: EngineConfig | None = None, synth_init: SynthesisModel | None = None,
             ) -> RegistrationResult:
    """Register ``moving`` onto ``fixed`` (same grid) and return the full-resolution field.

    ``synth_init`` replaces the histogram-matching initialization when given.
    """
    loss_cfg = (loss_cfg or LossConfig()).validate()
    engine_cfg = (engine_cfg or EngineConfig()).validate()
    if not fixed.geometry.matches(moving.geometry):
        raise GeometryError(f"fixed {fixed.dims}/{fixed.spacing} and moving "
                            f"{moving.dims}/{moving.spacing} grids differ; resample first")
    mode = engine_cfg.mode
    if synth_init is None:
        base = SynthesisModel.identity(engine_cfg.n_knots, engine_cfg.gain_grid)
        synth_init = pretrain_histogram_match(base, moving, fixed)
    use_synth = mode != "no_synthesis"
    cfg = loss_cfg if use_synth else loss_cfg.replace(lambda1=0.0)
    betas = (engine_cfg.adam_beta1, engine_cfg.adam_beta2)

    fixed_pyr = build_pyramid(presmooth(fixed, engine_cfg.presmooth_sigma), engine_cfg.levels)
    moving_pyr = build_pyramid(presmooth(moving, engine_cfg.presmooth_sigma), engine_cfg.levels)

    theta = synth_init.params
    theta_state = AdamState.zeros_like(theta)
    u = DisplacementField.zeros(fixed_pyr[0].dims, fixed_pyr[0].spacing)
    trace = []
    step = 0
    for level, (f_l, m_l) in enumerate(zip(fixed_pyr, moving_pyr)):
        if level > 0:
            u = upsample_field(u, f_l.dims, f_l.spacing)
        lr = engine_cfg.base_lr * 0.5 ** level
        cfg_l = _level_cfg(cfg, f_l.dims)
        u_state = AdamState.zeros_like(u.data)
        for it in range(engine_cfg.iters_per_level[level]):
            with np.errstate(over="ignore", invalid="ignore"):
                model, s_l = _synthesize_checked(synth_init, theta, m_l, use_synth, level, it)
                ev = evaluate(f_l, m_l, s_l, u, cfg_l, grad=True)
            _check_finite(ev, level, it)
            trace.append({"iteration": step, "level": level, **_breakdown(ev)})
            step += 1
            if mode == "joint" and cfg_l.lambda1 > 0:
                g_img = warp_adjoint(ev.grad_warped_synth, u, cfg_l.boundary)
                g_theta = synth_vjp(model, m_l, g_img)
                theta, theta_state = adam_step(theta, g_theta, theta_state,
                                               lr * engine_cfg.synth_lr_ratio, betas,
                                               engine_cfg.adam_eps)
            new_u, u_state = adam_step(u.data, ev.grad_field, u_state, lr, betas,
                                       engine_cfg.adam_eps)
            if not np.all(np.isfinite(new_u)):
                raise DivergenceError(f"non-finite displacement at level {level} iteration {it}")
            u = DisplacementField(new_u, u.spacing)
        log.debug("level %d done: loss %.6f", level, trace[-1]["total"])

    synth_final = synth_init.with_params(theta)
    u = DisplacementField(u.data, fixed.spacing)
    s0 = synthesize(synth_init, moving) if use_synth else None
    s1 = synthesize(synth_final, moving)
    zero = DisplacementField.zeros(fixed.dims, fixed.spacing)
    ev0 = evaluate(fixed, moving, s0, zero, cfg)
    ev1 = evaluate(fixed, moving, s1 if use_synth else None, u, cfg)
    return RegistrationResult(
        field=u,
        synth_initial=synth_init,
        synth_final=synth_final,
        loss_trace=trace,
        warped_moving=warp_volume(moving, u, cfg.boundary),
        warped_synth=warp_volume(s1, u, cfg.boundary),
        initial_loss=_breakdown(ev0),
        final_loss=_breakdown(ev1),
    )


def write_loss_trace(trace, path):
    """CSV with columns iteration, level, per-term values, total."""
    cols = ["iteration", "level", *TERMS, "total"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in trace:
            w.writerow([row["iteration"], row["level"]] + [repr(float(row[c])) for c in cols[2:]])
