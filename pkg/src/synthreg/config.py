"""Run configuration file: ``[loss]``, ``[engine]`` and ``[phantom]`` sections.

The format is INI-style ``key = value`` text. Tuples are comma-separated,
booleans are ``true``/``false``. Keys left out take their defaults, and
``write_config`` always writes every key so a run file documents itself.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .engine import EngineConfig
from .losses import LossConfig
from .phantom import PhantomSpec

SECTIONS = {"loss": LossConfig, "engine": EngineConfig, "phantom": PhantomSpec}

HELP = {
    "loss": {
        "lambda1": "weight of the synthetic-image similarity term",
        "lambda2": "weight of the smoothness regularizer",
        "mu_l2": "extra l2 penalty on the field inside the regularizer",
        "sim_moving": "metric for fixed vs warped moving: MI or NCC",
        "sim_synth": "metric for fixed vs warped synthetic image (NCC only)",
        "ncc_window": "local NCC window edge in voxels (odd)",
        "ncc_eps": "NCC denominator guard",
        "mi_bins": "joint histogram bins per axis",
        "mi_sigma": "Parzen kernel width in bins",
        "boundary": "sampling outside the grid: clamp or zero",
    },
    "engine": {
        "levels": "pyramid levels (factors 2^(levels-1) ... 1)",
        "iters_per_level": "Adam iterations per level, coarsest first",
        "base_lr": "field step size in voxels at the coarsest level, halved per level",
        "synth_lr_ratio": "synthesis learning rate as a fraction of the field rate",
        "adam_beta1": "Adam first-moment decay",
        "adam_beta2": "Adam second-moment decay",
        "adam_eps": "Adam denominator guard",
        "mode": "joint, frozen_synthesis or no_synthesis",
        "seed": "run seed",
        "n_knots": "intensity-curve knots of the synthesis model",
        "gain_grid": "control points of the multiplicative gain field",
        "presmooth_sigma": "extra Gaussian smoothing (voxels) of both inputs before the pyramid, 0 = off",
    },
    "phantom": {
        "dims": "grid size in voxels",
        "spacing": "isotropic voxel size in mm",
        "brain_radii": "brain ellipsoid semi-axes (fraction of half-extent)",
        "wm_radii": "white-matter ellipsoid semi-axes",
        "ventricle_radii": "semi-axes of each ventricle",
        "ventricle_offset": "left/right ventricle offset from the midline",
        "gyri_amplitude": "relative amplitude of the cortical folding",
        "gyri_frequency": "angular frequency of the cortical folding",
        "blob": "include the deep gray blob",
        "blob_center": "deep gray blob centre",
        "blob_radius": "deep gray blob radius",
        "intensity_a": "moving contrast: background, WM, cortex, ventricle, deep gray",
        "intensity_b": "fixed contrast: background, WM, cortex, ventricle, deep gray",
        "noise_sigma": "Gaussian noise as a fraction of the intensity span",
        "bias_amplitude": "quadratic bias field amplitude",
        "psf_sigma": "point-spread blur in voxels",
        "texture_amplitude": "relative amplitude of smooth tissue texture",
        "texture_sigma": "texture correlation length in voxels",
        "supersample": "sub-samples per axis when averaging the anatomy over a voxel",
        "skull_strip": "zero everything outside the dilated brain mask",
        "deform_sigma": "smoothing of the ground-truth deformation in voxels",
        "deform_max": "peak ground-truth displacement in voxels",
        "seed": "phantom seed",
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigError(f"[{name}] {exc}") from None
        return self


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, like):
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse(text: str, default):
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        elem = default[0] if default else 0.0
        return tuple(_parse_scalar(p, elem) for p in parts)
    return _parse_scalar(text.strip(), default)


def parse_config(text: str, source="<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{source}: parse error at line {exc.lineno}: "
                          f"{exc.line.strip()!r} appears before any [section]") from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0]
        raise ConfigError(f"{source}: parse error at line {lineno}: "
                          "expected 'key = value' or '[section]'") from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{source}: parse error at line {exc.lineno}: "
                          f"duplicate key {exc.option!r} in [{exc.section}]") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"{source}: parse error at line {exc.lineno}: "
                          f"duplicate section [{exc.section}]") from None
    except configparser.Error as exc:
        raise ConfigError(f"{source}: parse error: {exc.message}") from None
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {', '.join(unknown)}; "
                          f"expected {', '.join(SECTIONS)}")
    parts = {}
    for name, cls in SECTIONS.items():
        default = cls()
        names = {f.name for f in fields(cls)}
        values = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in names:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
                try:
                    values[key] = _parse(raw, getattr(default, key))
                except ValueError as exc:
                    raise ConfigError(f"{source}: [{name}] {key}: type mismatch: {exc}") from None
        parts[name] = default.replace(**values)
    return RunConfig(**parts).validate()


def read_config(path) -> RunConfig:
    """Parse and validate a run configuration file. An empty file gives all defaults."""
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def format_config(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(obj):
            lines.append(f"# {HELP[name][f.name]}")
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
