"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numerical divergence, 4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import json
import logging
import os
import platform
import sys
import time

import numpy as np

from . import __version__, gradcheck
from .config import ConfigError, RunConfig, format_config, parse_config, read_config
from .engine import DivergenceError, register, write_loss_trace
from .grid import Volume, center_crop_or_pad, resample_to
from .metrics import folding_fraction, label_table, write_table
from .nifti_io import NiftiError, read_nifti, write_nifti
from .phantom import PhantomError, generate
from .warp import DisplacementField, warp_labels_nearest

log = logging.getLogger("synthreg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGENCE, EXIT_GRADCHECK = 0, 1, 2, 3, 4
MODE_FLAGS = {"joint": "joint", "frozen": "frozen_synthesis", "nosynth": "no_synthesis"}
PHANTOM_FILES = ("fixed.nii", "moving.nii", "labels_fixed.nii", "labels_moving.nii", "u_true.nii")
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return read_config(path)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror or exc}") from None


def load_nifti(path):
    try:
        return read_nifti(path)[0]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except NiftiError as exc:
        raise InputError(f"{path}: {type(exc).__name__}: {exc}") from None


def write_manifest(out_dir, command, cfg, inputs, outputs, seed, seconds, metrics, extra=None):
    """One JSON manifest per run: config snapshot, digests, timing and final metrics."""
    manifest = {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": format_config(cfg),
        "seed": seed,
        "inputs": {os.path.abspath(p): sha256(p) for p in inputs},
        "outputs": {name: sha256(os.path.join(out_dir, name)) for name in outputs},
        "wall_seconds": round(seconds, 3),
        "metrics": metrics,
    }
    manifest.update(extra or {})
    with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _make_out(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {path}: {exc.strerror or exc}") from None


def _with_seed(cfg: RunConfig, seed) -> RunConfig:
    if seed is None:
        return cfg
    return RunConfig(cfg.loss, cfg.engine.replace(seed=seed),
                     cfg.phantom.replace(seed=seed)).validate()


# ---------------------------------------------------------------------------
# subcommands

def cmd_phantom(args) -> int:
    cfg = _with_seed(load_config(args.config), args.seed)
    start = time.perf_counter()
    pair = generate(cfg.phantom)
    _make_out(args.out)
    items = (pair.fixed, pair.moving, pair.labels_fixed, pair.labels_moving, pair.u_true)
    types = ("float32", "float32", "uint8", "uint8", "float64")
    for name, obj, dtype in zip(PHANTOM_FILES, items, types):
        write_nifti(obj, os.path.join(args.out, name), dtype)
    write_manifest(args.out, "phantom", cfg, [], PHANTOM_FILES, cfg.phantom.seed,
                   time.perf_counter() - start,
                   {"folding_fraction_u_true": folding_fraction(pair.u_true)})
    print(f"wrote {len(PHANTOM_FILES)} volumes and {MANIFEST} to {args.out}")
    return EXIT_OK


def match_grid(moving: Volume, fixed: Volume) -> Volume:
    """Resample ``moving`` to the fixed spacing, then center crop or pad to the fixed dims."""
    if moving.geometry.matches(fixed.geometry):
        return moving
    dims = tuple(max(1, int(round(n * s / t)))
                 for n, s, t in zip(moving.dims, moving.spacing, fixed.spacing))
    out = resample_to(moving, dims, fixed.spacing)
    return center_crop_or_pad(out, fixed.dims)


def _affines_differ(a: Volume, b: Volume) -> bool:
    if a.affine is None or b.affine is None:
        return False
    # only orientation and origin: spacing differences are handled by resampling
    da = a.affine[:3, :3] / np.asarray(a.spacing)
    db = b.affine[:3, :3] / np.asarray(b.spacing)
    return not (np.allclose(da, db, atol=1e-4) and np.allclose(a.affine[:3, 3], b.affine[:3, 3], atol=1e-3))


def cmd_register(args) -> int:
    cfg = _with_seed(load_config(args.config), args.seed)
    cfg = RunConfig(cfg.loss, cfg.engine.replace(mode=MODE_FLAGS[args.mode]), cfg.phantom)
    fixed = load_nifti(args.fixed)
    moving = load_nifti(args.moving)
    for path, v in ((args.fixed, fixed), (args.moving, moving)):
        if not isinstance(v, Volume):
            raise InputError(f"{path} holds a displacement field, expected a 3D volume")
    if _affines_differ(fixed, moving):
        log.warning("fixed and moving orientation/origin differ; registering in voxel space")
    if not moving.geometry.matches(fixed.geometry):
        log.warning("resampling moving %s/%s onto the fixed grid %s/%s",
                    moving.dims, moving.spacing, fixed.dims, fixed.spacing)
        moving = match_grid(moving, fixed)
    _make_out(args.out)

    start = time.perf_counter()
    res = register(fixed, moving, cfg.loss, cfg.engine)
    seconds = time.perf_counter() - start

    outputs = ("warped_moving.nii", "warped_synth.nii", "field.nii", "loss_trace.csv")
    write_nifti(res.warped_moving.with_data(res.warped_moving.data), os.path.join(args.out, outputs[0]))
    write_nifti(res.warped_synth, os.path.join(args.out, outputs[1]))
    write_nifti(res.field, os.path.join(args.out, outputs[2]), "float64")
    write_loss_trace(res.loss_trace, os.path.join(args.out, outputs[3]))
    metrics = {"initial_loss": res.initial_loss, "final_loss": res.final_loss,
               "folding_fraction": folding_fraction(res.field),
               "mean_abs_displacement": float(np.sqrt((res.field.data ** 2).sum(0)).mean())}
    extra = {"mode": cfg.engine.mode,
             "synth_initial": base64.b64encode(res.synth_initial.to_bytes()).decode("ascii"),
             "synth_final": base64.b64encode(res.synth_final.to_bytes()).decode("ascii")}
    write_manifest(args.out, "register", cfg, [args.fixed, args.moving], outputs,
                   cfg.engine.seed, seconds, metrics, extra)
    print(f"loss {res.initial_loss['total']:.6f} -> {res.final_loss['total']:.6f}, "
          f"folding {metrics['folding_fraction']:.4%}, {seconds:.1f} s")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    ref = load_nifti(args.labels_fixed)
    mov = load_nifti(args.labels_moving)
    u = load_nifti(args.field)
    if not isinstance(u, DisplacementField):
        raise InputError(f"{args.field} is not a 4D displacement field")
    if not (ref.dims == mov.dims == u.dims):
        raise UsageError(f"dimension mismatch: labels_fixed {ref.dims}, labels_moving {mov.dims}, "
                         f"field {u.dims}")
    _make_out(args.out)
    start = time.perf_counter()
    warped = warp_labels_nearest(mov, u)
    rows = label_table(ref, warped)
    fold = folding_fraction(u)
    write_table(rows, os.path.join(args.out, "metrics.csv"))
    metrics = {"folding_fraction": fold,
               "regions": {r: {"dice": d, "asd_mm": a} for r, d, a in rows}}
    write_manifest(args.out, "evaluate", cfg, [args.labels_fixed, args.labels_moving, args.field],
                   ["metrics.csv"], None, time.perf_counter() - start,
                   {k: (None if isinstance(v, float) and np.isnan(v) else v)
                    for k, v in metrics.items()})
    for region, d, a in rows:
        print(f"{region:18s} dice {d:.4f}  asd {a:.3f} mm")
    print(f"folding fraction {fold:.4%}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    if args.size < 5 or args.trials < 1:
        raise UsageError("--size must be >= 5 and --trials >= 1")
    report = gradcheck.run(args.size, args.trials, seed=cfg.engine.seed, base_cfg=cfg.loss,
                           sign_flip=args.inject_sign_flip)
    lines = report.lines()
    print("\n".join(lines))
    if args.out:
        _make_out(args.out)
        with open(os.path.join(args.out, "gradcheck.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        write_manifest(args.out, "gradcheck", cfg, [], ["gradcheck.txt"], cfg.engine.seed,
                       report.seconds, {"max_field_rel_err": report.max_field_err,
                                        "max_synth_rel_err": report.max_synth_err,
                                        "passed": report.passed})
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_config(args) -> int:
    text = format_config(load_config(args.config))
    if args.out:
        _make_out(os.path.dirname(os.path.abspath(args.out)))
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = ArgumentParser(prog="synthreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="run configuration file (defaults if omitted)")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("phantom", help="generate a synthetic phantom pair")
    common(sp)
    sp.add_argument("--seed", type=int, help="override the phantom and engine seed")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("register", help="register a moving volume onto a fixed volume")
    sp.add_argument("fixed")
    sp.add_argument("moving")
    common(sp)
    sp.add_argument("--mode", choices=sorted(MODE_FLAGS), default="joint")
    sp.add_argument("--seed", type=int, help="override the engine seed")
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("evaluate", help="Dice/ASD table after warping moving labels")
    sp.add_argument("labels_fixed")
    sp.add_argument("labels_moving")
    sp.add_argument("field")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    common(sp, out_required=False)
    sp.add_argument("--size", type=int, default=12)
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("config", help="print the full configuration with every default filled in")
    sp.add_argument("--config", help="configuration file to complete")
    sp.add_argument("--out", help="write to this file instead of stdout")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, PhantomError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return EXIT_IO
