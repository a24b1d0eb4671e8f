"""Command-line entry point: ``corrreg <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 input-file error, 4 numeric failure.
Diagnostics go to stderr; machine output is written only to ``--out`` paths.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cmaes import CmaesConfig, CmaesFailure
from .drr import ProjectionGeometry, load_image, project, project_with_jacobian, save_image, save_pgm16, toy_geometry
from .encoder import EncoderConfig
from .evaluation import batch_evaluate, mtre, overlay_edges, save_rgb, write_report
from .registration import REGISTRATION_CMAES, metric_register_cmaes, net_register, pipeline_register
from .se3 import TEST_DISTRIBUTION, Pose, euler_xyz_to_matrix
from .training import TrainConfig, TrainingError, load_checkpoint, toy_train_config, train
from .volume import CorruptFileError, UnsupportedFormatError, load_volume, make_phantom, save_volume

log = logging.getLogger("corrreg")

EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 2, 3, 4


class InputError(Exception):
    pass


# ----------------------------------------------------------------- parsing helpers

def parse_pose(text: str) -> Pose:
    """Pose from a JSON file, an inline JSON record, or ``rx,ry,rz,tx,ty,tz``
    (intrinsic X-Y-Z Euler angles in degrees, translation in mm)."""
    p = Path(text)
    if p.suffix == ".json":
        if not p.exists():
            raise InputError(f"pose file not found: {p}")
        text = p.read_text()
    text = text.strip()
    try:
        if text.startswith("{"):
            return Pose.from_json(text)
        vals = [float(x) for x in text.split(",")]
    except (ValueError, KeyError) as e:
        raise InputError(f"cannot parse pose {text!r}: {e}") from e
    if len(vals) != 6:
        raise InputError(f"pose needs 6 comma-separated values, got {len(vals)}")
    return Pose(euler_xyz_to_matrix(np.radians(vals[:3])), np.array(vals[3:]))


def parse_geom(text: str | None) -> ProjectionGeometry:
    """``toy:<size>`` (default ``toy:64``), ``full``, or a geometry JSON file."""
    if text is None or text.startswith("toy"):
        size = int(text.split(":")[1]) if text and ":" in text else 64
        return toy_geometry(size)
    if text == "full":
        return ProjectionGeometry()
    p = Path(text)
    if not p.exists():
        raise InputError(f"geometry file not found: {p}")
    try:
        return ProjectionGeometry.from_record(json.loads(p.read_text()))
    except (ValueError, KeyError, TypeError) as e:
        raise InputError(f"bad geometry file {p}: {e}") from e


def parse_dims(text: str):
    parts = [int(x) for x in text.lower().replace("x", ",").split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"dims must be N or NX,NY,NZ: {text!r}")
    return tuple(parts)


def _load_volume(path):
    try:
        return load_volume(path)
    except FileNotFoundError as e:
        raise InputError(f"volume not found: {path}") from e


def _load_checkpoint(path):
    if path is None:
        raise InputError("--checkpoint is required for this method")
    if path == "shipped":
        from . import shipped_checkpoint
        path = shipped_checkpoint()
    try:
        return load_checkpoint(path)
    except FileNotFoundError as e:
        raise InputError(f"checkpoint not found: {path}") from e
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"bad checkpoint {path}: {e}") from e


# ----------------------------------------------------------------- subcommands

def cmd_phantom(a):
    v = make_phantom(a.kind, a.dims, spacing=a.spacing)
    save_volume(v, a.out)


def cmd_render(a):
    v = _load_volume(a.volume)
    pose, geom = parse_pose(a.pose), parse_geom(a.geom)
    if a.jacobian:
        img, jac = project_with_jacobian(v, pose, geom)
        base = Path(a.jacobian).with_suffix("")
        base.with_suffix(".raw").write_bytes(np.asarray(jac, dtype="<f4").tobytes())
        base.with_suffix(".json").write_text(json.dumps({"shape": list(jac.shape), "dtype": "f32le",
                                                         "order": ["rx", "ry", "rz", "tx", "ty", "tz"],
                                                         "units": "per rad / per mm"}))
    else:
        img = project(v, pose, geom)
    save_image(img, a.out)
    if a.pgm:
        save_pgm16(img, Path(a.out).with_suffix(".pgm"))


def cmd_train(a):
    v = _load_volume(a.volume)
    if a.config:
        p = Path(a.config)
        if not p.exists():
            raise InputError(f"config not found: {p}")
        try:
            cfg = TrainConfig.from_dict(json.loads(p.read_text()))
        except (ValueError, TypeError, KeyError) as e:
            raise InputError(f"bad training config {p}: {e}") from e
    else:
        cfg = toy_train_config()
    overrides = {"seed": a.seed}
    if a.iterations:
        overrides["iterations"] = a.iterations
    cfg = replace(cfg, **overrides)
    geom = parse_geom(a.geom)

    def progress(rec):
        if rec["iter"] % 100 == 0:
            log.info("iter %d l_appro %s lr %.2e", rec["iter"], rec.get("l_appro"), rec["lr"])

    train(v, geom, cfg, log_path=a.log, checkpoint_path=a.out_checkpoint, checkpoint_every=a.checkpoint_every,
          progress=progress)


def _cmaes_config(a):
    return replace(REGISTRATION_CMAES, population=a.population, sigma0=(a.sigma_deg,) * 3 + (a.sigma_mm,) * 3,
                   max_evals=a.max_evals, seed=a.seed)


def cmd_register(a):
    v = _load_volume(a.volume)
    try:
        fixed = load_image(a.fixed)
    except FileNotFoundError as e:
        raise InputError(f"fixed image not found: {a.fixed}") from e
    theta0, geom = parse_pose(a.init_pose), parse_geom(a.geom)
    if fixed.data.shape != geom.detector_px[::-1]:
        raise InputError(f"fixed image {fixed.data.shape} does not match detector {geom.detector_px}")
    if a.method == "cmaes":
        res = metric_register_cmaes(v, fixed, theta0, geom, a.metric, _cmaes_config(a))
    else:
        params, enc = _load_checkpoint(a.checkpoint)
        if a.method == "net":
            res = net_register(v, fixed, theta0, geom, params, a.net_iters, a.net_lr, config=enc)
        else:
            res = pipeline_register(v, fixed, theta0, geom, params, a.net_iters, _cmaes_config(a), a.metric,
                                    a.net_lr, enc)
    out = res.to_dict()
    if a.target_pose:
        tgt, lm = parse_pose(a.target_pose), v.corner_landmarks()
        out["mtre_initial_mm"] = mtre(theta0, tgt, lm)
        out["mtre_final_mm"] = mtre(res.final_pose, tgt, lm)
    Path(a.out).write_text(json.dumps(out, indent=1))
    if res.status == "failed":
        log.error("registration failed in stage %s: %s", res.failed_stage, res.message)
        return EXIT_NUMERIC
    return 0


def cmd_evaluate(a):
    v = _load_volume(a.volume)
    methods = [m.strip() for m in a.methods.split(",") if m.strip()]
    methods = ["net+cmaes" if m == "pipeline" else m for m in methods]
    bad = [m for m in methods if m not in ("initial", "cmaes", "net", "net+cmaes")]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown methods: {bad}")
    params, enc = (None, None)
    if any(m.startswith("net") for m in methods):
        params, enc = _load_checkpoint(a.checkpoint)
    dist = TEST_DISTRIBUTION.scaled(a.offset_scale)
    reports = batch_evaluate(v, parse_geom(a.geom), params, dist, a.cases, methods, a.seed,
                             enc if enc is not None else EncoderConfig(),
                             _cmaes_config(a), a.net_iters, a.net_lr, a.metric,
                             progress=lambda m, i, t: log.info("%s case %d tre %.2f", m, i, t))
    write_report(reports, a.out)


def cmd_overlay(a):
    try:
        fixed, drr = load_image(a.fixed), load_image(a.drr)
    except FileNotFoundError as e:
        raise InputError(str(e)) from e
    if fixed.data.shape != drr.data.shape:
        raise InputError(f"image dims differ: {fixed.data.shape} vs {drr.data.shape}")
    save_rgb(overlay_edges(fixed, drr), a.out)


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="cap on render threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    geom_help = "detector geometry: toy:<pixels> (default toy:64), full, or a geometry JSON file"
    pose_help = ("pose as rx,ry,rz,tx,ty,tz (X-Y-Z Euler angles in degrees, translation in mm), "
                 "an inline JSON record, or a .json file")

    p = argparse.ArgumentParser(prog="corrreg", description="Rigid CT-to-X-ray registration toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="write a synthetic volume")
    s.add_argument("--kind", choices=["sphere", "box", "blob", "tube_stack"], required=True)
    s.add_argument("--dims", type=parse_dims, default=(64, 64, 64), help="voxels: N or NX,NY,NZ (default 64)")
    s.add_argument("--spacing", type=float, default=2.0, help="isotropic voxel spacing in mm (default 2.0)")
    s.add_argument("--out", required=True, help="output path (writes .json header + .raw payload)")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("render", parents=[common], help="render a DRR at a pose")
    s.add_argument("--volume", required=True, help="volume path (.json/.raw pair)")
    s.add_argument("--pose", required=True, help=pose_help)
    s.add_argument("--geom", default=None, help=geom_help)
    s.add_argument("--out", required=True, help="output image path (.json header + .raw payload)")
    s.add_argument("--jacobian", default=None, help="also write the 6xHxW pose Jacobian here (per rad, per mm)")
    s.add_argument("--pgm", action="store_true", help="also write a 16-bit PGM preview")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train", parents=[common], help="train the encoder online on one volume")
    s.add_argument("--volume", required=True, help="volume path")
    s.add_argument("--config", default=None, help="training config JSON (default: toy settings)")
    s.add_argument("--iterations", type=int, default=None, help="override the number of steps")
    s.add_argument("--geom", default=None, help=geom_help)
    s.add_argument("--out-checkpoint", required=True, help="checkpoint path (.json + .raw)")
    s.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every N steps")
    s.add_argument("--log", default=None, help="metrics log, one JSON object per line")
    s.set_defaults(func=cmd_train)

    def add_opt(s):
        s.add_argument("--metric", choices=["gc", "ncc"], default="gc", help="classical similarity for CMA-ES")
        s.add_argument("--population", type=int, default=20, help="CMA-ES population (default 20)")
        s.add_argument("--sigma-deg", type=float, default=5.0, help="CMA-ES initial rotation step in degrees")
        s.add_argument("--sigma-mm", type=float, default=10.0, help="CMA-ES initial translation step in mm")
        s.add_argument("--max-evals", type=int, default=2000, help="CMA-ES render budget")
        s.add_argument("--net-iters", type=int, default=100, help="learned-gradient iterations")
        s.add_argument("--net-lr", type=float, default=1e-2,
                       help="learned-gradient step: radians per iteration (x30 for mm)")
        s.add_argument("--checkpoint", default=None,
                       help="encoder checkpoint for net and pipeline methods; 'shipped' uses the bundled toy encoder")
        s.add_argument("--geom", default=None, help=geom_help)

    s = sub.add_parser("register", parents=[common], help="register one fixed image")
    s.add_argument("--volume", required=True, help="volume path")
    s.add_argument("--fixed", required=True, help="fixed X-ray image path")
    s.add_argument("--init-pose", required=True, help="initial " + pose_help)
    s.add_argument("--target-pose", default=None, help="ground-truth pose, to report mTRE in mm")
    s.add_argument("--method", choices=["cmaes", "net", "pipeline"], default="cmaes")
    add_opt(s)
    s.add_argument("--out", required=True, help="result JSON path")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("evaluate", parents=[common], help="batch evaluation over simulated cases")
    s.add_argument("--volume", required=True, help="volume path")
    s.add_argument("--cases", type=int, default=30, help="number of simulated cases")
    s.add_argument("--methods", default="initial,cmaes,net,pipeline",
                   help="comma list from initial,cmaes,net,pipeline")
    s.add_argument("--offset-scale", type=float, default=1.0,
                   help="scale on the test distribution (rot 20 deg; trans 30,30,60 mm)")
    add_opt(s)
    s.add_argument("--out", required=True, help="report JSON path (a .txt table is written beside it)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("overlay", parents=[common], help="paint DRR edges in green over a fixed image")
    s.add_argument("--fixed", required=True, help="fixed image path")
    s.add_argument("--drr", required=True, help="DRR image path")
    s.add_argument("--out", required=True, help="PNG path (PPM fallback without Pillow)")
    s.set_defaults(func=cmd_overlay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    if a.threads:
        import numba
        numba.set_num_threads(max(1, min(a.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        return a.func(a) or 0
    except argparse.ArgumentTypeError as e:
        parser.error(str(e))
    except (InputError, FileNotFoundError, CorruptFileError, UnsupportedFormatError, json.JSONDecodeError) as e:
        log.error("input error: %s", e)
        return EXIT_INPUT
    except (ad.NumericFailure, CmaesFailure, TrainingError, FloatingPointError) as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
