"""Command-line interface.

Subcommands: synth, carve, reconstruct, integrate, eval, compare. A JSON
config file supplies defaults; command-line flags win over the file.
Exit code 0 on success; each error family has its own nonzero code.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DimensionMismatch, HelmstereoError, ParseError
from .evaluate import Method, report_to_dict, rms_error, write_report_json
from .hull import save_hull, save_hull_ply
from .images import read_image, read_pgm, write_pfm, write_png_heatmap
from .integration import GradientField, MIRROR, PERIODIC, integrate
from .pipeline import PipelineConfig, carve_hull, config_from_dict, reconstruct, run_compare
from .render import synth_dataset
from .scene import load_calibration

logger = logging.getLogger("helmstereo")


def _add_pipeline_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file (or a manifest from a prior run)")
    sub.add_argument("--scene", help="calibration JSON")
    sub.add_argument("--method", choices=list(Method.__members__))
    sub.add_argument("--alpha", type=float)
    sub.add_argument("--iterations", type=int)
    sub.add_argument("--damping", type=float)
    sub.add_argument("--window", type=int)
    sub.add_argument("--sigma", type=float, dest="gaussian_sigma")
    sub.add_argument("--voxels", type=int, dest="voxel_dims")
    sub.add_argument("--threshold", type=float)
    sub.add_argument("--labels-max", type=int, dest="labels_max")
    sub.add_argument("--n-z-min", type=float, dest="n_z_min")
    sub.add_argument("--s2-width", type=float, dest="s2_width")
    sub.add_argument("--literal-s2", action="store_true", default=None, dest="literal_s2")
    sub.add_argument("--threads", type=int)
    sub.add_argument("--out", dest="output_dir")
    sub.add_argument("--save-hull", action="store_true", default=None, dest="save_hull")
    sub.add_argument(
        "--save-messages", action="store_true", default=None, dest="save_messages"
    )


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"{args.config}: {exc}") from exc
    overrides = {
        k: getattr(args, k, None)
        for k in PipelineConfig.__dataclass_fields__
        if getattr(args, k, None) is not None
    }
    return config_from_dict(doc, **overrides)


def _cmd_synth(args) -> int:
    try:
        doc = json.loads(Path(args.scene_json).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{args.scene_json}: {exc}") from exc
    calib = synth_dataset(doc, args.out)
    print(calib)
    return 0


def _cmd_carve(args) -> int:
    cfg = _pipeline_config(args)
    scene = load_calibration(cfg.scene, sigma_override=cfg.gaussian_sigma)
    hull = carve_hull(scene, cfg.voxel_dims, cfg.threshold)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_hull(out / "hull", hull)
    if args.ply:
        save_hull_ply(out / "hull.ply", hull)
    print(f"occupied voxels: {hull.count}")
    return 0


def _cmd_reconstruct(args) -> int:
    cfg = _pipeline_config(args)
    result = reconstruct(cfg)
    sc = result.report["self_consistency"]
    print(f"method: {cfg.method}")
    print(f"self-consistency e_rms: {sc['e_rms']:.6g} (normalized {sc['e_rms_normalized']:.6g})")
    if "ground_truth" in result.report:
        gt = result.report["ground_truth"]
        print(f"ground-truth e_rms: {gt['e_rms']:.6g} (normalized {gt['e_rms_normalized']:.6g})")
    print(f"outputs: {result.out_dir}")
    return 0


def _cmd_compare(args) -> int:
    cfg = _pipeline_config(args)
    methods = args.methods.split(",") if args.methods else list(Method.__members__)
    outcome = run_compare(cfg, methods)
    print(f"basis: {outcome['basis']}")
    print(outcome["table"].to_text(), end="")
    return 0


def _cmd_integrate(args) -> int:
    from .images import read_pfm
    from .integration import normals_to_gradients

    nrm = read_pfm(args.normals)
    if nrm.ndim != 3:
        raise DimensionMismatch("normals file must be a 3-channel PFM")
    mask = read_pgm(args.mask) > 0 if args.mask else np.ones(nrm.shape[:2], dtype=bool)
    grads = normals_to_gradients(nrm, mask, n_z_min=args.n_z_min)
    surface = integrate(grads, padding=PERIODIC if args.periodic else MIRROR)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pfm(out / "surface.pfm", np.where(surface.mask, surface.z, 0.0))
    print(out / "surface.pfm")
    return 0


def _cmd_eval(args) -> int:
    ref = read_image(args.reference)
    est = read_image(args.estimate)
    if args.mask:
        mask = read_pgm(args.mask) > 0
    else:
        mask = (ref != 0) & (est != 0)
    report = rms_error(ref, est, mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(out / "report.json", report_to_dict(report))
    write_pfm(out / "error_map.pfm", np.nan_to_num(report.per_pixel_abs_error))
    write_png_heatmap(out / "error_heat.png", report.per_pixel_abs_error)
    print(f"e_rms: {report.e_rms:.6g} (normalized {report.e_rms_normalized:.6g})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="helmstereo",
        description="Reconstruct depth and normals from reciprocal image pairs.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset from a scene JSON")
    p.add_argument("scene_json")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("carve", help="carve the visual hull and export it")
    _add_pipeline_flags(p)
    p.add_argument("--ply", action="store_true", help="also export a PLY point cloud")
    p.set_defaults(fn=_cmd_carve)

    p = sub.add_parser("reconstruct", help="run one estimation method end to end")
    _add_pipeline_flags(p)
    p.set_defaults(fn=_cmd_reconstruct)

    p = sub.add_parser("compare", help="run several methods and rank them")
    _add_pipeline_flags(p)
    p.add_argument("--methods", help="comma-separated subset (default: all)")
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("integrate", help="integrate a normal-field PFM into a surface")
    p.add_argument("normals", help="3-channel PFM of camera-frame unit normals")
    p.add_argument("--mask", help="PGM validity mask")
    p.add_argument("--n-z-min", type=float, default=0.05, dest="n_z_min")
    p.add_argument("--periodic", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_integrate)

    p = sub.add_parser("eval", help="RMS discrepancy between two depth PFMs")
    p.add_argument("reference")
    p.add_argument("estimate")
    p.add_argument("--mask")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except HelmstereoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
