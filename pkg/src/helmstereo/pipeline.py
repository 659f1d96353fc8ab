"""End-to-end reconstruction: carve, score, label, integrate, evaluate.

Every run writes a manifest (configuration echo, package version, input
and output hashes) sufficient to reproduce its outputs byte-identically.
Float grids are written as PFM with off-mask pixels zeroed, alongside a
PGM validity mask.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InsufficientConstraints, ParseError
from .evaluate import Method, compare_methods, report_to_dict, rms_error
from .geometry import camera_rotation, point_at_depth
from .helmholtz import (
    DepthNormalMap,
    ScoreCache,
    build_score_cache,
    map_from_labels,
    ml_depth,
)
from .hull import (
    CandidateVolume,
    VoxelGrid,
    binarize,
    carve,
    extract_candidates,
    grid_from_volume,
    save_hull,
)
from .images import write_pfm, write_pgm, write_png_heatmap
from .integration import (
    MIRROR,
    export_surface_obj,
    integrate,
    normals_to_gradients,
    rescale_to_depth,
)
from .mrf import FOUR, S1_NORMAL, S2_INTEGRATION, UP_RIGHT, GridMrf, run_bp, save_messages
from .scene import SceneConfig, load_calibration

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    scene: str
    method: str = "MAP_BP_Z"
    alpha: float = 0.5
    iterations: int = 10
    damping: float = 0.5
    window: int = 3
    gaussian_sigma: float | None = None  # None: use the calibration value
    voxel_dims: int = 128
    threshold: float = 0.1  # silhouette threshold, fraction of max intensity
    n_z_min: float = 0.05
    labels_max: int = 64
    s2_width: float = 4.0
    literal_s2: bool = False
    threads: int = 1
    output_dir: str = "out"
    save_hull: bool = False
    save_messages: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha < 1.0):
            raise ParseError("alpha must be in [0, 1)")
        if self.iterations < 1:
            raise ParseError("iterations must be >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ParseError("window must be odd and >= 1")
        if not (0.0 <= self.damping < 1.0):
            raise ParseError("damping must be in [0, 1)")
        if self.method not in Method.__members__:
            raise ParseError(
                f"unknown method {self.method!r}; expected one of "
                f"{', '.join(Method.__members__)}"
            )


def config_from_dict(doc: dict, **overrides) -> PipelineConfig:
    """Build a config from a JSON document (a manifest echo also works)."""
    if "config" in doc and isinstance(doc["config"], dict):
        doc = doc["config"]
    known = {f for f in PipelineConfig.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise ParseError(f"unknown config fields: {sorted(unknown)}")
    merged = dict(doc)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if "scene" not in merged:
        raise ParseError("config: missing field 'scene'")
    return PipelineConfig(**merged)


# ---------------------------------------------------------------------------
# Stages


def build_silhouettes(scene: SceneConfig, threshold: float):
    """One silhouette per station that captured at least one image: the
    union (max) of its images, binarized at threshold * max intensity."""
    by_station: dict[str, np.ndarray] = {}
    for pair in scene.pairs:
        for sid, img in ((pair.station_a, pair.image_ab), (pair.station_b, pair.image_ba)):
            if sid in by_station:
                by_station[sid] = np.maximum(by_station[sid], img)
            else:
                by_station[sid] = img.copy()
    sils = []
    for sid, img in by_station.items():
        level = threshold * float(img.max())
        sils.append((scene.stations[sid], binarize(img, level)))
    return sils


def carve_hull(scene: SceneConfig, voxel_dims: int, threshold: float) -> VoxelGrid:
    if scene.volume is None:
        raise ParseError("calibration document lacks a search volume")
    grid = grid_from_volume(scene.volume, voxel_dims)
    return carve(grid, build_silhouettes(scene, threshold))


def integrated_surface_for(
    dnm: DepthNormalMap, scene: SceneConfig, n_z_min: float
) -> np.ndarray:
    """Integrate a normal field and rescale it into depth units against the
    map's own depths. Returns (h, w) world-depth grid, NaN where the
    normals were unusable."""
    rot = camera_rotation(scene.principal_station)
    cam_normals = np.einsum("ij,hwj->hwi", rot, np.nan_to_num(dnm.normals))
    grads = normals_to_gradients(cam_normals, dnm.mask, n_z_min=n_z_min)
    surface = integrate(grads, padding=MIRROR)
    return rescale_to_depth(surface, dnm.depth, dnm.mask)


def _solve_bp(
    candidates: CandidateVolume,
    cache: ScoreCache,
    cfg: PipelineConfig,
    smoothness: str,
    neighborhood: str,
    zin: np.ndarray | None = None,
):
    ys, xs = np.nonzero(candidates.mask)
    order = ys * candidates.width + xs
    mrf = GridMrf(
        width=candidates.width,
        height=candidates.height,
        mask=candidates.mask,
        labels=[candidates.labels[i] for i in order],
        unary=[cache.costs[i] for i in order],
        alpha=cfg.alpha,
        smoothness=smoothness,
        neighborhood=neighborhood,
        normals=[cache.normals[i] for i in order] if smoothness == S1_NORMAL else None,
        zin=zin,
        s2_literal=cfg.literal_s2,
        s2_width=cfg.s2_width,
        s2_fallback_step=candidates.spacing,
    )
    result = run_bp(mrf, cfg.iterations, damping=cfg.damping)
    return mrf, result


def estimate_depth(
    scene: SceneConfig,
    candidates: CandidateVolume,
    cache: ScoreCache,
    cfg: PipelineConfig,
):
    """Dispatch one estimation method; returns (DepthNormalMap, extras)."""
    extras: dict = {}
    method = Method(cfg.method)
    if method == Method.ML:
        return ml_depth(candidates, cache, window=cfg.window), extras

    if method == Method.MAP_ND:
        mrf, result = _solve_bp(candidates, cache, cfg, S1_NORMAL, UP_RIGHT)
    elif method == Method.MAP_BP_N:
        mrf, result = _solve_bp(candidates, cache, cfg, S1_NORMAL, FOUR)
    elif method == Method.MAP_BP_Z:
        ml = ml_depth(candidates, cache, window=cfg.window)
        zin = integrated_surface_for(ml, scene, cfg.n_z_min)
        # Anchor pixels whose normals were too grazing to integrate fall
        # back to the ML depth itself.
        zin = np.where(np.isfinite(zin), zin, ml.depth)
        extras["ml"] = ml
        extras["zin"] = zin
        mrf, result = _solve_bp(candidates, cache, cfg, S2_INTEGRATION, FOUR, zin=zin)
    else:  # pragma: no cover
        raise ParseError(f"unhandled method {method}")
    extras["mrf"] = mrf
    extras["bp"] = result
    return map_from_labels(candidates, cache, result.chosen), extras


# ---------------------------------------------------------------------------
# Artifact writing and manifests


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_grid(path: Path, grid: np.ndarray, mask: np.ndarray) -> None:
    write_pfm(path, np.where(mask, np.nan_to_num(grid), 0.0))


def _scene_input_files(scene_path: Path) -> list[Path]:
    files = [scene_path]
    doc = json.loads(scene_path.read_text())
    for entry in doc.get("pairs", []):
        for key in ("image_ab", "image_ba"):
            if key in entry:
                files.append(scene_path.parent / entry[key])
    return files


@dataclass
class ReconstructionResult:
    config: PipelineConfig
    estimate: DepthNormalMap
    surface: np.ndarray  # (h, w) integrated depth, NaN off its mask
    report: dict
    out_dir: Path


def _evaluate_run(
    estimate: DepthNormalMap,
    surface: np.ndarray,
    gt_depth: np.ndarray | None,
    gt_mask: np.ndarray | None,
    method: Method,
) -> dict:
    report: dict = {"method": method.value}
    cons_mask = estimate.mask & np.isfinite(surface)
    cons = rms_error(surface, estimate.depth, cons_mask, method=method)
    report["self_consistency"] = report_to_dict(cons)
    if gt_depth is not None:
        mask = estimate.mask & (gt_mask if gt_mask is not None else np.isfinite(gt_depth))
        gt_rep = rms_error(gt_depth, estimate.depth, mask, method=method)
        report["ground_truth"] = report_to_dict(gt_rep)
    return report


def load_ground_truth(scene_path) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Pick up gt_depth.pfm / gt_mask.pgm next to the calibration file when
    present (synthetic datasets emit them)."""
    from .images import read_image, read_pgm

    base = Path(scene_path).parent
    depth_path = base / "gt_depth.pfm"
    if not depth_path.exists():
        return None, None
    depth = read_image(depth_path)
    mask_path = base / "gt_mask.pgm"
    mask = read_pgm(mask_path) > 0 if mask_path.exists() else depth > 0
    return depth, mask


def reconstruct(
    cfg: PipelineConfig,
    scene: SceneConfig | None = None,
    hull: VoxelGrid | None = None,
    candidates: CandidateVolume | None = None,
    cache: ScoreCache | None = None,
    write_outputs: bool = True,
) -> ReconstructionResult:
    """Run the configured method end to end.

    Precomputed stages can be passed in so that method comparisons share
    the carve and scoring work.
    """
    if scene is None:
        scene = load_calibration(cfg.scene, sigma_override=cfg.gaussian_sigma)
    if len(scene.pairs) < 3:
        raise InsufficientConstraints(
            f"{len(scene.pairs)} reciprocal pairs loaded; need at least 3"
        )
    h, w = scene.pairs[0].image_ab.shape
    if hull is None:
        logger.info("carving %d^3 hull", cfg.voxel_dims)
        hull = carve_hull(scene, cfg.voxel_dims, cfg.threshold)
    if candidates is None:
        candidates = extract_candidates(
            hull, scene.principal_station, (w, h), labels_max=cfg.labels_max
        )
    if cache is None:
        logger.info("scoring %d candidate depths", sum(a.size for a in candidates.labels))
        cache = build_score_cache(scene, candidates, threads=cfg.threads)

    estimate, extras = estimate_depth(scene, candidates, cache, cfg)
    surface = integrated_surface_for(estimate, scene, cfg.n_z_min)
    gt_depth, gt_mask = load_ground_truth(cfg.scene)
    report = _evaluate_run(estimate, surface, gt_depth, gt_mask, Method(cfg.method))

    out = Path(cfg.output_dir)
    if write_outputs:
        out.mkdir(parents=True, exist_ok=True)
        _write_grid(out / "depth.pfm", estimate.depth, estimate.mask)
        write_pfm(
            out / "normals.pfm",
            np.where(estimate.mask[:, :, None], np.nan_to_num(estimate.normals), 0.0),
        )
        write_pgm(out / "mask.pgm", estimate.mask)
        surf_mask = np.isfinite(surface)
        _write_grid(out / "surface.pfm", surface, surf_mask)
        if surf_mask.any():
            ys, xs = np.nonzero(surf_mask)
            pix = np.stack([xs.astype(float), ys.astype(float)], axis=1)
            pts = point_at_depth(scene.principal_station, pix, surface[ys, xs])
            world = np.zeros((h, w, 3))
            world[ys, xs] = pts
            export_surface_obj(out / "surface.obj", world, surf_mask)
        if "ml" in extras:
            _write_grid(out / "ml_depth.pfm", extras["ml"].depth, extras["ml"].mask)
            _write_grid(out / "zin.pfm", extras["zin"], np.isfinite(extras["zin"]))
        if "bp" in extras:
            trace = extras["bp"].energy_trace
            (out / "energy_trace.json").write_text(
                json.dumps({"energy": trace.tolist()}, sort_keys=True) + "\n"
            )
            if cfg.save_messages and extras["bp"].messages is not None:
                save_messages(out / "messages", extras["mrf"], extras["bp"].messages)
        if cfg.save_hull:
            save_hull(out / "hull", hull)
        if gt_depth is not None:
            err = np.abs(estimate.depth - gt_depth)
            err_mask = estimate.mask & (gt_mask if gt_mask is not None else np.isfinite(gt_depth))
            _write_grid(out / "error_map.pfm", err, err_mask)
            write_png_heatmap(out / "error_heat.png", np.where(err_mask, err, np.nan), err_mask)
        from .evaluate import write_report_json

        write_report_json(out / "report.json", report)
        _write_manifest(cfg, out)

    return ReconstructionResult(
        config=cfg, estimate=estimate, surface=surface, report=report, out_dir=out
    )


def _write_manifest(cfg: PipelineConfig, out: Path) -> None:
    inputs = {}
    for p in _scene_input_files(Path(cfg.scene)):
        if p.exists():
            inputs[p.name] = _sha256(p)
    gt = Path(cfg.scene).parent / "gt_depth.pfm"
    if gt.exists():
        inputs[gt.name] = _sha256(gt)
    outputs = {
        p.name: _sha256(p)
        for p in sorted(out.iterdir())
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "version": __version__,
        "config": asdict(cfg),
        "inputs": inputs,
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_compare(cfg: PipelineConfig, methods: list[str]) -> dict:
    """Run several methods over shared carve/score stages and emit a ranked
    comparison (ground truth when available, self-consistency otherwise)."""
    scene = load_calibration(cfg.scene, sigma_override=cfg.gaussian_sigma)
    if len(scene.pairs) < 3:
        raise InsufficientConstraints(
            f"{len(scene.pairs)} reciprocal pairs loaded; need at least 3"
        )
    h, w = scene.pairs[0].image_ab.shape
    hull = carve_hull(scene, cfg.voxel_dims, cfg.threshold)
    candidates = extract_candidates(
        hull, scene.principal_station, (w, h), labels_max=cfg.labels_max
    )
    cache = build_score_cache(scene, candidates, threads=cfg.threads)
    gt_depth, gt_mask = load_ground_truth(cfg.scene)

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for m in methods:
        sub = replace(cfg, method=m, output_dir=str(out / m))
        results[m] = reconstruct(
            sub, scene=scene, hull=hull, candidates=candidates, cache=cache
        )

    if gt_depth is not None:
        common = candidates.mask & (gt_mask if gt_mask is not None else np.isfinite(gt_depth))
        reports = [
            rms_error(gt_depth, results[m].estimate.depth, common, method=Method(m))
            for m in methods
        ]
        basis = "ground_truth"
    else:
        common = candidates.mask.copy()
        for m in methods:
            common &= np.isfinite(results[m].surface)
        reports = [
            rms_error(results[m].surface, results[m].estimate.depth, common, method=Method(m))
            for m in methods
        ]
        basis = "self_consistency"
    table = compare_methods(reports)
    (out / "comparison.csv").write_text(table.to_csv())
    (out / "comparison.txt").write_text(f"basis: {basis}\n" + table.to_text())
    return {"results": results, "table": table, "basis": basis}
