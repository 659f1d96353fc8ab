"""Visual hull carving and per-pixel depth candidate extraction.

Voxel carving keeps a voxel only when its center projects onto foreground
in every silhouette; projecting outside a silhouette's field of view
counts as background, so the hull never bleeds beyond what any view can
confirm. Candidate depths are the voxel-entry depths seen by each
principal-view pixel ray, expressed as optical-axis depth.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyHull, ParseError
from .geometry import ViewStation, pixel_rays, project_many
from .scene import VolumeSpec


@dataclass(frozen=True)
class VoxelGrid:
    origin: np.ndarray  # (3,) min corner of the volume
    spacing: float
    dims: tuple[int, int, int]
    occupancy: np.ndarray  # (nx, ny, nz) bool

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        if self.spacing <= 0:
            raise ParseError("voxel spacing must be positive")
        if any(d < 1 for d in self.dims):
            raise ParseError("voxel dims must be >= 1")
        if self.occupancy.shape != tuple(self.dims):
            raise ParseError("occupancy shape does not match dims")

    def centers(self) -> np.ndarray:
        """(n, 3) centers of all voxels, x fastest last (C order over dims)."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
        return self.origin + (idx + 0.5) * self.spacing

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())


@dataclass(frozen=True)
class CandidateVolume:
    """Per-pixel ordered candidate depths along the principal rays."""

    width: int
    height: int
    labels: list  # length width*height, row-major; each a sorted 1-D float array
    mask: np.ndarray  # (h, w) bool, true iff the pixel has candidates
    spacing: float  # source voxel spacing, the natural label-matching tolerance

    def labels_at(self, x: int, y: int) -> np.ndarray:
        return self.labels[y * self.width + x]


def grid_from_volume(volume: VolumeSpec, resolution: int) -> VoxelGrid:
    """Fully occupied grid over a search volume; `resolution` voxels along
    the longest edge, cubic voxels."""
    spacing = float(np.max(volume.size)) / resolution
    dims = tuple(int(np.ceil(s / spacing - 1e-9)) for s in volume.size)
    dims = tuple(max(1, d) for d in dims)
    return VoxelGrid(
        origin=volume.origin,
        spacing=spacing,
        dims=dims,
        occupancy=np.ones(dims, dtype=bool),
    )


def binarize(image: np.ndarray, threshold: float) -> np.ndarray:
    """Foreground mask: intensity strictly above the threshold."""
    return np.asarray(image) > threshold


def carve(grid: VoxelGrid, silhouettes: list[tuple[ViewStation, np.ndarray]]) -> VoxelGrid:
    """Keep voxels whose centers land on foreground in every silhouette.

    Out-of-view or behind-station projections count as background.
    Raises EmptyHull if nothing survives.
    """
    if not silhouettes:
        raise ParseError("carve needs at least one silhouette")
    centers = grid.centers()
    keep = grid.occupancy.ravel().copy()
    for station, sil in silhouettes:
        sil = np.asarray(sil, dtype=bool)
        h, w = sil.shape
        pix, front = project_many(station, centers)
        with np.errstate(invalid="ignore"):
            inb = front & (pix[:, 0] >= -0.5) & (pix[:, 0] < w - 0.5)
            inb &= (pix[:, 1] >= -0.5) & (pix[:, 1] < h - 0.5)
        fg = np.zeros(centers.shape[0], dtype=bool)
        sel = np.nonzero(inb)[0]
        xi = np.round(pix[sel, 0]).astype(np.int64)
        yi = np.round(pix[sel, 1]).astype(np.int64)
        fg[sel] = sil[yi, xi]
        keep &= fg
    if not keep.any():
        raise EmptyHull("no voxel survived carving (check calibration/threshold)")
    return VoxelGrid(
        origin=grid.origin,
        spacing=grid.spacing,
        dims=grid.dims,
        occupancy=keep.reshape(grid.dims),
    )


def _ray_aabb(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(dirs != 0.0, 1.0 / dirs, np.inf)
    t_lo = (lo - origin) * inv
    t_hi = (hi - origin) * inv
    t_near = np.max(np.minimum(t_lo, t_hi), axis=1)
    t_far = np.min(np.maximum(t_lo, t_hi), axis=1)
    return np.maximum(t_near, 0.0), t_far


def extract_candidates(
    grid: VoxelGrid,
    principal: ViewStation,
    image_dims: tuple[int, int],
    labels_max: int = 64,
) -> CandidateVolume:
    """March principal-view pixel rays through the hull and collect the
    depths at which they enter occupied voxels.

    Traversal samples each ray at spacing/2 steps; a label is recorded at
    the first sample inside each newly entered occupied voxel, then labels
    closer than spacing/2 are merged. Per-pixel label counts above
    `labels_max` are reduced by uniform index subsampling.
    """
    width, height = image_dims
    lo = grid.origin
    hi = grid.origin + np.asarray(grid.dims) * grid.spacing
    step = grid.spacing / 2.0
    labels: list[np.ndarray] = [np.empty(0)] * (width * height)
    mask = np.zeros((height, width), dtype=bool)
    if grid.count == 0:
        return CandidateVolume(width, height, labels, mask, grid.spacing)

    for y in range(height):
        pix = np.stack([np.arange(width, dtype=float), np.full(width, float(y))], axis=1)
        dirs = pixel_rays(principal, pix)
        cos = dirs @ principal.forward_axis
        t_near, t_far = _ray_aabb(principal.center, dirs, lo, hi)
        alive = t_far > t_near
        span = np.where(alive, t_far - t_near, 0.0)
        n_steps = int(np.ceil(span.max() / step)) + 1 if alive.any() else 0
        if n_steps == 0:
            continue
        ts = t_near[:, None] + np.arange(n_steps)[None, :] * step
        valid = alive[:, None] & (ts <= t_far[:, None])
        pts = principal.center[None, None, :] + ts[:, :, None] * dirs[:, None, :]
        idx = np.floor((pts - lo) / grid.spacing).astype(np.int64)
        inside = valid & np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=2)
        idx_clipped = np.clip(idx, 0, np.asarray(grid.dims) - 1)
        occ = grid.occupancy[idx_clipped[:, :, 0], idx_clipped[:, :, 1], idx_clipped[:, :, 2]]
        occ &= inside
        flat = (
            idx_clipped[:, :, 0] * (grid.dims[1] * grid.dims[2])
            + idx_clipped[:, :, 1] * grid.dims[2]
            + idx_clipped[:, :, 2]
        )
        new_voxel = np.ones_like(occ)
        new_voxel[:, 1:] = (flat[:, 1:] != flat[:, :-1]) | ~occ[:, :-1]
        entry = occ & new_voxel
        for x in np.nonzero(entry.any(axis=1))[0]:
            t_entries = ts[x, entry[x]]
            depths = t_entries * cos[x]
            if depths.size > 1:
                keep = np.ones(depths.size, dtype=bool)
                keep[1:] = np.diff(depths) >= step
                depths = depths[keep]
            if depths.size > labels_max:
                sel = np.unique(np.round(np.linspace(0, depths.size - 1, labels_max)).astype(int))
                depths = depths[sel]
            if depths.size:
                labels[y * width + x] = depths
                mask[y, x] = True
    return CandidateVolume(width, height, labels, mask, grid.spacing)


# ---------------------------------------------------------------------------
# Hull persistence: JSON header + run-length-encoded occupancy


def save_hull(path_prefix, grid: VoxelGrid) -> tuple[Path, Path]:
    """Write <prefix>.json and <prefix>.rle; returns both paths."""
    prefix = Path(path_prefix)
    header = {
        "origin": grid.origin.tolist(),
        "spacing": grid.spacing,
        "dims": list(grid.dims),
        "occupied": grid.count,
        "encoding": "rle-u32-alternating-starting-empty",
    }
    json_path = prefix.with_suffix(".json")
    rle_path = prefix.with_suffix(".rle")
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")

    flat = grid.occupancy.ravel()
    # Alternating run lengths, first run counts empty voxels (may be 0).
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds)
    if flat.size and flat[0]:
        runs = np.concatenate([[0], runs])
    rle_path.write_bytes(runs.astype("<u4").tobytes())
    return json_path, rle_path


def load_hull(path_prefix) -> VoxelGrid:
    prefix = Path(path_prefix)
    header = json.loads(prefix.with_suffix(".json").read_text())
    runs = np.frombuffer(prefix.with_suffix(".rle").read_bytes(), dtype="<u4")
    dims = tuple(header["dims"])
    total = int(np.prod(dims))
    if runs.sum() != total:
        raise ParseError(f"{prefix}: RLE payload does not cover the grid")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos : pos + run] = True
        pos += int(run)
        value = not value
    return VoxelGrid(
        origin=np.asarray(header["origin"], dtype=float),
        spacing=float(header["spacing"]),
        dims=dims,
        occupancy=flat.reshape(dims),
    )


def save_hull_ply(path, grid: VoxelGrid) -> None:
    """Occupied voxel centers as an ASCII PLY point cloud, for inspection."""
    centers = grid.centers()[grid.occupancy.ravel()]
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {centers.shape[0]}\n")
        f.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for p in centers:
            f.write(f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g}\n")
