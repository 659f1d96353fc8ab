"""Radiometric reciprocity constraints and depth scoring.

For a tested 3D point, each reciprocal pair contributes one row
    I_ab * v_a / |O_a - P|^2  -  I_ba * v_b / |O_b - P|^2
to a constraint matrix whose null space is the surface normal when the
point lies on the surface. Depth quality is the second-to-third singular
value ratio: near rank 2 (large ratio) means the tested depth is
consistent with every pair. The data cost maps the ratio to (0, 1] via a
fixed exponential decay.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMatrix, InsufficientConstraints
from .geometry import point_at_depth, project_many, view_vector
from .hull import CandidateVolume
from .images import sample_bilinear_many
from .scene import SceneConfig

# Decay factor of the data cost: cost = exp(-MU * ratio), so ratio 5 costs
# exactly 1/2.
MU = 0.2 * np.log(2.0)
# Ratio clamp and the relative floor below which sigma_2 counts as rank < 2.
RATIO_MAX = 1e6
RANK_EPS = 1e-12
# Keeps the cost strictly positive when exp() underflows at huge ratios.
COST_FLOOR = np.finfo(float).tiny

MIN_VALID_ROWS = 3


@dataclass(frozen=True)
class ConstraintMatrix:
    rows: np.ndarray  # (n_pairs, 3); dropped rows are zeroed
    point: np.ndarray  # (3,) tested world point
    valid_rows: int


@dataclass(frozen=True)
class DepthScore:
    sigma: np.ndarray  # (3,) descending
    ratio: float
    normal: np.ndarray  # (3,) unit, oriented toward the principal station
    data_cost: float


@dataclass
class DepthNormalMap:
    """Reconstruction output: chosen depth, unit normal, validity mask."""

    depth: np.ndarray  # (h, w), NaN where invalid
    normals: np.ndarray  # (h, w, 3), NaN where invalid
    mask: np.ndarray  # (h, w) bool
    label_index: np.ndarray  # (h, w) int, -1 where invalid


@dataclass
class ScoreCache:
    """Per-pixel, per-candidate scores; aligned with CandidateVolume.labels."""

    ratios: list  # each (L,) float, 0 where unscorable
    costs: list  # each (L,) float in (0, 1]
    normals: list  # each (L, 3) unit vectors
    valid: list  # each (L,) bool


def reciprocity_rows(
    point: np.ndarray,
    centers_a: np.ndarray,
    centers_b: np.ndarray,
    intensity_a: np.ndarray,
    intensity_b: np.ndarray,
) -> np.ndarray:
    """Constraint rows from per-pair intensities at a single point.

    intensity_a[j] is the value seen by the camera at centers_a[j] (light
    at centers_b[j]); intensity_b[j] the reciprocal capture.
    """
    p = np.asarray(point, dtype=float)
    da = np.asarray(centers_a, dtype=float) - p
    db = np.asarray(centers_b, dtype=float) - p
    ra2 = np.sum(da * da, axis=-1, keepdims=True)
    rb2 = np.sum(db * db, axis=-1, keepdims=True)
    va = da / np.sqrt(ra2)
    vb = db / np.sqrt(rb2)
    ia = np.asarray(intensity_a, dtype=float)[..., None]
    ib = np.asarray(intensity_b, dtype=float)[..., None]
    return ia * va / ra2 - ib * vb / rb2


def data_cost(ratio) -> np.ndarray:
    """Exponential decay of the singular-value ratio into a (0, 1] cost."""
    return np.maximum(np.exp(-MU * np.asarray(ratio, dtype=float)), COST_FLOOR)


def _gather_rows(scene: SceneConfig, points: np.ndarray):
    """Rows and per-pair validity for a batch of points.

    Rows whose projections fall outside either image (or behind either
    station) are zeroed and flagged invalid; zero rows do not perturb the
    singular structure of the remaining ones.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    m = pts.shape[0]
    n_pairs = len(scene.pairs)
    rows = np.zeros((m, n_pairs, 3))
    valid = np.zeros((m, n_pairs), dtype=bool)
    for j, pair in enumerate(scene.pairs):
        sta = scene.stations[pair.station_a]
        stb = scene.stations[pair.station_b]
        pix_a, front_a = project_many(sta, pts)
        pix_b, front_b = project_many(stb, pts)
        ia, in_a = sample_bilinear_many(pair.image_ab, pix_a)
        ib, in_b = sample_bilinear_many(pair.image_ba, pix_b)
        ok = front_a & front_b & in_a & in_b
        if not ok.any():
            continue
        rows[ok, j, :] = reciprocity_rows(
            np.zeros(3), sta.center - pts[ok], stb.center - pts[ok], ia[ok], ib[ok]
        )
        valid[:, j] = ok
    return rows, valid


def _score_rows(rows: np.ndarray, valid: np.ndarray, to_principal: np.ndarray):
    """Batched SVD scoring of (m, n_pairs, 3) row stacks.

    Returns (sigma, ratio, normal, scorable). Points with fewer than three
    valid rows or with rank < 2 are unscorable: ratio 0, normal pointed at
    the principal station.
    """
    m = rows.shape[0]
    nvalid = valid.sum(axis=1)
    sigma = np.zeros((m, 3))
    ratio = np.zeros(m)
    vdir = np.asarray(to_principal, dtype=float).reshape(-1, 3)
    vdir = vdir / np.linalg.norm(vdir, axis=1, keepdims=True)
    normal = vdir.copy()
    scorable = nvalid >= MIN_VALID_ROWS
    if np.any(scorable):
        u, s, vh = np.linalg.svd(rows[scorable], full_matrices=False)
        sig = s[:, :3]
        floor = RANK_EPS * sig[:, 0]
        rank_ok = sig[:, 1] > floor
        r = np.where(rank_ok, sig[:, 1] / np.maximum(sig[:, 2], floor), 0.0)
        r = np.minimum(r, RATIO_MAX)
        n = vh[:, 2, :]
        sign = np.where(np.sum(n * vdir[scorable], axis=1) < 0, -1.0, 1.0)
        n = n * sign[:, None]
        idx = np.nonzero(scorable)[0]
        sigma[idx] = sig
        ratio[idx] = r
        ok_idx = idx[rank_ok]
        normal[ok_idx] = n[rank_ok]
        scorable = scorable.copy()
        scorable[idx[~rank_ok]] = False
    return sigma, ratio, normal, scorable


def score_points(scene: SceneConfig, points: np.ndarray):
    """Score arbitrary world points against all pairs (vectorized).

    Returns (sigma (m,3), ratio (m,), normal (m,3), scorable (m,)).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    rows, valid = _gather_rows(scene, pts)
    to_principal = scene.principal_station.center[None, :] - pts
    return _score_rows(rows, valid, to_principal)


def assemble_w(scene: SceneConfig, point: np.ndarray) -> ConstraintMatrix:
    """Constraint matrix at one point; raises when fewer than three rows
    survive the in-bounds checks."""
    rows, valid = _gather_rows(scene, np.asarray(point, dtype=float))
    n = int(valid.sum())
    if n < MIN_VALID_ROWS:
        raise InsufficientConstraints(
            f"only {n} of {len(scene.pairs)} pairs observe the point"
        )
    return ConstraintMatrix(rows=rows[0], point=np.asarray(point, dtype=float), valid_rows=n)


def score_depth(w: ConstraintMatrix, principal_dir: np.ndarray) -> DepthScore:
    """SVD scoring of one constraint matrix.

    principal_dir is the unit direction from the point toward the
    principal station; the normal is flipped to face it.
    """
    if w.valid_rows < MIN_VALID_ROWS:
        raise InsufficientConstraints(f"{w.valid_rows} valid rows < {MIN_VALID_ROWS}")
    _, s, vh = np.linalg.svd(w.rows, full_matrices=False)
    sigma = s[:3]
    floor = RANK_EPS * sigma[0]
    if sigma[1] <= floor:
        raise DegenerateMatrix("constraint rows are collinear (rank < 2)")
    ratio = float(min(sigma[1] / max(sigma[2], floor), RATIO_MAX))
    normal = vh[2, :]
    if normal @ np.asarray(principal_dir, dtype=float) < 0:
        normal = -normal
    return DepthScore(
        sigma=sigma,
        ratio=ratio,
        normal=normal,
        data_cost=float(data_cost(ratio)),
    )


def build_score_cache(
    scene: SceneConfig, candidates: CandidateVolume, threads: int = 1
) -> ScoreCache:
    """Score every (pixel, candidate-depth) of the volume in one batched pass."""
    principal = scene.principal_station
    w, h = candidates.width, candidates.height
    n = w * h
    counts = np.array([candidates.labels[i].size for i in range(n)])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    ratios_flat = np.zeros(total)
    costs_flat = np.ones(total)
    normals_flat = np.zeros((total, 3))
    valid_flat = np.zeros(total, dtype=bool)

    if total:
        pix = np.zeros((total, 2))
        depths = np.zeros(total)
        for i in range(n):
            if counts[i]:
                sl = slice(offsets[i], offsets[i + 1])
                pix[sl, 0] = i % w
                pix[sl, 1] = i // w
                depths[sl] = candidates.labels[i]
        points = point_at_depth(principal, pix, depths)

        def work(sl: slice):
            sig, ratio, normal, ok = score_points(scene, points[sl])
            ratios_flat[sl] = ratio
            normals_flat[sl] = normal
            valid_flat[sl] = ok
            costs_flat[sl] = np.where(ok, data_cost(ratio), 1.0)

        if threads > 1:
            chunk = max(1024, -(-total // threads))
            slices = [slice(s, min(s + chunk, total)) for s in range(0, total, chunk)]
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(work, slices))
        else:
            work(slice(0, total))

    def split(arr):
        return [arr[offsets[i] : offsets[i + 1]] for i in range(n)]

    return ScoreCache(
        ratios=split(ratios_flat),
        costs=split(costs_flat),
        normals=split(normals_flat),
        valid=split(valid_flat),
    )


def _window_ratio_totals(
    candidates: CandidateVolume, cache: ScoreCache, x: int, y: int, half: int, tol: float
) -> np.ndarray:
    """Window-summed ratios for every candidate depth of pixel (x, y).

    Neighbors contribute the score of their nearest own candidate within
    `tol` of the tested depth; neighbors without one contribute nothing.
    """
    w, h = candidates.width, candidates.height
    i0 = y * w + x
    d0 = candidates.labels[i0]
    total = cache.ratios[i0].copy()
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            if dx == 0 and dy == 0:
                continue
            qx, qy = x + dx, y + dy
            if not (0 <= qx < w and 0 <= qy < h) or not candidates.mask[qy, qx]:
                continue
            iq = qy * w + qx
            dq = candidates.labels[iq]
            if dq.size == 0:
                continue
            j = np.searchsorted(dq, d0)
            lo = np.clip(j - 1, 0, dq.size - 1)
            hi = np.clip(j, 0, dq.size - 1)
            pick = np.where(np.abs(dq[hi] - d0) < np.abs(dq[lo] - d0), hi, lo)
            near = np.abs(dq[pick] - d0) <= tol
            total[near] += cache.ratios[iq][pick[near]]
    return total


def ml_depth(
    candidates: CandidateVolume,
    cache: ScoreCache,
    window: int = 3,
    match_tol: float | None = None,
) -> DepthNormalMap:
    """Windowed maximum-likelihood depth: per pixel, pick the candidate
    whose ratio summed over the window is largest (ties: nearest depth),
    then read the normal of that candidate.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    tol = candidates.spacing if match_tol is None else match_tol
    w, h = candidates.width, candidates.height
    half = window // 2
    depth = np.full((h, w), np.nan)
    normals = np.full((h, w, 3), np.nan)
    label_index = np.full((h, w), -1, dtype=int)
    mask = candidates.mask.copy()
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            i0 = y * w + x
            if window == 1:
                totals = cache.ratios[i0]
            else:
                totals = _window_ratio_totals(candidates, cache, x, y, half, tol)
            best = int(np.argmax(totals))
            depth[y, x] = candidates.labels[i0][best]
            normals[y, x] = cache.normals[i0][best]
            label_index[y, x] = best
    return DepthNormalMap(depth=depth, normals=normals, mask=mask, label_index=label_index)


def map_from_labels(
    candidates: CandidateVolume, cache: ScoreCache, chosen: np.ndarray
) -> DepthNormalMap:
    """Assemble a DepthNormalMap from per-pixel chosen label indices (-1 = none)."""
    w, h = candidates.width, candidates.height
    depth = np.full((h, w), np.nan)
    normals = np.full((h, w, 3), np.nan)
    mask = np.zeros((h, w), dtype=bool)
    label_index = np.asarray(chosen, dtype=int).reshape(h, w).copy()
    for y in range(h):
        for x in range(w):
            k = label_index[y, x]
            if k < 0:
                continue
            i0 = y * w + x
            depth[y, x] = candidates.labels[i0][k]
            normals[y, x] = cache.normals[i0][k]
            mask[y, x] = True
    return DepthNormalMap(depth=depth, normals=normals, mask=mask, label_index=label_index)
