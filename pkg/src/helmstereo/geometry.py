"""Calibrated view stations: optical centers, projection, and ray geometry.

A station is a calibrated optical center with a 3x4 projection matrix. The
same type serves as camera and as light position, since reciprocal capture
exchanges the two roles. Pixel coordinates are (x, y) with x along columns
and y along rows; pixel centers sit on integer coordinates.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import BehindCamera, CalibrationError, DegenerateGeometry

# Relative singular-value floor below which the projection is rank-deficient.
_RANK_TOL = 1e-10
# Optical-center residual bound: ||P @ h(center)|| < tol * ||P||.
_CENTER_TOL = 1e-9


def homogeneous(points: np.ndarray) -> np.ndarray:
    """Append a unit coordinate: (..., 3) -> (..., 4)."""
    points = np.asarray(points, dtype=float)
    return np.concatenate([points, np.ones(points.shape[:-1] + (1,))], axis=-1)


@dataclass(frozen=True)
class ViewStation:
    """A calibrated optical center with a world-to-pixel projection."""

    id: str
    center: np.ndarray
    projection: np.ndarray
    # Derived quantities, filled in __post_init__.
    _minv: np.ndarray = field(init=False, repr=False, compare=False)
    _det_sign: float = field(init=False, repr=False, compare=False)
    _forward: np.ndarray = field(init=False, repr=False, compare=False)
    _row3_norm: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        proj = np.asarray(self.projection, dtype=float).reshape(3, 4)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "projection", proj)

        svals = np.linalg.svd(proj, compute_uv=False)
        if svals[2] <= _RANK_TOL * svals[0]:
            raise CalibrationError(f"station {self.id!r}: projection is rank-deficient")
        residual = np.linalg.norm(proj @ homogeneous(center))
        if residual >= _CENTER_TOL * np.linalg.norm(proj):
            raise CalibrationError(
                f"station {self.id!r}: center is not the projection null space "
                f"(residual {residual:.3e})"
            )

        m = proj[:, :3]
        det = np.linalg.det(m)
        if det == 0.0:
            raise CalibrationError(f"station {self.id!r}: singular left 3x3 block")
        sign = 1.0 if det > 0 else -1.0
        row3 = m[2, :]
        row3_norm = float(np.linalg.norm(row3))
        object.__setattr__(self, "_minv", np.linalg.inv(m))
        object.__setattr__(self, "_det_sign", sign)
        object.__setattr__(self, "_forward", sign * row3 / row3_norm)
        object.__setattr__(self, "_row3_norm", row3_norm)

    @property
    def forward_axis(self) -> np.ndarray:
        """Unit vector along the optical axis, pointing into the scene."""
        return self._forward


def view_vector(station: ViewStation, point: np.ndarray) -> np.ndarray:
    """Unit direction from a surface point toward the station center."""
    diff = station.center - np.asarray(point, dtype=float)
    norm = np.linalg.norm(diff)
    if norm == 0.0:
        raise DegenerateGeometry(f"point coincides with station {station.id!r}")
    return diff / norm


def station_depth(station: ViewStation, points: np.ndarray) -> np.ndarray:
    """Signed optical-axis depth of world points in the station frame.

    Positive in front of the station; world units regardless of the
    projection's arbitrary scale.
    """
    pts = np.asarray(points, dtype=float)
    w = homogeneous(pts) @ station.projection[2, :]
    return station._det_sign * w / station._row3_norm


def project(station: ViewStation, point: np.ndarray) -> np.ndarray:
    """Project one world point to (x, y) pixel coordinates.

    Raises BehindCamera when the point's station-frame depth is <= 0.
    """
    x = station.projection @ homogeneous(np.asarray(point, dtype=float))
    if station_depth(station, point) <= 0.0:
        raise BehindCamera(f"point behind station {station.id!r}")
    return x[:2] / x[2]


def project_many(station: ViewStation, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch projection: (n, 3) -> ((n, 2) pixels, (n,) in-front mask).

    Pixels of behind-station points are NaN instead of raising, so callers
    can drop them per-row.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    x = homogeneous(pts) @ station.projection.T
    depth = station._det_sign * x[:, 2] / station._row3_norm
    front = depth > 0.0
    pix = np.full((pts.shape[0], 2), np.nan)
    np.divide(x[:, :2], x[:, 2:3], out=pix, where=front[:, None])
    return pix, front


def pixel_rays(station: ViewStation, pixels: np.ndarray) -> np.ndarray:
    """Unit ray directions through pixels, (n, 2) -> (n, 3), pointing forward."""
    pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
    h = np.concatenate([pix, np.ones((pix.shape[0], 1))], axis=1)
    dirs = h @ station._minv.T * station._det_sign
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def point_at_depth(station: ViewStation, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """World points on pixel rays at the given optical-axis depths."""
    dirs = pixel_rays(station, pixels)
    cos = dirs @ station._forward
    t = np.asarray(depth, dtype=float) / cos
    return station.center + t[:, None] * dirs


def camera_rotation(station: ViewStation) -> np.ndarray:
    """World-to-camera rotation; rows are the right, down, and forward axes."""
    m = station.projection[:, :3] * station._det_sign
    k, r = scipy.linalg.rq(m)
    flip = np.sign(np.diag(k))
    flip[flip == 0] = 1.0
    return flip[:, None] * r


def make_station(
    id: str,
    center,
    look_at,
    up=(0.0, 1.0, 0.0),
    focal_px: float = 120.0,
    width: int = 128,
    height: int = 128,
) -> ViewStation:
    """Build a pinhole station from a pose; principal point at the image center."""
    center = np.asarray(center, dtype=float)
    fwd = np.asarray(look_at, dtype=float) - center
    n = np.linalg.norm(fwd)
    if n == 0.0:
        raise DegenerateGeometry("look_at coincides with the station center")
    fwd = fwd / n
    up = np.asarray(up, dtype=float)
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise DegenerateGeometry("up vector is parallel to the viewing direction")
    right /= rn
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    k = np.array(
        [
            [focal_px, 0.0, (width - 1) / 2.0],
            [0.0, focal_px, (height - 1) / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    proj = k @ np.concatenate([rot, -rot @ center[:, None]], axis=1)
    return ViewStation(id=id, center=center, projection=proj)
