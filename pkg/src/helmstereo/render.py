"""Synthetic reciprocal-pair renderer for analytic scenes.

Renders geometrically exact image pairs with camera and light positions
exchanged, under reciprocal BRDFs (the specular lobe is symmetric in the
incident and exit directions by construction). Output is byte-compatible
pipeline input: the same calibration JSON and PFM images that the scene
loader ingests, plus ground-truth depth/normal grids for evaluation.

The irradiance model is a point light with inverse-square falloff and a
clamped foreshortening cosine; no interreflection, no cast shadows, no
sensor model beyond optional additive Gaussian noise.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ParseError
from .geometry import ViewStation, make_station, pixel_rays, station_depth
from .images import write_pfm, write_pgm
from .scene import ReciprocalPair, VolumeSpec, save_calibration

_HF_MARCH_STEPS = 384
_HF_BISECT_ITERS = 60


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def intersect(self, origin, dirs):
        oc = np.asarray(origin, dtype=float) - np.asarray(self.center, dtype=float)
        d = np.asarray(dirs, dtype=float)
        b = d @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - c
        hit = disc >= 0.0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        hit &= t > 1e-9
        t = np.where(hit, t, np.inf)
        pts = np.asarray(origin) + t[:, None] * d
        normals = (pts - np.asarray(self.center)) / self.radius
        return t, normals, hit

    def bbox(self):
        c = np.asarray(self.center, dtype=float)
        r = self.radius
        return c - r, c + r


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray

    def intersect(self, origin, dirs):
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        d = np.asarray(dirs, dtype=float)
        denom = d @ n
        num = (np.asarray(self.point, dtype=float) - np.asarray(origin)) @ n
        hit = np.abs(denom) > 1e-12
        t = np.where(hit, num / np.where(hit, denom, 1.0), np.inf)
        hit &= t > 1e-9
        t = np.where(hit, t, np.inf)
        # Orient the normal toward the ray origins.
        side = 1.0 if num < 0 else -1.0
        normals = np.broadcast_to(side * n, d.shape).copy()
        return t, normals, hit

    def bbox(self):
        return None  # unbounded; the scene must supply an explicit volume


@dataclass(frozen=True)
class HeightField:
    """Surface z = h(x, y) over an axis-aligned rectangle in the world XY plane."""

    origin: np.ndarray  # (2,) rectangle min corner
    size: np.ndarray  # (2,) rectangle edge lengths
    grid: np.ndarray  # (ny, nx) heights; node (0, 0) at the min corner

    def _sample(self, x, y):
        """Bilinear height and analytic gradient at world (x, y); NaN outside."""
        gx = (x - self.origin[0]) / self.size[0] * (self.grid.shape[1] - 1)
        gy = (y - self.origin[1]) / self.size[1] * (self.grid.shape[0] - 1)
        inside = (gx >= 0) & (gx <= self.grid.shape[1] - 1) & (gy >= 0) & (gy <= self.grid.shape[0] - 1)
        gx = np.clip(gx, 0, self.grid.shape[1] - 1)
        gy = np.clip(gy, 0, self.grid.shape[0] - 1)
        ix = np.clip(gx.astype(int), 0, self.grid.shape[1] - 2)
        iy = np.clip(gy.astype(int), 0, self.grid.shape[0] - 2)
        fx = gx - ix
        fy = gy - iy
        z00 = self.grid[iy, ix]
        z10 = self.grid[iy, ix + 1]
        z01 = self.grid[iy + 1, ix]
        z11 = self.grid[iy + 1, ix + 1]
        h = (1 - fy) * ((1 - fx) * z00 + fx * z10) + fy * ((1 - fx) * z01 + fx * z11)
        # Per-node-unit derivatives, converted to world units.
        dx_node = (1 - fy) * (z10 - z00) + fy * (z11 - z01)
        dy_node = (1 - fx) * (z01 - z00) + fx * (z11 - z10)
        hx = dx_node * (self.grid.shape[1] - 1) / self.size[0]
        hy = dy_node * (self.grid.shape[0] - 1) / self.size[1]
        return np.where(inside, h, np.nan), hx, hy, inside

    def intersect(self, origin, dirs):
        origin = np.asarray(origin, dtype=float)
        d = np.asarray(dirs, dtype=float)
        lo, hi = self.bbox()
        # Ray/AABB slab test for the march interval.
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(d != 0.0, 1.0 / d, np.inf)
        t_lo = (lo - origin) * inv
        t_hi = (hi - origin) * inv
        t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=1)
        t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
        t_near = np.maximum(t_near, 1e-9)
        valid = t_far > t_near

        n_rays = d.shape[0]
        t_hit = np.full(n_rays, np.inf)
        if np.any(valid):
            ts = np.linspace(0.0, 1.0, _HF_MARCH_STEPS)
            span = np.where(valid, t_far - t_near, 0.0)
            t_grid = t_near[:, None] + span[:, None] * ts[None, :]
            pts = origin[None, None, :] + t_grid[:, :, None] * d[:, None, :]
            h, _, _, inside = self._sample(pts[:, :, 0].ravel(), pts[:, :, 1].ravel())
            f = pts[:, :, 2].ravel() - h
            f = np.where(inside, f, np.inf).reshape(n_rays, _HF_MARCH_STEPS)
            below = f <= 0.0
            first = np.argmax(below, axis=1)
            found = below.any(axis=1) & valid & (first > 0)
            if np.any(found):
                ridx = np.nonzero(found)[0]
                ta = t_grid[ridx, first[found] - 1]
                tb = t_grid[ridx, first[found]]
                o2 = origin[None, :]
                for _ in range(_HF_BISECT_ITERS):
                    tm = 0.5 * (ta + tb)
                    pm = o2 + tm[:, None] * d[ridx]
                    hm, _, _, ins = self._sample(pm[:, 0], pm[:, 1])
                    fm = np.where(ins, pm[:, 2] - hm, np.inf)
                    above = fm > 0.0
                    ta = np.where(above, tm, ta)
                    tb = np.where(above, tb, tm)
                t_hit[ridx] = 0.5 * (ta + tb)

        hit = np.isfinite(t_hit)
        pts = origin + np.where(hit, t_hit, 0.0)[:, None] * d
        _, hx, hy, _ = self._sample(pts[:, 0], pts[:, 1])
        normals = np.stack([-hx, -hy, np.ones_like(hx)], axis=1)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return np.where(hit, t_hit, np.inf), normals, hit

    def bbox(self):
        lo = np.array([self.origin[0], self.origin[1], float(self.grid.min())])
        hi = np.array(
            [
                self.origin[0] + self.size[0],
                self.origin[1] + self.size[1],
                float(self.grid.max()),
            ]
        )
        return lo, hi


@dataclass(frozen=True)
class Lambertian:
    albedo: float

    def eval(self, normals, v_in, v_out):
        return np.full(normals.shape[:-1], self.albedo / np.pi)


@dataclass(frozen=True)
class Phong:
    """Reciprocal Phong: diffuse plus a specular lobe around the mirror
    direction, symmetric under exchange of the two directions."""

    kd: float
    ks: float
    exponent: float

    def eval(self, normals, v_in, v_out):
        # reflect(v_in) . v_out == 2 (n.v_in)(n.v_out) - v_in.v_out, symmetric.
        cos_r = (
            2.0
            * np.sum(normals * v_in, axis=-1)
            * np.sum(normals * v_out, axis=-1)
            - np.sum(v_in * v_out, axis=-1)
        )
        lobe = np.clip(cos_r, 0.0, None) ** self.exponent
        norm = (self.exponent + 2.0) / (2.0 * np.pi)
        return self.kd / np.pi + self.ks * norm * lobe


@dataclass(frozen=True)
class AnalyticScene:
    surface: object
    brdf: object
    light_power: float = 1.0


@dataclass(frozen=True)
class GroundTruth:
    """Oracle depth/normal grids from the principal station's viewpoint."""

    depth: np.ndarray  # (h, w) optical-axis depth, NaN off the mask
    normals: np.ndarray  # (h, w, 3) unit normals, NaN off the mask
    mask: np.ndarray  # (h, w) bool


def _pixel_grid(width: int, height: int) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def irradiance_at(
    scene: AnalyticScene,
    camera: ViewStation,
    light: ViewStation,
    points: np.ndarray,
    normals: np.ndarray,
) -> np.ndarray:
    """Exact image irradiance for surface points seen by `camera`, lit by `light`.

    Zero for self-shadowed (light below horizon) or back-facing points.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    nrm = np.asarray(normals, dtype=float).reshape(-1, 3)
    to_light = light.center[None, :] - pts
    dist2 = np.sum(to_light**2, axis=1)
    v_light = to_light / np.sqrt(dist2)[:, None]
    v_cam = _unit(camera.center[None, :] - pts)
    cos_l = np.sum(nrm * v_light, axis=1)
    cos_c = np.sum(nrm * v_cam, axis=1)
    fr = scene.brdf.eval(nrm, v_light, v_cam)
    lit = (cos_l > 0.0) & (cos_c > 0.0)
    out = np.where(lit, fr * np.clip(cos_l, 0.0, None) / dist2 * scene.light_power, 0.0)
    return out


def render_at_pixels(
    scene: AnalyticScene, camera: ViewStation, light: ViewStation, pixels: np.ndarray
) -> np.ndarray:
    """Exact image values at arbitrary (fractional) pixel positions.

    This is the continuum limit of sampling the rendered image: rays are
    cast through the requested positions and shaded analytically, with no
    pixel-grid discretization. Missed rays give 0.
    """
    pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
    dirs = pixel_rays(camera, pix)
    t, normals, hit = scene.surface.intersect(camera.center, dirs)
    values = np.zeros(pix.shape[0])
    if np.any(hit):
        pts = camera.center + t[hit, None] * dirs[hit]
        values[hit] = irradiance_at(scene, camera, light, pts, normals[hit])
    return values


def render_station_image(
    scene: AnalyticScene, camera: ViewStation, light: ViewStation, width: int, height: int
) -> np.ndarray:
    """Render one irradiance image: camera rays, first hit, point-light shading."""
    values = render_at_pixels(scene, camera, light, _pixel_grid(width, height))
    return values.reshape(height, width)


def render_pair(
    scene: AnalyticScene,
    a: ViewStation,
    b: ViewStation,
    width: int,
    height: int,
    pair_index: int = 1,
) -> ReciprocalPair:
    """Render the reciprocal pair for stations a and b."""
    return ReciprocalPair(
        station_a=a.id,
        station_b=b.id,
        image_ab=render_station_image(scene, a, b, width, height),
        image_ba=render_station_image(scene, b, a, width, height),
        pair_index=pair_index,
    )


def ground_truth(
    scene: AnalyticScene, principal: ViewStation, width: int, height: int
) -> GroundTruth:
    """Ray-cast depth (optical-axis units) and analytic normals."""
    pixels = _pixel_grid(width, height)
    dirs = pixel_rays(principal, pixels)
    t, normals, hit = scene.surface.intersect(principal.center, dirs)
    cos = dirs @ principal.forward_axis
    depth = np.where(hit, t * cos, np.nan)
    nrm = np.where(hit[:, None], normals, np.nan)
    return GroundTruth(
        depth=depth.reshape(height, width),
        normals=nrm.reshape(height, width, 3),
        mask=hit.reshape(height, width),
    )


def add_noise(pair: ReciprocalPair, sigma: float, seed: int) -> ReciprocalPair:
    """Additive Gaussian noise, clamped at zero; sigma = 0 is the identity.

    The noise field is a pure function of (seed, image dims, sigma): one
    generator seeded once draws the ab field then the ba field.
    """
    if sigma < 0:
        raise ParseError("noise sigma must be >= 0")
    if sigma == 0:
        return pair
    rng = np.random.default_rng(seed)
    noisy_ab = np.clip(pair.image_ab + sigma * rng.standard_normal(pair.image_ab.shape), 0.0, None)
    noisy_ba = np.clip(pair.image_ba + sigma * rng.standard_normal(pair.image_ba.shape), 0.0, None)
    return replace(pair, image_ab=noisy_ab, image_ba=noisy_ba)


# ---------------------------------------------------------------------------
# Scene descriptions (JSON) and dataset emission


def _parse_surface(doc: dict):
    kind = doc.get("type")
    if kind == "sphere":
        return Sphere(center=np.asarray(doc["center"], dtype=float), radius=float(doc["radius"]))
    if kind == "plane":
        return Plane(point=np.asarray(doc["point"], dtype=float), normal=np.asarray(doc["normal"], dtype=float))
    if kind == "height_field":
        return HeightField(
            origin=np.asarray(doc["origin"], dtype=float).reshape(2),
            size=np.asarray(doc["size"], dtype=float).reshape(2),
            grid=np.asarray(doc["z"], dtype=float),
        )
    raise ParseError(f"surface.type: unknown surface tag {kind!r}")


def _parse_brdf(doc: dict):
    kind = doc.get("type")
    if kind == "lambertian":
        return Lambertian(albedo=float(doc["albedo"]))
    if kind == "phong":
        return Phong(kd=float(doc["kd"]), ks=float(doc["ks"]), exponent=float(doc["exponent"]))
    raise ParseError(f"brdf.type: unknown BRDF tag {kind!r}")


def scene_from_json(doc: dict):
    """Parse a scene description into (AnalyticScene, stations, pairs list,
    principal id, resolution, noise sigma, seed, gaussian sigma, volume)."""
    try:
        surface = _parse_surface(doc["surface"])
        brdf = _parse_brdf(doc["brdf"])
        width, height = (int(v) for v in doc["resolution"])
        stations = []
        for entry in doc["stations"]:
            stations.append(
                make_station(
                    id=entry["id"],
                    center=entry["center"],
                    look_at=entry.get("look_at", (0.0, 0.0, 0.0)),
                    up=entry.get("up", (0.0, 1.0, 0.0)),
                    focal_px=float(entry.get("focal_px", 120.0)),
                    width=width,
                    height=height,
                )
            )
        pair_ids = [tuple(p) for p in doc["pairs"]]
        principal = doc["principal"]
    except KeyError as exc:
        raise ParseError(f"scene description: missing field {exc.args[0]!r}") from exc

    scene = AnalyticScene(
        surface=surface,
        brdf=brdf,
        light_power=float(doc.get("light_power", 1.0)),
    )

    volume = None
    if "volume" in doc:
        volume = VolumeSpec(
            origin=np.asarray(doc["volume"]["origin"], dtype=float),
            size=np.asarray(doc["volume"]["size"], dtype=float),
        )
    else:
        box = surface.bbox()
        if box is None:
            raise ParseError("volume: required for unbounded surfaces")
        lo, hi = box
        center = 0.5 * (lo + hi)
        half = np.maximum(0.5 * (hi - lo), 1e-6)
        pad = 1.3
        volume = VolumeSpec(origin=center - pad * half, size=2 * pad * half)

    return {
        "scene": scene,
        "stations": stations,
        "pair_ids": pair_ids,
        "principal": principal,
        "resolution": (width, height),
        "noise_sigma": float(doc.get("noise_sigma", 0.0)),
        "seed": int(doc.get("seed", 0)),
        "gaussian_sigma": float(doc.get("gaussian_sigma", 1.0)),
        "volume": volume,
    }


def synth_dataset(scene_doc: dict, out_dir) -> Path:
    """Render a full dataset: calibration JSON, PFM image pairs, ground truth.

    Returns the calibration document path. The emitted files are directly
    ingestible by the reconstruction pipeline.
    """
    parsed = scene_from_json(scene_doc)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = parsed["scene"]
    stations = {s.id: s for s in parsed["stations"]}
    width, height = parsed["resolution"]

    pair_entries = []
    for i, (sa, sb) in enumerate(parsed["pair_ids"], start=1):
        if sa not in stations or sb not in stations:
            raise ParseError(f"pairs[{i - 1}]: unknown station id")
        pair = render_pair(scene, stations[sa], stations[sb], width, height, pair_index=i)
        if parsed["noise_sigma"] > 0:
            pair = add_noise(pair, parsed["noise_sigma"], parsed["seed"] + i)
        name_ab = f"pair{i:02d}_{sa}_{sb}.pfm"
        name_ba = f"pair{i:02d}_{sb}_{sa}.pfm"
        write_pfm(out / name_ab, pair.image_ab)
        write_pfm(out / name_ba, pair.image_ba)
        pair_entries.append(
            {
                "index": i,
                "station_a": sa,
                "station_b": sb,
                "image_ab": name_ab,
                "image_ba": name_ba,
            }
        )

    gt = ground_truth(scene, stations[parsed["principal"]], width, height)
    write_pfm(out / "gt_depth.pfm", np.where(gt.mask, gt.depth, 0.0))
    write_pfm(out / "gt_normals.pfm", np.where(gt.mask[:, :, None], gt.normals, 0.0))
    write_pgm(out / "gt_mask.pgm", gt.mask)

    calib_path = out / "calibration.json"
    save_calibration(
        calib_path,
        stations=list(stations.values()),
        pair_entries=pair_entries,
        principal=parsed["principal"],
        gaussian_sigma=parsed["gaussian_sigma"],
        volume=parsed["volume"],
    )
    return calib_path
