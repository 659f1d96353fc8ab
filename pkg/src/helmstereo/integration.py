"""Surface recovery from a unit-normal field via Fourier-domain projection.

Normals are converted to depth gradients in the principal camera frame
(p = dz/dx, q = dz/dy in pixel units), projected onto the nearest
integrable surface with the classic FFT least-squares filter, and the
result is affinely rescaled into world depth units against a reference
depth map. Mirror padding (symmetric for the along-axis component,
antisymmetric for the cross component) suppresses wrap-around artifacts;
the plain periodic transform is kept for analytic fixtures.
"""

from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from .errors import DegenerateField, DimensionMismatch, Unmasked

N_Z_MIN = 0.05

MIRROR = "mirror"
PERIODIC = "periodic"


@dataclass(frozen=True)
class GradientField:
    p: np.ndarray  # (h, w) dz/dx
    q: np.ndarray  # (h, w) dz/dy
    mask: np.ndarray  # (h, w) bool

    def __post_init__(self):
        if self.p.shape != self.q.shape or self.p.shape != self.mask.shape:
            raise DimensionMismatch("gradient component shapes differ")
        if np.any(~np.isfinite(self.p[self.mask])) or np.any(~np.isfinite(self.q[self.mask])):
            raise DegenerateField("non-finite gradients inside the mask")


@dataclass(frozen=True)
class IntegratedSurface:
    """Depth surface defined up to an additive constant (fixed to mean 0
    over the mask)."""

    z: np.ndarray
    mask: np.ndarray
    offset_policy: str = "zero-mean-over-mask"

    def sample(self, x: int, y: int) -> float:
        if not self.mask[y, x]:
            raise Unmasked(f"pixel ({x}, {y}) has no integrated depth")
        return float(self.z[y, x])


def normals_to_gradients(
    normals: np.ndarray, mask: np.ndarray, n_z_min: float = N_Z_MIN
) -> GradientField:
    """Per-pixel depth gradients from camera-frame unit normals.

    Pixels whose |n_z| falls below `n_z_min` (grazing normals) are masked
    out rather than clamped.
    """
    nrm = np.asarray(normals, dtype=float)
    nz = nrm[:, :, 2]
    ok = np.asarray(mask, dtype=bool) & np.isfinite(nz) & (np.abs(nz) >= n_z_min)
    p = np.zeros(ok.shape)
    q = np.zeros(ok.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        np.divide(-nrm[:, :, 0], nz, out=p, where=ok)
        np.divide(-nrm[:, :, 1], nz, out=q, where=ok)
    return GradientField(p=p, q=q, mask=ok)


def _fourier_solve(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    h, w = p.shape
    wx = 2.0 * np.pi * np.fft.fftfreq(w)
    wy = 2.0 * np.pi * np.fft.fftfreq(h)
    gx, gy = np.meshgrid(wx, wy)
    fp = np.fft.fft2(p)
    fq = np.fft.fft2(q)
    denom = gx * gx + gy * gy
    denom[0, 0] = 1.0  # zero-frequency handled below
    fz = (-1j * gx * fp - 1j * gy * fq) / denom
    fz[0, 0] = 0.0
    return np.real(np.fft.ifft2(fz))


def integrate(grads: GradientField, padding: str = MIRROR) -> IntegratedSurface:
    """Least-squares integrable surface for a gradient field.

    Off-mask gradients are zero-filled (flat prior) before the transform.
    The additive constant is fixed so the surface has mean 0 over the mask.
    """
    if int(grads.mask.sum()) < 4:
        raise DegenerateField("mask covers fewer than 4 pixels")
    p = np.where(grads.mask, grads.p, 0.0)
    q = np.where(grads.mask, grads.q, 0.0)
    if padding == MIRROR:
        # dz/dx extends antisymmetrically in x and symmetrically in y (and
        # conversely for dz/dy), which makes the doubled field the gradient
        # of the mirrored surface.
        p2 = np.block([[p, -p[:, ::-1]], [p[::-1, :], -p[::-1, ::-1]]])
        q2 = np.block([[q, q[:, ::-1]], [-q[::-1, :], -q[::-1, ::-1]]])
        z = _fourier_solve(p2, q2)[: p.shape[0], : p.shape[1]]
    elif padding == PERIODIC:
        z = _fourier_solve(p, q)
    else:
        raise ValueError(f"unknown padding mode {padding!r}")
    z = z - z[grads.mask].mean()
    return IntegratedSurface(z=z, mask=grads.mask.copy())


def sample_zin(surface: IntegratedSurface, pixel) -> float:
    """Integrated depth at an (x, y) pixel; raises Unmasked off the mask."""
    x, y = int(pixel[0]), int(pixel[1])
    return surface.sample(x, y)


def rescale_to_depth(
    surface: IntegratedSurface, reference_depth: np.ndarray, reference_mask: np.ndarray
) -> np.ndarray:
    """Affine map of the integrated surface into depth units.

    The surface is in pixel-pitch units with an arbitrary offset; depth
    labels live in world units along the optical axis. A least-squares
    a*z + b fit against the reference depth map, per connected mask
    component, makes the two commensurate. Returns an (h, w) grid, NaN off
    the surface mask.
    """
    if surface.z.shape != reference_depth.shape:
        raise DimensionMismatch("surface and reference shapes differ")
    out = np.full(surface.z.shape, np.nan)
    components, n_comp = scipy.ndimage.label(surface.mask)
    for c in range(1, n_comp + 1):
        comp = components == c
        fit = comp & reference_mask & np.isfinite(reference_depth)
        zc = surface.z[comp]
        if fit.sum() >= 2 and np.ptp(surface.z[fit]) > 0:
            a, b = np.polyfit(surface.z[fit], reference_depth[fit], 1)
        elif fit.sum() >= 1:
            a, b = 0.0, float(np.mean(reference_depth[fit]))
        else:
            a, b = 0.0, 0.0
        out[comp] = a * zc + b
    return out


def export_surface_obj(path, points: np.ndarray, mask: np.ndarray) -> None:
    """Triangulated height-field mesh over the mask; points is (h, w, 3)."""
    h, w = mask.shape
    index = np.full((h, w), 0, dtype=np.int64)
    ys, xs = np.nonzero(mask)
    index[ys, xs] = np.arange(1, ys.size + 1)  # OBJ indices are 1-based
    with open(path, "w") as f:
        for y, x in zip(ys, xs):
            p = points[y, x]
            f.write(f"v {p[0]:.8g} {p[1]:.8g} {p[2]:.8g}\n")
        for y in range(h - 1):
            for x in range(w - 1):
                a, b = index[y, x], index[y, x + 1]
                c, d = index[y + 1, x], index[y + 1, x + 1]
                if a and b and c and d:
                    f.write(f"f {a} {b} {d}\n")
                    f.write(f"f {a} {d} {c}\n")
