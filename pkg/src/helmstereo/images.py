"""Image I/O and sampling.

Float grids travel as PFM (32-bit little-endian, scale -1.0, rows stored
bottom-up). Integer inputs (PGM/PNG, 8 or 16 bit grayscale) are mapped to
[0, 1] linearly with no gamma correction; the pipeline treats all values
as linear irradiance.
"""

from pathlib import Path

import numpy as np
import scipy.ndimage
from PIL import Image

from .errors import ImageFormatError, OutOfBounds


def read_pfm(path) -> np.ndarray:
    """Read a PFM file; (h, w) for grayscale, (h, w, 3) for color."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").strip()
        if header == "Pf":
            channels = 1
        elif header == "PF":
            channels = 3
        else:
            raise ImageFormatError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().decode("ascii").split()
        if len(dims) != 2:
            raise ImageFormatError(f"{path}: malformed PFM dimensions")
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().decode("ascii").strip())
        count = width * height * channels
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
        if data.size != count:
            raise ImageFormatError(f"{path}: truncated PFM payload")
    img = data.reshape(height, width, channels).astype(np.float64)
    img = np.flipud(img)
    return img[:, :, 0] if channels == 1 else img


def write_pfm(path, image: np.ndarray) -> None:
    """Write a float grid as PFM (little-endian, scale -1.0)."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        header = b"Pf"
        h, w = arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
        h, w = arr.shape[:2]
    else:
        raise ImageFormatError(f"cannot write shape {arr.shape} as PFM")
    payload = np.flipud(arr).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(payload)


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM; returns uint8 or uint16."""
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    pixels = np.frombuffer(data[pos : pos + count * dtype.itemsize], dtype=dtype)
    if pixels.size != count:
        raise ImageFormatError(f"{path}: truncated PGM payload")
    out = pixels.reshape(height, width)
    return out.astype(np.uint16) if maxval > 255 else out


def write_pgm(path, image: np.ndarray) -> None:
    """Write uint8/uint16 (or bool) as binary PGM."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    if arr.dtype == np.uint8:
        maxval, payload = 255, arr.tobytes()
    elif arr.dtype == np.uint16:
        maxval, payload = 65535, arr.astype(">u2").tobytes()
    else:
        raise ImageFormatError(f"cannot write dtype {arr.dtype} as PGM")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(payload)


def read_image(path) -> np.ndarray:
    """Read any supported image as a float64 irradiance grid.

    PFM passes through unchanged; 8/16-bit integer formats map to [0, 1].
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        img = read_pfm(path)
        if img.ndim != 2:
            raise ImageFormatError(f"{path}: expected grayscale, got color PFM")
        return img
    if suffix == ".pgm":
        raw = read_pgm(path)
        return raw.astype(np.float64) / (65535.0 if raw.dtype == np.uint16 else 255.0)
    if suffix == ".png":
        with Image.open(path) as im:
            if im.mode not in ("L", "I;16", "I"):
                im = im.convert("L")
            arr = np.asarray(im)
        if arr.dtype == np.uint8:
            return arr.astype(np.float64) / 255.0
        return arr.astype(np.float64) / 65535.0
    raise ImageFormatError(f"{path}: unsupported image format {suffix!r}")


def gaussian_prefilter(image: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing applied once at load time; sigma in pixels.

    sigma = 0 is the identity. The kernel is truncated at 3 sigma and
    preserves constants exactly (normalized weights, reflected borders).
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    return scipy.ndimage.gaussian_filter(img, sigma=sigma, mode="nearest", truncate=3.0)


def sample_bilinear_many(
    image: np.ndarray, pixels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear samples at (n, 2) pixel coordinates.

    Returns (values, in_bounds). Out-of-bounds entries sample as 0 with
    in_bounds False; callers decide whether that is an error.
    """
    img = np.asarray(image, dtype=np.float64)
    pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
    h, w = img.shape
    x, y = pix[:, 0], pix[:, 1]
    inside = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)
    inside &= np.isfinite(x) & np.isfinite(y)
    values = np.zeros(pix.shape[0])
    if np.any(inside):
        coords = np.stack([y[inside], x[inside]])
        values[inside] = scipy.ndimage.map_coordinates(
            img, coords, order=1, mode="nearest"
        )
    return values, inside


def sample_intensity(image: np.ndarray, pixel) -> float:
    """Bilinear interpolation at one (x, y) pixel; raises OutOfBounds."""
    values, inside = sample_bilinear_many(image, np.asarray(pixel, dtype=float))
    if not inside[0]:
        raise OutOfBounds(f"pixel {tuple(np.asarray(pixel).tolist())} outside image")
    return float(values[0])


# Compact inferno-like lookup table for error heat maps (anchor colors,
# interpolated to 256 entries at import).
_HEAT_ANCHORS = np.array(
    [
        (0, 0, 4),
        (40, 11, 84),
        (101, 21, 110),
        (159, 42, 99),
        (212, 72, 66),
        (245, 125, 21),
        (250, 193, 39),
        (252, 255, 164),
    ],
    dtype=float,
)


def _heat_lut() -> np.ndarray:
    xs = np.linspace(0, 1, _HEAT_ANCHORS.shape[0])
    grid = np.linspace(0, 1, 256)
    return np.stack(
        [np.interp(grid, xs, _HEAT_ANCHORS[:, c]) for c in range(3)], axis=1
    ).astype(np.uint8)


_LUT = _heat_lut()


def write_png_heatmap(path, values: np.ndarray, mask: np.ndarray | None = None) -> None:
    """Render a scalar grid to a PNG heat map; off-mask pixels are black."""
    vals = np.asarray(values, dtype=float)
    if mask is None:
        mask = np.isfinite(vals)
    mask = mask & np.isfinite(vals)
    rgb = np.zeros(vals.shape + (3,), dtype=np.uint8)
    if np.any(mask):
        lo = float(vals[mask].min())
        hi = float(vals[mask].max())
        span = hi - lo if hi > lo else 1.0
        idx = np.clip((vals[mask] - lo) / span * 255.0, 0, 255).astype(np.uint8)
        rgb[mask] = _LUT[idx]
    Image.fromarray(rgb).save(path, format="PNG")
