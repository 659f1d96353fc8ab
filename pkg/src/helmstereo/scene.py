"""Scene bookkeeping: stations, reciprocal pairs, and calibration documents.

The calibration document is a single JSON file listing stations (3x4
projection matrices plus optical centers), reciprocal pairs (image paths
plus station ids), the principal station id, the Gaussian prefilter sigma,
and optionally the search volume for hull carving. Image paths are
resolved relative to the document. All loaded objects are immutable after
construction and safe to share across workers.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, ParseError
from .geometry import ViewStation
from .images import gaussian_prefilter, read_image


@dataclass(frozen=True)
class ReciprocalPair:
    """Two images captured with camera and light positions exchanged.

    image_ab was captured by the camera at station_a with the light at
    station_b; image_ba with the roles swapped.
    """

    station_a: str
    station_b: str
    image_ab: np.ndarray
    image_ba: np.ndarray
    pair_index: int

    def __post_init__(self):
        if self.station_a == self.station_b:
            raise ParseError(f"pair {self.pair_index}: stations must differ")
        if self.image_ab.shape != self.image_ba.shape:
            raise DimensionMismatch(
                f"pair {self.pair_index}: image shapes differ "
                f"{self.image_ab.shape} vs {self.image_ba.shape}"
            )
        if np.any(self.image_ab < 0) or np.any(self.image_ba < 0):
            raise ParseError(f"pair {self.pair_index}: negative intensities")


@dataclass(frozen=True)
class VolumeSpec:
    """Axis-aligned search volume for hull carving."""

    origin: np.ndarray  # (3,) min corner
    size: np.ndarray  # (3,) edge lengths

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=float).reshape(3))
        if np.any(self.size <= 0):
            raise ParseError("volume size components must be positive")


@dataclass(frozen=True)
class SceneConfig:
    """Calibrated stations plus loaded (prefiltered) reciprocal pairs."""

    stations: dict[str, ViewStation]
    pairs: tuple[ReciprocalPair, ...]
    principal: str
    gaussian_sigma: float
    volume: VolumeSpec | None = None

    def __post_init__(self):
        if self.principal not in self.stations:
            raise ParseError(f"principal station {self.principal!r} not in stations")
        for pair in self.pairs:
            for sid in (pair.station_a, pair.station_b):
                if sid not in self.stations:
                    raise ParseError(f"pair {pair.pair_index}: unknown station {sid!r}")

    @property
    def principal_station(self) -> ViewStation:
        return self.stations[self.principal]


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ParseError(f"{where}: missing field {key!r}")
    return doc[key]


def load_calibration(path, sigma_override: float | None = None) -> SceneConfig:
    """Load a calibration JSON and its images; prefilter once at load."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc

    base = path.parent
    stations: dict[str, ViewStation] = {}
    for entry in _require(doc, "stations", str(path)):
        sid = _require(entry, "id", "station")
        stations[sid] = ViewStation(
            id=sid,
            center=np.asarray(_require(entry, "center", f"station {sid}")),
            projection=np.asarray(_require(entry, "projection", f"station {sid}")),
        )

    sigma = sigma_override
    if sigma is None:
        sigma = float(doc.get("gaussian_sigma", 1.0))

    pairs = []
    for i, entry in enumerate(_require(doc, "pairs", str(path))):
        where = f"pair {i}"
        img_ab = read_image(base / _require(entry, "image_ab", where))
        img_ba = read_image(base / _require(entry, "image_ba", where))
        pairs.append(
            ReciprocalPair(
                station_a=_require(entry, "station_a", where),
                station_b=_require(entry, "station_b", where),
                image_ab=gaussian_prefilter(img_ab, sigma),
                image_ba=gaussian_prefilter(img_ba, sigma),
                pair_index=int(entry.get("index", i + 1)),
            )
        )
    if not pairs:
        raise ParseError(f"{path}: no reciprocal pairs")

    volume = None
    if "volume" in doc:
        volume = VolumeSpec(
            origin=np.asarray(_require(doc["volume"], "origin", "volume")),
            size=np.asarray(_require(doc["volume"], "size", "volume")),
        )

    return SceneConfig(
        stations=stations,
        pairs=tuple(pairs),
        principal=_require(doc, "principal", str(path)),
        gaussian_sigma=sigma,
        volume=volume,
    )


def save_calibration(
    path,
    stations: list[ViewStation],
    pair_entries: list[dict],
    principal: str,
    gaussian_sigma: float,
    volume: VolumeSpec | None = None,
) -> None:
    """Write a calibration document; pair_entries carry relative image paths."""
    doc = {
        "stations": [
            {
                "id": s.id,
                "center": s.center.tolist(),
                "projection": s.projection.tolist(),
            }
            for s in stations
        ],
        "pairs": pair_entries,
        "principal": principal,
        "gaussian_sigma": gaussian_sigma,
    }
    if volume is not None:
        doc["volume"] = {"origin": volume.origin.tolist(), "size": volume.size.tolist()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
