"""Depth-map evaluation: RMS discrepancy and method comparison tables."""

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyMask, MaskMismatch


class Method(str, Enum):
    """Depth estimation methods; declaration order is the tie order in
    comparison tables."""

    MAP_ND = "MAP_ND"
    MAP_BP_N = "MAP_BP_N"
    MAP_BP_Z = "MAP_BP_Z"
    ML = "ML"


_METHOD_ORDER = {m: i for i, m in enumerate(Method)}


@dataclass(frozen=True)
class EvalReport:
    method: Method | None
    e_rms: float
    e_rms_normalized: float
    pixel_count: int
    per_pixel_abs_error: np.ndarray  # (h, w), NaN off the mask

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.per_pixel_abs_error)


def rms_error(
    reference: np.ndarray,
    estimate: np.ndarray,
    mask: np.ndarray,
    method: Method | None = None,
) -> EvalReport:
    """Root-mean-square discrepancy over the mask.

    The normalized variant divides by the reference's depth span over the
    mask, putting values on a 0..1 depth convention; it is infinite when
    the reference has zero span but a nonzero error.
    """
    ref = np.asarray(reference, dtype=float)
    est = np.asarray(estimate, dtype=float)
    msk = np.asarray(mask, dtype=bool)
    if ref.shape != est.shape or ref.shape != msk.shape:
        raise DimensionMismatch(
            f"shapes differ: {ref.shape} vs {est.shape} vs {msk.shape}"
        )
    n = int(msk.sum())
    if n == 0:
        raise EmptyMask("evaluation mask is empty")
    diff = ref[msk] - est[msk]
    e = float(np.sqrt(np.mean(diff * diff)))
    span = float(ref[msk].max() - ref[msk].min())
    if span > 0:
        e_norm = e / span
    else:
        e_norm = 0.0 if e == 0.0 else math.inf
    abs_err = np.full(ref.shape, np.nan)
    abs_err[msk] = np.abs(diff)
    return EvalReport(
        method=method,
        e_rms=e,
        e_rms_normalized=e_norm,
        pixel_count=n,
        per_pixel_abs_error=abs_err,
    )


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple  # (method, e_rms, e_rms_normalized, pixel_count), ranked

    def to_csv(self) -> str:
        lines = ["rank,method,e_rms,e_rms_normalized,pixel_count"]
        for rank, (method, e, en, n) in enumerate(self.rows, start=1):
            lines.append(f"{rank},{method.value},{e!r},{en!r},{n}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [f"{'rank':>4}  {'method':<10} {'e_rms':>14} {'normalized':>14}"]
        for rank, (method, e, en, _) in enumerate(self.rows, start=1):
            lines.append(f"{rank:>4}  {method.value:<10} {e:>14.6g} {en:>14.6g}")
        return "\n".join(lines) + "\n"


def compare_methods(reports: list[EvalReport]) -> ComparisonTable:
    """Rank reports by e_rms (ties by method declaration order).

    All reports must cover the same pixel set.
    """
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    base = reports[0].mask
    for r in reports[1:]:
        if r.mask.shape != base.shape or not np.array_equal(r.mask, base):
            raise MaskMismatch("reports cover different pixel sets")
    ordered = sorted(
        reports, key=lambda r: (r.e_rms, _METHOD_ORDER.get(r.method, len(_METHOD_ORDER)))
    )
    rows = tuple(
        (r.method, r.e_rms, r.e_rms_normalized, r.pixel_count) for r in ordered
    )
    return ComparisonTable(rows=rows)


def report_to_dict(report: EvalReport) -> dict:
    return {
        "method": report.method.value if report.method else None,
        "e_rms": report.e_rms,
        "e_rms_normalized": report.e_rms_normalized,
        "pixel_count": report.pixel_count,
    }


def write_report_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
