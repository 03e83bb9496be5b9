"""Challenge-style evaluation: mean radial error and successful detection rates."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Frame, LandmarkSet
from .errors import ContractError

DEFAULT_THRESHOLDS_MM = (2.0, 2.5, 3.0, 4.0)


@dataclass
class EvaluationReport:
    per_landmark_errors_mm: np.ndarray  # (samples, n)
    mre_mm: float
    sd_mm: float
    sdr: dict[float, float]  # threshold (mm) -> percent of detections within it
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS_MM
    # Extension hook: predicted ORIGINAL-frame coordinates per sample, so a
    # downstream tool can derive anatomical measurements.
    predicted_points: dict[str, np.ndarray] = field(default_factory=dict)


def radial_errors(pred: LandmarkSet, gt: LandmarkSet, spacing_mm: float) -> np.ndarray:
    """Per-landmark Euclidean error in millimeters; both sets must be ORIGINAL-frame."""
    if pred.frame is not Frame.ORIGINAL or gt.frame is not Frame.ORIGINAL:
        raise ContractError(
            f"radial errors are defined in the ORIGINAL frame, got {pred.frame.value} vs {gt.frame.value}"
        )
    if pred.n != gt.n:
        raise ContractError(f"landmark count mismatch: {pred.n} vs {gt.n}")
    if not spacing_mm > 0:
        raise ContractError(f"spacing_mm must be positive, got {spacing_mm}")
    return spacing_mm * np.linalg.norm(pred.points - gt.points, axis=1)


def aggregate(
    errors_mm: np.ndarray,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS_MM,
) -> EvaluationReport:
    """Pool all landmark-sample errors: mean, population sd, and inclusive SDRs."""
    errors = np.atleast_2d(np.asarray(errors_mm, dtype=np.float64))
    if errors.size == 0:
        raise ContractError("cannot aggregate an empty error matrix")
    flat = errors.ravel()
    mre = float(flat.mean())
    sd = float(flat.std())  # population (divide by N)
    sdr = {float(t): float(100.0 * np.count_nonzero(flat <= t) / flat.size) for t in thresholds}
    return EvaluationReport(
        per_landmark_errors_mm=errors,
        mre_mm=mre,
        sd_mm=sd,
        sdr=sdr,
        thresholds=tuple(float(t) for t in thresholds),
    )


def format_report(report: EvaluationReport) -> str:
    """Fixed-width table in the challenge's column order: MRE, 2mm, 2.5mm, 3mm, 4mm."""
    headers = ["MRE(mm)", "SD(mm)"] + [f"{t:g}mm" for t in report.thresholds]
    values = [f"{report.mre_mm:.2f}", f"{report.sd_mm:.2f}"] + [
        f"{report.sdr[t]:.2f}" for t in report.thresholds
    ]
    width = max(len(x) for x in headers + values) + 2
    line = "".join(h.rjust(width) for h in headers)
    vals = "".join(v.rjust(width) for v in values)
    return f"{line}\n{vals}"


def write_report(report: EvaluationReport, path: Path) -> None:
    """Serialize as flat key-value text, with predicted coordinates appended per sample."""
    path = Path(path)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"samples = {report.per_landmark_errors_mm.shape[0]}\n")
        fh.write(f"landmarks = {report.per_landmark_errors_mm.shape[1]}\n")
        fh.write(f"mre_mm = {report.mre_mm:.6f}\n")
        fh.write(f"sd_mm = {report.sd_mm:.6f}\n")
        for t in report.thresholds:
            fh.write(f"sdr_{t:g}mm = {report.sdr[t]:.6f}\n")
        for ident in sorted(report.predicted_points):
            coords = ";".join(f"{x:.3f},{y:.3f}" for x, y in report.predicted_points[ident])
            fh.write(f"predicted[{ident}] = {coords}\n")
