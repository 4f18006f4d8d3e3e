"""Segmentation evaluation: Dice, ASSD, and intra/extra boundary ASSD.

Surface voxels are foreground voxels with at least one face-adjacent
background neighbor (voxels outside the grid count as background), and
distances are Euclidean between voxel centers in physical units. When one
mask is empty and the other is not, distances fall back to the physical
diagonal of the grid; two empty masks score 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .volume import LabelMap, VolumeError, CLASS_INTRA, CLASS_EXTRA, CLASS_COCHLEA

METRIC_COLUMNS = ("dice_extra", "dice_intra", "dice_cochlea",
                  "assd_extra", "assd_intra", "assd_cochlea", "assd_bound")


def _as_mask(m):
    data = m.data if isinstance(m, LabelMap) else np.asarray(m)
    return data.astype(bool)


def _as_label(m):
    return m.data if isinstance(m, LabelMap) else np.asarray(m)


def dice(pred, ref) -> float:
    """2|A&B| / (|A|+|B|); 1.0 when both masks are empty."""
    a = _as_mask(pred)
    b = _as_mask(ref)
    if a.shape != b.shape:
        raise VolumeError(f"mask geometry differs: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def surface_mask(mask) -> np.ndarray:
    """Foreground voxels with a face-adjacent background neighbor."""
    m = _as_mask(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for ax in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return m & ~interior


def _surface_points(mask, spacing):
    pts = np.argwhere(surface_mask(mask)).astype(np.float64)
    return pts * np.asarray(spacing, dtype=np.float64)


def grid_diagonal(shape, spacing) -> float:
    return float(np.linalg.norm(np.asarray(shape, dtype=np.float64)
                                * np.asarray(spacing, dtype=np.float64)))


def _assd_from_points(pa, pb, penalty):
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return penalty
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def assd(pred, ref, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance in physical units (mm)."""
    a = _as_mask(pred)
    b = _as_mask(ref)
    if a.shape != b.shape:
        raise VolumeError(f"mask geometry differs: {a.shape} vs {b.shape}")
    penalty = grid_diagonal(a.shape, spacing)
    return _assd_from_points(_surface_points(a, spacing),
                             _surface_points(b, spacing), penalty)


def boundary_mask(lbl) -> np.ndarray:
    """Intra-meatal voxels face-adjacent to an extra-meatal voxel."""
    data = _as_label(lbl)
    intra = data == CLASS_INTRA
    extra = data == CLASS_EXTRA
    near_extra = np.zeros_like(intra)
    padded = np.pad(extra, 1, constant_values=False)
    for ax in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        near_extra |= padded[tuple(lo)] | padded[tuple(hi)]
    return intra & near_extra


def boundary_assd(pred, ref, spacing=(1.0, 1.0, 1.0)) -> float:
    """ASSD between the intra/extra interface sets of two label maps."""
    pa = _as_label(pred)
    rb = _as_label(ref)
    if pa.shape != rb.shape:
        raise VolumeError(f"label geometry differs: {pa.shape} vs {rb.shape}")
    bp = boundary_mask(pa)
    br = boundary_mask(rb)
    penalty = grid_diagonal(pa.shape, spacing)
    sp = np.asarray(spacing, dtype=np.float64)
    pts_p = np.argwhere(bp).astype(np.float64) * sp
    pts_r = np.argwhere(br).astype(np.float64) * sp
    return _assd_from_points(pts_p, pts_r, penalty)


@dataclass
class MetricReport:
    """Per-case rows plus a mean row, in the standard column order."""

    case_ids: list = field(default_factory=list)
    rows: list = field(default_factory=list)  # dict per case, METRIC_COLUMNS keys

    def add(self, case_id, values: dict):
        self.case_ids.append(case_id)
        self.rows.append({k: float(values[k]) for k in METRIC_COLUMNS})

    def mean_row(self) -> dict:
        if not self.rows:
            return {k: float("nan") for k in METRIC_COLUMNS}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in METRIC_COLUMNS}


def case_metrics(pred, ref, spacing=(1.0, 1.0, 1.0)) -> dict:
    p = _as_label(pred)
    r = _as_label(ref)
    return {
        "dice_extra": dice(p == CLASS_EXTRA, r == CLASS_EXTRA),
        "dice_intra": dice(p == CLASS_INTRA, r == CLASS_INTRA),
        "dice_cochlea": dice(p == CLASS_COCHLEA, r == CLASS_COCHLEA),
        "assd_extra": assd(p == CLASS_EXTRA, r == CLASS_EXTRA, spacing),
        "assd_intra": assd(p == CLASS_INTRA, r == CLASS_INTRA, spacing),
        "assd_cochlea": assd(p == CLASS_COCHLEA, r == CLASS_COCHLEA, spacing),
        "assd_bound": boundary_assd(p, r, spacing),
    }


def evaluate_dataset(preds: dict, refs: dict, spacing=(1.0, 1.0, 1.0)) -> MetricReport:
    """Per-case metrics for matching case ids, in sorted id order."""
    if set(preds) != set(refs):
        missing = set(preds) ^ set(refs)
        raise VolumeError(f"prediction/reference case ids differ: {sorted(missing)}")
    report = MetricReport()
    for case_id in sorted(preds):
        sp = spacing
        if isinstance(refs[case_id], LabelMap):
            sp = refs[case_id].spacing
        report.add(case_id, case_metrics(preds[case_id], refs[case_id], sp))
    return report


def write_report_csv(report: MetricReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("case",) + METRIC_COLUMNS)
        for case_id, row in zip(report.case_ids, report.rows):
            w.writerow([case_id] + [f"{row[k]:.6f}" for k in METRIC_COLUMNS])
        mean = report.mean_row()
        w.writerow(["mean"] + [f"{mean[k]:.6f}" for k in METRIC_COLUMNS])


def write_report_markdown(report: MetricReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ("| case | Dice extra | Dice intra | Dice cochlea "
              "| ASSD extra | ASSD intra | ASSD cochlea | ASSD bound |")
    sep = "|" + "---|" * 8
    lines = [header, sep]
    for case_id, row in zip(report.case_ids, report.rows):
        lines.append("| " + " | ".join(
            [case_id] + [f"{row[k]:.3f}" for k in METRIC_COLUMNS]) + " |")
    mean = report.mean_row()
    lines.append("| mean | " + " | ".join(
        f"{mean[k]:.3f}" for k in METRIC_COLUMNS) + " |")
    path.write_text("\n".join(lines) + "\n")
