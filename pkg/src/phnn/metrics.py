"""Dice score, average surface distance and cumulative Dice histograms."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, DimensionError, UndefinedMetricError

FACES = ndimage.generate_binary_structure(3, 1)


@dataclass
class EvalRecord:
    patient_id: str
    dice: float
    asd_mm: float
    pred_voxels: int
    gt_voxels: int


def _vox(m):
    return (m.voxels if hasattr(m, "voxels") else np.asarray(m)) != 0


def dice(a, b) -> float:
    va, vb = _vox(a), _vox(b)
    if va.shape != vb.shape:
        raise DimensionError(f"dice: dims differ {va.shape} vs {vb.shape}")
    na, nb = int(va.sum()), int(vb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(va, vb).sum()) / (na + nb)


def surface(vox: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background face neighbour or a face on the volume border."""
    eroded = ndimage.binary_erosion(vox, structure=FACES, border_value=0)
    return vox & ~eroded


def _zyx_sampling(spacing):
    sx, sy, sz = spacing
    return (sz, sy, sx)


def asd(a, b, spacing=None) -> float:
    va, vb = _vox(a), _vox(b)
    if va.shape != vb.shape:
        raise DimensionError(f"asd: dims differ {va.shape} vs {vb.shape}")
    if spacing is None:
        sa = getattr(a, "spacing", (1.0, 1.0, 1.0))
        sb = getattr(b, "spacing", sa)
        if not np.allclose(sa, sb, rtol=0, atol=1e-9):
            raise DimensionError(f"asd: spacings differ {sa} vs {sb}")
        spacing = sa
    if not va.any() or not vb.any():
        raise UndefinedMetricError("asd: undefined when either mask is empty")
    sampling = _zyx_sampling(spacing)
    surf_a, surf_b = surface(va), surface(vb)
    # exact Euclidean distance from every voxel to the nearest surface voxel of the other mask
    to_b = ndimage.distance_transform_edt(~surf_b, sampling=sampling)
    to_a = ndimage.distance_transform_edt(~surf_a, sampling=sampling)
    total = to_b[surf_a].sum() + to_a[surf_b].sum()
    return float(total / (surf_a.sum() + surf_b.sum()))


def evaluate_case(patient_id, pred, gt) -> EvalRecord:
    d = dice(pred, gt)
    try:
        s = asd(pred, gt)
    except UndefinedMetricError:
        s = math.nan
    return EvalRecord(patient_id, d, s, int(_vox(pred).sum()), int(_vox(gt).sum()))


def summarize(records) -> dict:
    """Mean and sample standard deviation of dice and ASD, skipping undefined values."""
    out = {}
    for key in ("dice", "asd_mm"):
        vals = np.array([getattr(r, key) for r in records], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        mean = float(vals.mean()) if vals.size else math.nan
        sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out[key] = (mean, sd)
    return out


def write_report(records, path) -> None:
    records = sorted(records, key=lambda r: r.patient_id)
    summary = summarize(records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "dice", "asd_mm", "pred_voxels", "gt_voxels"])
        for r in records:
            w.writerow([r.patient_id, f"{r.dice:.6f}", f"{r.asd_mm:.6f}", r.pred_voxels, r.gt_voxels])
        (dm, ds), (am, as_) = summary["dice"], summary["asd_mm"]
        w.writerow(["mean±sd", f"{dm:.6f}±{ds:.6f}", f"{am:.6f}±{as_:.6f}",
                    f"{np.mean([r.pred_voxels for r in records]):.1f}",
                    f"{np.mean([r.gt_voxels for r in records]):.1f}"])


def cumulative_histogram(records, bin_edges) -> list:
    """Rows of (edge, fraction of cases with dice <= edge)."""
    if not records:
        raise DataError("cumulative_histogram: no records")
    d = np.sort([r.dice if isinstance(r, EvalRecord) else float(r) for r in records])
    edges = sorted(float(e) for e in bin_edges)
    return [(e, np.searchsorted(d, e, side="right") / d.size) for e in edges]


def default_edges():
    return [round(0.9 + 0.0025 * i, 4) for i in range(41)]


def write_histogram(rows, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["edge", "fraction"])
        for e, f in rows:
            w.writerow([f"{e:.6f}", f"{f:.6f}"])
