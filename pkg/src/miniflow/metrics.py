"""Flow evaluation: end-point error by region and the Fl outlier rate.

Regions follow the occlusion masks of the scene generator: EPE is averaged
over all valid pixels, the non-occluded ones, and the occluded ones. Empty
regions are reported as absent (None), never as zero. Region means use
correctly rounded summation (math.fsum) so they are independent of pixel
iteration order.
"""

from dataclasses import dataclass
import math
from typing import Optional

import numpy as np


@dataclass
class RegionReport:
    """Per-region EPE means, the Fl-all rate, and region pixel counts."""

    epe_all: Optional[float]
    epe_noc: Optional[float]
    epe_occ: Optional[float]
    fl_all: Optional[float]
    count_all: int
    count_noc: int
    count_occ: int


def _as_hw(arr, name):
    a = np.asarray(arr)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"{name} must be [H,W] or [1,H,W], got {arr.shape}")
    return a


def _binary(mask, name, like):
    if mask is None:
        return np.ones(like, dtype=bool)
    m = _as_hw(mask, name)
    if m.shape != like:
        raise ValueError(f"{name} shape {m.shape} does not match {like}")
    vals = np.unique(m)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"{name} must be binary, found values {vals[:4]}")
    return m.astype(bool)


def epe_map(pred, gt):
    """Per-pixel Euclidean norm of pred - gt; [2,H,W] in, [1,H,W] double out."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim != 3 or pred.shape[0] != 2:
        raise ValueError(f"flow fields must be [2,H,W], got {pred.shape}")
    du = pred[0] - gt[0]
    dv = pred[1] - gt[1]
    return np.sqrt(du * du + dv * dv)[None]


def _region_mean(values) -> Optional[float]:
    if values.size == 0:
        return None
    return math.fsum(values) / values.size


def region_epe(epe, occ, valid=None) -> RegionReport:
    """Mean EPE over valid, valid & ~occ, and valid & occ pixels.

    Empty regions come back as None; the all-region mean always equals the
    count-weighted combination of the other two.
    """
    e = _as_hw(epe, "epe")
    occ_b = _binary(occ, "occ", e.shape)
    valid_b = _binary(valid, "valid", e.shape)
    sel_all = valid_b
    sel_noc = valid_b & ~occ_b
    sel_occ = valid_b & occ_b
    return RegionReport(
        epe_all=_region_mean(e[sel_all]),
        epe_noc=_region_mean(e[sel_noc]),
        epe_occ=_region_mean(e[sel_occ]),
        fl_all=None,
        count_all=int(sel_all.sum()),
        count_noc=int(sel_noc.sum()),
        count_occ=int(sel_occ.sum()),
    )


def fl_rate(pred, gt, valid=None) -> Optional[float]:
    """Percent of valid pixels that are Fl outliers.

    A pixel is an outlier when its EPE is at least 3 px and at least 5% of
    the ground-truth flow magnitude; where |gt| = 0 the magnitude branch is
    vacuous and only the 3 px branch decides.
    """
    e = epe_map(pred, gt)[0]
    valid_b = _binary(valid, "valid", e.shape)
    n = int(valid_b.sum())
    if n == 0:
        return None
    gt = np.asarray(gt, dtype=np.float64)
    mag = np.sqrt(gt[0] * gt[0] + gt[1] * gt[1])
    outlier = (e >= 3.0) & (e >= 0.05 * mag)
    return 100.0 * int((outlier & valid_b).sum()) / n


def evaluate_flow(pred, gt, occ, valid=None) -> RegionReport:
    """Full per-frame report: region EPE means plus the Fl-all rate."""
    report = region_epe(epe_map(pred, gt), occ, valid)
    report.fl_all = fl_rate(pred, gt, valid)
    return report


_METRIC_FIELDS = ("epe_all", "epe_noc", "epe_occ", "fl_all")
_COUNT_FIELDS = ("count_all", "count_noc", "count_occ")


def format_report_text(report: RegionReport) -> str:
    """Line-oriented `metric value` pairs; absent regions say so."""
    lines = []
    for name in _METRIC_FIELDS:
        value = getattr(report, name)
        lines.append(f"{name} {'absent' if value is None else format(value, '.6f')}")
    for name in _COUNT_FIELDS:
        lines.append(f"{name} {getattr(report, name)}")
    return "\n".join(lines) + "\n"


def format_report_kv(report: RegionReport) -> str:
    """Machine-readable key=value lines; absent metrics are omitted."""
    lines = []
    for name in _METRIC_FIELDS:
        value = getattr(report, name)
        if value is not None:
            lines.append(f"{name}={value:.6f}")
    for name in _COUNT_FIELDS:
        lines.append(f"{name}={getattr(report, name)}")
    return "\n".join(lines) + "\n"
