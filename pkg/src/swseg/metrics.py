"""Overlap, pixel-classification and boundary-distance metrics for binary masks.

HD and ASSD are measured between boundary point sets (foreground pixels with
a background or off-image 4-neighbour) by default. ``surface="full"`` uses
every foreground pixel instead.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError, UndefinedMetricError


def as_mask(a) -> np.ndarray:
    m = np.asarray(a)
    if m.ndim != 2 or min(m.shape) < 1:
        raise ShapeError(f"mask must be 2-D with both dimensions >= 1, got shape {m.shape}")
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        m = m.astype(bool)
    return m


def _pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    p, t = as_mask(pred), as_mask(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ")
    return p, t


def confusion(pred, truth) -> Tuple[int, int, int, int]:
    """Pixel counts (tp, fp, fn, tn)."""
    p, t = _pair(pred, truth)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, fp, fn, p.size - tp - fp - fn


def dsc(pred, truth) -> float:
    """Dice ``2|P & T| / (|P| + |T|)``; 1 if both masks are empty."""
    tp, fp, fn, _ = confusion(pred, truth)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def iou(pred, truth) -> float:
    """Jaccard ``|P & T| / |P | T|``; 1 if both masks are empty."""
    tp, fp, fn, _ = confusion(pred, truth)
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def accuracy(tp: int, fp: int, fn: int, tn: int) -> float:
    return (tp + tn) / (tp + fp + fn + tn)


def precision(tp: int, fp: int, fn: int = 0, tn: int = 0) -> float:
    return 0.0 if tp + fp == 0 else tp / (tp + fp)


def recall(tp: int, fp: int, fn: int, tn: int = 0) -> float:
    return 0.0 if tp + fn == 0 else tp / (tp + fn)


def f1_from_pr(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def f1(tp: int, fp: int, fn: int, tn: int = 0) -> float:
    return f1_from_pr(precision(tp, fp), recall(tp, fp, fn))


# -- boundary distances ----------------------------------------------------------------


def boundary(mask) -> np.ndarray:
    """(row, col) coordinates of foreground pixels touching background.

    Uses 4-connectivity and treats everything outside the image as
    background, so a full-frame mask has its outer ring as boundary.
    """
    m = as_mask(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def _surface(mask, surface: str) -> np.ndarray:
    if surface == "boundary":
        return boundary(mask)
    if surface == "full":
        return np.argwhere(as_mask(mask))
    raise ValueError(f"surface must be 'boundary' or 'full', got {surface!r}")


def _directed(pred, truth, surface: str) -> Tuple[np.ndarray, np.ndarray]:
    p, t = _pair(pred, truth)
    sp, st = _surface(p, surface), _surface(t, surface)
    if len(sp) == 0 or len(st) == 0:
        raise UndefinedMetricError("boundary distance undefined: a mask has an empty surface")
    d_pt, _ = cKDTree(st).query(sp)
    d_tp, _ = cKDTree(sp).query(st)
    return d_pt, d_tp


def hd(pred, truth, surface: str = "boundary") -> float:
    """Symmetric Hausdorff distance in pixels."""
    d_pt, d_tp = _directed(pred, truth, surface)
    return float(max(d_pt.max(), d_tp.max()))


def assd(pred, truth, surface: str = "boundary") -> float:
    """Average symmetric surface distance in pixels."""
    d_pt, d_tp = _directed(pred, truth, surface)
    return float((d_pt.sum() + d_tp.sum()) / (len(d_pt) + len(d_tp)))


# -- reports -------------------------------------------------------------------------------


@dataclass
class MetricsReport:
    dsc: float
    iou: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    hd: Optional[float]
    assd: Optional[float]
    tp: int
    fp: int
    fn: int
    tn: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


REPORT_FIELDS = [f.name for f in fields(MetricsReport)]
SCALAR_FIELDS = REPORT_FIELDS[:8]


def evaluate(pred, truth, surface: str = "boundary") -> MetricsReport:
    """All eight metrics for one mask pair; HD/ASSD are None when undefined."""
    p, t = _pair(pred, truth)
    tp, fp, fn, tn = confusion(p, t)
    try:
        d_pt, d_tp = _directed(p, t, surface)
        h = float(max(d_pt.max(), d_tp.max()))
        a = float((d_pt.sum() + d_tp.sum()) / (len(d_pt) + len(d_tp)))
    except UndefinedMetricError:
        h = a = None
    return MetricsReport(
        dsc=dsc(p, t), iou=iou(p, t), accuracy=accuracy(tp, fp, fn, tn),
        precision=precision(tp, fp), recall=recall(tp, fp, fn), f1=f1(tp, fp, fn),
        hd=h, assd=a, tp=tp, fp=fp, fn=fn, tn=tn,
    )


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics_csv(rows: Sequence[Tuple[str, MetricsReport]], path: Union[str, Path]) -> None:
    """One row per sample; undefined HD/ASSD are written as empty cells."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *REPORT_FIELDS])
        for sid, rep in rows:
            d = rep.to_dict()
            w.writerow([sid, *(_cell(d[k]) for k in REPORT_FIELDS)])


def read_metrics_csv(path: Union[str, Path]) -> List[Dict[str, Optional[float]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        out = []
        for r in csv.DictReader(fh):
            out.append({k: (None if v == "" else (v if k == "id" else float(v))) for k, v in r.items()})
        return out


def mean_report(reports: Sequence[MetricsReport]) -> Dict[str, Optional[float]]:
    """Per-metric means, skipping undefined HD/ASSD entries."""
    out = {}
    for k in SCALAR_FIELDS:
        vals = [getattr(r, k) for r in reports if getattr(r, k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    out["n"] = len(reports)
    out["n_undefined_hd"] = sum(r.hd is None for r in reports)
    return out


# -- correlation -----------------------------------------------------------------------------


def pearson_matrix(table) -> List[List[Optional[float]]]:
    """Pearson r between every pair of columns of ``table`` (rows x metrics).

    Entries involving a constant column (or a column with missing values)
    are None rather than NaN. The diagonal of a usable column is exactly 1.
    """
    rows = [list(r) for r in table]
    if len(rows) < 3:
        raise ValueError(f"need at least 3 rows, got {len(rows)}")
    ncol = len(rows[0])
    cols = []
    for j in range(ncol):
        vals = [r[j] for r in rows]
        if any(v is None or not math.isfinite(v) for v in vals):
            cols.append(None)
            continue
        c = np.array(vals, float)
        c = c - c.mean()
        norm = math.sqrt(float(c @ c))
        cols.append(None if norm == 0 else c / norm)
    out = [[None] * ncol for _ in range(ncol)]
    for i in range(ncol):
        for j in range(i, ncol):
            if cols[i] is None or cols[j] is None:
                continue
            r = 1.0 if i == j else float(np.clip(cols[i] @ cols[j], -1.0, 1.0))
            out[i][j] = out[j][i] = r
    return out


def write_matrix_csv(names: Sequence[str], matrix, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", *names])
        for name, row in zip(names, matrix):
            w.writerow([name, *(_cell(v) for v in row)])
