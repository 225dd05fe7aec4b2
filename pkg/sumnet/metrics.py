"""
Overlap, boundary and area metrics with mean ± std aggregation.

Undefined values (empty denominators, empty contours) are NaN. They are
excluded from aggregation and counted per metric.
"""
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.spatial.distance import cdist
from sklearn.metrics import confusion_matrix

from .errors import ShapeError, ValidationError
from .weighting import extract_contour

METRIC_COLUMNS = [
    "dice", "jaccard", "hausdorff_px", "hausdorff_mm", "pad",
    "sensitivity", "specificity", "ppv",
]
GROUPINGS = ("fold", "patient", "all")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def swapped(self):
        return ConfusionCounts(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)


def _binary(mask, name):
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} mask must be binary")
    return arr.astype(np.uint8)


def confusion(pred, gt):
    pred = _binary(pred, "pred")
    gt = _binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    (tn, fp), (fn, tp) = confusion_matrix(gt.ravel(), pred.ravel(), labels=[0, 1])
    return ConfusionCounts(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))


def _ratio(num, den):
    return num / den if den else float("nan")


def dice(c):
    den = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / den if den else 1.0


def jaccard(c):
    den = c.tp + c.fp + c.fn
    return c.tp / den if den else 1.0


def sensitivity(c):
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c):
    return _ratio(c.tn, c.tn + c.fp)


def ppv(c):
    return _ratio(c.tp, c.tp + c.fp)


def hausdorff(a, b, spacing=None):
    """
    Symmetric Hausdorff distance between two (row, col) point sets, in
    pixels or, with ``spacing=(sy, sx)``, in millimetres. NaN if either set
    is empty.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        return float("nan")
    if spacing is not None:
        scale = np.asarray(spacing, dtype=np.float64)
        a, b = a * scale, b * scale
    d = cdist(a, b)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def pad(pred, gt):
    """|area(pred) - area(gt)| / area(gt); NaN for an empty ground truth."""
    area_gt = int(_binary(gt, "gt").sum())
    area_pred = int(_binary(pred, "pred").sum())
    return _ratio(abs(area_pred - area_gt), area_gt)


def frame_metrics(pred, gt, spacing=None):
    c = confusion(pred, gt)
    ca, cb = extract_contour(pred), extract_contour(gt)
    return {
        "dice": dice(c),
        "jaccard": jaccard(c),
        "hausdorff_px": hausdorff(ca, cb),
        "hausdorff_mm": hausdorff(ca, cb, spacing) if spacing is not None else float("nan"),
        "pad": pad(pred, gt),
        "sensitivity": sensitivity(c),
        "specificity": specificity(c),
        "ppv": ppv(c),
    }


def evaluate_masks(pred, gt, spacing=None, patient="", fold=-1, n_jobs=1):
    """Per-frame metric rows for two (F, [1,] H, W) binary stacks."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"stack shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    pred = pred.reshape(pred.shape[0], pred.shape[-2], pred.shape[-1])
    gt = gt.reshape(pred.shape)
    rows = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(frame_metrics)(pred[i], gt[i], spacing) for i in range(pred.shape[0])
    )
    df = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    df.insert(0, "frame", np.arange(len(df)))
    df.insert(0, "patient", patient)
    df.insert(0, "fold", fold)
    return df


def aggregate(records, group_by="all"):
    """
    Mean and population std per metric, with the number of values used and
    excluded. ``group_by`` is 'fold', 'patient' or 'all'.
    """
    if group_by not in GROUPINGS:
        raise ValidationError(f"group_by must be one of {GROUPINGS}, got {group_by!r}")
    df = records if isinstance(records, pd.DataFrame) else pd.DataFrame(records)
    if df.empty:
        raise ValidationError("cannot aggregate an empty set of records")
    metrics = [m for m in METRIC_COLUMNS if m in df.columns]

    groups = [("all", df)] if group_by == "all" else list(df.groupby(group_by, sort=True))
    rows = []
    for key, part in groups:
        row = {"group": key, "frames": len(part)}
        for m in metrics:
            vals = part[m].astype(float)
            used = vals.dropna()
            row[f"{m}_mean"] = used.mean() if len(used) else float("nan")
            row[f"{m}_std"] = used.std(ddof=0) if len(used) else float("nan")
            row[f"{m}_n"] = len(used)
            row[f"{m}_excluded"] = int(vals.isna().sum())
        rows.append(row)
    return pd.DataFrame(rows)


def format_summary(agg, metrics=None, digits=2):
    """'mean ± std' strings per metric, one row per group."""
    metrics = metrics or [m for m in METRIC_COLUMNS if f"{m}_mean" in agg.columns]
    out = pd.DataFrame({"group": agg["group"], "frames": agg["frames"]})
    for m in metrics:
        mean, std = agg[f"{m}_mean"], agg[f"{m}_std"]
        out[m] = [
            "-" if pd.isna(a) else f"{a:.{digits}f} ± {b:.{digits}f}" for a, b in zip(mean, std)
        ]
    return out
