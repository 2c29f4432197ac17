"""Reconstruction metrics, pose error statistics and report files."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import AllMasked, LengthMismatch
from .geometry import PoseAngles

THRESHOLDS = (1.25, 2.5, 3.75)
ACCURACY_THRESHOLD_DEG = 15.0
PRED_EPS = 1e-6
REPORT_SCHEMA_VERSION = 1
REPORT_FIELDS = ("dataset", "split", "model", "metric", "value")


@dataclass(frozen=True)
class ReconMetrics:
    l1_norm: float
    l2_norm: float
    abs_rel: float
    sq_rel: float
    rmse_linear: float
    rmse_log: float
    rmse_scale_inv: float
    thresh_1_25: float
    thresh_2_5: float
    thresh_3_75: float

    def as_dict(self) -> dict:
        return asdict(self)


def to_intensity(x) -> np.ndarray:
    """Map generator units [-1, 1] to positive gray levels [0, 255]."""
    return (np.asarray(x, dtype=np.float64) + 1.0) * 127.5


def recon_metrics(pred, gt) -> ReconMetrics:
    """Compare a reconstructed image with its ground truth over the pixels where gt > 0.

    ``l1_norm`` and ``l2_norm`` are the L1 and Euclidean norms of the masked
    difference vector.  Predictions are floored at ``PRED_EPS`` before logs
    and ratios.  The scale-invariant error is the log-domain RMSE after
    removing the best global log offset.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mask = gt > 0
    if not mask.any():
        raise AllMasked("ground truth has no positive pixel")
    p, g = pred[mask], gt[mask]
    diff = p - g
    pc = np.maximum(p, PRED_EPS)
    d = np.log(pc) - np.log(g)
    ratio = np.maximum(pc / g, g / pc)
    return ReconMetrics(
        l1_norm=float(np.abs(diff).sum()),
        l2_norm=float(np.sqrt((diff ** 2).sum())),
        abs_rel=float((np.abs(diff) / g).mean()),
        sq_rel=float((diff ** 2 / g).mean()),
        rmse_linear=float(np.sqrt((diff ** 2).mean())),
        rmse_log=float(np.sqrt((d ** 2).mean())),
        rmse_scale_inv=float(np.sqrt(((d - d.mean()) ** 2).mean())),
        thresh_1_25=float((ratio < THRESHOLDS[0]).mean()),
        thresh_2_5=float((ratio < THRESHOLDS[1]).mean()),
        thresh_3_75=float((ratio < THRESHOLDS[2]).mean()),
    )


def mean_recon_metrics(items) -> ReconMetrics:
    items = list(items)
    if not items:
        raise LengthMismatch("no reconstruction metrics to average")
    keys = items[0].as_dict().keys()
    return ReconMetrics(**{k: float(np.mean([m.as_dict()[k] for m in items])) for k in keys})


@dataclass(frozen=True)
class PoseReport:
    mean_error: tuple  # (pitch, roll, yaw) degrees
    std_error: tuple
    accuracy: float
    n_frames: int

    def as_dict(self) -> dict:
        return {"mean_error": list(self.mean_error), "std_error": list(self.std_error),
                "accuracy": self.accuracy, "n_frames": self.n_frames}


def _angles_array(items) -> np.ndarray:
    return np.array([a.as_array() if isinstance(a, PoseAngles) else np.asarray(a, dtype=np.float64)
                     for a in items], dtype=np.float64).reshape(-1, 3)


def pose_errors(preds, gts) -> np.ndarray:
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions for {len(gts)} labels")
    if len(preds) == 0:
        raise LengthMismatch("no poses to compare")
    return np.abs(_angles_array(preds) - _angles_array(gts))


def pose_report(preds, gts, threshold: float = ACCURACY_THRESHOLD_DEG) -> PoseReport:
    """Per-angle mean / population std of absolute errors, and the fraction of
    (frame, angle) errors strictly below ``threshold`` degrees."""
    err = pose_errors(preds, gts)
    return PoseReport(tuple(float(v) for v in err.mean(0)), tuple(float(v) for v in err.std(0)),
                      float((err < threshold).mean()), len(err))


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

def report_rows(dataset: str, split: str, model: str, values: dict) -> list[dict]:
    """Flatten ``values`` (scalars or per-angle lists) into report rows."""
    rows = []
    for metric, value in values.items():
        if isinstance(value, (list, tuple)):
            for name, v in zip(("pitch", "roll", "yaw"), value):
                rows.append({"dataset": dataset, "split": split, "model": model,
                             "metric": f"{metric}_{name}", "value": float(v)})
        else:
            rows.append({"dataset": dataset, "split": split, "model": model,
                         "metric": metric, "value": float(value)})
    return rows


def emit_report(results, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.json`` holding the same rows, in order."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".csv", ".json") else path
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    rows = [{k: (repr(float(r[k])) if k == "value" else str(r[k])) for k in REPORT_FIELDS}
            for r in results]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(REPORT_FIELDS), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "fields": list(REPORT_FIELDS),
           "rows": [{**r, "value": float(r["value"])} for r in rows]}
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(buf.getvalue())
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_report(path) -> list[dict]:
    path = Path(path)
    with open(path.with_suffix(".csv"), newline="") as fh:
        return [{**row, "value": float(row["value"])} for row in csv.DictReader(fh)]
