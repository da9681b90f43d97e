"""Split-level segmentation metrics from an accumulated confusion matrix."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .decoder import IGNORE


@dataclass
class EvalReport:
    per_class_iou: list
    per_class_precision: list
    per_class_recall: list
    present: list
    miou: float
    precision: float
    recall: float

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    """Rows index ground truth, columns the prediction; IGNORE pixels are dropped."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    keep = gt != IGNORE
    pred, gt = pred[keep], gt[keep]
    if np.any((gt < 0) | (gt >= num_classes)) or np.any((pred < 0) | (pred >= num_classes)):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def _safe_div(a, b):
    return np.where(b > 0, a / np.maximum(b, 1), 0.0)


def evaluate(pred_masks, gt_masks, num_classes: int) -> EvalReport:
    """IoU = TP/(TP+FP+FN), precision = TP/(TP+FP), recall = TP/(TP+FN).

    Counts are summed over the whole split. The means run over classes that
    occur in the prediction or the ground truth.
    """
    pred_masks, gt_masks = list(pred_masks), list(gt_masks)
    if len(pred_masks) != len(gt_masks):
        raise ValueError(f"{len(pred_masks)} predictions vs {len(gt_masks)} ground-truth masks")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(pred_masks, gt_masks):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"prediction shape {np.shape(p)} != ground truth {np.shape(g)}")
        cm += confusion(p, g, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    present = (tp + fp + fn) > 0
    iou = _safe_div(tp, tp + fp + fn)
    prec = _safe_div(tp, tp + fp)
    rec = _safe_div(tp, tp + fn)
    if present.any():
        miou, mprec, mrec = (float(x[present].mean()) for x in (iou, prec, rec))
    else:
        miou = mprec = mrec = 0.0
    return EvalReport([float(x) for x in iou], [float(x) for x in prec], [float(x) for x in rec],
                      [bool(x) for x in present], miou, mprec, mrec)
