"""Segmentation metrics: confusion matrix, per-class IoU, grouped improvement."""

from __future__ import annotations

import numpy as np

from .segmodel import SegModel, predict
from .worldsim import Camera, SceneModel, SensorFrame, render_frame

DEFAULT_BIN_EDGES = (0.3, 0.5)


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, n_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions; negative labels are skipped."""
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    keep = (gt >= 0) & (gt < n_classes) & (pred >= 0) & (pred < n_classes)
    idx = n_classes * gt[keep].astype(np.int64) + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=n_classes ** 2).reshape(n_classes, n_classes)


def iou_from_confusion(cm: np.ndarray):
    """Per-class IoU (NaN for classes without ground-truth pixels) and their mean."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    gt_count = cm.sum(axis=1)
    union = gt_count + cm.sum(axis=0) - tp
    iou = np.full(len(cm), np.nan)
    present = gt_count > 0
    iou[present] = tp[present] / union[present]
    miou = float(np.nanmean(iou)) if present.any() else float("nan")
    return iou, miou


def render_test_set(scene: SceneModel, poses, camera: Camera, seed: int = 0) -> list[SensorFrame]:
    rng = np.random.default_rng(seed)
    return [render_frame(scene, p, camera, rng=rng, timestamp=i) for i, p in enumerate(poses)]


def evaluate_frames(model: SegModel, frames, n_classes: int | None = None):
    n_classes = n_classes or model.n_classes
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for f in frames:
        labels, _, _ = predict(model, f)
        cm += confusion_matrix(f.gt_labels, labels, n_classes)
    iou, miou = iou_from_confusion(cm)
    return iou, miou, cm


def evaluate_model(model: SegModel, scene: SceneModel, test_poses, camera: Camera, seed: int = 0):
    """Per-class IoU and mIoU over frames rendered at fixed test poses."""
    iou, miou, _ = evaluate_frames(model, render_test_set(scene, test_poses, camera, seed), scene.n_classes)
    return iou, miou


def group_improvement(before, after, edges=DEFAULT_BIN_EDGES) -> list[dict]:
    """Mean IoU change per bin of pre-training IoU.

    Bins are ``[0, e0], (e0, e1], ..., (e_last, 1]``. Classes with NaN IoU on
    either side are skipped; empty bins report ``mean_delta = None``.
    """
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.shape != after.shape:
        raise ValueError("IoU vectors must cover the same classes")
    bounds = [0.0, *edges, 1.0]
    ok = ~(np.isnan(before) | np.isnan(after))
    out = []
    for b, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        member = ok & (before <= hi) & ((before > lo) if b > 0 else (before >= lo))
        delta = after[member] - before[member]
        out.append({
            "bin": f"{'[' if b == 0 else '('}{lo:g}, {hi:g}]",
            "lo": lo, "hi": hi,
            "classes": np.flatnonzero(member).tolist(),
            "mean_delta": float(delta.mean()) if member.any() else None,
        })
    return out
