"""AP@IoU evaluation with greedy one-to-one matching and all-point interpolation."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .responses import Box, iou_matrix


def _as_det_array(preds) -> np.ndarray:
    """Normalize predictions to an (N, 6) array: x1, y1, x2, y2, score, class_id."""
    if isinstance(preds, np.ndarray):
        return preds.reshape(-1, 6).astype(np.float64)
    rows = [[b.x1, b.y1, b.x2, b.y2, b.score, b.class_id] for b in preds]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 6)


def _as_gt_array(gt) -> np.ndarray:
    """Ground truth as an (M, 5) array: x1, y1, x2, y2, class_id."""
    if hasattr(gt, "objects"):
        gt = gt.objects
    if isinstance(gt, np.ndarray):
        return gt.reshape(-1, 5).astype(np.float64)
    rows = []
    for item in gt:
        if isinstance(item, Box):
            rows.append([item.x1, item.y1, item.x2, item.y2, item.class_id])
        else:
            c, b = item
            rows.append([b.x1, b.y1, b.x2, b.y2, c])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 5)


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP from a TP/FP sequence already ranked by score."""
    if num_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def match_class(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], iou_threshold: float):
    """Rank one class's predictions over all scenes and flag true positives.

    ``preds[i]`` is a (N_i, 5) array (box + score) and ``gts[i]`` an (M_i, 4)
    array for scene ``i``.  Each prediction takes the highest-IoU ground truth
    still unmatched in its scene; it is a true positive if that IoU reaches the
    threshold.  Ties in score keep scene-then-input order.
    """
    scene_of = np.concatenate([np.full(p.shape[0], i) for i, p in enumerate(preds)]) if preds else np.zeros(0)
    allp = np.concatenate(preds, axis=0) if preds else np.zeros((0, 5))
    order = np.argsort(-allp[:, 4], kind="stable")
    matched = [np.zeros(g.shape[0], dtype=bool) for g in gts]
    overlaps = {}
    tp = np.zeros(order.size)
    for rank, k in enumerate(order):
        s = int(scene_of[k])
        g = gts[s]
        if g.shape[0] == 0:
            continue
        if s not in overlaps:
            overlaps[s] = iou_matrix(preds[s][:, :4], g)
        offset = k - int(np.searchsorted(scene_of, s))
        ious = np.where(matched[s], -1.0, overlaps[s][offset])
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            matched[s][j] = True
            tp[rank] = 1.0
    return tp, allp[order, 4]


def evaluate_ap(predictions, ground_truth, iou_threshold: float = 0.5, classes=None):
    """Per-class AP and mAP over scenes.

    ``predictions`` holds one entry per scene (an (N, 6) array or a list of
    :class:`Box`), ``ground_truth`` one entry per scene (a scene, a list of
    ``(class_id, Box)`` pairs, or an (M, 5) array).  Returns ``(ap, mAP)``
    where ``ap`` maps class id to AP (NaN for classes with no ground truth)
    and ``mAP`` averages the classes that have ground truth.
    """
    dets = [_as_det_array(p) for p in predictions]
    gts = [_as_gt_array(g) for g in ground_truth]
    if len(dets) != len(gts):
        raise ValueError("need one prediction set per ground-truth scene")
    if classes is None:
        found = set()
        for d in dets:
            found.update(int(c) for c in d[:, 5])
        for g in gts:
            found.update(int(c) for c in g[:, 4])
        classes = sorted(found)
    ap = {}
    for c in classes:
        p_c = [d[d[:, 5] == c][:, :5] for d in dets]
        g_c = [g[g[:, 4] == c][:, :4] for g in gts]
        num_gt = int(sum(g.shape[0] for g in g_c))
        tp, _ = match_class(p_c, g_c, iou_threshold)
        ap[int(c)] = average_precision(tp, num_gt)
    return ap, mean_ap(ap)


def mean_ap(ap: dict, classes=None) -> float:
    keys = ap.keys() if classes is None else classes
    vals = [ap[c] for c in keys if c in ap and not np.isnan(ap[c])]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate_ap_range(predictions, ground_truth, thresholds=np.arange(0.5, 0.96, 0.05), classes=None):
    """COCO-style average over IoU thresholds (0.5:0.95 by default)."""
    per = [evaluate_ap(predictions, ground_truth, float(t), classes)[0] for t in thresholds]
    keys = per[0].keys()
    ap = {c: float(np.mean([p[c] for p in per])) if not np.isnan(per[0][c]) else float("nan") for c in keys}
    return ap, mean_ap(ap)
