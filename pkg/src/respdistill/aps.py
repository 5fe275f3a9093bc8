"""Adaptive pseudo-label selection for the classification and regression heads.

Each branch scores every location, thresholds at ``mean + alpha * std`` of the
per-image scores, and keeps the locations at or above it.  The regression
branch additionally decodes the surviving distributions into boxes and runs
class-agnostic NMS over them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .responses import (
    Box,
    ClassScoreMap,
    EdgeDistributionMap,
    InvalidArgument,
    decode_boxes,
    iou_matrix,
    location_confidence,
    tempered_softmax,
    CONFIDENCE_METHODS,
)

MODES = ("adaptive", "all")
TOP1_AGGREGATIONS = ("mean", "max")

# relative slack on the threshold so that values equal to tau in exact
# arithmetic are kept despite rounding in mean/std
_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class SelectionConfig:
    alpha: float = 1.0
    nms_iou_threshold: float = 0.5
    mode: str = "adaptive"
    confidence: str = "sigmoid-max"
    top1_agg: str = "mean"
    target_temperature: float = 2.0

    def __post_init__(self):
        if not np.isfinite(self.alpha):
            raise InvalidArgument("alpha must be finite")
        if not (0.0 < self.nms_iou_threshold <= 1.0):
            raise InvalidArgument(f"nms_iou_threshold must be in (0, 1], got {self.nms_iou_threshold}")
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.confidence not in CONFIDENCE_METHODS:
            raise InvalidArgument(f"confidence must be one of {CONFIDENCE_METHODS}")
        if self.top1_agg not in TOP1_AGGREGATIONS:
            raise InvalidArgument(f"top1_agg must be one of {TOP1_AGGREGATIONS}")
        if not self.target_temperature > 0:
            raise InvalidArgument("target_temperature must be positive")


@dataclass(frozen=True, eq=False)
class ClassPseudoLabels:
    """Selected classification nodes with the teacher's soft targets over old classes."""

    indices: np.ndarray
    confidences: np.ndarray
    targets: np.ndarray
    class_ids: tuple
    threshold_used: float
    mu: float
    sigma: float

    def __len__(self):
        return int(self.indices.size)

    @property
    def entries(self):
        return [(int(i), float(c), t) for i, c, t in zip(self.indices, self.confidences, self.targets)]


@dataclass(frozen=True, eq=False)
class BoxPseudoLabels:
    """Selected regression nodes: Top-1 quality, decoded box and teacher edge logits."""

    indices: np.ndarray
    scores: np.ndarray
    boxes: np.ndarray
    edge_logits: np.ndarray
    threshold_used: float
    mu: float
    sigma: float
    candidates: np.ndarray = None

    def __len__(self):
        return int(self.indices.size)

    @property
    def entries(self):
        return [
            (int(i), float(s), Box(*map(float, b), score=float(s)), e)
            for i, s, b, e in zip(self.indices, self.scores, self.boxes, self.edge_logits)
        ]


def threshold_stats(values, alpha: float):
    """Return ``(mu, sigma, tau)`` with population std and ``tau = mu + alpha * sigma``."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise InvalidArgument("threshold_stats needs at least one value")
    if not np.all(np.isfinite(v)):
        raise InvalidArgument("values must be finite")
    if np.all(v == v[0]):
        mu, sigma = float(v[0]), 0.0
    else:
        mu = float(v.mean())
        sigma = float(v.std())
    return mu, sigma, mu + alpha * sigma


def adaptive_mask(values, alpha: float):
    """Mask of values at or above ``mean + alpha * std``.

    Returns ``(mask, mu, sigma, threshold)`` where ``threshold`` is the
    cut-off actually applied: tau lowered by a rounding-sized slack so that
    values equal to tau in exact arithmetic are kept.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    mu, sigma, tau = threshold_stats(v, alpha)
    cut = tau - _TIE_RTOL * (abs(mu) + sigma)
    return v >= cut, mu, sigma, cut


def select_classification(teacher_cls: ClassScoreMap, old_classes, cfg: SelectionConfig = SelectionConfig()) -> ClassPseudoLabels:
    old = list(old_classes)
    conf = location_confidence(teacher_cls, old, cfg.confidence)
    cols = teacher_cls.columns(old)
    if cfg.mode == "all":
        idx = np.arange(conf.size)
        mu, sigma, _ = threshold_stats(conf, cfg.alpha)
        tau = -np.inf
    else:
        mask, mu, sigma, tau = adaptive_mask(conf, cfg.alpha)
        idx = np.flatnonzero(mask)
    targets = tempered_softmax(teacher_cls.logits[np.ix_(idx, cols)], cfg.target_temperature) if idx.size else np.zeros((0, len(old)))
    return ClassPseudoLabels(idx, conf[idx], targets, tuple(int(c) for c in old), float(tau), mu, sigma)


def top1_quality(edge_logits: np.ndarray, agg: str = "mean") -> np.ndarray:
    """Per-location Top-1 probability of the edge distributions, aggregated over edges."""
    peak = tempered_softmax(edge_logits, 1.0).max(axis=-1)
    if agg == "mean":
        return peak.mean(axis=-1)
    if agg == "max":
        return peak.max(axis=-1)
    raise InvalidArgument(f"unknown Top-1 aggregation {agg!r}")


def select_regression(teacher_edges: EdgeDistributionMap, cfg: SelectionConfig = SelectionConfig()) -> BoxPseudoLabels:
    g = top1_quality(teacher_edges.logits, cfg.top1_agg)
    probs = tempered_softmax(teacher_edges.logits, 1.0)
    if cfg.mode == "all":
        mu, sigma, _ = threshold_stats(g, cfg.alpha)
        idx = np.arange(g.size)
        boxes = decode_boxes(probs, teacher_edges.locations)
        return BoxPseudoLabels(idx, g, boxes, np.asarray(teacher_edges.logits[idx], dtype=np.float64), -np.inf, mu, sigma, idx)
    mask, mu, sigma, tau = adaptive_mask(g, cfg.alpha)
    cand = np.flatnonzero(mask)
    boxes = decode_boxes(probs[cand], teacher_edges.locations[cand])
    keep = nms_indices(boxes, g[cand], cfg.nms_iou_threshold)
    idx = cand[keep]
    return BoxPseudoLabels(
        idx, g[idx], boxes[keep], np.asarray(teacher_edges.logits[idx], dtype=np.float64), float(tau), mu, sigma, cand
    )


def nms_indices(boxes: np.ndarray, scores, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order.

    Ties in score keep the lower original index first.  A box is suppressed
    when its IoU with an already kept box is at least ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.size:
        raise InvalidArgument("one score per box required")
    order = np.lexsort((np.arange(scores.size), -scores))
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(scores.size, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlaps[i] >= iou_threshold
    return np.array(keep, dtype=np.intp)


def nms(boxes, iou_threshold: float) -> list[Box]:
    boxes = list(boxes)
    if not boxes:
        return []
    arr = np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes])
    keep = nms_indices(arr, [b.score for b in boxes], iou_threshold)
    return [boxes[i] for i in keep]


def select_all(teacher_cls: ClassScoreMap, teacher_edges: EdgeDistributionMap, old_classes=None, cfg: SelectionConfig = SelectionConfig()):
    """Every location in both branches, no NMS."""
    if teacher_cls.num_locations != teacher_edges.num_locations or not np.array_equal(
        teacher_cls.locations, teacher_edges.locations
    ):
        raise InvalidArgument("class and edge maps must share locations")
    old = teacher_cls.class_ids if old_classes is None else old_classes
    all_cfg = SelectionConfig(
        alpha=cfg.alpha,
        nms_iou_threshold=cfg.nms_iou_threshold,
        mode="all",
        confidence=cfg.confidence,
        top1_agg=cfg.top1_agg,
        target_temperature=cfg.target_temperature,
    )
    return select_classification(teacher_cls, old, all_cfg), select_regression(teacher_edges, all_cfg)


def select_topk(teacher_cls: ClassScoreMap, old_classes, k: int, cfg: SelectionConfig = SelectionConfig()) -> ClassPseudoLabels:
    """Fixed Top-K classification baseline, kept only for harness comparisons."""
    if k < 1:
        raise InvalidArgument("k must be positive")
    old = list(old_classes)
    conf = location_confidence(teacher_cls, old, cfg.confidence)
    idx = np.sort(np.lexsort((np.arange(conf.size), -conf))[:k])
    cols = teacher_cls.columns(old)
    targets = tempered_softmax(teacher_cls.logits[np.ix_(idx, cols)], cfg.target_temperature)
    kth = float(np.sort(conf)[::-1][min(k, conf.size) - 1])
    return ClassPseudoLabels(idx, conf[idx], targets, tuple(int(c) for c in old), kth, float(conf.mean()), float(conf.std()))


def pseudo_labels_to_json(cls_labels: ClassPseudoLabels, box_labels: BoxPseudoLabels) -> dict:
    def num(x):
        x = float(x)
        return x if np.isfinite(x) else None

    return {
        "classification": {
            "threshold": num(cls_labels.threshold_used),
            "mu": num(cls_labels.mu),
            "sigma": num(cls_labels.sigma),
            "class_ids": list(cls_labels.class_ids),
            "entries": [
                {"location": int(i), "confidence": float(c), "target": [float(v) for v in t]}
                for i, c, t in zip(cls_labels.indices, cls_labels.confidences, cls_labels.targets)
            ],
        },
        "regression": {
            "threshold": num(box_labels.threshold_used),
            "mu": num(box_labels.mu),
            "sigma": num(box_labels.sigma),
            "entries": [
                {
                    "location": int(i),
                    "top1": float(s),
                    "box": [float(v) for v in b],
                    "edge_logits": np.asarray(e, dtype=np.float64).tolist(),
                }
                for i, s, b, e in zip(box_labels.indices, box_labels.scores, box_labels.boxes, box_labels.edge_logits)
            ],
        },
    }
