"""Response distillation objective: class L2 term, per-edge KL term, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .responses import (
    ClassScoreMap,
    EdgeDistributionMap,
    InvalidArgument,
    log_tempered_softmax,
    tempered_softmax,
)

KL_DIRECTIONS = ("teacher-student", "student-teacher")


@dataclass(frozen=True)
class DistillationConfig:
    lambda_cls: float = 1.0
    lambda_bbox: float = 1.0
    temperature_cls: float = 2.0
    temperature_reg: float = 2.0
    # teacher-student means KL(P_T || P_S): the teacher is the target
    kl_direction: str = "teacher-student"
    normalize: bool = False

    def __post_init__(self):
        for name in ("temperature_cls", "temperature_reg"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InvalidArgument(f"{name} must be positive, got {v}")
        for name in ("lambda_cls", "lambda_bbox"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise InvalidArgument(f"{name} must be non-negative, got {v}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise InvalidArgument(f"kl_direction must be one of {KL_DIRECTIONS}")


@dataclass(frozen=True)
class LossBreakdown:
    model_loss: float
    cls_distill: float
    bbox_distill: float
    total: float


def selection_indices(selected, num_locations: int) -> np.ndarray:
    """Location indices from a pseudo-label set or a plain index sequence."""
    idx = getattr(selected, "indices", selected)
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= num_locations):
        raise InvalidArgument(f"selected location index out of range for {num_locations} locations")
    if np.unique(idx).size != idx.size:
        raise InvalidArgument("selected location indices must be unique")
    return idx


def _old_columns(student: ClassScoreMap, teacher: ClassScoreMap) -> np.ndarray:
    if student.num_locations != teacher.num_locations:
        raise InvalidArgument("student and teacher maps cover different location counts")
    try:
        return student.columns(teacher.class_ids)
    except InvalidArgument:
        raise InvalidArgument("student class head does not cover the teacher's classes") from None


def _scale(cfg: DistillationConfig, m: int) -> float:
    return 1.0 / m if (cfg.normalize and m) else 1.0


def cls_distill_loss(student: ClassScoreMap, teacher: ClassScoreMap, selected, cfg: DistillationConfig) -> float:
    """Sum over selected locations of the squared gap between tempered class responses.

    The softmax runs over the teacher's (old) classes only; new-class columns of
    the student are ignored.
    """
    cols = _old_columns(student, teacher)
    idx = selection_indices(selected, teacher.num_locations)
    if idx.size == 0:
        return 0.0
    t = cfg.temperature_cls
    p_s = tempered_softmax(student.logits[np.ix_(idx, cols)], t)
    p_t = tempered_softmax(teacher.logits[idx], t)
    return float(np.sum((p_s - p_t) ** 2) * _scale(cfg, idx.size))


def grad_cls_distill(student: ClassScoreMap, teacher: ClassScoreMap, selected, cfg: DistillationConfig) -> np.ndarray:
    """Gradient of :func:`cls_distill_loss` w.r.t. the student's old-class logits, shape (L, K_old)."""
    cols = _old_columns(student, teacher)
    idx = selection_indices(selected, teacher.num_locations)
    grad = np.zeros((student.num_locations, cols.size))
    if idx.size == 0:
        return grad
    t = cfg.temperature_cls
    p_s = tempered_softmax(student.logits[np.ix_(idx, cols)], t)
    p_t = tempered_softmax(teacher.logits[idx], t)
    grad[idx] = _softmax_l2_backward(p_s, p_t, t) * _scale(cfg, idx.size)
    return grad


def _softmax_l2_backward(p_s: np.ndarray, p_t: np.ndarray, t: float) -> np.ndarray:
    g = 2.0 * (p_s - p_t)
    return p_s * (g - np.sum(g * p_s, axis=-1, keepdims=True)) / t


def _kl(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    return np.sum(np.exp(log_p) * (log_p - log_q), axis=-1)


def ld_edge_loss(student_edge_logits, teacher_edge_logits, temperature: float, direction: str = "teacher-student") -> float:
    """KL divergence between the tempered bin distributions of one edge."""
    s = np.asarray(student_edge_logits, dtype=np.float64)
    te = np.asarray(teacher_edge_logits, dtype=np.float64)
    if s.shape != te.shape or s.ndim != 1:
        raise InvalidArgument("edge logit vectors must be 1-D and of equal length")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(te))):
        raise InvalidArgument("edge logits must be finite")
    if not (np.isfinite(temperature) and temperature > 0):
        raise InvalidArgument("temperature must be positive")
    return float(_edge_kl(s, te, temperature, direction))


def _edge_kl(s, te, temperature, direction):
    log_s = log_tempered_softmax(s, temperature)
    log_t = log_tempered_softmax(te, temperature)
    if direction == "teacher-student":
        kl = _kl(log_t, log_s)
    elif direction == "student-teacher":
        kl = _kl(log_s, log_t)
    else:
        raise InvalidArgument(f"unknown KL direction {direction!r}")
    return np.maximum(kl, 0.0)


def _check_edges(student: EdgeDistributionMap, teacher: EdgeDistributionMap):
    if student.logits.shape != teacher.logits.shape:
        raise InvalidArgument(f"edge map shapes differ: {student.logits.shape} vs {teacher.logits.shape}")


def bbox_distill_loss(student: EdgeDistributionMap, teacher: EdgeDistributionMap, selected, cfg: DistillationConfig) -> float:
    """Sum over selected locations and the four edges of the per-edge KL term."""
    _check_edges(student, teacher)
    idx = selection_indices(selected, teacher.num_locations)
    if idx.size == 0:
        return 0.0
    kl = _edge_kl(student.logits[idx], teacher.logits[idx], cfg.temperature_reg, cfg.kl_direction)
    return float(kl.sum() * _scale(cfg, idx.size))


def grad_bbox_distill(student: EdgeDistributionMap, teacher: EdgeDistributionMap, selected, cfg: DistillationConfig) -> np.ndarray:
    _check_edges(student, teacher)
    idx = selection_indices(selected, teacher.num_locations)
    grad = np.zeros(student.logits.shape)
    if idx.size == 0:
        return grad
    grad[idx] = _edge_kl_backward(student.logits[idx], teacher.logits[idx], cfg) * _scale(cfg, idx.size)
    return grad


def _edge_kl_backward(s: np.ndarray, te: np.ndarray, cfg: DistillationConfig) -> np.ndarray:
    t = cfg.temperature_reg
    log_s = log_tempered_softmax(s, t)
    log_t = log_tempered_softmax(te, t)
    p_s = np.exp(log_s)
    if cfg.kl_direction == "teacher-student":
        return (p_s - np.exp(log_t)) / t
    diff = log_s - log_t
    kl = np.sum(p_s * diff, axis=-1, keepdims=True)
    return p_s * (diff - kl) / t


def total_loss(model_loss: float, cls: float, bbox: float, cfg: DistillationConfig) -> LossBreakdown:
    for name, v in (("model_loss", model_loss), ("cls", cls), ("bbox", bbox)):
        if not np.isfinite(v):
            raise InvalidArgument(f"{name} must be finite, got {v}")
        if v < 0:
            raise InvalidArgument(f"{name} must be non-negative, got {v}")
    total = model_loss + cfg.lambda_cls * cls + cfg.lambda_bbox * bbox
    return LossBreakdown(float(model_loss), float(cls), float(bbox), float(total))
