"""A small deterministic dense detector on synthetic rectangle scenes.

The detector is a fixed featurizer followed by two linear heads: a class-wise
sigmoid classifier and a per-edge distance-distribution regressor.  Everything
is closed-form numpy so the distillation gradients can be checked exactly.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .aps import SelectionConfig, nms_indices, select_classification, select_regression
from .distill import DistillationConfig
from .responses import (
    Box,
    ClassScoreMap,
    EdgeDistributionMap,
    InvalidArgument,
    decode_boxes,
    log_tempered_softmax,
    tempered_softmax,
)

log = logging.getLogger(__name__)

PARAMS_MAGIC = b"IRDP"
PARAMS_VERSION = 1

CANVAS = 64
STRIDE = 8
MIN_SIDE, MAX_SIDE = 8, 32
MAX_OBJECTS = 4


class TrainingDiverged(RuntimeError):
    pass


class ParamsDecodeError(ValueError):
    pass


# -- scenes ------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticScene:
    objects: tuple  # of (class_id, Box)
    seed: int
    width: int = CANVAS
    height: int = CANVAS

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([c for c, _ in self.objects], dtype=np.int64)

    @property
    def boxes(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 4))
        return np.array([b.as_array() for _, b in self.objects])


def generate_scene(seed: int, class_universe, canvas: int = CANVAS) -> SyntheticScene:
    """Draw 1-4 non-overlapping axis-aligned rectangles with uniformly chosen classes."""
    universe = sorted(int(c) for c in class_universe)
    if not universe:
        raise InvalidArgument("class universe must be non-empty")
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, MAX_OBJECTS + 1))
    placed: list[np.ndarray] = []
    objects = []
    for _ in range(count):
        for _attempt in range(30):
            w, h = rng.integers(MIN_SIDE, MAX_SIDE + 1, size=2)
            x1 = int(rng.integers(0, canvas - w + 1))
            y1 = int(rng.integers(0, canvas - h + 1))
            cand = np.array([x1, y1, x1 + w, y1 + h], dtype=np.float64)
            if all(_disjoint(cand, p) for p in placed):
                placed.append(cand)
                cls = universe[int(rng.integers(len(universe)))]
                objects.append((cls, Box(*map(float, cand), score=1.0, class_id=cls)))
                break
    return SyntheticScene(tuple(objects), int(seed), canvas, canvas)


def _disjoint(a, b) -> bool:
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def grid_locations(canvas: int = CANVAS, stride: int = STRIDE) -> np.ndarray:
    cells = canvas // stride
    c = (np.arange(cells) + 0.5) * stride
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), np.full(cells * cells, float(stride))], axis=1)


def assign_locations(scene: SyntheticScene, locations: np.ndarray) -> np.ndarray:
    """Object index per location (-1 for background).

    A location belongs to an object whose box contains it; the object with the
    nearest center wins when several do.
    """
    boxes = scene.boxes
    out = np.full(locations.shape[0], -1, dtype=np.intp)
    if boxes.shape[0] == 0:
        return out
    x, y = locations[:, 0:1], locations[:, 1:2]
    inside = (x >= boxes[:, 0]) & (x <= boxes[:, 2]) & (y >= boxes[:, 1]) & (y <= boxes[:, 3])
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    dist = (x - cx) ** 2 + (y - cy) ** 2
    dist = np.where(inside, dist, np.inf)
    best = np.argmin(dist, axis=1)
    has = inside.any(axis=1)
    out[has] = best[has]
    return out


# -- featurizer ---------------------------------------------------------------


@dataclass(frozen=True)
class FeatureMap:
    features: np.ndarray
    locations: np.ndarray


@dataclass(frozen=True, eq=False)
class Featurizer:
    """Fixed random projection of a local occupancy descriptor.

    The default ``"cells"`` layout holds, for each of the nine cells of the
    3x3 neighbourhood and each class of the universe, the covered fraction of
    that cell, followed by the stride-normalized distances from the cell
    center to the four edges (top, bottom, left, right) of the enclosing
    object.  ``"pooled"`` is a compact variant with only the center cell and
    the whole neighbourhood pooled per class.
    """

    num_classes: int = 8
    feature_dim: int = 32
    seed: int = 0
    noise: float = 0.05
    canvas: int = CANVAS
    stride: int = STRIDE
    layout: str = "cells"
    projection: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 0x5EED])
        d = self.descriptor_dim
        proj = rng.standard_normal((d, self.feature_dim)) / np.sqrt(self.feature_dim)
        proj.setflags(write=False)
        object.__setattr__(self, "projection", proj)

    @property
    def descriptor_dim(self) -> int:
        if self.layout == "cells":
            return 9 * self.num_classes + 4
        return 2 * self.num_classes + 4

    @property
    def locations(self) -> np.ndarray:
        return grid_locations(self.canvas, self.stride)

    def descriptor(self, scene: SyntheticScene) -> np.ndarray:
        s = float(self.stride)
        cells = self.canvas // self.stride
        locs = self.locations
        C = self.num_classes
        desc = np.zeros((cells * cells, self.descriptor_dim))
        edges_lo = np.arange(cells) * s
        for cls, box in scene.objects:
            if not 0 <= cls < C:
                raise InvalidArgument(f"class {cls} outside featurizer universe of {C}")
            ox = _overlap(box.x1, box.x2, edges_lo, edges_lo + s)
            oy = _overlap(box.y1, box.y2, edges_lo, edges_lo + s)
            bx = _overlap(box.x1, box.x2, edges_lo - s, edges_lo + 2 * s)
            by = _overlap(box.y1, box.y2, edges_lo - s, edges_lo + 2 * s)
            desc[:, cls] += np.outer(oy, ox).ravel() / (s * s)
            desc[:, C + cls] += np.outer(by, bx).ravel() / (9 * s * s)
        np.clip(desc[:, : 2 * C], 0.0, 1.0, out=desc[:, : 2 * C])
        if self.layout == "cells":
            cov = desc[:, :C].reshape(cells, cells, C)
            pad = np.pad(cov, ((1, 1), (1, 1), (0, 0)))
            blocks = [pad[1 + dy : 1 + dy + cells, 1 + dx : 1 + dx + cells] for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
            desc = np.concatenate([np.concatenate(blocks, axis=2).reshape(cells * cells, 9 * C), np.zeros((cells * cells, 4))], axis=1)
        owner = assign_locations(scene, locs)
        pos = owner >= 0
        if pos.any():
            b = scene.boxes[owner[pos]]
            x, y = locs[pos, 0], locs[pos, 1]
            desc[pos, -4:] = np.stack([y - b[:, 1], b[:, 3] - y, x - b[:, 0], b[:, 2] - x], axis=1) / s
        return desc

    def __call__(self, scene: SyntheticScene) -> FeatureMap:
        return featurize(scene, self)


def _overlap(lo, hi, cell_lo, cell_hi):
    return np.clip(np.minimum(hi, cell_hi) - np.maximum(lo, cell_lo), 0.0, None)


def featurize(scene: SyntheticScene, featurizer: Featurizer | None = None) -> FeatureMap:
    fz = featurizer or Featurizer()
    desc = fz.descriptor(scene)
    rng = np.random.default_rng([fz.seed, int(scene.seed) & 0xFFFFFFFF, 0xFEA7])
    feats = desc @ fz.projection + fz.noise * rng.standard_normal((desc.shape[0], fz.feature_dim))
    feats.setflags(write=False)
    return FeatureMap(feats, fz.locations)


# -- parameters ----------------------------------------------------------------


@dataclass(eq=False)
class DetectorParams:
    w_cls: np.ndarray  # (F, K)
    b_cls: np.ndarray  # (K,)
    w_reg: np.ndarray  # (F, 4n)
    b_reg: np.ndarray  # (4n,)
    class_ids: tuple

    def __post_init__(self):
        self.class_ids = tuple(int(c) for c in self.class_ids)
        F, K = self.w_cls.shape
        if self.b_cls.shape != (K,) or len(self.class_ids) != K:
            raise InvalidArgument("classification head shapes are inconsistent")
        if self.w_reg.shape[0] != F or self.w_reg.shape[1] % 4 or self.b_reg.shape != (self.w_reg.shape[1],):
            raise InvalidArgument("regression head shapes are inconsistent")
        if self.w_reg.shape[1] < 8:
            raise InvalidArgument("need at least two bins per edge")
        if len(set(self.class_ids)) != K:
            raise InvalidArgument("class ids must be unique")

    @property
    def feature_dim(self) -> int:
        return self.w_cls.shape[0]

    @property
    def num_bins(self) -> int:
        return self.w_reg.shape[1] // 4

    def copy(self, dtype=None) -> "DetectorParams":
        def cv(a):
            return np.array(a, dtype=dtype or a.dtype, copy=True)

        return DetectorParams(cv(self.w_cls), cv(self.b_cls), cv(self.w_reg), cv(self.b_reg), self.class_ids)

    def arrays(self):
        return self.w_cls, self.b_cls, self.w_reg, self.b_reg

    def __eq__(self, other):
        if not isinstance(other, DetectorParams):
            return NotImplemented
        return self.class_ids == other.class_ids and all(
            a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


PRIOR_PROB = 0.01


def init_params(feature_dim: int, class_ids, num_bins: int = 8, seed: int = 0, scale: float = 0.01) -> DetectorParams:
    rng = np.random.default_rng([seed, 0x1417])
    K = len(tuple(class_ids))
    return DetectorParams(
        scale * rng.standard_normal((feature_dim, K)),
        np.full(K, -np.log((1 - PRIOR_PROB) / PRIOR_PROB)),
        scale * rng.standard_normal((feature_dim, 4 * num_bins)),
        np.zeros(4 * num_bins),
        tuple(class_ids),
    )


def extend_params(teacher: DetectorParams, new_class_ids, seed: int = 0) -> DetectorParams:
    """Student initialization: the teacher's heads plus fresh columns for new classes."""
    new = [int(c) for c in new_class_ids if int(c) not in teacher.class_ids]
    fresh = init_params(teacher.feature_dim, new, teacher.num_bins, seed) if new else None
    w = teacher.w_cls.astype(np.float64)
    b = teacher.b_cls.astype(np.float64)
    if fresh is not None:
        w = np.concatenate([w, fresh.w_cls], axis=1)
        b = np.concatenate([b, fresh.b_cls])
    return DetectorParams(
        w, b, teacher.w_reg.astype(np.float64), teacher.b_reg.astype(np.float64), teacher.class_ids + tuple(new)
    )


def _head_logits(params: DetectorParams, features: np.ndarray):
    if features.ndim != 2 or features.shape[1] != params.feature_dim:
        raise InvalidArgument(f"features of shape {features.shape} do not match feature dim {params.feature_dim}")
    z = features @ params.w_cls + params.b_cls
    e = (features @ params.w_reg + params.b_reg).reshape(features.shape[0], 4, params.num_bins)
    return z, e


def forward(params: DetectorParams, fmap: FeatureMap):
    z, e = _head_logits(params, np.asarray(fmap.features, dtype=np.float64))
    return ClassScoreMap(z, fmap.locations, params.class_ids), EdgeDistributionMap(e, fmap.locations)


# -- model loss ----------------------------------------------------------------


@dataclass(frozen=True)
class Targets:
    """Per-location supervision for one scene.

    ``cls`` is an (L, K) 0/1 matrix over the detector's classes, ``positive``
    the indices of assigned locations and ``edges`` their (P, 4) distances in
    stride units, clamped into the bin range.
    """

    cls: np.ndarray
    positive: np.ndarray
    edges: np.ndarray


def build_targets(scene: SyntheticScene, locations: np.ndarray, class_ids, num_bins: int) -> Targets:
    col = {c: i for i, c in enumerate(class_ids)}
    owner = assign_locations(scene, locations)
    cls = np.zeros((locations.shape[0], len(col)))
    positive = []
    edges = []
    boxes = scene.boxes
    for loc, obj in enumerate(owner):
        if obj < 0:
            continue
        c = int(scene.objects[obj][0])
        if c not in col:
            # objects of classes this detector does not know are background
            continue
        cls[loc, col[c]] = 1.0
        x, y, s = locations[loc]
        b = boxes[obj]
        edges.append([(y - b[1]) / s, (b[3] - y) / s, (x - b[0]) / s, (b[2] - x) / s])
        positive.append(loc)
    edges = np.asarray(edges, dtype=np.float64).reshape(-1, 4)
    if np.any(edges > num_bins - 1):
        log.debug("clamping %d edge distances to the last bin", int(np.sum(edges > num_bins - 1)))
    edges = np.clip(edges, 0.0, num_bins - 1)
    return Targets(cls, np.asarray(positive, dtype=np.intp), edges)


def _bracket_targets(edges: np.ndarray, num_bins: int) -> np.ndarray:
    """Two-bin linear interpolation of continuous distances, shape (P, 4, n)."""
    left = np.minimum(np.floor(edges).astype(np.intp), num_bins - 2)
    w_right = edges - left
    out = np.zeros(edges.shape + (num_bins,))
    np.put_along_axis(out, left[..., None], (1.0 - w_right)[..., None], axis=-1)
    np.put_along_axis(out, left[..., None] + 1, w_right[..., None], axis=-1)
    return out


def logit_loss(z: np.ndarray, e: np.ndarray, targets: Targets):
    """Simplified detector loss on raw logits; returns (loss, dL/dz, dL/de).

    Binary cross-entropy summed over locations and classes and divided by the
    number of positive locations (at least one), plus the two-bin
    cross-entropy of the distance distributions averaged over positive
    locations and edges.
    """
    P = targets.positive.size
    norm = 1.0 / max(P, 1)
    bce = np.logaddexp(0.0, z) - targets.cls * z
    loss_cls = bce.sum() * norm
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    gz = (sig - targets.cls) * norm
    ge = np.zeros_like(e)
    loss_reg = 0.0
    if P:
        n = e.shape[-1]
        tgt = _bracket_targets(targets.edges, n)
        logp = log_tempered_softmax(e[targets.positive], 1.0)
        loss_reg = -np.sum(tgt * logp) / (4 * P)
        ge[targets.positive] = (np.exp(logp) - tgt) / (4 * P)
    return float(loss_cls + loss_reg), gz, ge


@dataclass
class ParamGrads:
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_reg: np.ndarray
    b_reg: np.ndarray


def param_grads(features: np.ndarray, gz: np.ndarray, ge: np.ndarray) -> ParamGrads:
    ge2 = ge.reshape(ge.shape[0], -1)
    return ParamGrads(features.T @ gz, gz.sum(axis=0), features.T @ ge2, ge2.sum(axis=0))


def model_loss(params: DetectorParams, fmap: FeatureMap, targets: Targets):
    """Loss and closed-form parameter gradients of the simplified detector loss."""
    x = np.asarray(fmap.features, dtype=np.float64)
    z, e = _head_logits(params, x)
    loss, gz, ge = logit_loss(z, e, targets)
    return loss, param_grads(x, gz, ge)


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    scenes_per_epoch: int = 200
    seed: int = 0
    distillation: DistillationConfig | None = None
    selection: SelectionConfig | None = None

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise InvalidArgument("learning_rate must be positive")
        if self.epochs < 0:
            raise InvalidArgument("epochs must be non-negative")
        if self.scenes_per_epoch < 1:
            raise InvalidArgument("scenes_per_epoch must be positive")


@dataclass
class TeacherCache:
    """Frozen teacher responses and selections for one training scene."""

    cls_idx: np.ndarray
    cls_targets: np.ndarray  # tempered teacher probabilities at cls_idx
    box_idx: np.ndarray
    box_log_targets: np.ndarray  # tempered teacher log-probabilities at box_idx


@dataclass
class EpochStats:
    """Per-epoch means over visited scenes, plus the median per-scene total loss."""

    epoch: int
    model_loss: float
    cls_distill: float
    bbox_distill: float
    total: float
    cls_nodes: float
    box_nodes: float
    median_total: float


@dataclass
class TrainResult:
    params: DetectorParams
    trace: list


def prepare_teacher(teacher: DetectorParams, features: np.ndarray, locations: np.ndarray, dcfg: DistillationConfig, scfg: SelectionConfig) -> TeacherCache:
    zt, et = _head_logits(teacher, np.asarray(features, dtype=np.float64))
    cmap = ClassScoreMap(zt, locations, teacher.class_ids)
    emap = EdgeDistributionMap(et, locations)
    sel_c = select_classification(cmap, teacher.class_ids, scfg)
    sel_b = select_regression(emap, scfg)
    return TeacherCache(
        sel_c.indices,
        tempered_softmax(zt[sel_c.indices], dcfg.temperature_cls),
        sel_b.indices,
        log_tempered_softmax(et[sel_b.indices], dcfg.temperature_reg),
    )


def distill_terms(z: np.ndarray, e: np.ndarray, old_cols: np.ndarray, cache: TeacherCache, dcfg: DistillationConfig):
    """Distillation losses and their logit gradients for one scene (training hot path)."""
    gz = np.zeros_like(z)
    ge = np.zeros_like(e)
    lc = lb = 0.0
    m = cache.cls_idx.size
    if m and dcfg.lambda_cls > 0:
        t = dcfg.temperature_cls
        p_s = tempered_softmax(z[np.ix_(cache.cls_idx, old_cols)], t)
        diff = p_s - cache.cls_targets
        scale = 1.0 / m if dcfg.normalize else 1.0
        lc = float(np.sum(diff * diff)) * scale
        g = 2.0 * diff
        g = p_s * (g - np.sum(g * p_s, axis=-1, keepdims=True)) / t
        gz[np.ix_(cache.cls_idx, old_cols)] = dcfg.lambda_cls * scale * g
    j = cache.box_idx.size
    if j and dcfg.lambda_bbox > 0:
        t = dcfg.temperature_reg
        log_s = log_tempered_softmax(e[cache.box_idx], t)
        log_t = cache.box_log_targets
        scale = 1.0 / j if dcfg.normalize else 1.0
        p_s = np.exp(log_s)
        if dcfg.kl_direction == "teacher-student":
            p_t = np.exp(log_t)
            lb = float(np.sum(p_t * (log_t - log_s))) * scale
            g = (p_s - p_t) / t
        else:
            diff = log_s - log_t
            kl = np.sum(p_s * diff, axis=-1, keepdims=True)
            lb = float(kl.sum()) * scale
            g = p_s * (diff - kl) / t
        ge[cache.box_idx] = dcfg.lambda_bbox * scale * g
    return max(lc, 0.0), max(lb, 0.0), gz, ge


def train(
    params: DetectorParams,
    scenes: Sequence[SyntheticScene],
    config: TrainConfig,
    teacher: DetectorParams | None = None,
    featurizer: Featurizer | None = None,
    features: Sequence[np.ndarray] | None = None,
    progress: Callable[[EpochStats], None] | None = None,
) -> TrainResult:
    """Plain SGD, one scene per step, over the model loss plus optional distillation.

    Each epoch visits ``scenes_per_epoch`` scenes drawn in a seeded order from
    ``scenes``.  With a teacher and a distillation config, the teacher's
    responses and pseudo-label selections are computed once per scene (the
    teacher is frozen) and the weighted distillation gradients are added to
    the old-class and regression logits.
    """
    fz = featurizer or Featurizer()
    scenes = list(scenes)
    if not scenes:
        raise InvalidArgument("need at least one training scene")
    if features is None:
        features = [featurize(s, fz).features for s in scenes]
    locations = fz.locations
    n = params.num_bins
    w_cls, b_cls, w_reg, b_reg = (np.array(a, dtype=np.float64) for a in params.arrays())
    targets = [build_targets(s, locations, params.class_ids, n) for s in scenes]

    dcfg = config.distillation
    use_teacher = teacher is not None and dcfg is not None and (dcfg.lambda_cls > 0 or dcfg.lambda_bbox > 0)
    caches = old_cols = None
    if use_teacher:
        if teacher.feature_dim != params.feature_dim or teacher.num_bins != n:
            raise InvalidArgument("teacher and student architectures differ")
        scfg = config.selection or SelectionConfig()
        old_cols = np.array([params.class_ids.index(c) for c in teacher.class_ids], dtype=np.intp)
        caches = [prepare_teacher(teacher, f, locations, dcfg, scfg) for f in features]

    lr = config.learning_rate
    trace: list[EpochStats] = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch, 0x7EA1])
        if config.scenes_per_epoch <= len(scenes):
            order = rng.permutation(len(scenes))[: config.scenes_per_epoch]
        else:
            order = rng.integers(len(scenes), size=config.scenes_per_epoch)
        acc = np.zeros(6)
        totals = []
        for i in order:
            x = features[i]
            z = x @ w_cls + b_cls
            e = (x @ w_reg + b_reg).reshape(x.shape[0], 4, n)
            lm, gz, ge = logit_loss(z, e, targets[i])
            lc = lb = 0.0
            if use_teacher:
                lc, lb, dz, de = distill_terms(z, e, old_cols, caches[i], dcfg)
                gz = gz + dz
                ge = ge + de
                acc[4] += caches[i].cls_idx.size
                acc[5] += caches[i].box_idx.size
            tot = lm + (dcfg.lambda_cls * lc + dcfg.lambda_bbox * lb if use_teacher else 0.0)
            if not np.isfinite(tot):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} scene {scenes[i].seed}: total={tot}")
            acc[:4] += (lm, lc, lb, tot)
            totals.append(tot)
            ge2 = ge.reshape(x.shape[0], -1)
            w_cls -= lr * (x.T @ gz)
            b_cls -= lr * gz.sum(axis=0)
            w_reg -= lr * (x.T @ ge2)
            b_reg -= lr * ge2.sum(axis=0)
        acc /= len(order)
        stats = EpochStats(epoch, *map(float, acc), float(np.median(totals)))
        trace.append(stats)
        log.info(
            "epoch %d loss %.4f model %.4f cls %.4f bbox %.4f",
            epoch, stats.total, stats.model_loss, stats.cls_distill, stats.bbox_distill,
        )
        if progress is not None:
            progress(stats)
    if config.epochs == 0:
        return TrainResult(params.copy(), trace)
    with np.errstate(over="ignore"):
        out = DetectorParams(w_cls, b_cls, w_reg, b_reg, params.class_ids).copy(np.float32)
    if not all(np.all(np.isfinite(a)) for a in out.arrays()):
        raise TrainingDiverged("parameters are not representable in single precision")
    return TrainResult(out, trace)


# -- inference -----------------------------------------------------------------


def detect(params: DetectorParams, fmap: FeatureMap, score_threshold: float = 0.05, nms_iou: float = 0.5) -> list[Box]:
    """Class-wise sigmoid scores above threshold, decoded and filtered by per-class NMS."""
    arr = detect_arrays(params, np.asarray(fmap.features, dtype=np.float64), fmap.locations, score_threshold, nms_iou)
    return [Box(*map(float, r[:4]), score=float(r[4]), class_id=int(r[5])) for r in arr]


def detect_arrays(params: DetectorParams, features: np.ndarray, locations: np.ndarray, score_threshold: float = 0.05, nms_iou: float = 0.5) -> np.ndarray:
    """Detections as an (N, 6) array of x1, y1, x2, y2, score, class_id."""
    if not (0 < score_threshold < 1 and 0 < nms_iou <= 1):
        raise InvalidArgument("thresholds must lie in (0, 1)")
    z, e = _head_logits(params, features)
    scores = 0.5 * (1.0 + np.tanh(0.5 * z))
    loc_idx, col_idx = np.nonzero(scores > score_threshold)
    if loc_idx.size == 0:
        return np.zeros((0, 6))
    boxes = decode_boxes(tempered_softmax(e, 1.0), locations)
    out = []
    for col in np.unique(col_idx):
        sel = loc_idx[col_idx == col]
        s = scores[sel, col]
        keep = nms_indices(boxes[sel], s, nms_iou)
        kb = boxes[sel][keep]
        out.append(np.column_stack([kb, s[keep], np.full(keep.size, params.class_ids[col], dtype=np.float64)]))
    return np.concatenate(out, axis=0)


# -- parameter files -------------------------------------------------------------

_PHEADER = struct.Struct("<4sHIII")


def write_params(params: DetectorParams, sink: BinaryIO) -> None:
    F, K = params.w_cls.shape
    sink.write(_PHEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, F, K, params.num_bins))
    sink.write(np.asarray(params.class_ids, dtype="<u4").tobytes())
    for a in params.arrays():
        sink.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_params(source: BinaryIO) -> DetectorParams:
    head = source.read(_PHEADER.size)
    if len(head) >= 4 and head[:4] != PARAMS_MAGIC:
        raise ParamsDecodeError(f"bad magic {head[:4]!r}")
    if len(head) != _PHEADER.size:
        raise ParamsDecodeError("truncated parameter header")
    _, version, F, K, n = _PHEADER.unpack(head)
    if version != PARAMS_VERSION:
        raise ParamsDecodeError(f"unsupported parameter file version {version}")

    def take(count, dtype):
        raw = source.read(4 * count)
        if len(raw) != 4 * count:
            raise ParamsDecodeError("truncated parameter payload")
        return np.frombuffer(raw, dtype=dtype).copy()

    ids = take(K, "<u4")
    w_cls = take(F * K, "<f4").reshape(F, K).astype(np.float32)
    b_cls = take(K, "<f4").astype(np.float32)
    w_reg = take(F * 4 * n, "<f4").reshape(F, 4 * n).astype(np.float32)
    b_reg = take(4 * n, "<f4").astype(np.float32)
    try:
        return DetectorParams(w_cls, b_cls, w_reg, b_reg, tuple(int(c) for c in ids))
    except InvalidArgument as exc:
        raise ParamsDecodeError(str(exc)) from None


def params_to_bytes(params: DetectorParams) -> bytes:
    buf = io.BytesIO()
    write_params(params, buf)
    return buf.getvalue()


def params_from_bytes(data: bytes) -> DetectorParams:
    return read_params(io.BytesIO(data))
