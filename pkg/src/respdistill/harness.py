"""Two-phase incremental detection experiments on the toy detector.

Phase 1 trains a teacher on scenes containing only the old classes.  Phase 2
continues from the teacher on scenes containing only the new classes, with or
without response distillation.  Every mode of one seed shares the same scenes,
the same teacher and the same held-out mixed evaluation set.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .aps import SelectionConfig
from .distill import DistillationConfig
from .evaluation import average_precision, evaluate_ap, evaluate_ap_range, match_class, mean_ap
from .responses import InvalidArgument, sigmoid, tempered_softmax
from .toydet import (
    DetectorParams,
    Featurizer,
    SyntheticScene,
    TrainConfig,
    _head_logits,
    detect_arrays,
    extend_params,
    featurize,
    generate_scene,
    init_params,
    train,
)

__all__ = [
    "MODES",
    "ABLATION_MODES",
    "ExperimentConfig",
    "ExperimentReport",
    "run_incremental",
    "run_seeds",
    "ablation_suite",
    "scarce_config",
    "scarce_data_experiment",
    "response_distance",
    "distance_experiment",
    "summarize",
    "emit_report",
    "report_to_json",
    "evaluate_ap",
    "evaluate_ap_range",
    "average_precision",
    "match_class",
    "mean_ap",
    "SCHEMA_PATH",
]

MODES = (
    "upper-bound",
    "finetune",
    "all-cls-all-reg",
    "all-cls",
    "all-reg",
    "cls-aps",
    "cls-reg-aps",
    "all-response",
)
ABLATION_MODES = ("finetune", "all-cls-all-reg", "all-cls", "all-reg", "cls-aps", "cls-reg-aps")

# which distillation branches a mode uses and whether it selects adaptively
_MODE_PLAN = {
    "all-cls-all-reg": (True, True, "all"),
    "all-cls": (True, False, "all"),
    "all-reg": (False, True, "all"),
    "cls-aps": (True, False, "adaptive"),
    "cls-reg-aps": (True, True, "adaptive"),
    "all-response": (True, True, "all"),
}

# scene seed offsets inside one experiment seed's block
_SEED_BLOCK = 100_000
_PHASE1_OFFSET = 1_000
_PHASE2_OFFSET = 30_000
_EVAL_OFFSET = 60_000

SCHEMA_PATH = Path(__file__).with_name("report.schema.json")


@dataclass(frozen=True)
class ExperimentConfig:
    num_classes: int = 8
    old_classes: tuple = (0, 1, 2, 3)
    new_classes: tuple = (4, 5, 6, 7)
    mode: str = "cls-reg-aps"
    seeds: tuple = (0, 1, 2, 3, 4)
    eval_scene_count: int = 200
    feature_dim: int = 32
    num_bins: int = 8
    featurizer_seed: int = 0
    learning_rate: float = 0.05
    epochs: int = 30
    scenes_per_epoch: int = 200
    # None means the same as phase 1
    phase2_scenes_per_epoch: int | None = None
    score_threshold: float = 0.05
    detect_nms_iou: float = 0.5
    iou_threshold: float = 0.5
    distillation: DistillationConfig = field(default_factory=DistillationConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)

    def __post_init__(self):
        object.__setattr__(self, "old_classes", tuple(int(c) for c in self.old_classes))
        object.__setattr__(self, "new_classes", tuple(int(c) for c in self.new_classes))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.num_classes < 2:
            raise InvalidArgument("num_classes must be at least 2")
        if not self.old_classes or not self.new_classes:
            raise InvalidArgument("old_classes and new_classes must be non-empty")
        for name in ("old_classes", "new_classes"):
            cls = getattr(self, name)
            if len(set(cls)) != len(cls):
                raise InvalidArgument(f"{name} contains duplicates")
            if any(not 0 <= c < self.num_classes for c in cls):
                raise InvalidArgument(f"{name} must lie in [0, {self.num_classes})")
        if set(self.old_classes) & set(self.new_classes):
            raise InvalidArgument("old_classes and new_classes must be disjoint")
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise InvalidArgument("seeds must be non-empty")
        if any(not 0 <= s < 2**31 // _SEED_BLOCK for s in self.seeds):
            raise InvalidArgument(f"seeds must lie in [0, {2**31 // _SEED_BLOCK})")
        for name in ("eval_scene_count", "feature_dim", "scenes_per_epoch"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if self.scenes_per_epoch > _PHASE2_OFFSET - _PHASE1_OFFSET or self.eval_scene_count > _SEED_BLOCK - _EVAL_OFFSET:
            raise InvalidArgument("scene counts exceed the per-seed scene block")
        if self.phase2_scenes_per_epoch is not None and not 1 <= self.phase2_scenes_per_epoch <= _EVAL_OFFSET - _PHASE2_OFFSET:
            raise InvalidArgument("phase2_scenes_per_epoch must be positive")
        if self.num_bins < 2:
            raise InvalidArgument("num_bins must be at least 2")
        if self.epochs < 0:
            raise InvalidArgument("epochs must be non-negative")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise InvalidArgument("learning_rate must be positive")
        if not 0.0 < self.score_threshold < 1.0:
            raise InvalidArgument("score_threshold must lie in (0, 1)")
        for name in ("detect_nms_iou", "iou_threshold"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise InvalidArgument(f"{name} must lie in (0, 1]")

    @property
    def all_classes(self) -> tuple:
        return self.old_classes + self.new_classes

    @property
    def phase2_count(self) -> int:
        return self.phase2_scenes_per_epoch or self.scenes_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("old_classes", "new_classes", "seeds"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgument(f"unknown experiment fields: {sorted(unknown)}")
        if isinstance(data.get("distillation"), dict):
            data["distillation"] = DistillationConfig(**data["distillation"])
        if isinstance(data.get("selection"), dict):
            data["selection"] = SelectionConfig(**data["selection"])
        for k in ("old_classes", "new_classes", "seeds"):
            if k in data:
                data[k] = tuple(data[k])
        return cls(**data)


@dataclass
class ExperimentReport:
    mode: str
    seed: int
    class_ap: dict
    map_old: float
    map_new: float
    map_all: float
    teacher: dict
    # improvement over finetune and gap to the upper bound, per class group
    delta: dict
    gap: dict
    loss_trace: list
    config: dict
    data: dict


# -- per-seed data and cached training ----------------------------------------


@dataclass(frozen=True, eq=False)
class SeedData:
    featurizer: Featurizer
    phase1: list
    phase2: list
    evaluation: list
    phase1_features: list
    phase2_features: list
    eval_features: list
    teacher: DetectorParams
    teacher_trace: list
    ranges: dict


def _scenes(start: int, count: int, universe) -> list[SyntheticScene]:
    return [generate_scene(start + i, universe) for i in range(count)]


def _data_key(cfg: ExperimentConfig) -> ExperimentConfig:
    # everything that does not influence the scenes or the teacher is neutralized
    return replace(
        cfg,
        mode="finetune",
        seeds=(0,),
        distillation=DistillationConfig(),
        selection=SelectionConfig(),
        score_threshold=0.05,
        detect_nms_iou=0.5,
        iou_threshold=0.5,
    )


def _train_config(cfg: ExperimentConfig, seed: int, count: int, dcfg=None, scfg=None) -> TrainConfig:
    return TrainConfig(cfg.learning_rate, cfg.epochs, count, seed, dcfg, scfg)


@lru_cache(maxsize=16)
def _seed_data(key: ExperimentConfig, seed: int) -> SeedData:
    fz = Featurizer(key.num_classes, key.feature_dim, key.featurizer_seed)
    base = seed * _SEED_BLOCK
    p1 = _scenes(base + _PHASE1_OFFSET, key.scenes_per_epoch, key.old_classes)
    p2 = _scenes(base + _PHASE2_OFFSET, key.phase2_count, key.new_classes)
    ev = _scenes(base + _EVAL_OFFSET, key.eval_scene_count, key.all_classes)
    f1 = [featurize(s, fz).features for s in p1]
    f2 = [featurize(s, fz).features for s in p2]
    fe = [featurize(s, fz).features for s in ev]
    init = init_params(key.feature_dim, key.old_classes, key.num_bins, seed)
    res = train(init, p1, _train_config(key, seed, len(p1)), featurizer=fz, features=f1)
    ranges = {
        "phase1_scene_seeds": [p1[0].seed, p1[-1].seed],
        "phase2_scene_seeds": [p2[0].seed, p2[-1].seed],
        "eval_scene_seeds": [ev[0].seed, ev[-1].seed],
    }
    return SeedData(fz, p1, p2, ev, f1, f2, fe, res.params, res.trace, ranges)


def mode_configs(cfg: ExperimentConfig, mode: str):
    """Distillation and selection configs for a phase-2 mode (``(None, None)`` for finetune)."""
    if mode not in _MODE_PLAN:
        return None, None
    use_cls, use_reg, sel_mode = _MODE_PLAN[mode]
    d = cfg.distillation
    dcfg = replace(d, lambda_cls=d.lambda_cls if use_cls else 0.0, lambda_bbox=d.lambda_bbox if use_reg else 0.0)
    return dcfg, replace(cfg.selection, mode=sel_mode)


@lru_cache(maxsize=256)
def _train_mode(cfg: ExperimentConfig, mode: str, seed: int):
    data = _seed_data(_data_key(cfg), seed)
    if mode == "upper-bound":
        scenes = data.phase1 + data.phase2
        init = init_params(cfg.feature_dim, cfg.all_classes, cfg.num_bins, seed)
        res = train(
            init,
            scenes,
            _train_config(cfg, seed, len(scenes)),
            featurizer=data.featurizer,
            features=data.phase1_features + data.phase2_features,
        )
        return res.params, res.trace
    dcfg, scfg = mode_configs(cfg, mode)
    student = extend_params(data.teacher, cfg.new_classes, seed)
    res = train(
        student,
        data.phase2,
        _train_config(cfg, seed, len(data.phase2), dcfg, scfg),
        teacher=data.teacher if dcfg is not None else None,
        featurizer=data.featurizer,
        features=data.phase2_features,
    )
    return res.params, res.trace


def trained_detector(cfg: ExperimentConfig, seed: int, mode: str | None = None) -> DetectorParams:
    """Phase-2 (or joint) detector for ``mode``; ``"teacher"`` returns the phase-1 detector."""
    mode = mode or cfg.mode
    if mode == "teacher":
        return _seed_data(_data_key(cfg), seed).teacher
    return _train_mode(_cache_key(cfg), mode, seed)[0]


def teacher_detector(cfg: ExperimentConfig, seed: int) -> DetectorParams:
    return _seed_data(_data_key(cfg), seed).teacher


def seed_data(cfg: ExperimentConfig, seed: int) -> SeedData:
    return _seed_data(_data_key(cfg), seed)


def _cache_key(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(cfg, mode="finetune", seeds=(0,))


def clear_caches() -> None:
    _seed_data.cache_clear()
    _train_mode.cache_clear()


# -- evaluation ---------------------------------------------------------------


def _evaluate(cfg: ExperimentConfig, params: DetectorParams, data: SeedData):
    locs = data.featurizer.locations
    preds = [detect_arrays(params, f, locs, cfg.score_threshold, cfg.detect_nms_iou) for f in data.eval_features]
    ap, _ = evaluate_ap(preds, data.evaluation, cfg.iou_threshold, classes=list(cfg.all_classes))
    return ap, mean_ap(ap, cfg.old_classes), mean_ap(ap, cfg.new_classes), mean_ap(ap, cfg.all_classes)


@lru_cache(maxsize=256)
def _evaluated(cfg: ExperimentConfig, mode: str, seed: int):
    data = _seed_data(_data_key(cfg), seed)
    if mode == "teacher":
        params, trace = data.teacher, data.teacher_trace
    else:
        params, trace = _train_mode(_cache_key(cfg), mode, seed)
    return _evaluate(cfg, params, data), trace


def _groups(old, new, all_):
    return {"old": old, "new": new, "all": all_}


def _diff(a: dict, b: dict) -> dict:
    return {k: a[k] - b[k] for k in a}


def run_incremental(config: ExperimentConfig, seed: int | None = None) -> ExperimentReport:
    """Run one mode for one seed (default: the first configured seed)."""
    seed = config.seeds[0] if seed is None else int(seed)
    key = _cache_key(config)
    (ap, m_old, m_new, m_all), trace = _evaluated(key, config.mode, seed)
    (_, t_old, t_new, t_all), _ = _evaluated(key, "teacher", seed)
    (_, f_old, f_new, f_all), _ = _evaluated(key, "finetune", seed)
    (_, u_old, u_new, u_all), _ = _evaluated(key, "upper-bound", seed)
    mine = _groups(m_old, m_new, m_all)
    return ExperimentReport(
        mode=config.mode,
        seed=seed,
        class_ap={int(c): float(v) for c, v in ap.items()},
        map_old=m_old,
        map_new=m_new,
        map_all=m_all,
        teacher=_groups(t_old, t_new, t_all),
        delta=_diff(mine, _groups(f_old, f_new, f_all)),
        gap=_diff(_groups(u_old, u_new, u_all), mine),
        loss_trace=[asdict(s) for s in trace],
        config=replace(config, seeds=(seed,)).to_dict(),
        data=dict(_seed_data(_data_key(config), seed).ranges),
    )


def run_seeds(config: ExperimentConfig, progress: Callable[[str], None] | None = None) -> list[ExperimentReport]:
    out = []
    for s in config.seeds:
        if progress:
            progress(f"mode {config.mode} seed {s}")
        out.append(run_incremental(config, s))
    return out


def ablation_suite(config: ExperimentConfig, modes: Sequence[str] = ABLATION_MODES, progress=None) -> list[ExperimentReport]:
    """Every ablation mode on every seed, sharing scenes and teachers per seed."""
    reports = []
    for mode in modes:
        reports.extend(run_seeds(replace(config, mode=mode), progress))
    return reports


def scarce_config(config: ExperimentConfig | None = None) -> ExperimentConfig:
    """7 + 1 split with a 20-scene phase-2 pool."""
    base = config or ExperimentConfig()
    n = base.num_classes
    return replace(
        base,
        old_classes=tuple(range(n - 1)),
        new_classes=(n - 1,),
        phase2_scenes_per_epoch=20,
    )


def scarce_data_experiment(config: ExperimentConfig | None = None, progress=None):
    """Adaptive selection against all responses in the scarce setting.

    Returns ``(adaptive_reports, all_response_reports)``, one report per seed
    each.  ``config`` is used as given; build it with :func:`scarce_config`.
    """
    cfg = config or scarce_config()
    adaptive = run_seeds(replace(cfg, mode="cls-reg-aps"), progress)
    everything = run_seeds(replace(cfg, mode="all-response"), progress)
    return adaptive, everything


def summarize(reports: Sequence[ExperimentReport]) -> list[dict]:
    """Median over seeds per mode, in first-seen mode order."""
    by_mode: dict[str, list[ExperimentReport]] = {}
    for r in reports:
        by_mode.setdefault(r.mode, []).append(r)
    rows = []
    for mode, rs in by_mode.items():
        def med(get):
            vals = [get(r) for r in rs]
            vals = [v for v in vals if not math.isnan(v)]
            return statistics.median(vals) if vals else float("nan")

        rows.append(
            {
                "mode": mode,
                "seeds": len(rs),
                "map_old": med(lambda r: r.map_old),
                "map_new": med(lambda r: r.map_new),
                "map_all": med(lambda r: r.map_all),
                "delta_all": med(lambda r: r.delta["all"]),
                "gap_all": med(lambda r: r.gap["all"]),
            }
        )
    return rows


# -- response distance --------------------------------------------------------


def _aligned_logits(params: DetectorParams, x: np.ndarray, order: tuple):
    z, e = _head_logits(params, x)
    cols = [params.class_ids.index(c) for c in order]
    return z[:, cols], e


def response_distance(det_a: DetectorParams, det_b: DetectorParams, scenes, featurizer: Featurizer | None = None) -> dict:
    """Mean per-location L2 distance between two detectors' head responses.

    Classification responses are per-class sigmoid scores, regression responses
    the softmax bin distributions of the four edges.  Class columns are matched
    by class id.  Both detectors read the same fixed featurizer, so the feature
    distance is zero by construction.
    """
    if set(det_a.class_ids) != set(det_b.class_ids):
        raise InvalidArgument("detectors know different classes")
    if det_a.feature_dim != det_b.feature_dim or det_a.num_bins != det_b.num_bins:
        raise InvalidArgument("detector head shapes differ")
    fz = featurizer or Featurizer()
    scenes = list(scenes)
    if not scenes:
        raise InvalidArgument("need at least one scene")
    order = tuple(sorted(det_a.class_ids))
    cls_d, reg_d, n = 0.0, 0.0, 0
    for s in scenes:
        x = s if isinstance(s, np.ndarray) else featurize(s, fz).features
        x = np.asarray(x, dtype=np.float64)
        za, ea = _aligned_logits(det_a, x, order)
        zb, eb = _aligned_logits(det_b, x, order)
        cls_d += float(np.linalg.norm(sigmoid(za) - sigmoid(zb), axis=1).sum())
        pa = tempered_softmax(ea, 1.0).reshape(x.shape[0], -1)
        pb = tempered_softmax(eb, 1.0).reshape(x.shape[0], -1)
        reg_d += float(np.linalg.norm(pa - pb, axis=1).sum())
        n += x.shape[0]
    return {"features": 0.0, "classification": cls_d / n, "regression": reg_d / n}


def distance_experiment(config: ExperimentConfig, modes: Sequence[str] = ("finetune", "cls-reg-aps")) -> dict:
    """Response distance of each phase-2 mode to the same-seed upper bound.

    Returns ``{mode: [per-seed distance dicts]}`` measured on the evaluation
    scenes.
    """
    key = _cache_key(config)
    out: dict[str, list] = {m: [] for m in modes}
    for seed in config.seeds:
        data = _seed_data(_data_key(config), seed)
        ub = _train_mode(key, "upper-bound", seed)[0]
        for m in modes:
            p = _train_mode(key, m, seed)[0]
            out[m].append(response_distance(p, ub, data.eval_features, data.featurizer))
    return out


# -- report emission ----------------------------------------------------------


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def report_to_json(report: ExperimentReport) -> dict:
    return {
        "mode": report.mode,
        "seed": report.seed,
        "class_ap": {str(c): _num(v) for c, v in sorted(report.class_ap.items())},
        "map_old": _num(report.map_old),
        "map_new": _num(report.map_new),
        "map_all": _num(report.map_all),
        "teacher": {k: _num(v) for k, v in report.teacher.items()},
        "delta": {k: _num(v) for k, v in report.delta.items()},
        "gap": {k: _num(v) for k, v in report.gap.items()},
        "loss_trace": [{k: (v if k == "epoch" else _num(v)) for k, v in s.items()} for s in report.loss_trace],
        "config": report.config,
        "data": report.data,
    }


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    return f"{v:.6f}" if math.isfinite(v) else "nan"


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    _write_text(path, buf.getvalue())


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def emit_report(reports, out_dir, name: str = "comparison") -> list[Path]:
    """Write one JSON per report, a per-class AP CSV and a comparison CSV.

    Returns the paths written.  The per-class CSV has one row per class and
    report (columns class_id, phase, mode, AP, seed); the comparison CSV has
    one row per mode with medians over seeds.
    """
    if isinstance(reports, ExperimentReport):
        reports = [reports]
    reports = list(reports)
    out = Path(out_dir)
    written = []
    for r in reports:
        p = out / f"report_{r.mode}_seed{r.seed}.json"
        _write_text(p, json.dumps(report_to_json(r), indent=2, sort_keys=True, allow_nan=False) + "\n")
        written.append(p)
    rows = []
    for r in reports:
        old = set(r.config["old_classes"])
        for c, ap in sorted(r.class_ap.items()):
            rows.append([int(c), "old" if c in old else "new", r.mode, ap, r.seed])
    p = out / "per_class_ap.csv"
    _write_csv(p, ["class_id", "phase", "mode", "AP", "seed"], rows)
    written.append(p)
    summary = summarize(reports)
    p = out / f"{name}.csv"
    _write_csv(
        p,
        ["mode", "seeds", "map_old", "map_new", "map_all", "delta_all", "gap_all"],
        [[s["mode"], s["seeds"], s["map_old"], s["map_new"], s["map_all"], s["delta_all"], s["gap_all"]] for s in summary],
    )
    written.append(p)
    return written
