"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (collected in the terminal summary) before
asserting.  The experiment criteria share trained detectors through the
harness caches, so the module runs the default 5-seed suite once.
"""

import json
import math
import statistics
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from respdistill.aps import SelectionConfig, adaptive_mask, nms_indices, select_classification, select_regression, threshold_stats
from respdistill.distill import DistillationConfig, bbox_distill_loss, cls_distill_loss, grad_bbox_distill, grad_cls_distill
from respdistill.evaluation import evaluate_ap
from respdistill.harness import (
    ExperimentConfig,
    ablation_suite,
    clear_caches,
    distance_experiment,
    report_to_json,
    run_incremental,
    run_seeds,
    scarce_config,
    scarce_data_experiment,
)
from respdistill.responses import (
    BadMagic,
    ClassScoreMap,
    EdgeDistributionMap,
    ResponseDump,
    ShapeMismatch,
    TruncatedPayload,
    VersionMismatch,
    dump_from_bytes,
    dump_to_bytes,
    location_confidence,
)
from respdistill.toydet import (
    DetectorParams,
    FeatureMap,
    ParamsDecodeError,
    build_targets,
    generate_scene,
    grid_locations,
    model_loss,
    params_from_bytes,
    params_to_bytes,
)

from oracles import as_eval_input, central_difference, random_ap_instance, random_boxes, ref_ap, ref_nms, rel_err

DEFAULT = ExperimentConfig()


def median(values):
    return statistics.median(values)


def medians(reports, field="map_all"):
    return median([getattr(r, field) for r in reports])


@pytest.fixture(scope="module")
def suite():
    """Default-config runs of every mode over five seeds, timed from a cold cache."""
    clear_caches()
    t0 = time.perf_counter()
    runs = {m: run_seeds(replace(DEFAULT, mode=m)) for m in ("finetune", "cls-reg-aps", "upper-bound")}
    elapsed = time.perf_counter() - t0
    for r in ablation_suite(DEFAULT):
        runs.setdefault(r.mode, []).append(r)
    return runs, elapsed


def _locs(L):
    return np.column_stack([(np.arange(L) % 8) * 8.0 + 4, (np.arange(L) // 8) * 8.0 + 4, np.full(L, 8.0)])


def cmap(z):
    return ClassScoreMap(np.asarray(z, dtype=np.float64), _locs(z.shape[0]), tuple(range(z.shape[1])))


def emap(e):
    return EdgeDistributionMap(np.asarray(e, dtype=np.float64), _locs(e.shape[0]))


# -- experiments --------------------------------------------------------------


def test_criterion_1_forgetting_and_retention(suite, verdict):
    runs, elapsed = suite
    teacher_old = median([r.teacher["old"] for r in runs["finetune"]])
    ft_old = medians(runs["finetune"], "map_old")
    ours_old = medians(runs["cls-reg-aps"], "map_old")
    ours_new = medians(runs["cls-reg-aps"], "map_new")
    ub_new = medians(runs["upper-bound"], "map_new")
    checks = {
        "a": ft_old <= 0.40 * teacher_old,
        "b": ours_old >= 0.70 * teacher_old,
        "c": ours_new >= 0.80 * ub_new,
        "time": elapsed <= 600,
    }
    detail = (
        f"teacher old {teacher_old:.3f}; (a) finetune old {ft_old:.3f} <= {0.4 * teacher_old:.3f} {checks['a']}; "
        f"(b) cls-reg-aps old {ours_old:.3f} >= {0.7 * teacher_old:.3f} {checks['b']}; "
        f"(c) cls-reg-aps new {ours_new:.3f} >= {0.8 * ub_new:.3f} {checks['c']}; {elapsed:.0f}s"
    )
    ok = verdict(1, "forgetting/retention", all(checks.values()), detail)
    assert ok, detail


def test_criterion_2_ablation_ordering(suite, verdict):
    runs, _ = suite
    m = {mode: medians(runs[mode]) for mode in ("finetune", "all-cls-all-reg", "all-cls", "all-reg", "cls-aps", "cls-reg-aps")}
    tol = 0.02
    chain = [("cls-reg-aps", "cls-aps"), ("cls-aps", "all-cls-all-reg"), ("all-cls-all-reg", "finetune")]
    checks = [m[a] >= m[b] - tol for a, b in chain] + [m["all-reg"] <= m["finetune"] + tol]
    detail = ", ".join(f"{k} {v:.3f}" for k, v in m.items())
    failed = [f"{a}>={b}" for (a, b), ok in zip(chain, checks) if not ok]
    if not checks[-1]:
        failed.append("all-reg<=finetune+0.02")
    detail += f"; violated: {', '.join(failed) or 'none'}"
    ok = verdict(2, "ablation ordering", all(checks), detail)
    assert ok, detail


def test_criterion_3_scarce_data(verdict):
    cfg = scarce_config()
    adaptive, everything = scarce_data_experiment(cfg)
    ft = run_seeds(replace(cfg, mode="finetune"))
    a, e, f = medians(adaptive), medians(everything), medians(ft)
    checks = [e >= a - 0.05, a >= f + 0.10, e >= f + 0.10]
    detail = f"all-response {e:.3f}, adaptive {a:.3f}, finetune {f:.3f}"
    ok = verdict(3, "scarce-data direction", all(checks), detail)
    assert ok, detail


def test_criterion_10_response_distance(suite, verdict):
    dist = distance_experiment(DEFAULT, ("finetune", "cls-reg-aps"))
    med = {m: {k: median([d[k] for d in v]) for k in ("classification", "regression")} for m, v in dist.items()}
    checks = [med["cls-reg-aps"][k] < med["finetune"][k] for k in ("classification", "regression")]
    detail = "; ".join(
        f"{k}: distilled {med['cls-reg-aps'][k]:.4f} vs finetuned {med['finetune'][k]:.4f}" for k in ("classification", "regression")
    )
    ok = verdict(10, "response distance", all(checks), detail)
    assert ok, detail


# -- numerical properties -----------------------------------------------------


def _rand_params(rng, F, K, n):
    return DetectorParams(
        rng.normal(0, 0.3, (F, K)), rng.normal(0, 0.5, K), rng.normal(0, 0.3, (F, 4 * n)), rng.normal(0, 0.3, 4 * n), tuple(range(K))
    )


def test_criterion_4_gradients(verdict):
    t0 = time.perf_counter()
    worst = {"cls": 0.0, "bbox": 0.0, "model": 0.0}
    for seed in range(100):
        rng = np.random.default_rng([seed, 401])
        L, K = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        s, te = rng.normal(0, 2, (L, K)), rng.normal(0, 2, (L, K))
        idx = rng.choice(L, size=int(rng.integers(1, L + 1)), replace=False)
        cfg = DistillationConfig(temperature_cls=float(rng.uniform(0.5, 4)))
        a = grad_cls_distill(cmap(s), cmap(te), idx, cfg)
        n = central_difference(lambda x: cls_distill_loss(cmap(x), cmap(te), idx, cfg), s.copy())
        worst["cls"] = max(worst["cls"], float(rel_err(a, n).max()))

        L, nb = int(rng.integers(1, 5)), int(rng.integers(2, 9))
        s, te = rng.normal(0, 2, (L, 4, nb)), rng.normal(0, 2, (L, 4, nb))
        idx = rng.choice(L, size=int(rng.integers(1, L + 1)), replace=False)
        cfg = DistillationConfig(temperature_reg=float(rng.uniform(0.5, 4)), kl_direction=("teacher-student", "student-teacher")[seed % 2])
        a = grad_bbox_distill(emap(s), emap(te), idx, cfg)
        n = central_difference(lambda x: bbox_distill_loss(emap(x), emap(te), idx, cfg), s.copy())
        worst["bbox"] = max(worst["bbox"], float(rel_err(a, n).max()))

        F, K, nb = 6, int(rng.integers(1, 4)), int(rng.integers(2, 6))
        scene = generate_scene(seed, range(K))
        locs = grid_locations()
        fm = FeatureMap(rng.normal(0, 1, (64, F)), locs)
        params = _rand_params(rng, F, K, nb)
        targets = build_targets(scene, locs, params.class_ids, nb)
        _, grads = model_loss(params, fm, targets)
        for arr, g in zip(params.arrays(), (grads.w_cls, grads.b_cls, grads.w_reg, grads.b_reg)):
            num = central_difference(lambda _: model_loss(params, fm, targets)[0], arr)
            worst["model"] = max(worst["model"], float(rel_err(g, num).max()))
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    verdict(4, "gradient correctness", ok, detail)
    assert ok, detail


def _partition(rng, idx):
    labels = rng.integers(0, int(rng.integers(1, 4)), len(idx))
    return [idx[labels == k] for k in np.unique(labels)]


def test_criterion_5_loss_properties(verdict):
    rng = np.random.default_rng(500)
    cases = 10_000
    bad = {"nonneg": 0, "identity": 0, "additivity": 0, "shift": 0}
    for _ in range(cases):
        L, K, nb = int(rng.integers(1, 7)), int(rng.integers(1, 6)), int(rng.integers(2, 8))
        scale = rng.choice([0.5, 3.0, 15.0])
        idx = rng.permutation(L)[: int(rng.integers(0, L + 1))]
        parts = _partition(rng, idx)
        shift_s, shift_t = rng.normal(0, 30, (L, 1)), rng.normal(0, 30, (L, 1))

        z_s, z_t = rng.normal(0, scale, (L, K)), rng.normal(0, scale, (L, K))
        cfg = DistillationConfig(temperature_cls=float(rng.uniform(0.2, 8)))
        v = cls_distill_loss(cmap(z_s), cmap(z_t), idx, cfg)
        bad["nonneg"] += v < 0
        bad["identity"] += cls_distill_loss(cmap(z_t), cmap(z_t), idx, cfg) > 1e-12
        bad["additivity"] += abs(v - sum(cls_distill_loss(cmap(z_s), cmap(z_t), p, cfg) for p in parts)) > 1e-9
        bad["shift"] += abs(v - cls_distill_loss(cmap(z_s + shift_s), cmap(z_t + shift_t), idx, cfg)) > 1e-9

        e_s, e_t = rng.normal(0, scale, (L, 4, nb)), rng.normal(0, scale, (L, 4, nb))
        cfg = DistillationConfig(temperature_reg=float(rng.uniform(0.2, 8)), kl_direction=("teacher-student", "student-teacher")[int(rng.integers(2))])
        v = bbox_distill_loss(emap(e_s), emap(e_t), idx, cfg)
        bad["nonneg"] += v < 0
        bad["identity"] += bbox_distill_loss(emap(e_t), emap(e_t), idx, cfg) > 1e-12
        bad["additivity"] += abs(v - sum(bbox_distill_loss(emap(e_s), emap(e_t), p, cfg) for p in parts)) > 1e-9
        edge_shift_s, edge_shift_t = rng.normal(0, 30, (L, 4, 1)), rng.normal(0, 30, (L, 4, 1))
        bad["shift"] += abs(v - bbox_distill_loss(emap(e_s + edge_shift_s), emap(e_t + edge_shift_t), idx, cfg)) > 1e-9
    ok = not any(bad.values())
    detail = f"{cases} cases per loss; violations " + ", ".join(f"{k} {v}" for k, v in bad.items())
    verdict(5, "distillation-loss properties", ok, detail)
    assert ok, detail


def test_criterion_6_aps_properties(verdict):
    rng = np.random.default_rng(600)
    cases = 1000
    bad = {"alpha-monotone": 0, "affine": 0, "shift": 0, "sigma-zero": 0}
    for _ in range(cases):
        L, K, nb = int(rng.integers(1, 65)), int(rng.integers(1, 5)), int(rng.integers(2, 9))
        cm = cmap(rng.normal(0, 3, (L, K)))
        e = rng.normal(0, 3, (L, 4, nb))
        em = emap(e)
        old = list(range(K))
        a1, a2 = np.sort(rng.uniform(-3, 3, 2))
        c1 = set(select_classification(cm, old, SelectionConfig(alpha=a1)).indices.tolist())
        c2 = set(select_classification(cm, old, SelectionConfig(alpha=a2)).indices.tolist())
        r1 = set(select_regression(em, SelectionConfig(alpha=a1)).candidates.tolist())
        r2 = set(select_regression(em, SelectionConfig(alpha=a2)).candidates.tolist())
        bad["alpha-monotone"] += not (c2 <= c1 and r2 <= r1)

        method = ("sigmoid-max", "softmax-max")[int(rng.integers(2))]
        cfg = SelectionConfig(alpha=float(rng.uniform(-2, 3)), confidence=method)
        conf = location_confidence(cm, old, method)
        picked = select_classification(cm, old, cfg).indices.tolist()
        a, b = rng.uniform(0.01, 100), rng.uniform(-50, 50)
        bad["affine"] += picked != np.flatnonzero(adaptive_mask(a * conf + b, cfg.alpha)[0]).tolist()

        base = select_regression(em, cfg)
        moved = select_regression(emap(e + rng.normal(0, 20, (L, 4, 1))), cfg)
        bad["shift"] += base.candidates.tolist() != moved.candidates.tolist() or base.indices.tolist() != moved.indices.tolist()

        flat_c = cmap(np.tile(rng.normal(0, 3, K), (L, 1)))
        flat_e = emap(np.tile(rng.normal(0, 3, (4, nb)), (L, 1, 1)))
        bad["sigma-zero"] += len(select_classification(flat_c, old, cfg)) != L or select_regression(flat_e, cfg).candidates.size != L
    _, _, tau = threshold_stats([0.1, 0.1, 0.9], 1.0)
    example = abs(tau - 0.743791) <= 1e-6
    ok = not any(bad.values()) and example
    detail = f"{cases} cases; violations " + ", ".join(f"{k} {v}" for k, v in bad.items()) + f"; example tau {tau:.6f}"
    verdict(6, "APS properties", ok, detail)
    assert ok, detail


def test_criterion_7_nms_oracle(verdict):
    rng = np.random.default_rng(700)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(0, 51))
        boxes, scores = random_boxes(rng, n)
        thr = float(rng.choice([0.3, 0.5, 0.7, rng.uniform(0.05, 1.0)]))
        got = set(nms_indices(boxes, scores, thr).tolist())
        mismatches += got != ref_nms(boxes.tolist(), scores.tolist(), thr)
    ok = mismatches == 0
    detail = f"1000 instances of <= 50 boxes; {mismatches} mismatches"
    verdict(7, "NMS oracle equivalence", ok, detail)
    assert ok, detail


def test_criterion_8_ap_oracle(verdict):
    rng = np.random.default_rng(800)
    worst, transform_bad = 0.0, 0
    transforms = (lambda s: s**3, lambda s: np.log(s + 1e-3) * 7 - 2, lambda s: 1 / (1 + np.exp(-10 * s)))
    for _ in range(500):
        preds, gts = random_ap_instance(rng)
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        pa, ga = as_eval_input(preds, gts)
        got = evaluate_ap(pa, ga, thr, classes=[0])[0][0]
        want = ref_ap(preds, gts, thr)
        if math.isnan(want) != math.isnan(got):
            worst = math.inf
        elif not math.isnan(want):
            worst = max(worst, abs(got - want))
        for f in transforms:
            qa = [p.copy() for p in pa]
            for q in qa:
                q[:, 4] = f(q[:, 4])
            moved = evaluate_ap(qa, ga, thr, classes=[0])[0][0]
            same = (math.isnan(got) and math.isnan(moved)) or moved == got
            transform_bad += not same
    ok = worst <= 1e-9 and transform_bad == 0
    detail = f"500 instances; max |AP - reference| {worst:.1e}; monotone-transform changes {transform_bad}"
    verdict(8, "AP oracle equivalence", ok, detail)
    assert ok, detail


def _cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "respdistill.cli", *args, "-q"], cwd=cwd, capture_output=True, text=True, check=True)


def _decode_errors():
    rng = np.random.default_rng(901)
    L, K, n = 5, 3, 4
    d = ResponseDump(cmap(rng.normal(0, 3, (L, K))), emap(rng.normal(0, 3, (L, 4, n))), {"scene": 1})
    raw = dump_to_bytes(d)
    cases = [
        (b"XXXX" + raw[4:], BadMagic),
        (raw[:4] + (9).to_bytes(2, "little") + raw[6:], VersionMismatch),
        (raw[:-7], TruncatedPayload),
        (raw[:10] + (0).to_bytes(4, "little") + raw[14:], ShapeMismatch),
    ]
    ok = True
    for blob, exc in cases:
        try:
            dump_from_bytes(blob)
            ok = False
        except exc:
            pass
    praw = params_to_bytes(_rand_params(rng, 4, 2, 3).copy(np.float32))
    for blob in (b"XXXX" + praw[4:], praw[:4] + (9).to_bytes(2, "little") + praw[6:], praw[:-1]):
        try:
            params_from_bytes(blob)
            ok = False
        except ParamsDecodeError:
            pass
    return ok


def test_criterion_9_determinism_and_serialization(suite, verdict, tmp_path):
    # two independent processes train the same seed; the in-process cached run must agree bit for bit
    for d in ("a", "b"):
        _cli("run", "--mode", "cls-reg-aps", "--seeds", "0", "--out-dir", d, cwd=tmp_path)
        _cli("train-incremental", "--mode", "cls-reg-aps", "--seeds", "0", "--out-dir", d, cwd=tmp_path)
    report_a = (tmp_path / "a" / "report_cls-reg-aps_seed0.json").read_bytes()
    report_b = (tmp_path / "b" / "report_cls-reg-aps_seed0.json").read_bytes()
    params_a = (tmp_path / "a" / "cls-reg-aps_seed0.irdp").read_bytes()
    params_b = (tmp_path / "b" / "cls-reg-aps_seed0.irdp").read_bytes()
    in_process = json.loads(json.dumps(report_to_json(run_incremental(replace(DEFAULT, mode="cls-reg-aps"), 0))))
    same_run = report_a == report_b and params_a == params_b and json.loads(report_a) == in_process

    rng = np.random.default_rng(902)
    round_trips = True
    for _ in range(200):
        L, K, n = int(rng.integers(1, 65)), int(rng.integers(1, 9)), int(rng.integers(2, 17))
        d = ResponseDump(cmap(rng.normal(0, 5, (L, K))), emap(rng.normal(0, 5, (L, 4, n))), {"scene": int(rng.integers(1000))})
        raw = dump_to_bytes(d)
        back = dump_from_bytes(raw)
        p = _rand_params(rng, int(rng.integers(1, 40)), K, n).copy(np.float32)
        praw = params_to_bytes(p)
        round_trips &= back == d and dump_to_bytes(back) == raw and params_from_bytes(praw) == p and params_to_bytes(params_from_bytes(praw)) == praw
    errors = _decode_errors()
    ok = same_run and round_trips and errors
    detail = f"repeat runs bit-identical {same_run}; round trips exact {round_trips}; decode errors {errors}"
    verdict(9, "determinism and serialization", ok, detail)
    assert ok, detail
