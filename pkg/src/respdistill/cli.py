"""Command-line entry point.

Configuration is layered: built-in defaults, then a JSON ``--config`` file,
then explicit flags.  The effective configuration is validated in full before
any work starts.  Exit codes: 0 success, 2 invalid configuration, 3 diverged
training, 4 I/O or decode failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import statistics
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .aps import pseudo_labels_to_json, select_classification, select_regression
from .evaluation import evaluate_ap
from .harness import (
    ABLATION_MODES,
    MODES,
    ExperimentConfig,
    ablation_suite,
    distance_experiment,
    emit_report,
    mode_configs,
    run_seeds,
    scarce_config,
    scarce_data_experiment,
    seed_data,
    summarize,
    teacher_detector,
    trained_detector,
)
from .responses import DumpError, InvalidArgument, ResponseDump, read_dump, write_dump
from .toydet import (
    ParamsDecodeError,
    TrainConfig,
    TrainingDiverged,
    extend_params,
    forward,
    read_params,
    train,
    write_params,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

COMMANDS = (
    "select",
    "train-teacher",
    "train-incremental",
    "dump-responses",
    "run",
    "ablate",
    "scarce",
    "distance",
    "eval",
)

log = logging.getLogger("respdistill")


class ConfigError(Exception):
    pass


@dataclass
class CliConfig:
    command: str
    experiment: ExperimentConfig
    out_dir: Path
    provenance: dict = field(default_factory=dict)
    args: argparse.Namespace | None = None

    def effective(self) -> dict:
        return self.experiment.to_dict()


# -- argument parsing ---------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.replace(" ", "").split(",") if v != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return vals


# flag destination -> config paths it sets
_FLAG_PATHS = {
    "alpha": [("selection", "alpha")],
    "nms_iou": [("selection", "nms_iou_threshold")],
    "confidence": [("selection", "confidence")],
    "top1_agg": [("selection", "top1_agg")],
    "temperature": [
        ("distillation", "temperature_cls"),
        ("distillation", "temperature_reg"),
        ("selection", "target_temperature"),
    ],
    "lambda_cls": [("distillation", "lambda_cls")],
    "lambda_bbox": [("distillation", "lambda_bbox")],
    "kl_direction": [("distillation", "kl_direction")],
    "bins": [("num_bins",)],
    "old_classes": [("old_classes",)],
    "new_classes": [("new_classes",)],
    "seeds": [("seeds",)],
    "num_classes": [("num_classes",)],
    "epochs": [("epochs",)],
    "learning_rate": [("learning_rate",)],
    "scenes_per_epoch": [("scenes_per_epoch",)],
    "phase2_scenes": [("phase2_scenes_per_epoch",)],
    "eval_scenes": [("eval_scene_count",)],
}


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="JSON config file (same layout as --print-config output)")
    g.add_argument("--out-dir", type=Path, default=None, help="output directory (default: current directory)")
    g.add_argument("--seeds", type=_int_list, help="comma-separated experiment seeds")
    g.add_argument("--seed", dest="seeds", type=lambda s: _int_list(s)[:1], help="single experiment seed")
    g.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    g.add_argument("--old-classes", type=_int_list)
    g.add_argument("--new-classes", type=_int_list)
    g.add_argument("--num-classes", type=int)
    g.add_argument("--alpha", type=float, help="threshold = mean + alpha * std")
    g.add_argument("--nms-iou", type=float, help="IoU threshold of the regression-branch NMS")
    g.add_argument("--confidence", choices=("sigmoid-max", "softmax-max"))
    g.add_argument("--top1-agg", choices=("mean", "max"))
    g.add_argument("--temperature", type=float, help="distillation temperature for both branches")
    g.add_argument("--lambda-cls", type=float)
    g.add_argument("--lambda-bbox", type=float)
    g.add_argument("--kl-direction", choices=("teacher-student", "student-teacher"))
    g.add_argument("--bins", type=int, help="distance bins per edge")
    g.add_argument("--epochs", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--scenes-per-epoch", type=int)
    g.add_argument("--phase2-scenes", type=int, help="phase-2 scenes per epoch")
    g.add_argument("--eval-scenes", type=int, help="held-out evaluation scenes")
    g.add_argument("-q", "--quiet", action="store_true", help="suppress progress output")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="respdistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("select", parents=[common], help="pseudo-label selection on response dumps")
    p.add_argument("dumps", nargs="+", type=Path, help="response dump files")
    p.add_argument("--mode", choices=("adaptive", "all"), dest="selection_mode")

    p = sub.add_parser("train-teacher", parents=[common], help="train the phase-1 detector on old classes")

    p = sub.add_parser("train-incremental", parents=[common], help="phase-2 training of one mode")
    p.add_argument("--mode", choices=[m for m in MODES if m != "upper-bound"])
    p.add_argument("--teacher", type=Path, help="teacher parameter file (default: train one)")

    p = sub.add_parser("dump-responses", parents=[common], help="write per-scene response dumps")
    p.add_argument("--params", type=Path, help="detector parameter file (default: the seed's teacher)")
    p.add_argument("--split", choices=("phase1", "phase2", "eval"), default="phase2")
    p.add_argument("--limit", type=int, default=10, help="number of scenes to dump")

    p = sub.add_parser("run", parents=[common], help="run one mode over the seeds")
    p.add_argument("--mode", choices=MODES)

    sub.add_parser("ablate", parents=[common], help="ablation suite over the distillation modes")
    sub.add_parser("scarce", parents=[common], help="adaptive vs. all responses with scarce new data")
    sub.add_parser("distance", parents=[common], help="head-response distance to the upper bound")

    p = sub.add_parser("eval", parents=[common], help="AP@IoU over detection files")
    p.add_argument("--predictions", type=Path, required=True, help="JSON: per scene, rows of x1,y1,x2,y2,score,class")
    p.add_argument("--ground-truth", type=Path, required=True, help="JSON: per scene, rows of x1,y1,x2,y2,class")
    p.add_argument("--iou", type=float, default=0.5)
    return parser


# -- layered configuration ----------------------------------------------------


def _defaults(command: str) -> ExperimentConfig:
    return scarce_config() if command == "scarce" else ExperimentConfig()


def _flatten(d: dict, prefix=()):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten(v, prefix + (k,))
        else:
            yield prefix + (k,), v


def _set(d: dict, path, value):
    for k in path[:-1]:
        d = d[k]
    d[path[-1]] = value


def _get(d: dict, path):
    for k in path:
        d = d[k]
    return d


def _check_value(path, value, default, source):
    name = ".".join(path)
    where = f"{name} (from {source})"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int) or (default is None and path[-1] == "phase2_scenes_per_epoch"):
        ok = (isinstance(value, int) and not isinstance(value, bool)) or (default is None and value is None)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: wrong type {type(value).__name__}")


def _merge_file(base: dict, data, source: str, prov: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    known = dict(_flatten(base))
    for path, value in _flatten(data):
        if path not in known:
            raise ConfigError(f"unknown field {'.'.join(path)} (from {source})")
        _check_value(path, value, known[path], source)
        _set(base, path, value)
        prov[".".join(path)] = source


def _provenance_note(message: str, prov: dict) -> str:
    hits = [f"{k} from {v}" for k, v in sorted(prov.items()) if re.search(rf"\b{k.split('.')[-1]}\b", message)]
    return f"{message} [{'; '.join(hits)}]" if hits else message


def _normalize_argv(argv: list[str]) -> list[str]:
    # shared flags may precede the subcommand; a bare --print-config echoes
    # the defaults of `run`
    pos = next((i for i, a in enumerate(argv) if a in COMMANDS), None)
    if pos is None:
        if "--print-config" in argv:
            return ["run", *argv]
        return argv
    if pos == 0 or any(a in ("-h", "--help", "--version") for a in argv[:pos]):
        return argv
    return [argv[pos], *argv[:pos], *argv[pos + 1 :]]


def parse_and_validate(argv=None) -> CliConfig:
    """Parse ``argv`` and build the validated configuration.

    Raises :class:`ConfigError` for invalid configurations and ``OSError``
    when the config file cannot be read.  ``--help``/``--version`` exit
    through argparse.
    """
    parser = build_parser()
    args = parser.parse_args(_normalize_argv(sys.argv[1:] if argv is None else list(argv)))
    base = _defaults(args.command).to_dict()
    prov = {".".join(p): "default" for p, _ in _flatten(base)}

    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror or exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from None
        _merge_file(base, data, f"file {args.config}", prov)

    flag_paths = dict(_FLAG_PATHS)
    flag_paths["selection_mode"] = [("selection", "mode")]
    if args.command in ("run", "train-incremental"):
        flag_paths["mode"] = [("mode",)]
    for dest, paths in flag_paths.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        for path in paths:
            _check_value(path, value, _get(base, path), "flag")
            _set(base, path, value)
            prov[".".join(path)] = "flag"

    try:
        cfg = ExperimentConfig.from_dict(base)
    except (InvalidArgument, TypeError, ValueError) as exc:
        raise ConfigError(_provenance_note(str(exc), prov)) from None
    if getattr(args, "limit", 1) < 1:
        raise ConfigError("limit must be positive (from flag)")
    if args.command == "eval" and not 0.0 < args.iou <= 1.0:
        raise ConfigError("iou must lie in (0, 1] (from flag)")
    return CliConfig(args.command, cfg, args.out_dir or Path("."), prov, args)


# -- commands -----------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


def _load_params(path: Path):
    try:
        with open(path, "rb") as fh:
            return read_params(fh)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _save_params(path: Path, params) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            write_params(params, fh)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _print_rows(rows) -> None:
    print(f"{'mode':<18}{'seeds':>6}{'old':>10}{'new':>10}{'all':>10}{'delta':>10}{'gap':>10}")
    for r in rows:
        print(
            f"{r['mode']:<18}{r['seeds']:>6}{r['map_old']:>10.4f}{r['map_new']:>10.4f}"
            f"{r['map_all']:>10.4f}{r['delta_all']:>10.4f}{r['gap_all']:>10.4f}"
        )


def _progress(msg: str) -> None:
    log.info("%s", msg)


def cmd_select(c: CliConfig) -> int:
    scfg = c.experiment.selection
    for path in c.args.dumps:
        try:
            with open(path, "rb") as fh:
                dump = read_dump(fh)
        except OSError as exc:
            raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
        cls = select_classification(dump.class_map, dump.class_map.class_ids, scfg)
        box = select_regression(dump.edge_map, scfg)
        doc = pseudo_labels_to_json(cls, box)
        doc["source"] = str(path)
        doc["metadata"] = dump.metadata
        doc["selection"] = asdict(scfg)
        out = c.out_dir / (path.stem + ".labels.json")
        _write_json(out, doc)
        print(f"{out}\t{len(cls)} classification\t{len(box)} regression")
    return EXIT_OK


def cmd_train_teacher(c: CliConfig) -> int:
    for seed in c.experiment.seeds:
        log.info("training teacher for seed %d", seed)
        data = seed_data(c.experiment, seed)
        out = c.out_dir / f"teacher_seed{seed}.irdp"
        _save_params(out, data.teacher)
        _write_json(c.out_dir / f"teacher_seed{seed}_trace.json", [asdict(s) for s in data.teacher_trace])
        print(out)
    return EXIT_OK


def cmd_train_incremental(c: CliConfig) -> int:
    cfg = c.experiment
    for seed in cfg.seeds:
        log.info("phase-2 training, mode %s, seed %d", cfg.mode, seed)
        if c.args.teacher is None:
            params = trained_detector(cfg, seed)
            trace = None
        else:
            params, trace = _train_from_teacher(cfg, seed, _load_params(c.args.teacher))
        out = c.out_dir / f"{cfg.mode}_seed{seed}.irdp"
        _save_params(out, params)
        if trace is not None:
            _write_json(c.out_dir / f"{cfg.mode}_seed{seed}_trace.json", trace)
        print(out)
    return EXIT_OK


def _train_from_teacher(cfg: ExperimentConfig, seed: int, teacher):
    if cfg.mode == "upper-bound":
        raise ConfigError("mode upper-bound does not start from a teacher")
    if set(teacher.class_ids) != set(cfg.old_classes):
        raise ConfigError("teacher classes do not match old_classes")
    data = seed_data(cfg, seed)
    dcfg, scfg = mode_configs(cfg, cfg.mode)
    student = extend_params(teacher, cfg.new_classes, seed)
    res = train(
        student,
        data.phase2,
        TrainConfig(cfg.learning_rate, cfg.epochs, len(data.phase2), seed, dcfg, scfg),
        teacher=teacher if dcfg is not None else None,
        featurizer=data.featurizer,
        features=data.phase2_features,
    )
    return res.params, [asdict(s) for s in res.trace]


def cmd_dump_responses(c: CliConfig) -> int:
    cfg = c.experiment
    for seed in cfg.seeds:
        params = _load_params(c.args.params) if c.args.params else teacher_detector(cfg, seed)
        data = seed_data(cfg, seed)
        scenes = {"phase1": data.phase1, "phase2": data.phase2, "eval": data.evaluation}[c.args.split]
        for scene in scenes[: c.args.limit]:
            fmap = data.featurizer(scene)
            cmap, emap = forward(params, fmap)
            dump = ResponseDump(
                cmap,
                emap,
                {"scene": int(scene.seed), "split": c.args.split, "seed": seed, "detector": str(c.args.params or "teacher")},
            )
            out = c.out_dir / "dumps" / f"{c.args.split}_{scene.seed}.irdk"
            try:
                out.parent.mkdir(parents=True, exist_ok=True)
                with open(out, "wb") as fh:
                    write_dump(dump, fh)
            except OSError as exc:
                raise OSError(f"cannot write {out}: {exc.strerror or exc}") from exc
            print(out)
    return EXIT_OK


def cmd_run(c: CliConfig) -> int:
    reports = run_seeds(c.experiment, _progress)
    emit_report(reports, c.out_dir, name="comparison")
    _print_rows(summarize(reports))
    return EXIT_OK


def cmd_ablate(c: CliConfig) -> int:
    reports = ablation_suite(c.experiment, ABLATION_MODES, _progress)
    emit_report(reports, c.out_dir, name="ablation")
    _print_rows(summarize(reports))
    return EXIT_OK


def cmd_scarce(c: CliConfig) -> int:
    adaptive, everything = scarce_data_experiment(c.experiment, _progress)
    reports = adaptive + everything
    emit_report(reports, c.out_dir, name="scarce")
    _print_rows(summarize(reports))
    return EXIT_OK


def cmd_distance(c: CliConfig) -> int:
    modes = ("finetune", "cls-reg-aps")
    result = distance_experiment(c.experiment, modes)
    rows = []
    for m in modes:
        for seed, d in zip(c.experiment.seeds, result[m]):
            rows.append({"mode": m, "seed": seed, **d})
    medians = {
        m: {k: statistics.median(d[k] for d in result[m]) for k in ("features", "classification", "regression")}
        for m in modes
    }
    _write_json(c.out_dir / "distance.json", {"per_seed": rows, "median": medians})
    lines = ["mode,seed,features,classification,regression"]
    lines += [f"{r['mode']},{r['seed']},{r['features']:.6f},{r['classification']:.6f},{r['regression']:.6f}" for r in rows]
    try:
        (c.out_dir / "distance.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {c.out_dir / 'distance.csv'}: {exc.strerror or exc}") from exc
    for m, d in medians.items():
        print(f"{m:<14} classification {d['classification']:.6f} regression {d['regression']:.6f}")
    return EXIT_OK


def cmd_eval(c: CliConfig) -> int:
    preds = _read_json(c.args.predictions)
    gts = _read_json(c.args.ground_truth)
    if not isinstance(preds, list) or not isinstance(gts, list) or len(preds) != len(gts):
        raise ConfigError("predictions and ground truth must be lists with one entry per scene")
    try:
        pa = [np.asarray(p, dtype=np.float64).reshape(-1, 6) for p in preds]
        ga = [np.asarray(g, dtype=np.float64).reshape(-1, 5) for g in gts]
    except ValueError as exc:
        raise ConfigError(f"malformed detection rows: {exc}") from None
    ap, m = evaluate_ap(pa, ga, c.args.iou)
    doc = {
        "iou_threshold": c.args.iou,
        "class_ap": {str(k): (None if np.isnan(v) else v) for k, v in ap.items()},
        "map": None if np.isnan(m) else m,
    }
    _write_json(c.out_dir / "eval.json", doc)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


_DISPATCH = {
    "select": cmd_select,
    "train-teacher": cmd_train_teacher,
    "train-incremental": cmd_train_incremental,
    "dump-responses": cmd_dump_responses,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "scarce": cmd_scarce,
    "distance": cmd_distance,
    "eval": cmd_eval,
}


def dispatch(c: CliConfig) -> int:
    try:
        return _DISPATCH[c.command](c)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DumpError, ParamsDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main(argv=None) -> int:
    try:
        c = parse_and_validate(argv)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SystemExit as exc:
        return int(exc.code or 0)
    if c.args.print_config:
        print(json.dumps(c.effective(), indent=2, sort_keys=True))
        for k, v in sorted(c.provenance.items()):
            if v != "default":
                print(f"{k}: {v}", file=sys.stderr)
        return EXIT_OK
    logging.basicConfig(
        level=logging.WARNING if c.args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    return dispatch(c)


if __name__ == "__main__":
    sys.exit(main())
