import csv
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from respdistill import __version__
from respdistill.cli import ConfigError, main, parse_and_validate
from respdistill.harness import ExperimentConfig

FAST = ["--seeds", "0", "--epochs", "2", "--scenes-per-epoch", "20", "--eval-scenes", "20", "-q"]


def write_config(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


class TestParse:
    def test_defaults(self):
        c = parse_and_validate(["run"])
        assert c.experiment == ExperimentConfig()
        assert set(c.provenance.values()) == {"default"}

    def test_flag_overrides_file(self, tmp_path):
        cfg = write_config(tmp_path, {"selection": {"alpha": 0.5}})
        assert parse_and_validate(["select", "x.irdk", "--config", str(cfg)]).experiment.selection.alpha == 0.5
        c = parse_and_validate(["select", "x.irdk", "--config", str(cfg), "--alpha", "1.0"])
        assert c.experiment.selection.alpha == 1.0
        assert c.provenance["selection.alpha"] == "flag"

    def test_file_overrides_defaults(self, tmp_path):
        cfg = write_config(tmp_path, {"epochs": 7, "distillation": {"lambda_cls": 2.0}})
        c = parse_and_validate(["run", "--config", str(cfg)])
        assert c.experiment.epochs == 7 and c.experiment.distillation.lambda_cls == 2.0
        assert c.provenance["epochs"].startswith("file")

    def test_temperature_sets_both_branches(self):
        e = parse_and_validate(["run", "--temperature", "3"]).experiment
        assert e.distillation.temperature_cls == e.distillation.temperature_reg == 3.0

    def test_nms_iou_out_of_range(self, capsys):
        assert main(["select", "x.irdk", "--nms-iou", "1.5"]) == 2
        err = capsys.readouterr().err
        assert "nms_iou_threshold" in err and "flag" in err

    def test_file_violation_names_source(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"selection": {"alpha": "big"}})
        assert main(["run", "--config", str(cfg)]) == 2
        err = capsys.readouterr().err
        assert "selection.alpha" in err and "cfg.json" in err

    @pytest.mark.parametrize(
        "data",
        [{"nonsense": 1}, {"seeds": [0.5]}, {"epochs": True}, {"selection": {"mode": 3}}, [1, 2]],
    )
    def test_bad_files(self, tmp_path, data):
        cfg = write_config(tmp_path, data)
        with pytest.raises(ConfigError):
            parse_and_validate(["run", "--config", str(cfg)])

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{")
        assert main(["run", "--config", str(p)]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 4

    def test_overlapping_classes(self, capsys):
        assert main(["run", "--old-classes", "0,1", "--new-classes", "1,2"]) == 2
        assert "classes" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert main(["run", "--frobnicate"]) == 2

    def test_version(self, capsys):
        assert main(["--version"]) == 0
        assert __version__ in capsys.readouterr().out

    def test_help(self, capsys):
        assert main(["ablate", "--help"]) == 0
        assert "--alpha" in capsys.readouterr().out

    def test_global_flags_before_command(self, tmp_path):
        c = parse_and_validate(["--out-dir", str(tmp_path), "--seeds", "3", "run"])
        assert c.command == "run" and c.out_dir == tmp_path and c.experiment.seeds == (3,)


class TestPrintConfig:
    def test_bare_echoes_defaults(self, capsys):
        assert main(["--print-config"]) == 0
        assert json.loads(capsys.readouterr().out) == ExperimentConfig().to_dict()

    def test_round_trip(self, tmp_path, capsys):
        argv = ["ablate", "--alpha", "0.3", "--seeds", "1,2", "--temperature", "4", "--bins", "6", "--kl-direction", "student-teacher"]
        assert main([*argv, "--print-config"]) == 0
        out = capsys.readouterr()
        assert "selection.alpha: flag" in out.err
        p = tmp_path / "echo.json"
        p.write_text(out.out)
        again = parse_and_validate(["ablate", "--config", str(p)]).experiment
        assert again == parse_and_validate(argv).experiment

    def test_scarce_defaults(self, capsys):
        assert main(["scarce", "--print-config"]) == 0
        d = json.loads(capsys.readouterr().out)
        assert d["new_classes"] == [7] and d["phase2_scenes_per_epoch"] == 20


TOKENS = [
    "--alpha", "--nms-iou", "--temperature", "--lambda-cls", "--bins", "--seeds", "--old-classes",
    "--new-classes", "--epochs", "--learning-rate", "--confidence", "--top1-agg", "--kl-direction",
    "0", "1", "-1", "0.5", "1.5", "nan", "inf", "1e9", "0,1", "4,5", "a", "mean", "sigmoid-max", "",
]  # fmt: skip


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(["run", "ablate", "scarce", "distance", "train-teacher"]), st.lists(st.sampled_from(TOKENS), max_size=8))
def test_flag_fuzz_never_crashes(command, tokens):
    # with --print-config nothing runs, so any outcome must be a clean 0 or 2
    assert main([command, *tokens, "--print-config"]) in (0, 2)


class TestCommands:
    def test_dump_then_select(self, tmp_path, capsys):
        assert main(["dump-responses", *FAST, "--limit", "2", "--out-dir", str(tmp_path)]) == 0
        dumps = sorted((tmp_path / "dumps").glob("*.irdk"))
        assert len(dumps) == 2
        assert main(["select", *map(str, dumps), "--out-dir", str(tmp_path), "--alpha", "0.5"]) == 0
        doc = json.loads((tmp_path / (dumps[0].stem + ".labels.json")).read_text())
        assert doc["selection"]["alpha"] == 0.5
        assert main(["select", str(dumps[0]), "--out-dir", str(tmp_path / "all"), "--mode", "all"]) == 0
        full = json.loads((tmp_path / "all" / (dumps[0].stem + ".labels.json")).read_text())
        assert full["selection"]["mode"] == "all"

    def test_select_missing_file(self, tmp_path):
        assert main(["select", str(tmp_path / "absent.irdk"), "-q"]) == 4

    def test_select_corrupt_file(self, tmp_path, capsys):
        p = tmp_path / "bad.irdk"
        p.write_bytes(b"NOPE" + bytes(40))
        assert main(["select", str(p), "-q"]) == 4
        assert "error" in capsys.readouterr().err

    def test_diverged_training(self, tmp_path, capsys):
        rc = main(["train-teacher", *FAST, "--epochs", "3", "--learning-rate", "1e300", "--out-dir", str(tmp_path)])
        assert rc == 3
        assert "diverged" in capsys.readouterr().err

    def test_teacher_and_incremental(self, tmp_path):
        assert main(["train-teacher", *FAST, "--out-dir", str(tmp_path)]) == 0
        teacher = tmp_path / "teacher_seed0.irdp"
        assert teacher.exists()
        assert main(["train-incremental", *FAST, "--mode", "cls-aps", "--teacher", str(teacher), "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "cls-aps_seed0.irdp").exists()
        trace = json.loads((tmp_path / "cls-aps_seed0_trace.json").read_text())
        assert len(trace) == 2

    def test_incremental_wrong_teacher(self, tmp_path):
        assert main(["train-teacher", *FAST, "--old-classes", "0,1", "--new-classes", "2,3", "--out-dir", str(tmp_path)]) == 0
        rc = main(["train-incremental", *FAST, "--mode", "finetune", "--teacher", str(tmp_path / "teacher_seed0.irdp"), "--out-dir", str(tmp_path)])
        assert rc == 2

    def test_ablate_outputs(self, tmp_path, capsys):
        assert main(["ablate", *FAST, "--out-dir", str(tmp_path)]) == 0
        assert len(list(tmp_path.glob("report_*_seed0.json"))) == 6
        rows = list(csv.DictReader(open(tmp_path / "ablation.csv", newline="")))
        assert [r["mode"] for r in rows] == ["finetune", "all-cls-all-reg", "all-cls", "all-reg", "cls-aps", "cls-reg-aps"]
        assert (tmp_path / "per_class_ap.csv").exists()
        assert "cls-reg-aps" in capsys.readouterr().out

    def test_run_and_distance(self, tmp_path):
        assert main(["run", *FAST, "--mode", "all-cls", "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "report_all-cls_seed0.json").exists()
        assert main(["distance", *FAST, "--out-dir", str(tmp_path)]) == 0
        d = json.loads((tmp_path / "distance.json").read_text())
        assert set(d["median"]) == {"finetune", "cls-reg-aps"}

    def test_scarce(self, tmp_path):
        assert main(["scarce", *FAST, "--out-dir", str(tmp_path)]) == 0
        modes = {r["mode"] for r in csv.DictReader(open(tmp_path / "scarce.csv", newline=""))}
        assert modes >= {"cls-reg-aps", "all-response"}

    def test_eval(self, tmp_path, capsys):
        preds = write_config(tmp_path, [[[0, 0, 10, 10, 0.9, 1]], []], "p.json")
        gts = write_config(tmp_path, [[[0, 0, 10, 10, 1]], [[5, 5, 9, 9, 2]]], "g.json")
        assert main(["eval", "--predictions", str(preds), "--ground-truth", str(gts), "--out-dir", str(tmp_path), "-q"]) == 0
        doc = json.loads((tmp_path / "eval.json").read_text())
        assert doc["class_ap"] == {"1": 1.0, "2": 0.0} and doc["map"] == 0.5

    def test_eval_mismatched_lengths(self, tmp_path):
        preds = write_config(tmp_path, [[]], "p.json")
        gts = write_config(tmp_path, [[], []], "g.json")
        assert main(["eval", "--predictions", str(preds), "--ground-truth", str(gts), "-q"]) == 2
