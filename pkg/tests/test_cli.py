import json

import pytest
import yaml

from cofee.cli import main

from conftest import FIXTURE


@pytest.fixture
def config_path(tmp_path):
    raw = yaml.safe_load((FIXTURE / "config.yaml").read_text())
    for key in ("corpus", "gazetteers", "queries", "validation"):
        raw["data"][key] = str(FIXTURE / raw["data"][key])
    raw["data"]["output_dir"] = str(tmp_path / "run")
    raw["model"] = {"dim": 16, "ff_dim": 32, "layers": 1, "heads": 2}
    raw["train"]["epochs"] = {"esi": 1, "nee": 1, "fet": 1, "finetune": 1}
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def lines(path):
    return [json.loads(line) for line in open(path, encoding="utf-8")]


def test_build_corpus_and_match(config_path, tmp_path):
    assert main(["build-corpus", "--config", str(config_path)]) == 0
    assert main(["match-gazetteer", "--config", str(config_path)]) == 0
    d_g, d_s = lines(tmp_path / "run/D_g.jsonl"), lines(tmp_path / "run/D_s.jsonl")
    assert len(d_s) == 2 * len(d_g)
    assert d_g[0]["type"] == "ENTITY" and d_g[0]["query"] == ["Find", "Entities"]


@pytest.fixture
def pretrained(config_path, tmp_path, capsys):
    assert main(["pretrain", "--config", str(config_path)]) == 0
    capsys.readouterr()
    return tmp_path / "run/stage3.pt"


def test_pretrain_reports(config_path, capsys):
    assert main(["pretrain", "--config", str(config_path), "--skip-fet"]) == 0
    reports = json.loads(capsys.readouterr().out)
    assert [r["stage"] for r in reports] == ["esi", "nee", "fet"] and reports[2]["skipped"]


def test_predict_evaluate_finetune(pretrained, config_path, tmp_path, capsys):
    pred = tmp_path / "pred.jsonl"
    assert main(["predict", "--checkpoint", str(pretrained), "--input", str(FIXTURE / "test.jsonl"),
                 "--output", str(pred)]) == 0
    capsys.readouterr()
    assert all("pred" in rec for rec in lines(pred))
    assert main(["evaluate", "--gold", str(FIXTURE / "test.jsonl"), "--pred", str(pred)]) == 0
    from_file = json.loads(capsys.readouterr().out)
    assert main(["evaluate", "--gold", str(FIXTURE / "test.jsonl"), "--checkpoint", str(pretrained)]) == 0
    assert json.loads(capsys.readouterr().out) == from_file
    assert main(["finetune", "--config", str(config_path), "--resume", str(pretrained),
                 "--train", str(FIXTURE / "dev.jsonl")]) == 0
    assert (tmp_path / "run/finetune.pt").exists()


def test_resume_by_stage(config_path, tmp_path):
    assert main(["pretrain", "--config", str(config_path), "--stage", "1"]) == 0
    assert main(["pretrain", "--config", str(config_path), "--stage", "2",
                 "--resume", str(tmp_path / "run/stage1.pt")]) == 0
    assert (tmp_path / "run/stage2.pt").exists() and not (tmp_path / "run/stage3.pt").exists()


def test_baseline(config_path, tmp_path, capsys):
    out = tmp_path / "base.jsonl"
    assert main(["baseline", "--config", str(config_path), "--input", str(FIXTURE / "test.jsonl"), "--pred-output", str(out)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert 0 < result["overall"]["f1"] <= 1
    assert len(lines(out)) == 100


def test_bad_config_value_names_field(config_path, capsys):
    raw = yaml.safe_load(config_path.read_text())
    raw["train"]["delta"] = 0.7
    raw["train"]["lr"] = dict.fromkeys(raw["train"]["lr"], 1e-4)
    raw["override"] = False
    config_path.write_text(yaml.safe_dump(raw))
    assert main(["pretrain", "--config", str(config_path)]) == 2
    assert "train.delta" in capsys.readouterr().err


def test_override_flag(config_path):
    raw = yaml.safe_load(config_path.read_text())
    raw["override"] = False
    config_path.write_text(yaml.safe_dump(raw))
    assert main(["build-corpus", "--config", str(config_path)]) == 2
    assert main(["build-corpus", "--config", str(config_path), "--override"]) == 0


def test_missing_input(config_path, tmp_path):
    assert main(["baseline", "--config", str(config_path), "--input", str(tmp_path / "nope.jsonl")]) == 2


def test_unknown_command():
    assert main(["frobnicate"]) == 2


def test_runtime_failure(tmp_path, capsys):
    bogus = tmp_path / "x.pt"
    bogus.write_bytes(b"not a checkpoint")
    assert main(["predict", "--checkpoint", str(bogus), "--input", str(FIXTURE / "test.jsonl"),
                 "--output", str(tmp_path / "o.jsonl")]) == 1
    assert capsys.readouterr().err
