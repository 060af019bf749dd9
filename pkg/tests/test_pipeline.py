import json

import pytest
import torch
import yaml

from cofee import synthetic
from cofee.model import load_checkpoint
from cofee.pipeline import (
    ConfigError,
    MetricsLog,
    PipelineConfig,
    build_model,
    check_config,
    esi_stage,
    prepare_data,
    run_cofee,
    save_config,
    validate_config,
)

from conftest import FIXTURE


def small_config(tmp_path, **train) -> PipelineConfig:
    """The fixture configuration shrunk to run in seconds."""
    config = validate_config(FIXTURE / "config.yaml")
    config.data.output_dir = str(tmp_path / "run")
    config.model.dim, config.model.ff_dim, config.model.layers, config.model.heads = 16, 32, 1, 2
    config.train.epochs.esi, config.train.epochs.nee, config.train.epochs.fet = 1, 2, 1
    config.train.nee_passes = 1
    for key, value in train.items():
        setattr(config.train, key, value)
    return config


def stripped(path):
    return [{k: v for k, v in json.loads(line).items() if k != "timestamp"} for line in open(path)]


class TestConfig:
    def test_defaults(self):
        c = PipelineConfig()
        assert (c.train.delta, c.train.gamma, c.train.patience) == (0.1, 1.0, 2)

    def test_round_trip(self, tmp_path):
        config = validate_config(FIXTURE / "config.yaml")
        save_config(config, tmp_path / "c.yaml")
        again = PipelineConfig.from_dict(yaml.safe_load((tmp_path / "c.yaml").read_text()))
        assert again == config

    def test_unknown_field_path(self):
        with pytest.raises(ConfigError, match=r"train\.epochs\.bogus"):
            PipelineConfig.from_dict({"train": {"epochs": {"bogus": 1}}})

    def test_type_error_path(self):
        with pytest.raises(ConfigError, match=r"train\.delta"):
            PipelineConfig.from_dict({"train": {"delta": "high"}})

    def test_delta_needs_override(self):
        config = PipelineConfig.from_dict({"train": {"delta": 0.6}})
        with pytest.raises(ConfigError, match="train.delta"):
            check_config(config)
        assert check_config(config, override=True).train.delta == 0.6

    def test_learning_rate_range(self):
        config = PipelineConfig.from_dict({"train": {"lr": {"nee": 1e-2}}})
        with pytest.raises(ConfigError, match=r"train\.lr\.nee"):
            check_config(config)

    @pytest.mark.parametrize("section, key, value", [
        ("train", "gamma", -1.0), ("train", "nee_passes", 0), ("data", "esi_holdout", 1.0),
        ("model", "heads", 3), ("data", "query_language", "fr"),
    ])
    def test_ranges(self, section, key, value):
        with pytest.raises(ConfigError):
            check_config(PipelineConfig.from_dict({section: {key: value}}))

    def test_cluster_defaults_follow_queries(self):
        config = validate_config(FIXTURE / "config.yaml")
        assert config.train.clusters == {"LOC": 3, "PER": 3}

    def test_missing_file(self, tmp_path):
        (tmp_path / "c.yaml").write_text("data: {corpus: nope.jsonl, gazetteers: nope}\n")
        with pytest.raises(FileNotFoundError, match="data.corpus"):
            validate_config(tmp_path / "c.yaml")

    def test_synthetic_config_is_valid(self, tmp_path):
        synthetic.generate(n_sentences=50, forms_per_subtype=5, n_dev=5, n_test=5).write(tmp_path)
        config = check_config(PipelineConfig.from_dict(synthetic.pipeline_config(tmp_path)))
        assert config.train.clusters == {"LOC": 3, "PER": 3}


class TestRun:
    def test_stages_and_artifacts(self, tmp_path):
        reports = run_cofee(small_config(tmp_path))
        assert [r.stage for r in reports] == ["esi", "nee", "fet"]
        out = tmp_path / "run"
        for name in ("stage1.pt", "stage2.pt", "stage3.pt", "D_s_best.jsonl", "metrics.jsonl"):
            assert (out / name).exists()
        _, payload = load_checkpoint(out / "stage3.pt")
        assert payload["extras"]["types"] == ["LOC", "PER"]
        assert all(0 <= r.best_f1 <= 1 for r in reports)

    def test_deterministic(self, tmp_path):
        run_cofee(small_config(tmp_path / "a"))
        run_cofee(small_config(tmp_path / "b"))
        assert stripped(tmp_path / "a/run/metrics.jsonl") == stripped(tmp_path / "b/run/metrics.jsonl")

    def test_resume_matches_uninterrupted(self, tmp_path):
        run_cofee(small_config(tmp_path / "full"))
        config = small_config(tmp_path / "split")
        run_cofee(config, stage="1")
        run_cofee(config, stage="all", resume=tmp_path / "split/run/stage1.pt")
        assert stripped(tmp_path / "full/run/metrics.jsonl") == stripped(tmp_path / "split/run/metrics.jsonl")
        a, _ = load_checkpoint(tmp_path / "full/run/stage3.pt")
        b, _ = load_checkpoint(tmp_path / "split/run/stage3.pt")
        for (name, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(x, y), name

    def test_single_stage_needs_resume(self, tmp_path):
        with pytest.raises(ValueError, match="resume"):
            run_cofee(small_config(tmp_path), stage="2")

    def test_stage_three_needs_labels(self, tmp_path):
        config = small_config(tmp_path)
        run_cofee(config, stage="1")
        with pytest.raises(ValueError, match="stage-2 labels"):
            run_cofee(config, stage="3", resume=tmp_path / "run/stage1.pt")

    def test_skip_flags(self, tmp_path):
        reports = run_cofee(small_config(tmp_path, skip_esi=True, skip_fet=True))
        assert [r.skipped for r in reports] == [True, False, True]
        assert not any(r["stage"] in ("esi", "fet") for r in stripped(tmp_path / "run/metrics.jsonl"))

    def test_audit_dumps(self, tmp_path):
        config = small_config(tmp_path)
        config.data.audit = True
        run_cofee(config)
        assert (tmp_path / "run/D_s_iteration1.jsonl").exists()
        assert (tmp_path / "run/D_c_epoch1.jsonl").exists()


class TestESI:
    def test_loss_decreases(self, tmp_path):
        config = small_config(tmp_path)
        config.train.epochs.esi = 3
        data = prepare_data(config)
        model = build_model(config, data)
        log = MetricsLog(None)
        esi_stage(model, data.general, config, log)
        losses = [r["loss"] for r in log.records]
        assert losses[-1] < losses[0]

    def test_holdout_early_stopping(self, tmp_path):
        config = small_config(tmp_path)
        config.data.esi_holdout = 0.2
        config.train.epochs.esi = 2
        data = prepare_data(config)
        log = MetricsLog(None)
        esi_stage(build_model(config, data), data.general, config, log)
        assert all(r["val_f1"] is not None for r in log.records)

    def test_empty(self, tmp_path):
        config = small_config(tmp_path)
        with pytest.raises(ValueError):
            esi_stage(None, [], config)
