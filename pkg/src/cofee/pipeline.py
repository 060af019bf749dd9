"""Three-stage coarse-to-fine pre-training.

Stage 1 (ESI) trains span identification on every anchor with the generic
"Find Entities" query.  Stage 2 (NEE) trains on gazetteer-typed labels with
iterative self-picking.  Stage 3 (FET) continues on the best stage-2 labels
with the cluster pseudo-label loss.  Each stage writes a checkpoint that the
next stage can resume from, and all randomness derives from ``config.seed``.
"""

from __future__ import annotations

import copy
import json
import logging
import time
import typing
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from . import corpus
from .corpus import GENERAL_TYPE, MRCExample, QueryTable
from .evaluation import gold_examples, score
from .fine_typing import fet_stage
from .model import SpanExtractor, Vocab, load_checkpoint, save_checkpoint
from .self_picking import RelabelConfig, nee_stage
from .training import Trainer, sub_seed

logger = logging.getLogger(__name__)

LR_RANGE = (1e-6, 1e-4)


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class StageEpochs:
    esi: int = 1
    nee: int = 10
    fet: int = 3
    finetune: int = 3


@dataclass
class StageRates:
    esi: float = 5e-5
    nee: float = 5e-5
    fet: float = 5e-5
    finetune: float = 5e-5


@dataclass
class DataConfig:
    corpus: str = ""
    gazetteers: str = ""
    queries: str | None = None          # JSON query table; default: bundled table for query_language
    query_language: str = "en"
    validation: str | None = None       # gold {"tokens", "entities"} JSONL; default: hold out D_s sentences
    val_fraction: float = 0.05
    max_sentence_length: int = 250
    min_anchors: int = 3
    output_dir: str = "runs/cofee"
    audit: bool = False                 # dump relabeled D_s and D_c per iteration
    esi_holdout: float = 0.0            # >0: hold out this fraction of D_g and early-stop stage 1 on it


@dataclass
class ModelConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    max_positions: int = 384
    dropout: float = 0.1


@dataclass
class TrainConfig:
    batch_size: int = 32
    weight_decay: float = 0.01
    epochs: StageEpochs = field(default_factory=StageEpochs)
    lr: StageRates = field(default_factory=StageRates)
    delta: float = 0.1
    patience: int = 2
    nee_passes: int = 1
    gamma: float = 1.0
    clusters: dict[str, int] = field(default_factory=dict)
    skip_esi: bool = False
    skip_fet: bool = False


@dataclass
class PipelineConfig:
    seed: int = 0
    override: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return _from_dict(cls, data or {}, "")

    def relabel_config(self) -> RelabelConfig:
        return RelabelConfig(self.train.delta, int(self.train.epochs.nee), self.train.patience, self.override,
                             self.train.nee_passes)


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, "expected a mapping")
        _, vt = typing.get_args(hint)
        return {str(k): _coerce(v, vt, f"{path}.{k}") for k, v in value.items()}
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {hint}")


def _from_dict(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", "expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(sub, "unknown field")
        hint = hints[key]
        kwargs[key] = _from_dict(hint, value, sub) if is_dataclass(hint) else _coerce(value, hint, sub)
    return cls(**kwargs)


def check_config(config: PipelineConfig, override: bool = False) -> PipelineConfig:
    """Enforce value ranges; out-of-sweep learning rates and delta >= 0.5 need ``override``."""
    override = override or config.override
    config.override = override
    t = config.train
    for stage in ("esi", "nee", "fet", "finetune"):
        if getattr(t.epochs, stage) < 0:
            raise ConfigError(f"train.epochs.{stage}", "must be >= 0")
        lr = getattr(t.lr, stage)
        if lr <= 0:
            raise ConfigError(f"train.lr.{stage}", "must be positive")
        if not LR_RANGE[0] <= lr <= LR_RANGE[1] and not override:
            raise ConfigError(f"train.lr.{stage}", f"{lr} outside the swept range {LR_RANGE}; pass --override to allow")
    if t.epochs.esi < 1 and not t.skip_esi:
        raise ConfigError("train.epochs.esi", "must be >= 1 (use skip_esi to skip the stage)")
    if t.epochs.nee < 1:
        raise ConfigError("train.epochs.nee", "must be >= 1")
    if t.epochs.fet < 1 and not t.skip_fet:
        raise ConfigError("train.epochs.fet", "must be >= 1 (use skip_fet to skip the stage)")
    if not 0 < t.delta < 1:
        raise ConfigError("train.delta", "must lie in (0, 1)")
    if t.delta >= 0.5 and not override:
        raise ConfigError("train.delta", "picking threshold must be < 0.5 to recall missed labels; pass --override")
    if t.gamma < 0:
        raise ConfigError("train.gamma", "must be >= 0")
    for name in ("patience", "batch_size", "nee_passes"):
        if getattr(t, name) < 1:
            raise ConfigError(f"train.{name}", "must be >= 1")
    for key, k in t.clusters.items():
        if k < 1:
            raise ConfigError(f"train.clusters.{key}", "K must be >= 1")
    d = config.data
    if not 0 < d.val_fraction < 1:
        raise ConfigError("data.val_fraction", "must lie in (0, 1)")
    if not 0 <= d.esi_holdout < 1:
        raise ConfigError("data.esi_holdout", "must lie in [0, 1)")
    if d.max_sentence_length < 1 or d.min_anchors < 0:
        raise ConfigError("data.max_sentence_length", "max_sentence_length >= 1 and min_anchors >= 0 required")
    if d.query_language not in ("en", "zh"):
        raise ConfigError("data.query_language", "must be 'en' or 'zh'")
    m = config.model
    if m.dim % m.heads:
        raise ConfigError("model.heads", f"dim {m.dim} is not divisible by {m.heads} heads")
    return config


def load_queries(config: PipelineConfig) -> QueryTable:
    if config.data.queries:
        return corpus.load_query_table(config.data.queries)
    return corpus.default_query_table(config.data.query_language)


def resolve_clusters(config: PipelineConfig, types: Sequence[str], queries: QueryTable) -> dict[str, int]:
    """K per type; unset types default to the number of sub-types their query enumerates."""
    return {t: config.train.clusters.get(t, queries.subtype_count(t)) for t in types}


def validate_config(path: str | Path, override: bool = False) -> PipelineConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    config = check_config(PipelineConfig.from_dict(raw or {}), override)
    base = path.parent
    d = config.data
    for name in ("corpus", "gazetteers", "queries", "validation", "output_dir"):
        value = getattr(d, name)
        if value and not Path(value).is_absolute():
            setattr(d, name, str(base / value))
    for name in ("corpus", "gazetteers", "queries", "validation"):
        value = getattr(d, name)
        if value and not Path(value).exists():
            raise FileNotFoundError(f"data.{name}: {value} does not exist")
    if not d.corpus or not d.gazetteers:
        raise ConfigError("data.corpus" if not d.corpus else "data.gazetteers", "required")
    types = sorted(p.stem for p in Path(d.gazetteers).glob("*.txt"))
    config.train.clusters = resolve_clusters(config, types, load_queries(config))
    return config


def save_config(config: PipelineConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False, allow_unicode=True)


# -- runtime ------------------------------------------------------------------

class MetricsLog:
    """Append-only JSONL log, one record per epoch/iteration."""

    def __init__(self, path: str | Path | None, fresh: bool = False):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if fresh:
                self.path.write_text("")

    def write(self, stage: str, epoch: int, loss: float | None, val_f1: float | None, **extra) -> None:
        rec = {"stage": stage, "epoch": epoch, "loss": loss, "val_f1": val_f1, **extra, "timestamp": time.time()}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")


@dataclass
class StageReport:
    stage: str
    best_f1: float
    checkpoint: str
    wall_clock: float
    records: list = field(default_factory=list)
    skipped: bool = False


@dataclass
class PreparedData:
    queries: QueryTable
    types: list[str]
    general: list[MRCExample]
    train: list[MRCExample]
    val: list[MRCExample]


def prepare_data(config: PipelineConfig) -> PreparedData:
    d = config.data
    stats: Counter = Counter()
    sentences = corpus.load_anchored_corpus(d.corpus, d.max_sentence_length, d.min_anchors, stats)
    logger.info("corpus: %s", dict(stats))
    if not sentences:
        raise ValueError(f"no sentences survived filtering in {d.corpus}")
    gazetteers = corpus.load_gazetteers(d.gazetteers)
    types = [g.entity_type for g in gazetteers]
    queries = load_queries(config)
    general = corpus.build_general_dataset(sentences)
    if d.validation:
        train_sents = sentences
        val = gold_examples(corpus.read_jsonl(d.validation), queries, types)
    else:
        rng = np.random.default_rng(sub_seed(config.seed, "split"))
        n_val = max(1, round(d.val_fraction * len(sentences)))
        held = set(rng.choice(len(sentences), n_val, replace=False).tolist())
        train_sents = [s for i, s in enumerate(sentences) if i not in held]
        val = corpus.match_gazetteer([sentences[i] for i in sorted(held)], gazetteers, queries)
    train = corpus.match_gazetteer(train_sents, gazetteers, queries)
    return PreparedData(queries, types, general, train, val)


def build_model(config: PipelineConfig, data: PreparedData) -> SpanExtractor:
    vocab = Vocab.from_examples(data.general)
    for t in data.types + [GENERAL_TYPE]:
        for tok in data.queries.tokens(t):
            vocab.add(tok)
    torch.manual_seed(sub_seed(config.seed, "init"))
    return SpanExtractor(vocab, **asdict(config.model))


def _trainer(model, config: PipelineConfig, stage: str) -> Trainer:
    return Trainer(model, getattr(config.train.lr, stage), config.train.weight_decay,
                   config.train.batch_size, sub_seed(config.seed, stage))


def esi_stage(model: SpanExtractor, general: Sequence[MRCExample], config: PipelineConfig,
              metrics: MetricsLog | None = None, stage: str = "esi") -> SpanExtractor:
    """Train on the general-typed anchors for the configured epochs; keeps the last epoch.

    With ``data.esi_holdout`` set, that fraction of the examples is held out and
    the best-scoring epoch is kept instead (stopping after ``train.patience``
    epochs without improvement).
    """
    if not general:
        raise ValueError(f"{stage} dataset is empty")
    epochs = getattr(config.train.epochs, stage)
    trainer = _trainer(model, config, stage)
    held: list[MRCExample] = []
    if stage == "esi" and config.data.esi_holdout > 0:
        rng = np.random.default_rng(sub_seed(config.seed, "esi-holdout"))
        mask = np.zeros(len(general), dtype=bool)
        mask[rng.choice(len(general), max(1, round(config.data.esi_holdout * len(general))), replace=False)] = True
        held = [ex for ex, m in zip(general, mask) if m]
        general = [ex for ex, m in zip(general, mask) if not m]
    best_state, best_f1, stale = None, -1.0, 0
    for epoch in range(1, epochs + 1):
        loss = trainer.train_epoch(general)
        f1 = score(model, held) if held else None
        logger.info("%s epoch %d: loss %.4f", stage, epoch, loss)
        if metrics is not None:
            metrics.write(stage, epoch, loss, f1)
        if held:
            if f1 > best_f1:
                best_state, best_f1, stale = copy.deepcopy(model.state_dict()), f1, 0
            else:
                stale += 1
                if stale >= config.train.patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    return model


def finetune_stage(model: SpanExtractor, examples: Sequence[MRCExample], config: PipelineConfig,
                   metrics: MetricsLog | None = None) -> SpanExtractor:
    """Optional supervised fine-tuning on human-labeled MRC examples (same mechanics as stage 1)."""
    return esi_stage(model, examples, config, metrics, stage="finetune")


def _examples_json(examples: Sequence[MRCExample]) -> list[dict]:
    return [ex.to_json() for ex in examples]


def run_cofee(config: PipelineConfig, stage: str = "all", resume: str | Path | None = None) -> list[StageReport]:
    """Run stages 1-3 (or a single stage / the remainder after ``resume``) and return their reports."""
    if stage not in ("1", "2", "3", "all"):
        raise ValueError(f"unknown stage {stage!r}")
    out = Path(config.data.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(config)
    snapshot = config.to_dict()
    clusters = resolve_clusters(config, data.types, data.queries)
    # lets predict/evaluate run from a checkpoint alone
    meta = {"queries": data.queries.to_json(), "types": list(data.types)}

    start_at, best_labels = 1, None
    if resume is not None:
        model, payload = load_checkpoint(resume)
        done = int(payload["extras"].get("stage", 0))
        start_at = done + 1 if stage == "all" else int(stage)
        if start_at == 3:
            if "best_labels" not in payload["extras"]:
                raise ValueError(f"{resume} carries no stage-2 labels; cannot start stage 3 from it")
            best_labels = [MRCExample.from_json(r) for r in payload["extras"]["best_labels"]]
    else:
        model = build_model(config, data)
        if stage != "all":
            start_at = int(stage)
            if start_at > 1:
                raise ValueError(f"stage {stage} needs --resume with the previous stage's checkpoint")
    last = 3 if stage == "all" else int(stage)
    metrics = MetricsLog(out / "metrics.jsonl", fresh=resume is None and stage in ("all", "1"))
    reports = []

    if start_at <= 1 <= last:
        t0 = time.perf_counter()
        if not config.train.skip_esi:
            esi_stage(model, data.general, config, metrics)
        path = out / "stage1.pt"
        save_checkpoint(path, model, snapshot, dict(meta, stage=1))
        reports.append(StageReport("esi", score(model, data.val), str(path), time.perf_counter() - t0,
                                   [r for r in metrics.records if r["stage"] == "esi"], config.train.skip_esi))

    if start_at <= 2 <= last:
        t0 = time.perf_counter()
        path = out / "stage2.pt"

        def log_iteration(rec, labels):
            metrics.write("nee", rec.iteration, rec.loss, rec.val_f1, added=rec.added, removed=rec.removed,
                          improved=rec.improved)
            if config.data.audit:
                corpus.write_examples(out / f"D_s_iteration{rec.iteration}.jsonl", labels)

        model, best_labels, records = nee_stage(
            model, data.train, data.val, config.relabel_config(), _trainer(model, config, "nee"),
            on_iteration=log_iteration,
        )
        best = max(records, key=lambda r: r.val_f1)
        best.checkpoint = str(path)
        save_checkpoint(path, model, snapshot, dict(meta, stage=2, best_labels=_examples_json(best_labels)))
        corpus.write_examples(out / "D_s_best.jsonl", best_labels)
        reports.append(StageReport("nee", score(model, data.val), str(path), time.perf_counter() - t0,
                                   [r.to_json() for r in records]))

    if start_at <= 3 <= last:
        t0 = time.perf_counter()
        path = out / "stage3.pt"
        if config.train.skip_fet:
            save_checkpoint(path, model, snapshot, dict(meta, stage=3))
            reports.append(StageReport("fet", score(model, data.val), str(path), time.perf_counter() - t0,
                                       skipped=True))
        else:
            def log_epoch(rec, pseudo):
                metrics.write("fet", rec.epoch, rec.loss, rec.val_f1, improved=rec.improved,
                              inertia=rec.inertia, alpha=rec.alpha)
                if config.data.audit:
                    corpus.write_jsonl(out / f"D_c_epoch{rec.epoch}.jsonl",
                                       (dict(r, type=t) for t, (ds, _) in pseudo.items() for r in ds.to_records()))

            model, records = fet_stage(
                model, best_labels, data.val, clusters, config.train.gamma, config.train.epochs.fet,
                _trainer(model, config, "fet"), seed=sub_seed(config.seed, "fet-clusters"), on_epoch=log_epoch,
            )
            save_checkpoint(path, model, snapshot, dict(meta, stage=3))
            reports.append(StageReport("fet", score(model, data.val), str(path), time.perf_counter() - t0,
                                       [r.to_json() for r in records]))
    return reports

