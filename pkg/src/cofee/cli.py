"""``cofee`` command-line entry point.

Exit codes: 0 on success, 2 for missing files and invalid configuration
(the message names the offending field), 1 for any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import yaml

from . import corpus
from .corpus import QueryTable
from .evaluation import (
    INFERENCE_THRESHOLD,
    gazetteer_matching_baseline,
    gold_examples,
    micro_prf,
    predict,
    record_mentions,
)
from .model import load_checkpoint, save_checkpoint
from .pipeline import (
    ConfigError,
    MetricsLog,
    PipelineConfig,
    check_config,
    finetune_stage,
    load_queries,
    run_cofee,
    validate_config,
)

logger = logging.getLogger("cofee")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cofee", description="Coarse-to-fine entity pre-training for MRC-style NER.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name: str, help: str, config: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        if config:
            p.add_argument("--config", required=True, help="YAML pipeline configuration")
            p.add_argument("--override", action="store_true", help="accept values outside the documented ranges")
            p.add_argument("--seed", type=int, help="replace the configured seed")
            p.add_argument("--output", help="replace the configured output directory")
        return p

    command("build-corpus", "write the general-typed dataset D_g as JSONL")
    command("match-gazetteer", "write the gazetteer-typed dataset D_s as JSONL")

    p = command("pretrain", "run the three pre-training stages")
    p.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    p.add_argument("--resume", help="checkpoint of the previous stage")
    p.add_argument("--skip-esi", action="store_true", help="skip stage 1 (ablation)")
    p.add_argument("--skip-fet", action="store_true", help="skip stage 3 (ablation)")

    p = command("finetune", "fine-tune a checkpoint on human-labeled data")
    p.add_argument("--resume", required=True, help="pre-trained checkpoint")
    p.add_argument("--train", required=True, help='labeled JSONL with "tokens" and "entities"')

    p = command("evaluate", "score predictions against gold mentions", config=False)
    p.add_argument("--gold", required=True, help='JSONL with "entities"')
    p.add_argument("--pred", help='JSONL with "pred" (as written by predict)')
    p.add_argument("--checkpoint", help="predict with this checkpoint instead of reading --pred")
    p.add_argument("--types", nargs="+", help="entity types to predict (default: the checkpoint's)")
    p.add_argument("--threshold", type=float, default=INFERENCE_THRESHOLD)

    p = command("predict", "extract entities with a checkpoint", config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help='JSONL with "tokens"')
    p.add_argument("--output", required=True, help='JSONL copy of the input with a "pred" field')
    p.add_argument("--types", nargs="+")
    p.add_argument("--threshold", type=float, default=INFERENCE_THRESHOLD)

    p = command("baseline", "gazetteer-matching baseline")
    p.add_argument("--input", required=True, help='JSONL with "tokens" (and "entities" to score)')
    p.add_argument("--pred-output", help="write baseline predictions here")
    return parser


def _config(args: argparse.Namespace) -> PipelineConfig:
    config = validate_config(args.config, args.override)
    if args.seed is not None:
        config.seed = args.seed
    if args.output is not None:
        config.data.output_dir = args.output
    if getattr(args, "skip_esi", False):
        config.train.skip_esi = True
    if getattr(args, "skip_fet", False):
        config.train.skip_fet = True
    return check_config(config, args.override)


def _checkpoint_queries(payload: dict, types: Sequence[str] | None) -> tuple[QueryTable, list[str]]:
    extras = payload.get("extras", {})
    if "queries" in extras:
        queries = QueryTable.from_json(extras["queries"])
    else:
        queries = load_queries(PipelineConfig.from_dict(payload.get("config", {})))
    types = list(types or extras.get("types", []))
    if not types:
        raise ConfigError("--types", "checkpoint records no entity types; pass --types")
    return queries, types


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, ensure_ascii=False))


def _pred_mentions(records: list[dict]):
    return [record_mentions(r, key="pred") for r in records]


def cmd_build_corpus(args) -> None:
    config = _config(args)
    sentences = corpus.load_anchored_corpus(config.data.corpus, config.data.max_sentence_length, config.data.min_anchors)
    out = Path(config.data.output_dir) / "D_g.jsonl"
    corpus.write_examples(out, corpus.build_general_dataset(sentences))
    _print({"sentences": len(sentences), "output": str(out)})


def cmd_match_gazetteer(args) -> None:
    config = _config(args)
    d = config.data
    sentences = corpus.load_anchored_corpus(d.corpus, d.max_sentence_length, d.min_anchors)
    examples = corpus.match_gazetteer(sentences, corpus.load_gazetteers(d.gazetteers), load_queries(config))
    out = Path(d.output_dir) / "D_s.jsonl"
    corpus.write_examples(out, examples)
    _print({"examples": len(examples), "labeled_spans": sum(len(ex.spans) for ex in examples), "output": str(out)})


def cmd_pretrain(args) -> None:
    config = _config(args)
    reports = run_cofee(config, stage=args.stage, resume=args.resume)
    _print([
        {"stage": r.stage, "best_f1": r.best_f1, "checkpoint": r.checkpoint,
         "wall_clock": round(r.wall_clock, 3), "skipped": r.skipped}
        for r in reports
    ])


def cmd_finetune(args) -> None:
    config = _config(args)
    model, payload = load_checkpoint(args.resume)
    queries, types = _checkpoint_queries(payload, None)
    examples = gold_examples(corpus.read_jsonl(args.train), queries, types)
    out = Path(config.data.output_dir)
    metrics = MetricsLog(out / "metrics.jsonl")
    finetune_stage(model, examples, config, metrics)
    path = out / "finetune.pt"
    save_checkpoint(path, model, config.to_dict(), dict(payload.get("extras", {}), stage="finetune"))
    _print({"checkpoint": str(path), "examples": len(examples)})


def cmd_evaluate(args) -> None:
    gold_records = corpus.read_jsonl(args.gold)
    gold = [record_mentions(r) for r in gold_records]
    if args.checkpoint:
        model, payload = load_checkpoint(args.checkpoint)
        queries, types = _checkpoint_queries(payload, args.types)
        pred = predict(model, [r["tokens"] for r in gold_records], queries, types, args.threshold)
    elif args.pred:
        pred = _pred_mentions(corpus.read_jsonl(args.pred))
    else:
        raise ConfigError("--pred", "either --pred or --checkpoint is required")
    _print(micro_prf(gold, pred).to_json())


def _with_pred(records: list[dict], mentions) -> list[dict]:
    return [dict(r, pred=[[m.start, m.end, m.entity_type] for m in ms]) for r, ms in zip(records, mentions)]


def cmd_predict(args) -> None:
    model, payload = load_checkpoint(args.checkpoint)
    queries, types = _checkpoint_queries(payload, args.types)
    records = corpus.read_jsonl(args.input)
    mentions = predict(model, [r["tokens"] for r in records], queries, types, args.threshold)
    corpus.write_jsonl(args.output, _with_pred(records, mentions))
    _print({"sentences": len(records), "mentions": sum(len(m) for m in mentions), "output": args.output})


def cmd_baseline(args) -> None:
    config = _config(args)
    records = corpus.read_jsonl(args.input)
    mentions = gazetteer_matching_baseline([r["tokens"] for r in records], corpus.load_gazetteers(config.data.gazetteers))
    if args.pred_output:
        corpus.write_jsonl(args.pred_output, _with_pred(records, mentions))
    if all("entities" in r for r in records):
        _print(micro_prf([record_mentions(r) for r in records], mentions).to_json())
    else:
        _print({"sentences": len(records), "mentions": sum(len(m) for m in mentions)})


HANDLERS = {
    "build-corpus": cmd_build_corpus,
    "match-gazetteer": cmd_match_gazetteer,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "baseline": cmd_baseline,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(
        level=os.environ.get("COFEE_LOG_LEVEL", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    try:
        HANDLERS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except yaml.YAMLError as exc:
        print(f"error: cannot parse configuration: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any runtime failure maps to exit 1
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
