"""
Coarse-to-fine pre-training on a synthetic language
====================================================

Generates a corpus whose two coarse types (LOC, PER) are each a union of
three hidden sub-types, with gazetteers that list only 60% of the surface
forms.  Runs the three stages, compares each against plain dictionary
matching on a gold test set, and checks how well the stage-3 clusters line
up with the hidden sub-types.

    python3 demos/synthetic_experiment.py [seed] [workdir]

Takes one to three minutes on a single CPU core.
"""

import sys
import tempfile
from collections import Counter
from pathlib import Path

import torch

from cofee import corpus, synthetic
from cofee.evaluation import gazetteer_matching_baseline, micro_prf, predict, record_mentions
from cofee.fine_typing import build_pseudo_dataset
from cofee.model import load_checkpoint
from cofee.pipeline import PipelineConfig, check_config, run_cofee

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
root = Path(sys.argv[2]) if len(sys.argv) > 2 else Path(tempfile.mkdtemp(prefix="cofee-demo-"))
torch.set_num_threads(1)

# A 2,000-sentence training corpus with anchors, plus gold dev and test sets.
data = synthetic.generate(seed=seed)
data.write(root)
print(f"corpus written to {root}")
print({t: len(v) for t, v in data.gazetteers.items()}, "gazetteer entries")

# Dictionary matching on the test set is the bar to beat: precise, but it
# cannot find names the gazetteer does not list.
tokens = [r["tokens"] for r in data.test]
gold = [record_mentions(r) for r in data.test]
baseline = micro_prf(gold, gazetteer_matching_baseline(tokens, corpus.load_gazetteers(root / "gazetteers")))
print(f"dictionary matching   P {baseline.precision:.3f}  R {baseline.recall:.3f}  F1 {baseline.f1:.3f}")

# Stage 1 learns what an entity looks like, stage 2 learns types from the
# gazetteer labels while relabeling the corpus itself, stage 3 adds the
# cluster loss.
config = check_config(PipelineConfig.from_dict(synthetic.pipeline_config(root, seed)))
reports = run_cofee(config)

queries = corpus.load_query_table(root / "queries.json")
for report in reports[1:]:
    model, _ = load_checkpoint(report.checkpoint)
    r = micro_prf(gold, predict(model, tokens, queries, list(synthetic.TYPED)))
    print(f"after {report.stage:<4}          P {r.precision:.3f}  R {r.recall:.3f}  F1 {r.f1:.3f}"
          f"   ({report.wall_clock:.0f}s)")

# Self-picking should have added many of the names the gazetteer missed.
first = [len(ex.spans) for ex in corpus.match_gazetteer(
    corpus.load_anchored_corpus(root / "corpus.jsonl"), corpus.load_gazetteers(root / "gazetteers"), queries)]
best = corpus.read_examples(Path(config.data.output_dir) / "D_s_best.jsonl")
print(f"labeled spans: {sum(first)} from the gazetteer, {sum(len(ex.spans) for ex in best)} after self-picking")

# Cluster the final model's LOC entities and cross-tabulate against the
# hidden sub-types; a good encoder puts each sub-type mostly in one cluster.
model, _ = load_checkpoint(reports[-1].checkpoint)
subtype_of = {}
for rec in data.train:
    for (s, e, t), sub in zip(rec["entities"], rec["subtypes"]):
        subtype_of[tuple(rec["tokens"]), s, e] = sub
pseudo, clusters = build_pseudo_dataset(model, best, 3, seed=seed, entity_type="LOC")
table = Counter()
for (i, s, e), label in zip(pseudo.entities, pseudo.labels):
    table[subtype_of.get((best[i].context, s, e), "not gold"), int(label)] += 1
subs = sorted({sub for sub, _ in table})
print("LOC clusters vs hidden sub-types")
print("".ljust(10) + "".join(f"c{k}".rjust(7) for k in range(clusters.k)))
for sub in subs:
    print(sub.ljust(10) + "".join(str(table[sub, k]).rjust(7) for k in range(clusters.k)))
print("cluster weights", pseudo.alpha.round(3).tolist())
