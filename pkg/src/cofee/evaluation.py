"""Entity-level exact-match micro P/R/F1, batch inference and the gazetteer baseline."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import Gazetteer, MRCExample, QueryTable, normalize, span_labels, surface
from .model import EntityMention, SpanExtractor, decode_entities

INFERENCE_THRESHOLD = 0.5


@dataclass
class EvalResult:
    precision: float
    recall: float
    f1: float
    gold: int
    predicted: int
    correct: int
    per_type: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "overall": {"p": self.precision, "r": self.recall, "f1": self.f1},
            "per_type": self.per_type,
            "counts": {"gold": self.gold, "predicted": self.predicted, "correct": self.correct},
        }


def _prf(gold: int, pred: int, correct: int) -> tuple[float, float, float]:
    p = correct / pred if pred else 0.0
    r = correct / gold if gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def _key(m) -> tuple[int, int, str]:
    if isinstance(m, EntityMention):
        return m.key
    s, e, t = m
    return (int(s), int(e), str(t))


def micro_prf(gold: Sequence[Iterable], pred: Sequence[Iterable]) -> EvalResult:
    """Micro-averaged scores; a prediction counts iff (start, end, type) matches a gold
    mention of the same sentence.  P is 0 when nothing is predicted."""
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sentences vs {len(pred)} predicted")
    counts: Counter = Counter()
    for g_sent, p_sent in zip(gold, pred):
        g = {_key(m) for m in g_sent}
        p = {_key(m) for m in p_sent}
        for _, _, t in g:
            counts[t, "gold"] += 1
        for _, _, t in p:
            counts[t, "pred"] += 1
        for _, _, t in g & p:
            counts[t, "correct"] += 1
    types = sorted({t for t, _ in counts})
    per_type = {}
    for t in types:
        p, r, f1 = _prf(counts[t, "gold"], counts[t, "pred"], counts[t, "correct"])
        per_type[t] = {"p": p, "r": r, "f1": f1}
    n_gold = sum(counts[t, "gold"] for t in types)
    n_pred = sum(counts[t, "pred"] for t in types)
    n_correct = sum(counts[t, "correct"] for t in types)
    return EvalResult(*_prf(n_gold, n_pred, n_correct), n_gold, n_pred, n_correct, per_type)


def example_mentions(ex: MRCExample) -> list[EntityMention]:
    return [EntityMention(s, e, ex.entity_type) for s, e in ex.spans]


def score(model: SpanExtractor, validation: Sequence[MRCExample], threshold: float = INFERENCE_THRESHOLD) -> float:
    """Micro F1 of decoded spans against the labels of each validation example."""
    if not validation:
        raise ValueError("validation set is empty")
    scores = model.span_scores(validation)
    pred = [decode_entities(sc, threshold, ex.entity_type) for sc, ex in zip(scores, validation)]
    return micro_prf([example_mentions(ex) for ex in validation], pred).f1


def predict(
    model: SpanExtractor,
    sentences: Sequence[Sequence[str]],
    queries: QueryTable,
    types: Sequence[str],
    threshold: float = INFERENCE_THRESHOLD,
) -> list[list[EntityMention]]:
    """Answer each type's query on every sentence; per-type outputs are merged per sentence."""
    unknown = [t for t in types if t not in queries]
    if unknown:
        raise KeyError(f"no query for entity types {unknown}")
    query_tokens = {t: queries.tokens(t) for t in types}
    probes = [
        MRCExample(query_tokens[t], tuple(toks), [0] * len(toks), [0] * len(toks), t)
        for toks in sentences
        for t in types
    ]
    scores = model.span_scores(probes)
    out = []
    for i in range(len(sentences)):
        mentions = []
        for j, t in enumerate(types):
            mentions.extend(decode_entities(scores[i * len(types) + j], threshold, t))
        out.append(sorted(mentions, key=lambda m: (m.start, m.end, m.entity_type)))
    return out


def gazetteer_matching_baseline(
    sentences: Sequence[Sequence[str]], gazetteers: Sequence[Gazetteer]
) -> list[list[EntityMention]]:
    """Greedy left-to-right longest match of every gazetteer over raw tokens."""
    out = []
    for tokens in sentences:
        mentions = []
        for gaz in gazetteers:
            i = 0
            while i < len(tokens):
                hit = None
                for j in range(min(len(tokens), i + gaz.max_tokens) - 1, i - 1, -1):
                    if normalize(surface(tokens[i : j + 1])) in gaz:
                        hit = j
                        break
                if hit is None:
                    i += 1
                else:
                    mentions.append(EntityMention(i, hit, gaz.entity_type))
                    i = hit + 1
        out.append(sorted(mentions, key=lambda m: (m.start, m.end, m.entity_type)))
    return out


def gold_examples(records: Iterable[Mapping], queries: QueryTable, types: Sequence[str]) -> list[MRCExample]:
    """MRC examples from gold-annotated sentences ``{"tokens", "entities": [[s, e, type]]}``."""
    examples = []
    for rec in records:
        tokens = tuple(rec["tokens"])
        for t in types:
            spans = [(int(s), int(e)) for s, e, et in rec["entities"] if et == t]
            examples.append(MRCExample(queries.tokens(t), tokens, *span_labels(len(tokens), spans), t))
    return examples


def record_mentions(record: Mapping, key: str = "entities") -> list[EntityMention]:
    return [EntityMention(int(s), int(e), str(t)) for s, e, t in record.get(key, [])]
