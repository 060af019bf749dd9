"""Weakly labeled corpus construction.

Anchored sentences come in as JSONL (``{"tokens": [...], "anchors": [[s, e, title], ...]}``,
token-indexed, inclusive).  From them we build the general-typed dataset (every
anchor is an entity, query "Find Entities") and the gazetteer-typed dataset (one
example per sentence and entity type, an anchor is labeled iff its surface text
is listed in that type's gazetteer).
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

logger = logging.getLogger(__name__)

GENERAL_TYPE = "ENTITY"
GENERAL_QUERY = "Find Entities"

_CJK = re.compile(r"[぀-ヿ㐀-䶿一-鿿豈-﫿＀-￯]")
_QUERY_TOKEN = re.compile(r"[㐀-䶿一-鿿豈-﫿]|\w+|[^\w\s]")
_ENUM_MARKERS = ("包括", "such as", "including", ":", "：")
_ENUM_SEPARATORS = re.compile(r"[,，、;；]")


class CorpusError(ValueError):
    pass


def normalize(text: str) -> str:
    """Canonical form used for gazetteer matching (NFC, case fold, collapsed whitespace)."""
    text = unicodedata.normalize("NFC", text)
    text = unicodedata.normalize("NFC", text.casefold())
    return " ".join(text.split())


def _is_cjk(token: str) -> bool:
    return bool(token) and all(_CJK.match(ch) for ch in token)


def surface(tokens: Sequence[str]) -> str:
    """Join tokens back into text: a space between tokens, none between two CJK tokens."""
    out: list[str] = []
    prev_cjk = False
    for tok in tokens:
        cjk = _is_cjk(tok)
        if out and not (cjk and prev_cjk):
            out.append(" ")
        out.append(tok)
        prev_cjk = cjk
    return "".join(out)


def tokenize_query(question: str) -> list[str]:
    return _QUERY_TOKEN.findall(question)


@dataclass(frozen=True)
class AnchoredSentence:
    tokens: tuple[str, ...]
    anchors: tuple[tuple[int, int, str], ...] = ()

    def __post_init__(self):
        prev_end = -1
        for start, end, _ in self.anchors:
            if not 0 <= start <= end < len(self.tokens):
                raise CorpusError(f"anchor ({start}, {end}) out of bounds for {len(self.tokens)} tokens")
            if start <= prev_end:
                raise CorpusError("anchors must be sorted and non-overlapping")
            prev_end = end

    def anchor_text(self, index: int) -> str:
        start, end, _ = self.anchors[index]
        return surface(self.tokens[start : end + 1])


@dataclass
class MRCExample:
    query: tuple[str, ...]
    context: tuple[str, ...]
    start: list[int]
    end: list[int]
    entity_type: str

    def __post_init__(self):
        n = len(self.context)
        if len(self.start) != n or len(self.end) != n:
            raise CorpusError("label vectors must match the context length")
        if sum(self.start) != sum(self.end):
            raise CorpusError("start and end label counts differ")
        if len(self.spans) != sum(self.start):
            raise CorpusError("labels do not pair into non-overlapping spans")

    @property
    def spans(self) -> list[tuple[int, int]]:
        return pair_boundaries(self.start, self.end)

    def with_spans(self, spans: Iterable[tuple[int, int]]) -> "MRCExample":
        return MRCExample(self.query, self.context, *span_labels(len(self.context), spans), self.entity_type)

    def to_json(self) -> dict:
        return {
            "query": list(self.query),
            "context": list(self.context),
            "start": list(self.start),
            "end": list(self.end),
            "type": self.entity_type,
        }

    @classmethod
    def from_json(cls, record: Mapping) -> "MRCExample":
        return cls(
            tuple(record["query"]),
            tuple(record["context"]),
            [int(v) for v in record["start"]],
            [int(v) for v in record["end"]],
            record["type"],
        )


def span_labels(n: int, spans: Iterable[tuple[int, int]]) -> tuple[list[int], list[int]]:
    start = [0] * n
    end = [0] * n
    for s, e in spans:
        if not 0 <= s <= e < n:
            raise CorpusError(f"span {(s, e)} out of range for {n} tokens")
        start[s] = 1
        end[e] = 1
    return start, end


def pair_boundaries(starts: Sequence, ends: Sequence) -> list[tuple[int, int]]:
    """Pair start and end indicators into non-overlapping spans.

    Scanning left to right, a start that is not inside an already emitted span
    is closed by the nearest end at or after it.  Starts with no end to their
    right are dropped.
    """
    end_positions = [j for j, flag in enumerate(ends) if flag]
    spans = []
    last_end = -1
    k = 0
    for i, flag in enumerate(starts):
        if not flag or i <= last_end:
            continue
        while k < len(end_positions) and end_positions[k] < i:
            k += 1
        if k == len(end_positions):
            break
        last_end = end_positions[k]
        spans.append((i, last_end))
    return spans


@dataclass
class Gazetteer:
    entity_type: str
    surface_forms: frozenset[str]
    max_tokens: int = field(init=False)

    def __post_init__(self):
        if not self.surface_forms:
            raise CorpusError(f"gazetteer {self.entity_type!r} is empty")
        if "" in self.surface_forms:
            raise CorpusError(f"gazetteer {self.entity_type!r} contains an empty entry")
        self.max_tokens = max(_surface_token_count(form) for form in self.surface_forms)

    @classmethod
    def from_entries(cls, entity_type: str, entries: Iterable[str]) -> "Gazetteer":
        forms = frozenset(f for f in (normalize(e) for e in entries) if f)
        return cls(entity_type, forms)

    def __contains__(self, text: str) -> bool:
        return text in self.surface_forms

    def matches(self, tokens: Sequence[str]) -> bool:
        return normalize(surface(tokens)) in self.surface_forms


def _surface_token_count(form: str) -> int:
    return sum(len(word) if _is_cjk(word) else 1 for word in re.findall(r"[㐀-鿿]+|\S+", form))


def load_gazetteer(path: str | Path) -> Gazetteer:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return Gazetteer.from_entries(path.stem, fh.read().splitlines())


def load_gazetteers(directory: str | Path) -> list[Gazetteer]:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix == ".txt")
    if not paths:
        raise FileNotFoundError(f"no gazetteer files (*.txt) in {directory}")
    return [load_gazetteer(p) for p in paths]


class QueryTable(Mapping[str, str]):
    """Natural-language question per entity type.

    Each entry may also carry the number of fine-grained sub-types the question
    enumerates; when it is absent we count the enumerated items.
    """

    def __init__(self, questions: Mapping[str, str], subtypes: Mapping[str, int] | None = None):
        self._questions = dict(questions)
        self._questions.setdefault(GENERAL_TYPE, GENERAL_QUERY)
        for key, question in self._questions.items():
            if not question or not question.strip():
                raise CorpusError(f"empty question for type {key!r}")
        self._subtypes = dict(subtypes or {})

    def __getitem__(self, entity_type: str) -> str:
        return self._questions[entity_type]

    def __iter__(self):
        return iter(self._questions)

    def __len__(self):
        return len(self._questions)

    def tokens(self, entity_type: str) -> tuple[str, ...]:
        return tuple(tokenize_query(self[entity_type]))

    def subtype_count(self, entity_type: str) -> int:
        if entity_type in self._subtypes:
            return self._subtypes[entity_type]
        return count_enumerated(self[entity_type])

    def to_json(self) -> dict:
        out = {}
        for key, question in self._questions.items():
            if key in self._subtypes:
                out[key] = {"question": question, "subtypes": self._subtypes[key]}
            else:
                out[key] = question
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> "QueryTable":
        questions, subtypes = {}, {}
        for key, value in data.items():
            if isinstance(value, str):
                questions[key] = value
            else:
                questions[key] = value["question"]
                if "subtypes" in value:
                    subtypes[key] = int(value["subtypes"])
        return cls(questions, subtypes)


def count_enumerated(question: str) -> int:
    """Number of items the question lists, e.g. 'such as cities, rivers, etc.' -> 2."""
    text = question
    for marker in _ENUM_MARKERS:
        if marker in text:
            text = text.split(marker, 1)[1]
            break
    items = [it.strip(" .。") for it in _ENUM_SEPARATORS.split(text)]
    items = [it for it in items if it and it.lower() not in ("etc", "etc.")]
    return max(1, len(items))


def load_query_table(path: str | Path) -> QueryTable:
    with open(path, encoding="utf-8") as fh:
        return QueryTable.from_json(json.load(fh))


def default_query_table(language: str = "en") -> QueryTable:
    name = {"en": "queries_en.json", "zh": "queries_zh.json"}[language]
    text = resources.files("cofee.data").joinpath(name).read_text(encoding="utf-8")
    return QueryTable.from_json(json.loads(text))


def _clean_anchors(raw, n_tokens: int, stats: Counter) -> list[tuple[int, int, str]]:
    anchors = []
    for item in raw:
        start, end, title = int(item[0]), int(item[1]), str(item[2])
        if not 0 <= start <= end < n_tokens:
            stats["anchors_out_of_bounds"] += 1
            continue
        anchors.append((start, end, title))
    # longest first (earliest start on ties), then drop anything overlapping a kept anchor
    anchors.sort(key=lambda a: (-(a[1] - a[0]), a[0]))
    kept: list[tuple[int, int, str]] = []
    for a in anchors:
        if any(a[0] <= k[1] and k[0] <= a[1] for k in kept):
            stats["anchors_overlapping"] += 1
            continue
        kept.append(a)
    return sorted(kept)


def _records(source) -> Iterator:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            yield from fh
    else:
        yield from source


def load_anchored_corpus(
    source,
    max_len: int = 250,
    min_anchors: int = 3,
    stats: Counter | None = None,
) -> list[AnchoredSentence]:
    """Read anchored sentences, keeping those with at most ``max_len`` tokens
    and strictly more than ``min_anchors`` anchors.

    ``source`` is a path, or an iterable of JSON lines or already-parsed dicts.
    Malformed records are skipped and counted in ``stats``.
    """
    if max_len < 1 or min_anchors < 0:
        raise ValueError("max_len must be >= 1 and min_anchors >= 0")
    stats = Counter() if stats is None else stats
    sentences = []
    for record in _records(source):
        try:
            if isinstance(record, str):
                if not record.strip():
                    continue
                record = json.loads(record)
            tokens = tuple(str(t) for t in record["tokens"])
            anchors = _clean_anchors(record.get("anchors", []), len(tokens), stats)
        except (ValueError, KeyError, TypeError, IndexError):
            stats["malformed"] += 1
            continue
        if len(tokens) > max_len:
            stats["too_long"] += 1
            continue
        if len(anchors) <= min_anchors:
            stats["too_few_anchors"] += 1
            continue
        sentences.append(AnchoredSentence(tokens, tuple(anchors)))
    stats["kept"] += len(sentences)
    if stats["malformed"]:
        logger.warning("skipped %d malformed corpus records", stats["malformed"])
    return sentences


def build_general_dataset(sentences: Iterable[AnchoredSentence]) -> list[MRCExample]:
    query = tuple(tokenize_query(GENERAL_QUERY))
    return [
        MRCExample(query, s.tokens, *span_labels(len(s.tokens), [(a, b) for a, b, _ in s.anchors]), GENERAL_TYPE)
        for s in sentences
    ]


def match_gazetteer(
    sentences: Iterable[AnchoredSentence],
    gazetteers: Sequence[Gazetteer],
    queries: QueryTable,
) -> list[MRCExample]:
    """One example per (sentence, gazetteer type), sentence-major."""
    types = [g.entity_type for g in gazetteers]
    if len(set(types)) != len(types):
        raise CorpusError(f"duplicate gazetteer types: {types}")
    missing = [t for t in types if t not in queries]
    if missing:
        raise CorpusError(f"no query for entity types {missing}")
    query_tokens = {t: queries.tokens(t) for t in types}

    examples = []
    for sent in sentences:
        texts = [normalize(sent.anchor_text(i)) for i in range(len(sent.anchors))]
        for gaz in gazetteers:
            spans = [(a[0], a[1]) for a, text in zip(sent.anchors, texts) if text in gaz]
            examples.append(
                MRCExample(query_tokens[gaz.entity_type], sent.tokens, *span_labels(len(sent.tokens), spans), gaz.entity_type)
            )
    return examples


def read_examples(path: str | Path) -> list[MRCExample]:
    with open(path, encoding="utf-8") as fh:
        return [MRCExample.from_json(json.loads(line)) for line in fh if line.strip()]


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def write_examples(path: str | Path, examples: Iterable[MRCExample]) -> None:
    write_jsonl(path, (ex.to_json() for ex in examples))


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
