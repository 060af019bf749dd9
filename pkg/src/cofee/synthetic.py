"""A generated toy language for end-to-end runs.

Sentences are chains of clauses, each clause a template with one entity slot.
Two coarse types (LOC, PER) are each the union of three latent sub-types whose
surface forms and contexts differ; two further "misc" sub-types are anchored
but belong to no typed gazetteer.  The gazetteer of each coarse type lists a
fixed fraction of its surface forms, so distant labels miss the rest.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"

# coarse type -> sub-type -> (surface pattern, clause templates); "{}" is the entity slot
SUBTYPES = {
    "LOC": {
        "city": ("{R}", [
            "the mayor of {} spoke", "people moved to {} last year", "{} is a busy city",
            "the streets of {} were crowded", "a new bridge was built in {}", "the trains to {} were late",
        ]),
        "river": ("{R} River", [
            "boats sailed along the {}", "the {} flooded the valley", "fish swim in the {}",
            "a dam was built on the {}", "children played near the {}", "the water of the {} is cold",
        ]),
        "mountain": ("Mount {R}", [
            "climbers reached the top of {}", "snow covered {}", "the slopes of {} are steep",
            "hikers camped below {}", "a storm hit {}", "the view from {} was clear",
        ]),
    },
    "PER": {
        "politician": ("{F} {R}", [
            "{} won the election", "the senator {} gave a speech", "{} signed the new law",
            "voters supported {}", "{} met the ministers", "the party chose {} as leader",
        ]),
        "athlete": ("{F} {R}", [
            "{} scored two goals", "the coach praised {}", "{} won the race",
            "fans cheered for {}", "{} broke the record", "the club signed {}",
        ]),
        "musician": ("{F} {R}", [
            "{} released a new album", "{} sang at the concert", "the band of {} toured",
            "critics loved the songs of {}", "{} played the guitar", "a crowd waited for {}",
        ]),
    },
    "MISC": {
        "festival": ("{R} Festival", [
            "tickets for the {} sold out", "the {} starts in june", "music filled the {}",
        ]),
        "cup": ("{R} Cup", [
            "the team lifted the {}", "the final of the {} was tense", "nobody expected to win the {}",
        ]),
    },
}
FILLERS = ["it rained all day", "many people agreed", "the report was late", "prices went up", "nothing changed"]
CONNECTORS = [",", "and", ";", "while", "after", "because"]

QUERIES = {
    "LOC": "find locations such as cities, rivers, mountains",
    "PER": "find persons such as politicians, athletes, musicians",
}
TYPED = ("LOC", "PER")


@dataclass
class SyntheticCorpus:
    train: list[dict]              # {"tokens", "anchors", "entities", "subtypes"}
    dev: list[dict]                # gold {"tokens", "entities", "subtypes"}
    test: list[dict]
    gazetteers: dict[str, list[str]]
    queries: dict[str, str]
    forms: dict[str, dict[str, list[str]]] = field(default_factory=dict)

    def write(self, directory: str | Path) -> None:
        root = Path(directory)
        (root / "gazetteers").mkdir(parents=True, exist_ok=True)
        for name, records in (("corpus", self.train), ("dev", self.dev), ("test", self.test)):
            with open(root / f"{name}.jsonl", "w", encoding="utf-8") as fh:
                for rec in records:
                    fh.write(json.dumps(rec) + "\n")
        for t, entries in self.gazetteers.items():
            (root / "gazetteers" / f"{t}.txt").write_text("\n".join(entries) + "\n", encoding="utf-8")
        (root / "queries.json").write_text(json.dumps(self.queries, indent=2) + "\n", encoding="utf-8")


def _roots(rng: np.random.Generator, n: int, syllables: int, taken: set[str]) -> list[str]:
    sylls = [c + v for c, v in itertools.product(CONSONANTS, VOWELS)]
    out = []
    while len(out) < n:
        root = "".join(rng.choice(sylls, syllables)).capitalize()
        if root not in taken:
            taken.add(root)
            out.append(root)
    return out


def _surface_forms(rng: np.random.Generator, forms_per_subtype: int) -> dict[str, dict[str, list[str]]]:
    taken: set[str] = set()
    first_names = _roots(rng, 40, 2, taken)
    forms: dict[str, dict[str, list[str]]] = {}
    for coarse, subs in SUBTYPES.items():
        forms[coarse] = {}
        for sub, (pattern, _) in subs.items():
            roots = _roots(rng, forms_per_subtype, 3, taken)
            if "{F}" in pattern:
                names = [f"{rng.choice(first_names)} {r}" for r in roots]
            else:
                names = [pattern.replace("{R}", r) for r in roots]
            forms[coarse][sub] = names
    return forms


def _sentence(rng: np.random.Generator, forms, anchor_rate: float, clauses: tuple[int, int]):
    kinds = [(c, s) for c, subs in SUBTYPES.items() for s in subs]
    weights = np.array([1.0 if c != "MISC" else 0.5 for c, _ in kinds])
    weights /= weights.sum()
    n_clauses = int(rng.integers(clauses[0], clauses[1] + 1))
    parts = [kinds[i] for i in rng.choice(len(kinds), n_clauses, p=weights)]
    if rng.random() < 0.3:
        parts.insert(int(rng.integers(len(parts) + 1)), None)

    tokens: list[str] = []
    anchors, entities, subtypes = [], [], []
    for k, part in enumerate(parts):
        if k:
            tokens.append(str(rng.choice(CONNECTORS)))
        if part is None:
            tokens.extend(str(rng.choice(FILLERS)).split())
            continue
        coarse, sub = part
        template = str(rng.choice(SUBTYPES[coarse][sub][1]))
        name = str(rng.choice(forms[coarse][sub]))
        before, after = template.split("{}")
        tokens.extend(before.split())
        start = len(tokens)
        tokens.extend(name.split())
        end = len(tokens) - 1
        tokens.extend(after.split())
        if rng.random() < anchor_rate:
            anchors.append([start, end, name])
        if coarse in TYPED:
            entities.append([start, end, coarse])
            subtypes.append(sub)
    tokens.append(".")
    return {"tokens": tokens, "anchors": anchors, "entities": entities, "subtypes": subtypes}


def generate(
    n_sentences: int = 2000,
    coverage: float = 0.6,
    forms_per_subtype: int = 300,
    n_dev: int = 150,
    n_test: int = 400,
    anchor_rate: float = 0.9,
    clauses: tuple[int, int] = (4, 6),
    seed: int = 0,
) -> SyntheticCorpus:
    """Generate training corpus, gold dev/test sets and gazetteers covering ``coverage`` of forms."""
    rng = np.random.default_rng(seed)
    forms = _surface_forms(rng, forms_per_subtype)
    gazetteers = {}
    for coarse in TYPED:
        pool = [f for sub in SUBTYPES[coarse] for f in forms[coarse][sub]]
        n_cover = int(round(coverage * len(pool)))
        gazetteers[coarse] = sorted(rng.choice(pool, n_cover, replace=False).tolist())

    def gold_only(rec):
        return {k: rec[k] for k in ("tokens", "entities", "subtypes")}

    train = [_sentence(rng, forms, anchor_rate, clauses) for _ in range(n_sentences)]
    dev = [gold_only(_sentence(rng, forms, anchor_rate, clauses)) for _ in range(n_dev)]
    test = [gold_only(_sentence(rng, forms, anchor_rate, clauses)) for _ in range(n_test)]
    return SyntheticCorpus(train, dev, test, gazetteers, dict(QUERIES), forms)


def pipeline_config(directory: str | Path, seed: int = 0, output_dir: str | Path | None = None, **train) -> dict:
    """Desk-scale pipeline configuration for a corpus written by :meth:`SyntheticCorpus.write`.

    The encoder is trained from scratch, so learning rates sit above the
    pre-trained fine-tuning range and ``override`` is set.  ``train`` entries
    replace keys of the ``train`` section.
    """
    root = Path(directory)
    train_section = {
        "batch_size": 8,
        "epochs": {"esi": 4, "nee": 8, "fet": 3, "finetune": 3},
        "lr": {"esi": 3e-3, "nee": 3e-3, "fet": 1e-3, "finetune": 1e-3},
        "delta": 0.1,
        "patience": 2,
        "nee_passes": 2,
        "gamma": 1.0,
        "clusters": {t: len(SUBTYPES[t]) for t in TYPED},
    }
    train_section.update(train)
    return {
        "seed": seed,
        "override": True,
        "data": {
            "corpus": str(root / "corpus.jsonl"),
            "gazetteers": str(root / "gazetteers"),
            "queries": str(root / "queries.json"),
            "validation": str(root / "dev.jsonl"),
            "output_dir": str(output_dir if output_dir is not None else root / "run"),
        },
        "train": train_section,
    }
