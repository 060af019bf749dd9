import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cofee import corpus
from cofee.corpus import (
    GENERAL_TYPE,
    AnchoredSentence,
    CorpusError,
    Gazetteer,
    MRCExample,
    QueryTable,
    build_general_dataset,
    count_enumerated,
    load_anchored_corpus,
    match_gazetteer,
    normalize,
    pair_boundaries,
    span_labels,
    surface,
)

from conftest import DATA


def record(n_tokens, anchors, token="w"):
    return {"tokens": [f"{token}{i}" for i in range(n_tokens)], "anchors": [list(a) for a in anchors]}


def four_anchors(n=30):
    return record(n, [(0, 0, "a"), (2, 3, "b"), (5, 5, "c"), (7, 8, "d")])


class TestLoadAnchoredCorpus:
    def test_four_anchors_kept(self):
        assert len(load_anchored_corpus([four_anchors()], max_len=250, min_anchors=3)) == 1

    def test_three_anchors_dropped(self):
        rec = record(30, [(0, 0, "a"), (2, 3, "b"), (5, 5, "c")])
        stats = Counter()
        assert load_anchored_corpus([rec], 250, 3, stats) == []
        assert stats["too_few_anchors"] == 1

    def test_too_long_dropped_not_truncated(self):
        rec = record(260, [(i * 10, i * 10, "x") for i in range(5)])
        stats = Counter()
        assert load_anchored_corpus([rec], 250, 3, stats) == []
        assert stats["too_long"] == 1

    def test_malformed_records_skipped_and_counted(self):
        lines = ["{not json", json.dumps({"anchors": []}), json.dumps(four_anchors()), "",
                 json.dumps({"tokens": ["a"], "anchors": [["x", 0, "t"]]})]
        stats = Counter()
        out = load_anchored_corpus(lines, 250, 3, stats)
        assert len(out) == 1
        assert stats["malformed"] == 3

    def test_out_of_bounds_anchor_dropped_then_min_anchors_rechecked(self):
        rec = four_anchors(10)
        rec["anchors"].append([8, 12, "oob"])
        stats = Counter()
        assert len(load_anchored_corpus([rec], 250, 3, stats)) == 1
        assert stats["anchors_out_of_bounds"] == 1
        rec = record(10, [(0, 0, "a"), (2, 2, "b"), (4, 4, "c"), (9, 11, "oob")])
        assert load_anchored_corpus([rec], 250, 3) == []

    def test_overlapping_anchors_keep_longest(self):
        rec = record(10, [(0, 1, "short"), (0, 3, "long"), (3, 4, "clash"), (6, 6, "ok")])
        (sent,) = load_anchored_corpus([rec], 250, 0)
        assert sent.anchors == ((0, 3, "long"), (6, 6, "ok"))

    def test_order_preserved(self, tmp_path):
        recs = [four_anchors() | {"tokens": [f"s{k}_{i}" for i in range(30)]} for k in range(5)]
        path = tmp_path / "c.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in recs), encoding="utf-8")
        out = load_anchored_corpus(path, 250, 3)
        assert [s.tokens[0] for s in out] == [f"s{k}_0" for k in range(5)]

    def test_bad_parameters(self):
        with pytest.raises(ValueError):
            load_anchored_corpus([], max_len=0)
        with pytest.raises(ValueError):
            load_anchored_corpus([], min_anchors=-1)


class TestGeneralDataset:
    def test_single_span(self):
        (ex,) = build_general_dataset([AnchoredSentence(("A", "B", "C", "D"), ((1, 2, "t"),))])
        assert ex.start == [0, 1, 0, 0]
        assert ex.end == [0, 0, 1, 0]
        assert ex.query == ("Find", "Entities")
        assert ex.entity_type == GENERAL_TYPE

    def test_two_disjoint_spans(self):
        (ex,) = build_general_dataset([AnchoredSentence(("A", "B", "C", "D"), ((0, 0, "t1"), (2, 3, "t2")))])
        assert ex.start == [1, 0, 1, 0]
        assert ex.end == [1, 0, 0, 1]

    def test_no_anchors_all_zero(self):
        (ex,) = build_general_dataset([AnchoredSentence(("A", "B"))])
        assert ex.start == [0, 0] and ex.end == [0, 0]


class TestMatchGazetteer:
    queries = QueryTable({"LOC": "find locations", "PER": "find persons", "ORG": "find organizations"})

    def sentence(self):
        return AnchoredSentence(("Paris", "met", "Zorblax", "in", "Acme"), ((0, 0, "Paris"), (2, 2, "Z"), (4, 4, "Acme")))

    def test_match_and_non_match(self):
        gaz = [Gazetteer.from_entries("LOC", ["paris"]), Gazetteer.from_entries("PER", ["Bob"])]
        loc, per = match_gazetteer([self.sentence()], gaz, self.queries)
        assert (loc.entity_type, loc.spans) == ("LOC", [(0, 0)])
        assert (per.entity_type, per.spans) == ("PER", [])
        assert per.query == ("find", "persons")

    def test_ambiguous_anchor_labeled_in_both(self):
        gaz = [Gazetteer.from_entries("LOC", ["Acme"]), Gazetteer.from_entries("ORG", ["ACME"])]
        loc, org = match_gazetteer([self.sentence()], gaz, self.queries)
        assert loc.spans == org.spans == [(4, 4)]

    def test_missing_query_fails_before_output(self):
        gaz = [Gazetteer.from_entries("MISC", ["Paris"])]
        with pytest.raises(CorpusError, match="MISC"):
            match_gazetteer([self.sentence()], gaz, QueryTable({}))

    def test_duplicate_types_rejected(self):
        gaz = [Gazetteer.from_entries("LOC", ["a"]), Gazetteer.from_entries("LOC", ["b"])]
        with pytest.raises(CorpusError):
            match_gazetteer([self.sentence()], gaz, self.queries)


class TestNormalization:
    def test_casefold_and_whitespace(self):
        assert normalize("  New \t York  CITY ") == "new york city"

    def test_nfc(self):
        assert normalize("Café") == normalize("Café")

    def test_cjk_surface_has_no_spaces(self):
        assert surface(["北", "京"]) == "北京"
        assert surface(["in", "北", "京", "city"]) == "in 北京 city"

    @given(st.text())
    def test_idempotent(self, s):
        assert normalize(normalize(s)) == normalize(s)


class TestGazetteer:
    def test_rejects_empty(self):
        with pytest.raises(CorpusError):
            Gazetteer.from_entries("LOC", ["", "  "])

    def test_load_uses_stem_as_type(self, tmp_path):
        (tmp_path / "LOC.txt").write_text("Paris\n\nNew  York\n", encoding="utf-8")
        (tmp_path / "notes.md").write_text("ignored", encoding="utf-8")
        (gaz,) = corpus.load_gazetteers(tmp_path)
        assert gaz.entity_type == "LOC"
        assert gaz.surface_forms == {"paris", "new york"}
        assert gaz.matches(["NEW", "YORK"])

    def test_empty_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            corpus.load_gazetteers(tmp_path)


class TestQueryTable:
    def test_general_entry_reserved(self):
        assert QueryTable({"LOC": "x"})[GENERAL_TYPE] == "Find Entities"

    def test_empty_question_rejected(self):
        with pytest.raises(CorpusError):
            QueryTable({"LOC": " "})

    def test_enumerated_count(self):
        assert count_enumerated("find persons such as politicians, athletes, musicians") == 3
        assert count_enumerated("find cities, rivers, etc.") == 2
        assert count_enumerated("产品名称，包括衣物、鞋子、食品") == 3

    def test_explicit_subtypes_win(self):
        table = QueryTable.from_json({"HC": {"question": "a: b, c", "subtypes": 23}})
        assert table.subtype_count("HC") == 23
        assert QueryTable.from_json(table.to_json()).to_json() == table.to_json()

    def test_default_tables(self):
        zh = corpus.default_query_table("zh")
        en = corpus.default_query_table("en")
        assert zh.subtype_count("HC") == 23
        assert {"PER", "LOC", "ORG"} <= set(en)


class TestMRCExample:
    def test_label_length_mismatch(self):
        with pytest.raises(CorpusError):
            MRCExample(("q",), ("a", "b"), [1, 0, 0], [1, 0], "T")

    def test_unequal_counts(self):
        with pytest.raises(CorpusError):
            MRCExample(("q",), ("a", "b"), [1, 1], [0, 1], "T")

    def test_overlap_rejected(self):
        with pytest.raises(CorpusError):
            MRCExample(("q",), ("a", "b", "c", "d"), [1, 1, 0, 0], [0, 0, 1, 1], "T")

    def test_json_round_trip(self):
        ex = MRCExample(("q",), ("a", "b", "c"), *span_labels(3, [(0, 1)]), "T")
        assert MRCExample.from_json(json.loads(json.dumps(ex.to_json()))) == ex


def test_pair_boundaries_nearest_end():
    assert pair_boundaries([1, 0, 1, 0], [0, 1, 0, 1]) == [(0, 1), (2, 3)]
    assert pair_boundaries([1, 1, 0], [0, 1, 1]) == [(0, 1)]
    assert pair_boundaries([0, 1], [1, 0]) == []


anchors_strategy = st.lists(st.tuples(st.integers(0, 11), st.integers(0, 3)), max_size=6)


@st.composite
def anchored(draw):
    n = draw(st.integers(1, 12))
    spans = []
    for start, length in draw(anchors_strategy):
        end = start + length
        if end < n and all(end < s or start > e for s, e in spans):
            spans.append((start, end))
    words = draw(st.lists(st.sampled_from(["Paris", "rome", "x", "y", "Bob", "北", "京"]), min_size=n, max_size=n))
    return AnchoredSentence(tuple(words), tuple((s, e, "t") for s, e in sorted(spans)))


GAZ = [Gazetteer.from_entries("LOC", ["paris", "rome", "北京", "x y"]), Gazetteer.from_entries("PER", ["bob"])]
QUERIES = QueryTable({"LOC": "find locations", "PER": "find persons"})


@settings(max_examples=200, deadline=None)
@given(st.lists(anchored(), min_size=1, max_size=4))
def test_dataset_properties(sentences):
    general = build_general_dataset(sentences)
    typed = match_gazetteer(sentences, GAZ, QUERIES)
    assert len(typed) == len(GAZ) * len(sentences)
    for sent, g in zip(sentences, general):
        # round trip: spans of D_g are exactly the anchors
        assert g.spans == [(s, e) for s, e, _ in sent.anchors]
    for k, ex in enumerate(typed):
        # typed labels are a subset of anchor spans
        assert set(ex.spans) <= set(general[k // len(GAZ)].spans)
    # order independence: a sentence's output depends only on that sentence
    alone = [match_gazetteer([s], GAZ, QUERIES) for s in sentences]
    assert [ex for chunk in alone for ex in chunk] == typed


def test_golden_matches_hand_labels():
    """The checked-in golden files agree with spans worked out by hand."""
    d_s = corpus.read_examples(DATA / "golden" / "D_s.jsonl")
    expected = {
        (0, "LOC"): [(4, 4), (6, 6)], (0, "PER"): [(0, 1)],
        (1, "LOC"): [(5, 5)], (1, "ORG"): [(1, 2)],
        (2, "LOC"): [(5, 5)], (2, "ORG"): [(5, 5)], (2, "PER"): [(2, 3)],
        (3, "LOC"): [(0, 2)],
        (4, "LOC"): [(2, 3)], (4, "PER"): [(6, 7)],
        (5, "LOC"): [(0, 0), (4, 4)],
        (6, "LOC"): [(5, 5)], (6, "ORG"): [(1, 2)],
        (7, "LOC"): [(6, 6)], (7, "ORG"): [(3, 4)], (7, "PER"): [(0, 1)],
        (9, "LOC"): [(0, 1)],
    }
    types = ["LOC", "ORG", "PER"]
    assert len(d_s) == 30
    for k, ex in enumerate(d_s):
        assert ex.entity_type == types[k % 3]
        assert ex.spans == expected.get((k // 3, ex.entity_type), [])
