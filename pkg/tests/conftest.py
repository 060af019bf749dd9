from __future__ import annotations

from pathlib import Path

import pytest
import torch

from cofee.corpus import MRCExample, span_labels
from cofee.model import SpanExtractor, Vocab

DATA = Path(__file__).parent / "data"
FIXTURE = Path(__file__).parent.parent / "fixture"

# criterion number -> (passed, detail); filled in by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def tiny_model(tokens=("a", "b", "c", "d", "e", "q", "r"), dim: int = 8, layers: int = 1, heads: int = 2,
               ff_dim: int = 16, max_positions: int = 24, seed: int = 0, dtype=torch.float32) -> SpanExtractor:
    torch.manual_seed(seed)
    model = SpanExtractor(Vocab(tokens), dim=dim, layers=layers, heads=heads, ff_dim=ff_dim,
                          max_positions=max_positions, dropout=0.0)
    return model.to(dtype)


def example(context, spans=(), query=("q",), entity_type="T") -> MRCExample:
    context = tuple(context)
    return MRCExample(tuple(query), context, *span_labels(len(context), spans), entity_type)


@pytest.fixture
def model() -> SpanExtractor:
    return tiny_model()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")
