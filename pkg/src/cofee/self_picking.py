"""Iterative self-picking on the gazetteer-typed dataset.

Each iteration trains one epoch on the current labels, scores the model on the
validation set (keeping the best parameters together with the labels they were
trained on), then replaces every example's labels with the spans the model
itself extracts at a low picking threshold.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

from .corpus import MRCExample
from .model import decode_entities

logger = logging.getLogger(__name__)


@dataclass
class RelabelConfig:
    delta: float = 0.1
    epochs_e2: int = 10
    patience: int = 2
    override: bool = False  # allow delta in [0.5, 1)
    passes: int = 1         # passes over the label set per iteration

    def __post_init__(self):
        upper = 1.0 if self.override else 0.5
        if not 0 < self.delta < upper:
            raise ValueError(f"picking threshold delta={self.delta} must lie in (0, {upper})")
        if self.epochs_e2 < 1 or self.patience < 1 or self.passes < 1:
            raise ValueError("epochs_e2, patience and passes must be >= 1")


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    val_f1: float
    added: int
    removed: int
    improved: bool
    checkpoint: str | None = None

    def to_json(self) -> dict:
        return asdict(self)


def relabel_dataset(model, dataset: Sequence[MRCExample], delta: float) -> list[MRCExample]:
    """New labels are exactly the spans decoded at ``delta``; everything else is kept."""
    scores = model.span_scores(dataset)
    out = []
    for ex, sc in zip(dataset, scores):
        try:
            spans = [(m.start, m.end) for m in decode_entities(sc, delta, ex.entity_type)]
            out.append(ex.with_spans(spans))
        except Exception:
            logger.exception("relabeling failed; keeping previous labels")
            out.append(ex)
    return out


def label_changes(old: Sequence[MRCExample], new: Sequence[MRCExample]) -> tuple[int, int]:
    added = removed = 0
    for a, b in zip(old, new):
        sa, sb = set(a.spans), set(b.spans)
        added += len(sb - sa)
        removed += len(sa - sb)
    return added, removed


def nee_stage(
    model,
    train: Sequence[MRCExample],
    val: Sequence[MRCExample],
    config: RelabelConfig,
    trainer,
    on_iteration: Callable[[IterationRecord, list[MRCExample]], None] | None = None,
):
    """Train/score/relabel loop; returns ``(model, best_labels, records)``.

    ``model`` is left holding the best-scoring parameters.  ``trainer`` supplies
    ``train_epoch(examples)`` and ``score(examples)``; ``on_iteration`` receives
    each record with the label set for the next iteration.
    """
    if not val:
        raise ValueError("validation set is empty")
    current = list(train)
    best_state, best_labels, best_score = None, current, -1.0
    stale = 0
    records = []
    for it in range(1, config.epochs_e2 + 1):
        for _ in range(config.passes):
            loss = trainer.train_epoch(current)
        f1 = trainer.score(val)
        improved = f1 > best_score
        if improved:
            best_state = copy.deepcopy(model.state_dict())
            best_labels, best_score = current, f1
            stale = 0
        else:
            stale += 1
        last = stale >= config.patience or it == config.epochs_e2
        # the final relabel would never be trained on
        relabeled = current if last else relabel_dataset(model, current, config.delta)
        added, removed = label_changes(current, relabeled)
        record = IterationRecord(it, loss, f1, added, removed, improved)
        records.append(record)
        logger.info("nee iteration %d: loss %.4f val_f1 %.4f (+%d/-%d labels)", it, loss, f1, added, removed)
        if on_iteration is not None:
            on_iteration(record, relabeled)
        if last:
            break
        current = relabeled
    model.load_state_dict(best_state)
    return model, best_labels, records


def missed_span_recovery(initial: Sequence[MRCExample], relabeled: Sequence[MRCExample],
                         gold: Mapping[tuple[tuple[str, ...], str], set[tuple[int, int]]]) -> tuple[int, int]:
    """Count gold spans absent from ``initial`` labels and how many of them ``relabeled`` carries.

    ``gold`` maps ``(context tokens, entity type)`` to gold spans.  Returns ``(missed, recovered)``.
    """
    missed = recovered = 0
    for before, after in zip(initial, relabeled):
        if before.context != after.context or before.entity_type != after.entity_type:
            raise ValueError("label sets are not aligned example by example")
        lost = gold.get((tuple(before.context), before.entity_type), set()) - set(before.spans)
        missed += len(lost)
        recovered += len(lost & set(after.spans))
    return missed, recovered
