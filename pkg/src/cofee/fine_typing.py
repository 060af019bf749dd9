"""Cluster-guided fine-grained typing.

Labeled entity spans are sum-pooled from the encoder, grouped with k-Means,
and the cluster indices serve as pseudo labels for an auxiliary per-type
classifier.  The clustering is redone after every training epoch with the
updated encoder.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .corpus import MRCExample
from .model import SpanExtractor, pool_entity
from .objectives import cluster_loss, cluster_variances, cluster_weights, fet_loss
from .training import sub_seed

logger = logging.getLogger(__name__)


@dataclass
class ClusterModel:
    centers: np.ndarray        # (K, d)
    variances: np.ndarray      # (K,) unnormalized sums of squared distances
    assignments: np.ndarray    # (M,)
    inertia: float
    history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centers)


def _sq_dists(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - centers[None, :, :]) ** 2).sum(-1)


def _plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, k):
        d2 = _sq_dists(X, np.array(centers)).min(1)
        total = d2.sum()
        if total > 0:
            centers.append(X[rng.choice(len(X), p=d2 / total)])
        else:
            centers.append(X[rng.integers(len(X))])
    return np.array(centers)


def _repair_empty(X: np.ndarray, assign: np.ndarray, centers: np.ndarray, k: int) -> None:
    # move the point farthest from its center (in a cluster with >1 member) into each empty cluster
    for empty in np.flatnonzero(np.bincount(assign, minlength=k) == 0):
        counts = np.bincount(assign, minlength=k)
        d2 = ((X - centers[assign]) ** 2).sum(1)
        d2[counts[assign] < 2] = -1.0
        far = int(np.argmax(d2))
        assign[far] = empty
        centers[empty] = X[far]


def _lloyd(X: np.ndarray, k: int, assign: np.ndarray, centers: np.ndarray, max_iter: int, tol: float,
           history: list[float]) -> np.ndarray:
    for _ in range(max_iter):
        _repair_empty(X, assign, centers, k)
        variances, new_centers = cluster_variances(assign, X, k)
        inertia = float(variances.sum())
        if history and inertia > history[-1] + 1e-9 * max(1.0, history[-1]):
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(1)).max())
        centers = new_centers
        new_assign = _sq_dists(X, centers).argmin(1)
        stable = np.array_equal(new_assign, assign)
        assign = new_assign
        if stable or shift < tol:
            break
    _repair_empty(X, assign, centers, k)
    return assign


def _hartigan(X: np.ndarray, assign: np.ndarray, k: int) -> bool:
    """Single-point moves that lower the inertia; escapes some Lloyd fixed points."""
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    centers = np.zeros((k, X.shape[1]))
    np.add.at(centers, assign, X)
    centers /= counts[:, None]
    moved = False
    for i, x in enumerate(X):
        a = assign[i]
        if counts[a] < 2:
            continue
        d2 = ((centers - x) ** 2).sum(1)
        leave = counts[a] / (counts[a] - 1) * d2[a]
        join = counts / (counts + 1) * d2
        join[a] = np.inf
        b = int(np.argmin(join))
        if join[b] < leave - 1e-12 * max(1.0, leave):
            centers[a] = (centers[a] * counts[a] - x) / (counts[a] - 1)
            centers[b] = (centers[b] * counts[b] + x) / (counts[b] + 1)
            counts[a] -= 1
            counts[b] += 1
            assign[i] = b
            moved = True
    return moved


def _fit(X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float) -> ClusterModel:
    centers = _plus_plus(X, k, rng)
    assign = _sq_dists(X, centers).argmin(1)
    history: list[float] = []
    assign = _lloyd(X, k, assign, centers, max_iter, tol, history)
    for _ in range(max_iter):
        if not _hartigan(X, assign, k):
            break
        _, centers = cluster_variances(assign, X, k)
        assign = _lloyd(X, k, assign, centers, max_iter, tol, history)
    variances, centers = cluster_variances(assign, X, k)
    return ClusterModel(centers, variances, assign, float(variances.sum()), history)


def kmeans(vectors, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-12,
           restarts: int = 10) -> ClusterModel:
    """Lloyd's algorithm from k-means++ seeding, polished with Hartigan moves.

    Returns the lowest-inertia result of ``restarts`` runs.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if not np.isfinite(X).all():
        raise ValueError("non-finite entity vectors")
    if k < 1 or len(X) < k:
        raise ValueError(f"need at least K={k} vectors, got {len(X)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        model = _fit(X, k, rng, max_iter, tol)
        if best is None or model.inertia < best.inertia:
            best = model
    return best


@dataclass
class PseudoDataset:
    entity_type: str
    entities: list[tuple[int, int, int]]   # (example index, start, end)
    labels: np.ndarray
    alpha: np.ndarray

    def to_records(self) -> list[dict]:
        return [
            {"sentence_id": i, "span": [s, e], "pseudo_label": int(y)}
            for (i, s, e), y in zip(self.entities, self.labels)
        ]


def entity_references(examples: Sequence[MRCExample], entity_type: str | None = None) -> list[tuple[int, int, int]]:
    return [
        (i, s, e)
        for i, ex in enumerate(examples)
        if entity_type is None or ex.entity_type == entity_type
        for s, e in ex.spans
    ]


@torch.no_grad()
def pool_entities(model: SpanExtractor, examples: Sequence[MRCExample],
                  refs: Sequence[tuple[int, int, int]], batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    by_example: dict[int, list[int]] = {}
    for r, (i, _, _) in enumerate(refs):
        by_example.setdefault(i, []).append(r)
    out = np.zeros((len(refs), model.dim))
    ids = sorted(by_example)
    try:
        for c in range(0, len(ids), batch_size):
            chunk = ids[c : c + batch_size]
            batch = model.make_batch([(examples[i].query, examples[i].context) for i in chunk])
            H = model.encode_batch(batch)
            for b, i in enumerate(chunk):
                for r in by_example[i]:
                    _, s, e = refs[r]
                    out[r] = pool_entity(H[b], (s, e)).double().cpu().numpy()
    finally:
        model.train(was_training)
    return out


def build_pseudo_dataset(model: SpanExtractor, examples: Sequence[MRCExample], k: int, seed: int = 0,
                         entity_type: str | None = None) -> tuple[PseudoDataset, ClusterModel]:
    """Cluster the labeled spans of ``examples`` (optionally of one type) into K pseudo sub-types."""
    refs = entity_references(examples, entity_type)
    if len(refs) < k:
        raise ValueError(
            f"only {len(refs)} labeled entities{f' of type {entity_type}' if entity_type else ''} "
            f"for K={k} clusters; use a smaller K"
        )
    clusters = kmeans(pool_entities(model, examples, refs), k, seed=seed)
    alpha = cluster_weights(clusters.variances)
    name = entity_type if entity_type is not None else examples[refs[0][0]].entity_type
    return PseudoDataset(name, refs, clusters.assignments.copy(), alpha), clusters


def build_pseudo_datasets(model: SpanExtractor, examples: Sequence[MRCExample], ks: Mapping[str, int],
                          seed: int = 0) -> dict[str, tuple[PseudoDataset, ClusterModel]]:
    """Per-type clustering: each entity type has its own K and cluster head."""
    types = sorted({ex.entity_type for ex in examples})
    return {
        t: build_pseudo_dataset(model, examples, ks[t], sub_seed(seed, f"cluster:{t}"), entity_type=t)
        for t in types
    }


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_f1: float
    improved: bool
    inertia: dict
    alpha: dict

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch, "loss": self.loss, "val_f1": self.val_f1, "improved": self.improved,
            "inertia": self.inertia, "alpha": self.alpha,
        }


def fet_objective(model: SpanExtractor, examples: Sequence[MRCExample],
                  pseudo: Mapping[str, tuple[PseudoDataset, ClusterModel]], gamma: float):
    """Training objective mrc + gamma * clus, the cluster term over the batch's pseudo-labeled entities."""
    per_example: dict[int, list[tuple[str, int, int, int]]] = {}
    for t, (ds, _) in pseudo.items():
        for (i, s, e), y in zip(ds.entities, ds.labels):
            per_example.setdefault(i, []).append((t, s, e, int(y)))
    alphas = {t: ds.alpha for t, (ds, _) in pseudo.items()}

    def objective(idx, H, ctx_mask, mrc):
        grouped: dict[str, tuple[list, list]] = {}
        for b, i in enumerate(idx):
            for t, s, e, y in per_example.get(i, ()):
                vecs, labels = grouped.setdefault(t, ([], []))
                vecs.append(pool_entity(H[b], (s, e)))
                labels.append(y)
        m_total = sum(len(labels) for _, labels in grouped.values())
        if m_total == 0 or gamma == 0:
            return mrc
        clus = 0
        for t, (vecs, labels) in grouped.items():
            logits = model.cluster_logits(torch.stack(vecs), t)
            clus = clus + cluster_loss(logits.softmax(-1), labels, alphas[t], logits) * (len(labels) / m_total)
        return fet_loss(mrc, clus, gamma)

    return objective


def fet_stage(
    model: SpanExtractor,
    best_labels: Sequence[MRCExample],
    val: Sequence[MRCExample],
    ks: Mapping[str, int],
    gamma: float,
    epochs_e3: int,
    trainer,
    seed: int = 0,
    on_epoch: Callable[[EpochRecord, dict], None] | None = None,
):
    """Alternate cluster -> train -> score; returns ``(model, records)`` with ``model`` at its best epoch.

    The best score starts at 0, so the incoming parameters are returned if no
    epoch scores above it.
    """
    if not val:
        raise ValueError("validation set is empty")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    for t in sorted({ex.entity_type for ex in best_labels}):
        model.set_cluster_count(t, ks[t])
    trainer.refresh_optimizer()
    pseudo = build_pseudo_datasets(model, best_labels, ks, sub_seed(seed, "kmeans:0"))
    best_state, best_score = copy.deepcopy(model.state_dict()), 0.0
    records = []
    for epoch in range(1, epochs_e3 + 1):
        loss = trainer.train_epoch(best_labels, fet_objective(model, best_labels, pseudo, gamma))
        f1 = trainer.score(val)
        improved = f1 > best_score
        if improved:
            best_state, best_score = copy.deepcopy(model.state_dict()), f1
        record = EpochRecord(
            epoch, loss, f1, improved,
            {t: c.inertia for t, (_, c) in pseudo.items()},
            {t: ds.alpha.tolist() for t, (ds, _) in pseudo.items()},
        )
        records.append(record)
        logger.info("fet epoch %d: loss %.4f val_f1 %.4f", epoch, loss, f1)
        if on_epoch is not None:
            on_epoch(record, pseudo)
        if epoch < epochs_e3:
            pseudo = build_pseudo_datasets(model, best_labels, ks, sub_seed(seed, f"kmeans:{epoch}"))
    model.load_state_dict(best_state)
    return model, records
