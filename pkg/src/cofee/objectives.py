"""Training losses.

Boundary cross-entropy (start + end, averaged over context tokens), the
pseudo-label cluster loss weighted by intra-cluster compactness, and the
stage-3 composite ``mrc + gamma * clus``.
"""

from __future__ import annotations

import logging

import numpy as np
import torch

from .model import SpanScores

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12
VARIANCE_FLOOR = 1e-6


_clamp_reported = False


def _pick(values: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return values.gather(-1, labels.long().unsqueeze(-1)).squeeze(-1)


def _true_class_nll(probs: torch.Tensor, labels: torch.Tensor, logits: torch.Tensor | None = None) -> torch.Tensor:
    """-log p(true class); from logits when given, else from probabilities clamped at PROB_EPS."""
    global _clamp_reported
    if logits is not None:
        return -_pick(logits.log_softmax(-1), labels)
    p = _pick(probs, labels)
    if not _clamp_reported and bool((p < PROB_EPS).any()):
        logger.warning("true-class probability below %.0e clamped", PROB_EPS)
        _clamp_reported = True
    return -torch.log(p.clamp_min(PROB_EPS))


def _token_mean(nll: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if nll.dim() == 1:
        return nll.mean() if mask is None else (nll * mask).sum() / mask.sum()
    if mask is None:
        return nll.mean(-1).mean()
    mask = mask.to(nll.dtype)
    return ((nll * mask).sum(-1) / mask.sum(-1).clamp_min(1)).mean()


def mrc_loss(scores: SpanScores, start_labels, end_labels, mask: torch.Tensor | None = None) -> torch.Tensor:
    """L_start + L_end, each the mean over tokens of -log p(true class).

    Batched scores (B, n, 2) take a (B, n) mask of real tokens; the per-example
    token means are then averaged over the batch.
    """
    start_labels = torch.as_tensor(start_labels, device=scores.start_probs.device)
    end_labels = torch.as_tensor(end_labels, device=scores.end_probs.device)
    if start_labels.shape != scores.start_probs.shape[:-1] or end_labels.shape != scores.end_probs.shape[:-1]:
        raise ValueError("label shape does not match scores")
    l_start = _token_mean(_true_class_nll(scores.start_probs, start_labels, scores.start_logits), mask)
    l_end = _token_mean(_true_class_nll(scores.end_probs, end_labels, scores.end_logits), mask)
    return l_start + l_end


def cluster_variances(assignments, vectors, k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster sum of squared distances to the center, and the centers."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim == 1:
        vectors = vectors[:, None]
    assignments = np.asarray(assignments, dtype=np.int64)
    k = int(assignments.max()) + 1 if k is None else k
    counts = np.bincount(assignments, minlength=k)
    if (counts == 0).any():
        raise ValueError(f"empty clusters {np.flatnonzero(counts == 0).tolist()}; repair before computing variances")
    centers = np.zeros((k, vectors.shape[1]))
    np.add.at(centers, assignments, vectors)
    centers /= counts[:, None]
    sq = ((vectors - centers[assignments]) ** 2).sum(1)
    variances = np.bincount(assignments, weights=sq, minlength=k)
    return variances, centers


def cluster_weights(variances) -> np.ndarray:
    """Softmax of inverse variances: compact clusters get more weight.

    Variances are floored at ``VARIANCE_FLOOR`` before inversion.
    """
    v = np.asarray(variances, dtype=np.float64)
    if (v < VARIANCE_FLOOR).all():
        logger.warning("all cluster variances below floor; using uniform weights")
        return np.full(v.shape, 1.0 / v.size)
    inv = 1.0 / np.maximum(v, VARIANCE_FLOOR)
    w = np.exp(inv - inv.max())
    return w / w.sum()


def cluster_loss(probs: torch.Tensor, pseudo_labels, alpha, logits: torch.Tensor | None = None) -> torch.Tensor:
    """-(1/M) sum_i alpha[y_i] * log P_c(y_i | e_i).

    ``probs`` is (M, K); pass the pre-softmax ``logits`` too for a log-space evaluation.
    """
    labels = torch.as_tensor(pseudo_labels, dtype=torch.long, device=probs.device)
    if labels.numel() == 0:
        raise ValueError("cluster loss needs at least one entity")
    if labels.min() < 0 or labels.max() >= probs.shape[-1]:
        raise ValueError("pseudo labels out of range")
    alpha = torch.as_tensor(alpha, dtype=probs.dtype, device=probs.device)
    return (alpha[labels] * _true_class_nll(probs, labels, logits)).mean()


def fet_loss(mrc: torch.Tensor, clus: torch.Tensor, gamma: float) -> torch.Tensor:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return mrc + gamma * clus
