"""Minibatch training of the span extractor on MRC examples."""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import MRCExample
from .evaluation import score
from .model import SpanExtractor
from .objectives import mrc_loss

# objective(example_indices, H, ctx_mask, mrc_loss) -> loss to minimize
Objective = Callable[[Sequence[int], torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def sub_seed(seed: int, name: str) -> int:
    """Independent, reproducible seed for a named stage or component."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def label_tensors(examples: Sequence[MRCExample], n: int, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    start = torch.zeros(len(examples), n, dtype=torch.long)
    end = torch.zeros(len(examples), n, dtype=torch.long)
    for b, ex in enumerate(examples):
        start[b, : len(ex.context)] = torch.tensor(ex.start, dtype=torch.long)
        end[b, : len(ex.context)] = torch.tensor(ex.end, dtype=torch.long)
    return start.to(device), end.to(device)


class Trainer:
    """Owns the optimizer and shuffling RNG for one training stage."""

    def __init__(self, model: SpanExtractor, lr: float, weight_decay: float = 0.01,
                 batch_size: int = 32, seed: int = 0):
        self.model = model
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        torch.manual_seed(seed)
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay, foreach=True)

    def refresh_optimizer(self) -> None:
        """Pick up parameters added since construction (e.g. new cluster heads)."""
        known = {id(p) for g in self.optimizer.param_groups for p in g["params"]}
        new = [p for p in self.model.parameters() if id(p) not in known]
        if new:
            self.optimizer.add_param_group({"params": new})

    def train_epoch(self, examples: Sequence[MRCExample], objective: Objective | None = None) -> float:
        if not examples:
            raise ValueError("cannot train on an empty dataset")
        model = self.model
        model.train()
        order = self.rng.permutation(len(examples))
        total, weight = 0.0, 0
        for i in range(0, len(order), self.batch_size):
            idx = order[i : i + self.batch_size].tolist()
            chunk = [examples[j] for j in idx]
            batch = model.make_batch([(ex.query, ex.context) for ex in chunk])
            H = model.encode_batch(batch)
            start, end = label_tensors(chunk, H.shape[1], H.device)
            loss = mrc_loss(model.predict_boundaries(H), start, end, batch.ctx_mask)
            if objective is not None:
                loss = objective(idx, H, batch.ctx_mask, loss)
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            total += loss.item() * len(idx)
            weight += len(idx)
        return total / weight

    def score(self, examples: Sequence[MRCExample]) -> float:
        return score(self.model, examples)
