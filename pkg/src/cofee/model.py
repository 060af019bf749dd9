"""MRC-style span extractor.

The query and context are encoded jointly as ``[CLS] query [SEP] context [SEP]``;
only the context rows of the final layer are exposed as ``H`` (n x d).  Two
binary softmax heads score every context token as a start / end boundary, and a
per-type cluster head classifies pooled entity vectors into pseudo sub-types.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import MRCExample, pair_boundaries

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
CHECKPOINT_FORMAT = "cofee-checkpoint"
CHECKPOINT_VERSION = 1


class CapacityError(ValueError):
    pass


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = [PAD, UNK, CLS, SEP]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, 1)

    @classmethod
    def from_examples(cls, examples: Iterable[MRCExample]) -> "Vocab":
        vocab = cls()
        for ex in examples:
            for tok in ex.query:
                vocab.add(tok)
            for tok in ex.context:
                vocab.add(tok)
        return vocab


SHAPES = ("special", "lower", "title", "upper", "digit", "punct", "other")


@functools.lru_cache(maxsize=65536)
def token_shape(token: str) -> int:
    """Coarse orthographic class; lets the encoder generalize to unseen surface forms."""
    if token.isdigit():
        return 4
    if token.isalpha() and token.isascii():
        if token.islower():
            return 1
        if token.isupper():
            return 3
        return 2 if token[0].isupper() else 6
    if all(not c.isalnum() for c in token):
        return 5
    return 6


class EncoderInterface(Protocol):
    """Anything that maps (query, context) to one d-dim row per context token."""

    dim: int

    def encode(self, query: Sequence[str], context: Sequence[str]) -> torch.Tensor: ...

    def parameters(self): ...


@dataclass
class SpanScores:
    start_probs: torch.Tensor  # (n, 2) or (B, n, 2)
    end_probs: torch.Tensor
    # kept when available so losses can work in log space
    start_logits: torch.Tensor | None = None
    end_logits: torch.Tensor | None = None

    @classmethod
    def from_logits(cls, start_logits: torch.Tensor, end_logits: torch.Tensor) -> "SpanScores":
        return cls(start_logits.softmax(-1), end_logits.softmax(-1), start_logits, end_logits)

    def positive(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            self.start_probs[..., 1].detach().cpu().numpy(),
            self.end_probs[..., 1].detach().cpu().numpy(),
        )


@dataclass(frozen=True)
class EntityMention:
    start: int
    end: int
    entity_type: str
    score: float = field(default=1.0, compare=False)

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.start, self.end, self.entity_type)


class Block(nn.Module):
    """Post-norm transformer block with GELU feed-forward."""

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        b, L, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).view(b, L, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        att = att.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        y = (att.softmax(-1) @ v).transpose(1, 2).reshape(b, L, d)
        x = self.norm1(x + self.drop(self.out(y)))
        return self.norm2(x + self.drop(self.ff(x)))


class TransformerEncoder(nn.Module):
    def __init__(self, vocab_size: int, dim: int = 64, layers: int = 2, heads: int = 4,
                 ff_dim: int = 128, max_positions: int = 384, dropout: float = 0.1):
        super().__init__()
        self.dim = dim
        self.max_positions = max_positions
        self.tok = nn.Embedding(vocab_size, dim)
        self.shape = nn.Embedding(len(SHAPES), dim)
        self.pos = nn.Embedding(max_positions, dim)
        self.norm = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(Block(dim, heads, ff_dim, dropout) for _ in range(layers))

    def forward(self, ids: torch.Tensor, shapes: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.drop(self.norm(self.tok(ids) + self.shape(shapes) + self.pos(positions)[None]))
        for block in self.blocks:
            x = block(x, pad_mask)
        return x


@dataclass
class Batch:
    ids: torch.Tensor        # (B, L) packed [CLS] q [SEP] x [SEP]
    shapes: torch.Tensor     # (B, L) token_shape of each packed token
    pad_mask: torch.Tensor   # (B, L) True at padding
    ctx_index: torch.Tensor  # (B, n_max) positions of context tokens in the packed row
    ctx_mask: torch.Tensor   # (B, n_max) True at real context tokens
    lengths: list[int]


class SpanExtractor(nn.Module):
    def __init__(self, vocab: Vocab, dim: int = 64, layers: int = 2, heads: int = 4,
                 ff_dim: int = 128, max_positions: int = 384, dropout: float = 0.1):
        super().__init__()
        self.vocab = vocab
        self.dims = dict(dim=dim, layers=layers, heads=heads, ff_dim=ff_dim,
                         max_positions=max_positions, dropout=dropout)
        self.dim = dim
        self.encoder = TransformerEncoder(len(vocab), **self.dims)
        self.start_head = nn.Linear(dim, 2)
        self.end_head = nn.Linear(dim, 2)
        self.cluster_heads = nn.ModuleDict()

    # -- encoding ---------------------------------------------------------
    def make_batch(self, pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> Batch:
        rows, shape_rows, offsets, lengths = [], [], [], []
        for k, (query, context) in enumerate(pairs):
            total = len(query) + len(context) + 3
            if total > self.encoder.max_positions:
                raise CapacityError(
                    f"example {k}: {total} positions (query {len(query)}, context {len(context)}) "
                    f"exceeds encoder capacity {self.encoder.max_positions}"
                )
            v = self.vocab
            rows.append([v[CLS]] + [v[t] for t in query] + [v[SEP]] + [v[t] for t in context] + [v[SEP]])
            shape_rows.append([0] + [token_shape(t) for t in query] + [0] + [token_shape(t) for t in context] + [0])
            offsets.append(len(query) + 2)
            lengths.append(len(context))
        device = self.start_head.weight.device
        L = max(len(r) for r in rows)
        n = max(max(lengths), 1)
        ids = torch.zeros(len(rows), L, dtype=torch.long)
        shapes = torch.zeros(len(rows), L, dtype=torch.long)
        ctx_index = torch.zeros(len(rows), n, dtype=torch.long)
        ctx_mask = torch.zeros(len(rows), n, dtype=torch.bool)
        for b, (row, shape_row, off, length) in enumerate(zip(rows, shape_rows, offsets, lengths)):
            ids[b, : len(row)] = torch.tensor(row)
            shapes[b, : len(row)] = torch.tensor(shape_row)
            ctx_index[b, :length] = torch.arange(off, off + length)
            ctx_mask[b, :length] = True
        return Batch(ids.to(device), shapes.to(device), (ids == 0).to(device), ctx_index.to(device), ctx_mask.to(device), lengths)

    def encode_batch(self, batch: Batch) -> torch.Tensor:
        """(B, n_max, d) context representations; rows beyond each length are padding."""
        hidden = self.encoder(batch.ids, batch.shapes, batch.pad_mask)
        index = batch.ctx_index[..., None].expand(-1, -1, hidden.shape[-1])
        return hidden.gather(1, index)

    def encode(self, query: Sequence[str], context: Sequence[str]) -> torch.Tensor:
        batch = self.make_batch([(query, context)])
        return self.encode_batch(batch)[0, : len(context)]

    # -- heads --------------------------------------------------------------
    def predict_boundaries(self, H: torch.Tensor) -> SpanScores:
        if H.shape[-1] != self.start_head.in_features:
            raise ValueError(f"H has width {H.shape[-1]}, heads expect {self.start_head.in_features}")
        return SpanScores.from_logits(self.start_head(H), self.end_head(H))

    def set_cluster_count(self, entity_type: str, k: int) -> None:
        """Create (or re-create, when K changes) the cluster head for one entity type."""
        if k < 1:
            raise ValueError("K must be >= 1")
        head = self.cluster_heads[entity_type] if entity_type in self.cluster_heads else None
        if head is None or head.out_features != k:
            ref = self.start_head.weight
            self.cluster_heads[entity_type] = nn.Linear(self.dim, k).to(device=ref.device, dtype=ref.dtype)

    def cluster_counts(self) -> dict[str, int]:
        return {t: h.out_features for t, h in self.cluster_heads.items()}

    def cluster_logits(self, e: torch.Tensor, entity_type: str) -> torch.Tensor:
        if entity_type not in self.cluster_heads:
            raise KeyError(f"no cluster head for {entity_type!r}; call set_cluster_count first")
        return self.cluster_heads[entity_type](e)

    def predict_cluster(self, e: torch.Tensor, entity_type: str) -> torch.Tensor:
        return self.cluster_logits(e, entity_type).softmax(-1)

    # -- inference ----------------------------------------------------------
    @torch.no_grad()
    def span_scores(self, examples: Sequence[MRCExample], batch_size: int = 64) -> list[SpanScores]:
        was_training = self.training
        self.eval()
        out = []
        try:
            for i in range(0, len(examples), batch_size):
                chunk = examples[i : i + batch_size]
                batch = self.make_batch([(ex.query, ex.context) for ex in chunk])
                scores = self.predict_boundaries(self.encode_batch(batch))
                for b, n in enumerate(batch.lengths):
                    out.append(SpanScores(scores.start_probs[b, :n], scores.end_probs[b, :n]))
        finally:
            self.train(was_training)
        return out


def decode_entities(scores: SpanScores, threshold: float = 0.5, entity_type: str = "") -> list[EntityMention]:
    """Spans whose start and end probabilities both exceed ``threshold``.

    Candidates are paired by nearest end (see :func:`cofee.corpus.pair_boundaries`).
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    p_start, p_end = scores.positive()
    spans = pair_boundaries(p_start > threshold, p_end > threshold)
    return [EntityMention(s, e, entity_type, float(min(p_start[s], p_end[e]))) for s, e in spans]


def pool_entity(H: torch.Tensor, span: tuple[int, int]) -> torch.Tensor:
    start, end = span
    if not 0 <= start <= end < H.shape[0]:
        raise IndexError(f"span {span} out of range for {H.shape[0]} tokens")
    return H[start : end + 1].sum(0)


def predict_boundaries(H: torch.Tensor, model: SpanExtractor) -> SpanScores:
    return model.predict_boundaries(H)


def predict_cluster(e: torch.Tensor, model: SpanExtractor, entity_type: str) -> torch.Tensor:
    return model.predict_cluster(e, entity_type)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | Path, model: SpanExtractor, config: dict | None = None,
                    extras: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": dict(model.dims),
        "vocab": list(model.vocab.itos),
        "clusters": model.cluster_counts(),
        "dtype": str(model.start_head.weight.dtype).replace("torch.", ""),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "config": config or {},
        "extras": extras or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[SpanExtractor, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a cofee checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {payload['version']} is newer than supported")
    vocab = Vocab()
    for tok in payload["vocab"][4:]:
        vocab.add(tok)
    model = SpanExtractor(vocab, **payload["dims"])
    for entity_type, k in payload["clusters"].items():
        model.set_cluster_count(entity_type, k)
    model.to(getattr(torch, payload["dtype"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload
