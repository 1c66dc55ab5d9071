"""Unified text-recognition decoder with causal, cloze and permutation masks.

Masks are stored in *position-order* form over the ``T + 1`` input positions
``[BOS], y_1 .. y_T``: ``visibility[i, j]`` says position ``i`` may see
position ``j``. The decoder's position queries predict the *next* token, so
query row ``r`` (predicting position ``r + 1``) is allowed to see input ``c``
when ``visibility[r + 1, c]`` holds and ``c != r + 1``; the final row (the
``[EOS]`` slot) sees every input. This one rule gives left-to-right decoding
for the causal mask, PARSeq-style two-stream attention for permutation masks,
and "everything except the token being predicted" for the cloze mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import BOS, DEFAULT_MAX_LEN, EOS, NUM_CLASSES, PAD, VOCAB_SIZE, TokenSeq, ids_to_text
from .dualenc import EmbeddingMatrix, NumericalFailure
from .layers import FeedForward, MultiHeadAttention

MASK_KINDS = ("causal", "cloze", "perm")
MEMORY_ROLES = ("prompt", "perturbed", "merged")


@dataclass(frozen=True)
class AttentionMask:
    visibility: np.ndarray  # (T+1, T+1) bool
    kind: str
    order: tuple[int, ...] | None = None

    def __post_init__(self):
        v = self.visibility
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.dtype != bool:
            raise ValueError("visibility must be a square boolean matrix")
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")

    @property
    def size(self) -> int:
        return self.visibility.shape[0]


def _order_mask(order: Sequence[int]) -> np.ndarray:
    rank = np.empty(len(order), dtype=int)
    rank[np.asarray(order)] = np.arange(len(order))
    return rank[None, :] <= rank[:, None]


def build_mask(kind: str, T: int, K: int = 1, rng=None) -> list[AttentionMask]:
    """One mask for causal/cloze; ``K`` masks for perm, the first being left-to-right."""
    if T < 1:
        raise ValueError("T must be >= 1")
    n = T + 1
    if kind == "causal":
        return [AttentionMask(np.tril(np.ones((n, n), dtype=bool)), "causal", tuple(range(n)))]
    if kind == "cloze":
        return [AttentionMask(~np.eye(n, dtype=bool), "cloze")]
    if kind != "perm":
        raise ValueError(f"unknown mask kind {kind!r}")
    if K < 1:
        raise ValueError("perm masks need K >= 1")
    rng = np.random.default_rng(rng)
    orders = [tuple(range(n))]
    for _ in range(K - 1):
        orders.append((0, *(1 + rng.permutation(T)).tolist()))
    return [AttentionMask(_order_mask(o), "perm", o) for o in orders]


def query_visibility(mask: AttentionMask) -> torch.Tensor:
    """Query-row x input-position visibility derived from a position-order mask."""
    v = torch.as_tensor(mask.visibility)
    n = v.shape[0]
    q = torch.ones(n, n, dtype=torch.bool)
    q[:-1] = v[1:]
    idx = torch.arange(n - 1)
    q[idx, idx + 1] = False
    return q


@dataclass
class Logits:
    values: torch.Tensor  # (T+1, S+1)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != NUM_CLASSES:
            raise ValueError(f"logits must be (T+1) x {NUM_CLASSES}")
        if not torch.isfinite(self.values).all():
            raise NumericalFailure()


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_c = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm_x = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm_f = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, query, content, memory, visible):
        a, _ = self.self_attn(self.norm_q(query), self.norm_c(content), visible)
        query = query + a
        a, w = self.cross_attn(self.norm_x(query), memory)
        query = query + a
        query = query + self.ff(self.norm_f(query))
        return query, w


class Decoder(nn.Module):
    """Position queries attend to token content (masked) and to a memory (unmasked)."""

    def __init__(self, dim: int = 64, heads: int = 4, layers: int = 2, max_len: int = DEFAULT_MAX_LEN):
        super().__init__()
        self.dims = dict(dim=dim, heads=heads, layers=layers, max_len=max_len)
        self.max_len = max_len
        n = max_len + 1
        self.tok_emb = nn.Embedding(VOCAB_SIZE, dim)
        self.content_pos = nn.Parameter(torch.zeros(n, dim))
        self.pos_queries = nn.Parameter(torch.zeros(n, dim))
        self.memory_norm = nn.LayerNorm(dim)
        self.layers = nn.ModuleList(DecoderLayer(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, NUM_CLASSES)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.content_pos, std=0.02)
        nn.init.normal_(self.pos_queries, std=0.02)

    def forward(self, memory, content_ids, visible, return_attn: bool = False):
        """memory (B, L, D); content_ids (B, T+1); visible (T+1, T+1) query visibility."""
        content = self.tok_emb(content_ids) + self.content_pos
        query = self.pos_queries.expand(content_ids.shape[0], -1, -1)
        memory = self.memory_norm(memory)
        attn = []
        for layer in self.layers:
            query, w = layer(query, content, memory, visible)
            attn.append(w)
        logits = self.head(self.norm(query))
        return (logits, attn) if return_attn else logits


def _check_memory(memory: EmbeddingMatrix):
    if memory.role not in MEMORY_ROLES:
        raise ValueError(f"decoder memory must be one of {MEMORY_ROLES}, got {memory.role!r}")


def decode(params: Decoder, memory: EmbeddingMatrix, target: TokenSeq, mask: AttentionMask) -> Logits:
    _check_memory(memory)
    if target.kind != "target":
        raise ValueError("decode expects a target TokenSeq")
    n = params.max_len + 1
    if len(target.ids) != n + 1 or mask.size != n:
        raise ValueError(f"target must have {n + 1} ids and mask size {n}")
    dtype = memory.values.dtype
    content = torch.tensor([target.ids[:-1]], dtype=torch.long)
    out = params(memory.values[None].to(dtype), content, query_visibility(mask))[0]
    return Logits(out)


def loss_targets(target_ids: torch.Tensor) -> torch.Tensor:
    """Shifted targets (B, T+1) with pad positions set to PAD (ignored)."""
    return target_ids[:, 1:]


def batch_sequence_loss(logit_set: Sequence[torch.Tensor], targets: torch.Tensor) -> torch.Tensor:
    """Mean over masks of the token-averaged cross entropy; pad targets are ignored."""
    if not (targets != PAD).any():
        raise ValueError("empty target")
    losses = [
        F.cross_entropy(lg.reshape(-1, lg.shape[-1]), targets.reshape(-1), ignore_index=PAD)
        for lg in logit_set
    ]
    return torch.stack(losses).mean()


def sequence_loss(logit_set: Sequence[Logits], target: TokenSeq, variant: str = "parseq") -> torch.Tensor:
    if variant not in ("parseq", "nrtr", "cloze"):
        raise ValueError(f"unknown loss variant {variant!r}")
    if variant != "parseq" and len(logit_set) != 1:
        raise ValueError(f"{variant} takes exactly one logit matrix")
    targets = torch.tensor([target.ids[1:]], dtype=torch.long)
    return batch_sequence_loss([lg.values[None] for lg in logit_set], targets)


def greedy_decode(model: Decoder, memory: torch.Tensor, kind: str = "causal") -> list[list[int]]:
    """Batched left-to-right argmax decoding from [BOS]; returns class ids up to [EOS]."""
    b = memory.shape[0]
    n = model.max_len + 1
    mask = build_mask("cloze" if kind == "cloze" else "causal", model.max_len)[0]
    visible = query_visibility(mask)
    content = torch.full((b, n), PAD, dtype=torch.long)
    content[:, 0] = BOS
    done = torch.zeros(b, dtype=torch.bool)
    out = torch.full((b, n), EOS, dtype=torch.long)
    with torch.no_grad():
        for i in range(n):
            logits = model(memory, content, visible)
            nxt = logits[:, i].argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, EOS), nxt)
            out[:, i] = nxt
            done |= nxt == EOS
            if i + 1 < n:
                content[:, i + 1] = torch.where(done, torch.full_like(nxt, PAD), nxt)
            if done.all():
                break
    return [row.tolist() for row in out]


def greedy_infer(params: Decoder, memory: EmbeddingMatrix, max_len: int | None = None, kind: str = "causal") -> str:
    if not torch.isfinite(memory.values).all():
        raise NumericalFailure()
    ids = greedy_decode(params, memory.values[None], kind)[0]
    limit = params.max_len if max_len is None else min(max_len, params.max_len)
    return ids_to_text(ids)[:limit]
