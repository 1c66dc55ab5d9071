"""Miniature CLIP-style dual encoder and the prompt/image similarity probe."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import DEFAULT_PROMPT_BUDGET, VOCAB_SIZE, TokenSeq, make_prompt, tokenize_prompt
from .layers import Block, PatchEmbed, causal_visibility
from .render import DEFAULT_CANVAS, DEFAULT_PATCH, TextImage

ROLES = ("prompt", "image", "perturbed", "merged")


class NumericalFailure(ArithmeticError):
    def __init__(self, what: str = "numerical failure"):
        super().__init__(what)


@dataclass
class EmbeddingMatrix:
    """L x D token features tagged with their role.

    ``special`` indexes the summary row: ``[EOS]`` for prompts, ``[CLS]`` for
    dual-encoder image embeddings, ``None`` when there is none.
    """

    values: torch.Tensor
    role: str
    special: int | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.values.ndim != 2 or self.values.shape[0] == 0:
            raise ValueError(f"expected a nonempty L x D matrix, got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise NumericalFailure()

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def special_row(self) -> torch.Tensor:
        if self.special is None:
            raise ValueError(f"{self.role} embedding has no summary row")
        return self.values[self.special]


class DualEncoder(nn.Module):
    def __init__(
        self,
        dim: int = 64,
        heads: int = 4,
        text_layers: int = 2,
        image_layers: int = 3,
        prompt_budget: int = DEFAULT_PROMPT_BUDGET,
        canvas: tuple[int, int] = DEFAULT_CANVAS,
        patch: tuple[int, int] = DEFAULT_PATCH,
    ):
        super().__init__()
        self.dims = dict(
            dim=dim,
            heads=heads,
            text_layers=text_layers,
            image_layers=image_layers,
            prompt_budget=prompt_budget,
            canvas=list(canvas),
            patch=list(patch),
        )
        self.text_len = prompt_budget + 1
        self.n_patches = (canvas[0] // patch[0]) * (canvas[1] // patch[1])

        self.tok_emb = nn.Embedding(VOCAB_SIZE, dim)
        self.text_pos = nn.Parameter(torch.zeros(self.text_len, dim))
        self.text_blocks = nn.ModuleList(Block(dim, heads) for _ in range(text_layers))
        self.text_norm = nn.LayerNorm(dim)
        self.text_proj = nn.Linear(dim, dim, bias=False)

        self.patch_embed = PatchEmbed(patch, dim)
        self.cls = nn.Parameter(torch.zeros(dim))
        self.image_pos = nn.Parameter(torch.zeros(1 + self.n_patches, dim))
        self.image_blocks = nn.ModuleList(Block(dim, heads) for _ in range(image_layers))
        self.image_norm = nn.LayerNorm(dim)
        self.image_proj = nn.Linear(dim, dim, bias=False)

        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))
        self._init_weights()

    def _init_weights(self):
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.text_pos, std=0.01)
        nn.init.normal_(self.cls, std=0.02)
        nn.init.normal_(self.image_pos, std=0.01)

    def encode_text(self, ids: torch.Tensor) -> torch.Tensor:
        """(B, L_t) prompt ids -> (B, L_t, D) per-token features."""
        x = self.tok_emb(ids) + self.text_pos
        vis = causal_visibility(ids.shape[1], ids.device)
        for blk in self.text_blocks:
            x, _ = blk(x, vis)
        return self.text_proj(self.text_norm(x))

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W) pixels -> (B, 1 + n_patches, D); row 0 is [CLS]."""
        x = self.patch_embed(images)
        cls = self.cls.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.image_pos
        for blk in self.image_blocks:
            x, _ = blk(x)
        return self.image_proj(self.image_norm(x))

    @property
    def dim(self) -> int:
        return self.dims["dim"]


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _param_dtype(model: nn.Module):
    return next(model.parameters()).dtype


def text_encode(params: DualEncoder, prompt: TokenSeq) -> EmbeddingMatrix:
    if prompt.kind != "prompt":
        raise ValueError("text_encode expects a prompt TokenSeq")
    ids = torch.tensor([prompt.ids], dtype=torch.long)
    with torch.no_grad():
        out = params.encode_text(ids)[0]
    return EmbeddingMatrix(out, "prompt", special=out.shape[0] - 1)


def image_encode(params: DualEncoder, img: TextImage) -> EmbeddingMatrix:
    px = torch.as_tensor(img.pixels, dtype=_param_dtype(params))[None]
    with torch.no_grad():
        out = params.encode_images(px)[0]
    return EmbeddingMatrix(out, "image", special=0)


def encode_prompts(params: DualEncoder, labels: Sequence[str], batch: int = 256) -> torch.Tensor:
    """Frozen prompt features for many labels: (N, L_t, D)."""
    budget = params.dims["prompt_budget"]
    ids = torch.tensor(
        [tokenize_prompt(make_prompt(lb), budget).ids for lb in labels], dtype=torch.long
    )
    with torch.no_grad():
        out = torch.cat([params.encode_text(ids[i : i + batch]) for i in range(0, len(ids), batch)])
    if not torch.isfinite(out).all():
        raise NumericalFailure()
    return out


def encode_image_batch(params: DualEncoder, images: np.ndarray, batch: int = 256) -> torch.Tensor:
    px = torch.as_tensor(images, dtype=_param_dtype(params))
    with torch.no_grad():
        out = torch.cat([params.encode_images(px[i : i + batch]) for i in range(0, len(px), batch)])
    if not torch.isfinite(out).all():
        raise NumericalFailure()
    return out


def contrastive_loss(params: DualEncoder, images: torch.Tensor, prompt_ids: torch.Tensor):
    """Symmetric InfoNCE over [EOS] x [CLS] similarities; returns (loss, B x B logits)."""
    if images.shape[0] < 2:
        raise ValueError("contrastive batch needs at least 2 pairs")
    t = params.encode_text(prompt_ids)[:, -1]
    v = params.encode_images(images)[:, 0]
    t = F.normalize(t, dim=-1)
    v = F.normalize(v, dim=-1)
    scale = params.logit_scale.clamp(max=math.log(100.0)).exp()
    logits = scale * t @ v.T
    target = torch.arange(len(logits))
    loss = 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))
    return loss, logits


def contrastive_train_step(params: DualEncoder, optimizer, images, prompt_ids) -> float:
    loss, _ = contrastive_loss(params, images, prompt_ids)
    if not torch.isfinite(loss):
        raise NumericalFailure("non-finite contrastive loss")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train_dual_encoder(
    images: np.ndarray,
    labels: Sequence[str],
    *,
    steps: int,
    batch: int,
    seed: int,
    lr: float = 1e-3,
    dims: dict | None = None,
    log_every: int = 0,
) -> tuple[DualEncoder, list[float]]:
    """Contrastive training; each batch draws distinct labels, one image each."""
    torch.manual_seed(seed)
    model = DualEncoder(**(dims or {}))
    budget = model.dims["prompt_budget"]
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 0xD0A1])

    by_label: dict[str, list[int]] = {}
    for i, lb in enumerate(labels):
        by_label.setdefault(lb, []).append(i)
    uniq = list(by_label)
    prompt_ids = {lb: tokenize_prompt(make_prompt(lb), budget).ids for lb in uniq}
    b = min(batch, len(uniq))
    px_all = torch.as_tensor(images, dtype=torch.float32)

    losses = []
    model.train()
    for step in range(steps):
        chosen = rng.choice(len(uniq), size=b, replace=False)
        idx = [by_label[uniq[c]][rng.integers(len(by_label[uniq[c]]))] for c in chosen]
        ids = torch.tensor([prompt_ids[uniq[c]] for c in chosen], dtype=torch.long)
        loss = contrastive_train_step(model, opt, px_all[idx], ids)
        losses.append(loss)
        if log_every and step % log_every == 0:
            print(f"dualenc step {step} loss {loss:.4f}")
    return freeze(model), losses


def similarity_probe(
    text_emb: EmbeddingMatrix,
    image_embs: Sequence[EmbeddingMatrix],
    grouping: Sequence[str],
    groups: tuple[str, str] = ("clean", "cluttered"),
    normalize: bool = False,
) -> dict[str, float]:
    """Softmax over per-group summed [EOS] . [CLS] similarities.

    Raw dot products by default; ``normalize=True`` uses cosine similarity.
    """
    if len(image_embs) != len(grouping):
        raise ValueError("one group tag per image embedding")
    t = text_emb.special_row().double()
    if normalize:
        t = F.normalize(t, dim=0)
    sums = []
    for g in groups:
        members = [e for e, tag in zip(image_embs, grouping) if tag == g]
        if not members:
            raise ValueError("degenerate sample")
        total = 0.0
        for e in members:
            if e.dim != text_emb.dim:
                raise ValueError("embedding dimension mismatch")
            v = e.special_row().double()
            if normalize:
                v = F.normalize(v, dim=0)
            total += float(t @ v)
        sums.append(total)
    probs = torch.softmax(torch.tensor(sums, dtype=torch.float64), dim=0)
    return {g: float(p) for g, p in zip(groups, probs)}


def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def load_state_arrays(model: nn.Module, arrays: dict[str, np.ndarray]) -> nn.Module:
    dtype = _param_dtype(model)
    model.load_state_dict({k: torch.as_tensor(v, dtype=dtype) for k, v in arrays.items()})
    return model
