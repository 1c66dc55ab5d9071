"""ViT-style text-image encoder, the feature merge unit and its Cut/Pool baselines."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dualenc import EmbeddingMatrix, NumericalFailure
from .layers import Block, ConvPatchEmbed, FeedForward, MultiHeadAttention
from .render import DEFAULT_CANVAS, DEFAULT_PATCH, TextImage, write_pgm
from .tensorio import save_cache_array

MERGE_MODES = ("fmu", "cut", "pool", "none")


class VisionEncoder(nn.Module):
    """Patch tokens only (no summary token): (B, H, W) -> (B, HW / (p_h p_w), D)."""

    def __init__(self, dim=64, heads=4, layers=3, canvas=DEFAULT_CANVAS, patch=DEFAULT_PATCH):
        super().__init__()
        self.canvas = tuple(canvas)
        self.patch = tuple(patch)
        self.grid = (canvas[0] // patch[0], canvas[1] // patch[1])
        self.patch_embed = ConvPatchEmbed(self.patch, dim)
        # unit-scale positions so downstream attention can tell patches apart from the first step
        self.pos = nn.Parameter(torch.randn(self.grid[0] * self.grid[1], dim))
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def forward(self, images, return_attn: bool = False):
        x = self.patch_embed(images)
        if x.shape[1] != self.pos.shape[0]:
            raise ValueError(f"expected {self.canvas} images, got {tuple(images.shape[1:])}")
        x = x + self.pos
        attn = []
        for blk in self.blocks:
            x, w = blk(x)
            attn.append(w)
        x = self.norm(x)
        return (x, attn) if return_attn else x


QUERY_INIT_STD = 4.0


class FeatureMergeUnit(nn.Module):
    """Learned queries cross-attend over image tokens, then a residual feed-forward."""

    def __init__(self, dim=64, heads=4, num_queries=13):
        super().__init__()
        if num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        # large queries give each slot a peaked, distinct attention pattern at init; with small
        # ones every slot averages all patches and the merged tokens carry almost no signal
        self.query = nn.Parameter(torch.randn(num_queries, dim) * QUERY_INIT_STD)
        self.norm_in = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    @property
    def num_queries(self) -> int:
        return self.query.shape[0]

    def forward(self, tokens):
        q = self.query.expand(tokens.shape[0], -1, -1)
        merged, attn = self.attn(q, self.norm_in(tokens))
        merged = merged + self.ff(self.norm_ff(merged))
        return merged, attn


def merge_tokens(tokens: torch.Tensor, L_u: int, mode: str) -> torch.Tensor:
    """Parameter-free merges on (B, L_i, D): first ``L_u`` rows, or adaptive average pooling."""
    if mode == "cut":
        if tokens.shape[1] < L_u:
            raise ValueError(f"cut needs at least {L_u} tokens, got {tokens.shape[1]}")
        return tokens[:, :L_u]
    if mode == "pool":
        return F.adaptive_avg_pool1d(tokens.transpose(1, 2), L_u).transpose(1, 2)
    raise ValueError(f"unknown merge mode {mode!r}")


def encode_image(params: VisionEncoder, img: TextImage) -> EmbeddingMatrix:
    h, w = img.shape
    ph, pw = params.patch
    if h % ph or w % pw:
        raise ValueError(f"image {h}x{w} not divisible by patch {ph}x{pw}")
    px = torch.as_tensor(img.pixels, dtype=params.pos.dtype)[None]
    with torch.no_grad():
        out = params(px)[0]
    return EmbeddingMatrix(out, "image")


def fmu_merge(params: FeatureMergeUnit, F_i: EmbeddingMatrix) -> tuple[EmbeddingMatrix, torch.Tensor]:
    if F_i.dim != params.query.shape[1]:
        raise ValueError("feature dimension mismatch")
    merged, attn = params(F_i.values[None].to(params.query.dtype))
    return EmbeddingMatrix(merged[0], "merged"), attn[0]


def baseline_merge(F_i: EmbeddingMatrix, L_u: int, mode: str) -> EmbeddingMatrix:
    return EmbeddingMatrix(merge_tokens(F_i.values[None], L_u, mode)[0], "merged")


def attention_heatmaps(attn: np.ndarray, grid: tuple[int, int], patch: tuple[int, int]) -> np.ndarray:
    """(Q, L_i) attention rows -> (Q, H, W) maps, each scaled so its peak is 1."""
    attn = np.asarray(attn, dtype=np.float64)
    if not np.isfinite(attn).all():
        raise NumericalFailure()
    if attn.shape[1] != grid[0] * grid[1]:
        raise ValueError(f"attention over {attn.shape[1]} tokens does not match grid {grid}")
    maps = attn.reshape(-1, *grid)
    peak = maps.max(axis=(1, 2), keepdims=True)
    maps = np.where(peak > 0, maps / np.where(peak > 0, peak, 1.0), 0.0)
    return np.kron(maps, np.ones((1, *patch)))


def export_attention(
    attn: np.ndarray,
    img: TextImage,
    out_dir: str | Path,
    patch: tuple[int, int] = DEFAULT_PATCH,
    prefix: str = "attn",
) -> list[Path]:
    """Write one heatmap and one image overlay PGM per attention row."""
    h, w = img.shape
    grid = (h // patch[0], w // patch[1])
    maps = attention_heatmaps(attn, grid, patch)
    out_dir = Path(out_dir)
    paths = []
    for j, heat in enumerate(maps):
        heat_path = out_dir / f"{prefix}_q{j:02d}.pgm"
        over_path = out_dir / f"{prefix}_q{j:02d}_overlay.pgm"
        write_pgm(heat_path, heat)
        write_pgm(over_path, 0.5 * img.pixels + 0.5 * heat)
        paths += [heat_path, over_path]
    return paths


def dump_attention(path: str | Path, attn: np.ndarray, seed: int = 0) -> None:
    """Store (N, Q, L_i) or (Q, L_i) attention weights in the embedding-cache format."""
    attn = np.asarray(attn, dtype=np.float32)
    if attn.ndim == 2:
        attn = attn[None]
    save_cache_array(path, attn, seed)
