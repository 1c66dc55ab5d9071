"""Transformer building blocks shared by the dual encoder, STR encoder and decoder."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with a boolean visibility mask.

    ``visible[i, j]`` is True when query row ``i`` may attend to key row ``j``.
    Returns the output and the head-averaged attention weights.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, context, visible=None):
        b, lq, d = query.shape
        lk = context.shape[1]
        q = self.q_proj(query).view(b, lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(context).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(context).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if visible is not None:
            scores = scores.masked_fill(~visible, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, d)
        return self.out_proj(out), attn.mean(dim=1)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, visible=None):
        h = self.norm1(x)
        a, w = self.attn(h, h, visible)
        x = x + a
        x = x + self.ff(self.norm2(x))
        return x, w


class PatchEmbed(nn.Module):
    """Flattens non-overlapping ``patch_h x patch_w`` patches (row-major) and projects them."""

    def __init__(self, patch: tuple[int, int], dim: int):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(patch[0] * patch[1], dim)

    def forward(self, images):
        # images: (B, H, W) in [0, 1]
        b, h, w = images.shape
        ph, pw = self.patch
        if h % ph or w % pw:
            raise ValueError(f"image {h}x{w} not divisible by patch {ph}x{pw}")
        x = (images - 0.5) * 2.0
        x = x.reshape(b, h // ph, ph, w // pw, pw).permute(0, 1, 3, 2, 4)
        x = x.reshape(b, (h // ph) * (w // pw), ph * pw)
        return self.proj(x)


class ConvPatchEmbed(nn.Module):
    """Two 3x3 convolutions, then a patch-sized strided projection to one token per patch.

    Same token grid as ``PatchEmbed``; the small convolutional stem gives the
    from-scratch recognizer local, shift-tolerant features.
    """

    def __init__(self, patch: tuple[int, int], dim: int, channels: int = 16):
        super().__init__()
        self.patch = patch
        self.stem = nn.Sequential(
            nn.Conv2d(1, channels, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.GELU(),
        )
        self.proj = nn.Conv2d(channels, dim, patch, stride=patch)

    def forward(self, images):
        b, h, w = images.shape
        ph, pw = self.patch
        if h % ph or w % pw:
            raise ValueError(f"image {h}x{w} not divisible by patch {ph}x{pw}")
        x = (images[:, None] - 0.5) * 2.0
        return self.proj(self.stem(x)).flatten(2).transpose(1, 2)


def causal_visibility(n: int, device=None) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()
