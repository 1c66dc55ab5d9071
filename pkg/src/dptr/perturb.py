"""Offline random perturbation of prompt embeddings with cached image tokens."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dualenc import DualEncoder, EmbeddingMatrix, encode_image_batch
from .render import TextImage
from .tensorio import load_cache_array, save_cache_array


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbCache:
    """Immutable bank of image token embeddings ([CLS] removed): count x rows x D."""

    bank: torch.Tensor
    seed: int = 0

    def __post_init__(self):
        if self.bank.ndim != 3 or self.bank.shape[0] < 1:
            raise CacheError("cache bank must be a nonempty count x rows x D tensor")
        bank = self.bank.detach().clone().to(torch.float32)
        bank.requires_grad_(False)
        object.__setattr__(self, "bank", bank)

    @property
    def count(self) -> int:
        return self.bank.shape[0]

    @property
    def rows(self) -> int:
        return self.bank.shape[1]

    @property
    def D(self) -> int:
        return self.bank.shape[2]

    def entry(self, i: int) -> EmbeddingMatrix:
        return EmbeddingMatrix(self.bank[i], "image")

    def save(self, path: str | Path) -> None:
        save_cache_array(path, self.bank.numpy(), self.seed)


def load_cache(path: str | Path, min_rows: int | None = None) -> PerturbCache:
    """Read a cache file; also the import path for externally computed embeddings."""
    bank, header = load_cache_array(path)
    if not np.isfinite(bank).all():
        raise CacheError(f"{path}: non-finite values in cache payload")
    if min_rows is not None and bank.shape[1] < min_rows:
        raise CacheError("cache entry too short")
    return PerturbCache(torch.from_numpy(bank), int(header["seed"]))


def build_cache(
    images: Sequence[TextImage] | np.ndarray,
    encoder: DualEncoder,
    count: int,
    seed: int,
    min_rows: int | None = None,
) -> PerturbCache:
    """Encode ``count`` images (chosen by ``seed``) with the frozen image tower."""
    if any(p.requires_grad for p in encoder.parameters()):
        raise CacheError("encoder must be frozen")
    pixels = images if isinstance(images, np.ndarray) else np.stack([im.pixels for im in images])
    if count > len(pixels):
        raise CacheError(f"count {count} exceeds {len(pixels)} available images")
    order = np.sort(np.random.default_rng([seed, 0xCAC4]).permutation(len(pixels))[:count])
    tokens = encode_image_batch(encoder, pixels[order])[:, 1:]
    min_rows = encoder.text_len if min_rows is None else min_rows
    if tokens.shape[1] < min_rows:
        raise CacheError("cache entry too short")
    return PerturbCache(tokens, seed)


def crop_tokens(entry: EmbeddingMatrix, length: int, rng: np.random.Generator) -> EmbeddingMatrix:
    """Contiguous window of ``length`` rows at a uniformly drawn offset."""
    rows = entry.shape[0]
    if rows < length:
        raise CacheError("cache entry too short")
    offset = int(rng.integers(0, rows - length + 1))
    return EmbeddingMatrix(entry.values[offset : offset + length], "image")


def perturb(
    F_t: EmbeddingMatrix, cache: PerturbCache, lam: float, rng: np.random.Generator
) -> EmbeddingMatrix:
    """``F_t + lam * crop(random cache entry)``; ``lam == 0`` returns ``F_t`` values exactly."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if cache.D != F_t.dim:
        raise CacheError(f"dimension mismatch: cache D={cache.D}, features D={F_t.dim}")
    idx = int(rng.integers(0, cache.count))
    crop = crop_tokens(cache.entry(idx), F_t.shape[0], rng)
    noise = crop.values.to(F_t.values.dtype)
    return EmbeddingMatrix(F_t.values + lam * noise, "perturbed", F_t.special)


def perturb_batch(
    F_t: torch.Tensor, cache: PerturbCache, lam: float, rng: np.random.Generator
) -> torch.Tensor:
    """Batched ``perturb``: one cache entry and offset per sequence. F_t is (B, L_t, D)."""
    b, length, dim = F_t.shape
    if cache.D != dim:
        raise CacheError(f"dimension mismatch: cache D={cache.D}, features D={dim}")
    if cache.rows < length:
        raise CacheError("cache entry too short")
    idx = torch.as_tensor(rng.integers(0, cache.count, size=b))
    offs = torch.as_tensor(rng.integers(0, cache.rows - length + 1, size=b))
    rows = offs[:, None] + torch.arange(length)[None, :]
    crops = cache.bank[idx[:, None], rows]
    return F_t + lam * crops.to(F_t.dtype)
