"""Full recognizer: vision encoder -> token merge -> decoder."""

from __future__ import annotations

import torch
import torch.nn as nn

from .strdec import Decoder, greedy_decode
from .vision import MERGE_MODES, FeatureMergeUnit, VisionEncoder, merge_tokens


class STRModel(nn.Module):
    def __init__(
        self,
        dim: int = 64,
        heads: int = 4,
        enc_layers: int = 3,
        dec_layers: int = 2,
        max_len: int = 12,
        merge: str = "fmu",
        L_u: int | None = None,
        canvas=(32, 64),
        patch=(4, 8),
    ):
        super().__init__()
        if merge not in MERGE_MODES:
            raise ValueError(f"unknown merge mode {merge!r}")
        self.merge = merge
        self.L_u = max_len + 1 if L_u is None else L_u
        self.encoder = VisionEncoder(dim, heads, enc_layers, canvas, patch)
        self.fmu = FeatureMergeUnit(dim, heads, self.L_u) if merge == "fmu" else None
        self.decoder = Decoder(dim, heads, dec_layers, max_len)

    def memory(self, images, return_attn: bool = False):
        tokens = self.encoder(images)
        attn = None
        if self.merge == "fmu":
            tokens, attn = self.fmu(tokens)
        elif self.merge in ("cut", "pool"):
            tokens = merge_tokens(tokens, self.L_u, self.merge)
        return (tokens, attn) if return_attn else tokens

    def forward(self, images, content_ids, visible):
        return self.decoder(self.memory(images), content_ids, visible)

    def recognize(self, images, kind: str = "causal") -> list[list[int]]:
        with torch.no_grad():
            mem = self.memory(images)
        return greedy_decode(self.decoder, mem, kind)
