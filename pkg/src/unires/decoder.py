"""Dot-product mask head: the SEG embedding acts as a dynamic kernel over F_r."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .geometry import FeatureMap, InvalidInputError
from .mgfe import InvalidStateError


@dataclass
class DecoderConfig:
    grid: int = 16
    upsample_factor: int = 4
    hidden: int = 4
    channels: int = 64

    @property
    def output_res(self) -> int:
        return self.grid * self.upsample_factor


class PixelDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, seq_dim: int):
        super().__init__()
        self.cfg = cfg
        c, k = cfg.channels, cfg.hidden
        self.seg_proj = nn.Linear(seq_dim, c)
        self.mask_feats = nn.Linear(c, k * c)
        self.up = nn.ConvTranspose2d(k, 1, cfg.upsample_factor, stride=cfg.upsample_factor)

    def patch_logits(self, f_r: FeatureMap, seg_c: torch.Tensor) -> torch.Tensor:
        """K x grid_h x grid_w map of <seg, feature> / sqrt(C)."""
        c, k = self.cfg.channels, self.cfg.hidden
        if seg_c.shape[-1] != c or f_r.channels != c:
            raise InvalidStateError(f"dimension mismatch: seg {seg_c.shape[-1]}, F_r {f_r.channels}, C {c}")
        feats = self.mask_feats(f_r.values).reshape(-1, k, c)
        logits = (feats @ seg_c) / math.sqrt(c)
        return logits.T.reshape(k, f_r.grid_h, f_r.grid_w)

    def forward(self, f_r: FeatureMap, seg_embedding: torch.Tensor) -> torch.Tensor:
        """Mask logits at grid * upsample_factor resolution (H x W)."""
        if seg_embedding.shape[-1] != self.seg_proj.in_features:
            raise InvalidStateError("SEG embedding has the wrong dimension")
        seg_c = self.seg_proj(seg_embedding)
        return self.up(self.patch_logits(f_r, seg_c)[None])[0, 0]


def decode(f_r: FeatureMap, seg_embedding: torch.Tensor, decoder: PixelDecoder) -> torch.Tensor:
    return decoder(f_r, seg_embedding)


def binarize(logits, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise InvalidInputError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().double().numpy()
    prob = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    return prob > threshold
