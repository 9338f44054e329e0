"""Toy stand-ins for the frozen foundation encoders.

Each encoder is patchify (strided conv) + a fixed sinusoidal embedding of the
normalised patch-centre coordinates + a couple of residual conv blocks. Being
fully convolutional, one weight set handles any resolution divisible by the
stride; the low-res and grounding encoders additionally pin their input size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import FeatureMap, InvalidInputError, Level


@dataclass
class EncoderConfig:
    input_res: int = 64
    patch_stride: int = 16
    channels: int = 64
    depth: int = 2
    seed: int = 0
    fixed_res: bool = True

    def __post_init__(self):
        if self.input_res % self.patch_stride:
            raise InvalidInputError(
                f"input_res {self.input_res} not divisible by stride {self.patch_stride}")
        if self.channels <= 0:
            raise InvalidInputError("channels must be positive")


def coord_embedding(grid_h: int, grid_w: int, channels: int, dtype=torch.float32) -> torch.Tensor:
    """C x H x W sinusoidal embedding of patch centres in [0, 1] image coordinates."""
    ys = (torch.arange(grid_h, dtype=torch.float64) + 0.5) / grid_h
    xs = (torch.arange(grid_w, dtype=torch.float64) + 0.5) / grid_w
    n_freq = max(1, channels // 4)
    freqs = math.pi * 2.0 ** torch.arange(n_freq, dtype=torch.float64).clamp(max=6)
    yy = ys[:, None, None] * freqs                      # H x 1 x F
    xx = xs[None, :, None] * freqs                      # 1 x W x F
    yy = yy.expand(grid_h, grid_w, n_freq)
    xx = xx.expand(grid_h, grid_w, n_freq)
    emb = torch.cat([yy.sin(), yy.cos(), xx.sin(), xx.cos()], dim=-1)
    if emb.shape[-1] < channels:
        emb = F.pad(emb, (0, channels - emb.shape[-1]))
    return emb[..., :channels].permute(2, 0, 1).to(dtype)


class ConvBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class PatchEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, level: Level):
        super().__init__()
        self.cfg = cfg
        self.level = level
        gen = torch.Generator().manual_seed(cfg.seed)
        self.patch = nn.Conv2d(3, cfg.channels, cfg.patch_stride, stride=cfg.patch_stride)
        self.blocks = nn.ModuleList(ConvBlock(cfg.channels) for _ in range(cfg.depth))
        self.out = nn.Conv2d(cfg.channels, cfg.channels, 1)
        with torch.no_grad():
            for p in self.parameters():
                if p.ndim > 1:
                    bound = 1.0 / math.sqrt(p[0].numel())
                    p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))
                else:
                    p.zero_()

    def check_input(self, h: int, w: int):
        s = self.cfg.patch_stride
        if self.cfg.fixed_res and (h, w) != (self.cfg.input_res, self.cfg.input_res):
            raise InvalidInputError(
                f"{self.level.value} encoder expects {self.cfg.input_res}x{self.cfg.input_res}, got {h}x{w}")
        if h % s or w % s or h < s or w < s:
            raise InvalidInputError(f"resolution {h}x{w} not divisible by stride {s}")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """B x 3 x H x W -> B x C x H/s x W/s."""
        if images.ndim == 3:
            images = images[None]
        self.check_input(*images.shape[-2:])
        x = self.patch(images.to(self.patch.weight.dtype))
        x = x + coord_embedding(x.shape[-2], x.shape[-1], x.shape[1], x.dtype)
        for blk in self.blocks:
            x = blk(x)
        return self.out(x)

    def encode(self, image: torch.Tensor) -> FeatureMap:
        grid = self.forward(image)[0]
        c, gh, gw = grid.shape
        return FeatureMap(gh, gw, grid.reshape(c, -1).T, self.level,
                          img_h=image.shape[-2], img_w=image.shape[-1])


def grid_to_featuremap(grid: torch.Tensor, level: Level, img_h: int, img_w: int) -> FeatureMap:
    c, gh, gw = grid.shape
    return FeatureMap(gh, gw, grid.reshape(c, -1).T, level, img_h=img_h, img_w=img_w)


class Encoders(nn.Module):
    """E_l (fixed low res), E_h (variable res) and the grounding encoder."""

    def __init__(self, low: EncoderConfig, high: EncoderConfig, ground: EncoderConfig,
                 frozen: bool = False):
        super().__init__()
        high = EncoderConfig(**{**high.__dict__, "fixed_res": False})
        self.low = PatchEncoder(low, Level.IMAGE)
        self.high = PatchEncoder(high, Level.HIGHRES)
        self.ground = PatchEncoder(ground, Level.GROUNDING)
        if frozen:
            self.requires_grad_(False)

    def encode_low(self, img: torch.Tensor) -> FeatureMap:
        return self.low.encode(img)

    def encode_high(self, img: torch.Tensor) -> FeatureMap:
        return self.high.encode(img)

    def encode_grounding(self, img: torch.Tensor) -> FeatureMap:
        return self.ground.encode(img)

    def save_weights(self, path) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    def load_weights(self, path) -> None:
        with np.load(path) as data:
            state = {k: torch.from_numpy(data[k]) for k in data.files}
        self.load_state_dict(state)


def resize_image(img: torch.Tensor, res: int) -> torch.Tensor:
    squeeze = img.ndim == 3
    x = img[None] if squeeze else img
    if x.shape[-2:] != (res, res):
        x = F.interpolate(x, size=(res, res), mode="bilinear", align_corners=False)
    return x[0] if squeeze else x
