"""Text cross-entropy, BCE, DICE and their weighted combination."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .geometry import InvalidInputError

BCE_EPS = 1e-7
DICE_SMOOTH = 1e-6


@dataclass
class LossWeights:
    lambda_lm: float = 1.0
    lambda_mask: float = 1.0
    lambda_bce: float = 2.0
    lambda_dice: float = 0.5

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not math.isfinite(v) or v < 0:
                raise InvalidInputError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class LossBundle:
    l_lm: torch.Tensor
    l_bce: torch.Tensor
    l_dice: torch.Tensor
    l_mask: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l_lm", "l_bce", "l_dice", "l_mask", "total")}


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def text_ce(logits: torch.Tensor, targets, mask=None) -> torch.Tensor:
    """Mean negative log-likelihood over supervised positions. logits: T x V."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if mask is None:
        mask = torch.ones(targets.shape, dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not mask.any():
        raise InvalidInputError("no supervised positions")
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, targets[..., None])[..., 0]
    return nll[mask].mean()


def _check_shapes(pred, gt):
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")


def bce(pred, gt, eps: float = BCE_EPS) -> torch.Tensor:
    pred = _as_tensor(pred)
    gt = _as_tensor(gt, pred).to(pred.dtype)
    _check_shapes(pred, gt)
    p = pred.clamp(eps, 1 - eps)
    return -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p)).mean()


def bce_with_logits(logits: torch.Tensor, gt) -> torch.Tensor:
    """Same objective as bce(sigmoid(logits), gt), computed stably for training."""
    gt = _as_tensor(gt, logits).to(logits.dtype)
    _check_shapes(logits, gt)
    return F.binary_cross_entropy_with_logits(logits, gt)


def dice(pred, gt, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    pred = _as_tensor(pred)
    gt = _as_tensor(gt, pred).to(pred.dtype)
    _check_shapes(pred, gt)
    inter = (pred * gt).sum()
    return 1 - (2 * inter + smooth) / (pred.sum() + gt.sum() + smooth)


def combine(l_lm, l_bce, l_dice, w: LossWeights = LossWeights()) -> LossBundle:
    l_lm, l_bce, l_dice = (_as_tensor(v) for v in (l_lm, l_bce, l_dice))
    l_mask = w.lambda_bce * l_bce + w.lambda_dice * l_dice
    total = w.lambda_lm * l_lm + w.lambda_mask * l_mask
    return LossBundle(l_lm, l_bce, l_dice, l_mask, total)
