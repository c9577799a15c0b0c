"""Text cross-entropy, BCE + soft Dice segmentation loss and their weighted sum."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..geometry import PixelMask, rle_decode

DICE_EPS = 1e-6


def loss_text(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over positions where ``mask`` is set (answer positions)."""
    V = logits.shape[-1]
    ce = F.cross_entropy(logits.reshape(-1, V), targets.reshape(-1), reduction="none")
    m = mask.reshape(-1).to(ce.dtype)
    return (ce * m).sum() / m.sum()


def bce_loss(logits: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, gold.to(logits.dtype))


def dice_loss(probs: torch.Tensor, gold: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss per item (last axis), averaged over any leading axes."""
    gold = gold.to(probs.dtype)
    inter = (probs * gold).sum(-1)
    denom = probs.sum(-1) + gold.sum(-1)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def loss_seg(logits: torch.Tensor, gold: torch.Tensor, lambda_bce: float = 1.0,
             lambda_dice: float = 1.0) -> torch.Tensor:
    return lambda_bce * bce_loss(logits, gold) + lambda_dice * dice_loss(torch.sigmoid(logits), gold)


def loss_total(text: torch.Tensor, seg: torch.Tensor, lambda_text: float = 1.0,
               lambda_seg: float = 1.0) -> torch.Tensor:
    return lambda_text * text + lambda_seg * seg


def downsample_majority(mask: PixelMask | np.ndarray, patch: int) -> np.ndarray:
    """Patch-resolution gold: a patch is set when at least half of its pixels are."""
    bits = rle_decode(mask) if isinstance(mask, PixelMask) else np.asarray(mask, dtype=bool)
    h, w = bits.shape
    frac = bits.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3))
    return frac >= 0.5
