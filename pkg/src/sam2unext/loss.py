"""Boundary-weighted BCE + IoU training objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    wbce: float
    wiou: float


def _check_pair(logits: torch.Tensor, gt: torch.Tensor) -> None:
    if logits.shape != gt.shape:
        raise ConfigurationError(f"logits {tuple(logits.shape)} and mask {tuple(gt.shape)} differ in shape")


def pixel_weights(gt: torch.Tensor) -> torch.Tensor:
    """``1 + 5 * |avgpool31(gt) - gt|``.

    Windows clipped at the border average only the pixels inside the image,
    so a constant mask pools to itself and gets weight 1 everywhere.
    """
    if gt.dim() != 4:
        raise ConfigurationError(f"mask must be (n, 1, h, w), got {tuple(gt.shape)}")
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("pixel_weights needs a binary mask with values in {0, 1}")
    pooled = F.avg_pool2d(gt, kernel_size=31, stride=1, padding=15, count_include_pad=False)
    return 1.0 + 5.0 * torch.abs(pooled - gt)


def weighted_bce(logits: torch.Tensor, gt: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    _check_pair(logits, gt)
    bce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")
    per_image = (weights * bce).sum(dim=(2, 3)) / weights.sum(dim=(2, 3))
    return per_image.mean()


def weighted_iou(logits: torch.Tensor, gt: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    _check_pair(logits, gt)
    p = torch.sigmoid(logits)
    inter = (weights * p * gt).sum(dim=(2, 3))
    union = (weights * (p + gt - p * gt)).sum(dim=(2, 3))
    return (1.0 - (inter + 1.0) / (union + 1.0)).mean()


def structure_loss(logits: torch.Tensor, gt: torch.Tensor) -> tuple[torch.Tensor, LossBreakdown]:
    """Total loss tensor (for backward) and its detached breakdown."""
    w = pixel_weights(gt)
    bce = weighted_bce(logits, gt, w)
    iou = weighted_iou(logits, gt, w)
    total = bce + iou
    b, i = float(bce.detach()), float(iou.detach())
    return total, LossBreakdown(total=b + i, wbce=b, wiou=i)
