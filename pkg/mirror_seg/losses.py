"Soft Dice and BCE losses and the combined per-stage training losses"

__all__ = ["dice_loss", "bce_loss", "one_hot", "CTLoss", "PETLoss"]

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def dice_loss(probs, target, smooth=1e-5):
    "1 - soft Dice per (sample, channel), averaged; reductions run in float64"
    _same_shape(probs, target, "dice_loss")
    dims = tuple(range(2, probs.ndim))
    p, t = probs.double(), target.double()
    inter = (p * t).sum(dims)
    denom = p.sum(dims) + t.sum(dims)
    return (1 - (2 * inter + smooth) / (denom + smooth)).mean().to(probs.dtype)


def bce_loss(logits, target):
    "Mean binary cross-entropy evaluated from logits"
    _same_shape(logits, target, "bce_loss")
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def one_hot(labels, n_classes):
    "N,D,H,W (or N,1,D,H,W) integer labels -> N,C,D,H,W float one-hot"
    if labels.ndim == 5:
        labels = labels[:, 0]
    return F.one_hot(labels.long(), n_classes).permute(0, 4, 1, 2, 3).float()


class CTLoss(nn.Module):
    "Softmax Dice (macro over channels) + per-channel BCE on one-hot tissue targets"

    def __init__(self, smooth=1e-5):
        super().__init__()
        self.smooth = smooth

    def forward(self, logits, target):
        oh = one_hot(target, logits.shape[1]).to(logits.dtype)
        return dice_loss(torch.softmax(logits, 1), oh, self.smooth) + bce_loss(logits, oh)


class PETLoss(nn.Module):
    "Sigmoid BCE + soft Dice on the binary lesion target"

    def __init__(self, smooth=1e-5):
        super().__init__()
        self.smooth = smooth

    def forward(self, logits, target):
        target = target.to(logits.dtype)
        return bce_loss(logits, target) + dice_loss(torch.sigmoid(logits), target, self.smooth)
