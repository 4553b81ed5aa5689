"""Soft Jaccard, cross entropy and their combination ``H - log J``.

Binary tasks use a single logit channel (``B x 1 x H x W``) and a ``{0, 1}``
target; multi-class tasks use ``B x C x H x W`` logits and an integer target
of shape ``B x H x W``.
"""
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .data import Task

DEFAULT_EPS = 1e-15
JACCARD_FORMS = ("aggregate", "per_pixel_positives")


class LossValue(NamedTuple):
    total: torch.Tensor
    cross_entropy: torch.Tensor
    jaccard: torch.Tensor


def _binary_target(target, like):
    if target.dim() == like.dim() - 1:
        target = target.unsqueeze(1)
    if target.shape != like.shape:
        raise ValueError(f"target shape {tuple(target.shape)} does not match {tuple(like.shape)}")
    return target.to(like.dtype)


def _check_multiclass(probs_or_logits, target):
    if probs_or_logits.dim() != target.dim() + 1 or (
        probs_or_logits.shape[:1] + probs_or_logits.shape[2:] != target.shape
    ):
        raise ValueError(
            f"target shape {tuple(target.shape)} does not match {tuple(probs_or_logits.shape)} minus the class axis"
        )
    num_classes = probs_or_logits.shape[1]
    if target.numel() and (target.min() < 0 or target.max() >= num_classes):
        raise ValueError(f"target class index out of range [0, {num_classes})")


def _jaccard_terms(probs, target, eps, form):
    intersection = (probs * target).sum()
    if form == "aggregate":
        return (intersection + eps) / (target.sum() + probs.sum() - intersection + eps)
    # Per pixel, y*p / (y + p - y*p) is p where y = 1 and 0 (or 0/0) where
    # y = 0, so the literal per-pixel mean reduces to the mean of p over
    # positive pixels.
    return (intersection + eps) / (target.sum() + eps)


def soft_jaccard(probs, target, eps=DEFAULT_EPS, form="aggregate"):
    """Differentiable Jaccard of probabilities against a hard target.

    Binary input (one channel or matching target shape) is scored over all
    pixels of the batch. Multi-class input is scored per foreground class
    against that class's probability channel and averaged over classes
    ``1..C-1``.
    """
    if eps <= 0:
        raise ValueError(f"smoothing must be positive, got {eps}")
    if form not in JACCARD_FORMS:
        raise ValueError(f"unknown jaccard form {form!r}; expected one of {JACCARD_FORMS}")
    if probs.dim() == target.dim() + 1 and probs.shape[1] > 1:
        _check_multiclass(probs, target)
        terms = [
            _jaccard_terms(probs[:, c], (target == c).to(probs.dtype), eps, form)
            for c in range(1, probs.shape[1])
        ]
        return torch.stack(terms).mean()
    target = _binary_target(target, probs)
    return _jaccard_terms(probs, target, eps, form)


def cross_entropy(logits, target, task):
    """Mean per-pixel negative log-likelihood of the true class."""
    task = Task.parse(task)
    if task is Task.BINARY:
        if logits.shape[1] != 1:
            raise ValueError(f"binary task expects one logit channel, got {logits.shape[1]}")
        target = _binary_target(target, logits)
        if target.numel() and ((target != 0) & (target != 1)).any():
            raise ValueError("binary target must contain only 0 and 1")
        return F.binary_cross_entropy_with_logits(logits, target)
    _check_multiclass(logits, target)
    return F.cross_entropy(logits, target.long())


def probabilities(logits, task):
    task = Task.parse(task)
    return torch.sigmoid(logits) if task is Task.BINARY else torch.softmax(logits, dim=1)


def combined_loss(logits, target, task, eps=DEFAULT_EPS, form="aggregate") -> LossValue:
    task = Task.parse(task)
    h = cross_entropy(logits, target, task)
    j = soft_jaccard(probabilities(logits, task), target, eps=eps, form=form)
    return LossValue(h - torch.log(j), h, j)


class CombinedLoss(torch.nn.Module):
    def __init__(self, task, eps=DEFAULT_EPS, form="aggregate"):
        super().__init__()
        self.task = Task.parse(task)
        self.eps = eps
        self.form = form

    def forward(self, logits, target):
        return combined_loss(logits, target, self.task, self.eps, self.form)
