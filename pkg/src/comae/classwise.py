"""Attribute-compatibility classification over the seen classes."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class CompatibilityHead(nn.Module):
    """Bilinear compatibility between pooled features and class attribute rows.

    Projects a pooled feature into attribute space with a learnable matrix and
    scores it against each class attribute vector by dot product.
    """

    def __init__(self, channels, num_attributes):
        super().__init__()
        self.projection = nn.Parameter(
            torch.randn(channels, num_attributes) / math.sqrt(channels)
        )

    def class_logits(self, pooled, class_attributes):
        """pooled (b, c) x class_attributes (s, k) -> logits (b, s)."""
        if pooled.ndim != 2 or pooled.shape[1] != self.projection.shape[0]:
            raise ValueError(
                f"pooled features must be (b, {self.projection.shape[0]}), got {tuple(pooled.shape)}"
            )
        if class_attributes.ndim != 2 or class_attributes.shape[1] != self.projection.shape[1]:
            raise ValueError(
                f"class attributes must be (s, {self.projection.shape[1]}),"
                f" got {tuple(class_attributes.shape)}"
            )
        return pooled @ self.projection @ class_attributes.t()

    forward = class_logits


def classwise_loss(logits, targets):
    """Softmax cross-entropy across seen classes, averaged over samples."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be (b, s), got shape {tuple(logits.shape)}")
    if targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ValueError("targets must be one seen-class index per sample")
    if targets.numel() and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ValueError(
            "target outside the seen-class range: training may only touch seen classes"
        )
    return F.cross_entropy(logits, targets)


def classwise_loss_literal(pooled, head, true_attributes, predicted_attributes):
    """Single-term ratio variant: per-sample -log exp(gWa) / exp(gWa_hat).

    Kept for fidelity experiments; it reduces to the mean difference of the
    two compatibility scores and carries no seen-class normalization.
    """
    projected = pooled @ head.projection
    true_score = (projected * true_attributes).sum(dim=1)
    pred_score = (projected * predicted_attributes).sum(dim=1)
    return (pred_score - true_score).mean()
