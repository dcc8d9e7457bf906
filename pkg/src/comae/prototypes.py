"""Attribute prototypes: similarity maps, spatial-max prediction, regression loss."""

from __future__ import annotations

import math

import torch
from torch import nn

SCORERS = ("dot", "mlp")


class PrototypeBank(nn.Module):
    """One learnable prototype vector per attribute, scored against local features.

    The scorer turns a (prototype, local feature) pair into a scalar. "dot" is
    the plain inner product; "mlp" applies a one-hidden-layer network to the
    concatenated pair.
    """

    def __init__(self, num_attributes, channels, scorer="dot", hidden_width=32):
        super().__init__()
        if scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}, got {scorer!r}")
        self.prototypes = nn.Parameter(
            torch.randn(num_attributes, channels) / math.sqrt(channels)
        )
        self.scorer = scorer
        if scorer == "mlp":
            self.hidden = nn.Linear(2 * channels, hidden_width)
            self.output = nn.Linear(hidden_width, 1)

    @property
    def num_attributes(self):
        return self.prototypes.shape[0]

    @property
    def channels(self):
        return self.prototypes.shape[1]

    def similarity_maps(self, fmap):
        """Score every prototype against every spatial cell.

        fmap (..., h, w, c) -> maps (..., k, h, w).
        """
        if fmap.ndim < 3:
            raise ValueError(f"expected a feature map, got shape {tuple(fmap.shape)}")
        if fmap.shape[-1] != self.channels:
            raise ValueError(
                f"channel mismatch: prototypes have {self.channels}, feature map has {fmap.shape[-1]}"
            )
        if self.scorer == "dot":
            return torch.einsum("...hwc,kc->...khw", fmap, self.prototypes)
        lead = fmap.shape[:-3]
        h, w, c = fmap.shape[-3:]
        k = self.num_attributes
        f = fmap.unsqueeze(-4).expand(*lead, k, h, w, c)
        p = self.prototypes.view(*([1] * len(lead)), k, 1, 1, c).expand(*lead, k, h, w, c)
        pair = torch.cat([p, f], dim=-1)
        return self.output(torch.tanh(self.hidden(pair))).squeeze(-1)

    forward = similarity_maps

    def predict_attributes(self, fmap):
        """Per-attribute prediction: spatial maximum of each similarity map."""
        return spatial_max(self.similarity_maps(fmap))


def spatial_max(maps):
    """Max over the spatial grid, (..., k, h, w) -> (..., k).

    Ties resolve to the first maximal cell in row-major order, so the
    subgradient always routes to exactly one deterministic cell.
    """
    if maps.ndim < 3:
        raise ValueError(f"expected (..., k, h, w) maps, got shape {tuple(maps.shape)}")
    flat = maps.reshape(*maps.shape[:-2], -1)
    frozen = flat.detach()
    top = frozen.max(dim=-1, keepdim=True).values
    cells = flat.shape[-1]
    position = torch.arange(cells, device=maps.device)
    first = torch.where(frozen == top, position, cells).min(dim=-1, keepdim=True).values
    return flat.gather(-1, first).squeeze(-1)


def pointwise_loss(true_attributes, predicted_attributes):
    """Mean over samples of the squared distance between attribute vectors."""
    if true_attributes.shape != predicted_attributes.shape:
        raise ValueError(
            f"shape mismatch: {tuple(true_attributes.shape)} vs {tuple(predicted_attributes.shape)}"
        )
    if true_attributes.ndim != 2:
        raise ValueError("attribute matrices must be 2-dimensional (n, k)")
    return ((true_attributes - predicted_attributes) ** 2).sum(dim=1).mean()
