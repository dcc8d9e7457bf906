"""Feature backbones producing local maps plus global average pooling.

Feature maps are channel-last: ``(height, width, channels)`` or batched
``(batch, height, width, channels)``.
"""

from __future__ import annotations

import torch
from torch import nn


class IdentityBackbone(nn.Module):
    """Consumes precomputed feature maps and passes them through unchanged."""

    def __init__(self, channels=None):
        super().__init__()
        self.channels = channels

    def forward(self, x):
        if x.ndim not in (3, 4):
            raise ValueError(f"expected a (h, w, c) or (b, h, w, c) tensor, got shape {tuple(x.shape)}")
        if self.channels is not None and x.shape[-1] != self.channels:
            raise ValueError(
                f"identity backbone configured for {self.channels} channels, got {x.shape[-1]}"
            )
        return x


class ConvBackbone(nn.Module):
    """Small trainable convolutional stack for raw desk-scale tensors.

    Two 3x3 same-padding convolutions with a tanh in between; the smooth
    activation keeps finite-difference gradient checks clean, and same
    padding preserves the spatial resolution for the prototype maps.
    """

    def __init__(self, in_channels, out_channels, hidden_channels=16):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden_channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(hidden_channels, out_channels, kernel_size=3, padding=1)

    def forward(self, x):
        single = x.ndim == 3
        if single:
            x = x.unsqueeze(0)
        if x.ndim != 4:
            raise ValueError(f"expected a (h, w, c) or (b, h, w, c) tensor, got shape {tuple(x.shape)}")
        if x.shape[-1] != self.conv1.in_channels:
            raise ValueError(
                f"conv backbone expects {self.conv1.in_channels} input channels, got {x.shape[-1]}"
            )
        z = x.permute(0, 3, 1, 2)
        z = self.conv2(torch.tanh(self.conv1(z)))
        z = z.permute(0, 2, 3, 1)
        return z.squeeze(0) if single else z


def global_average_pool(fmap):
    """Mean over the two spatial axes: (..., h, w, c) -> (..., c)."""
    if fmap.ndim < 3:
        raise ValueError(f"expected at least 3 dimensions, got shape {tuple(fmap.shape)}")
    return fmap.mean(dim=(-3, -2))
