"""Frozen random convolutional feature networks.

Pretrained supervised feature extractors are out of scope at desk scale;
feature-space matching is kept by using small convolutional networks with
frozen, fixed-seed random weights. Two documented instances exist:

* the perceptual network (seed ``PERCEPTUAL_NET_SEED``) behind the optional
  perceptual training losses, and
* the metric embedder (seed ``METRIC_NET_SEED``, 64-dim output) behind the
  feature-space Frechet distances.

Distances computed with these networks are comparable within this toolkit
only.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .networks import seeded_build

PERCEPTUAL_NET_SEED = 7001
METRIC_NET_SEED = 7002
METRIC_FEATURE_DIM = 64


class RandomFeatureNet(nn.Module):
    """Three stride-2 conv stages; exposes per-stage maps and a pooled embedding."""

    def __init__(self, widths: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        chans = (3,) + tuple(widths)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(len(widths))
        )
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def embed_dim(self) -> int:
        return self.convs[-1].out_channels

    def stage_maps(self, images: torch.Tensor) -> list[torch.Tensor]:
        h = images
        maps = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            maps.append(h)
        return maps

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled last-stage features, shape (B, embed_dim)."""
        return self.stage_maps(images)[-1].mean(dim=(2, 3))


def _unit_normalize(feat: torch.Tensor) -> torch.Tensor:
    return feat / (feat.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-8)


def perceptual_distance(net: RandomFeatureNet, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between channel-normalized feature maps.

    Zero exactly when a == b; differentiable in both inputs (the network
    weights stay frozen).
    """
    if a.ndim == 3:
        a, b = a[None], b[None]
    total = a.new_zeros(())
    for fa, fb in zip(net.stage_maps(a), net.stage_maps(b)):
        total = total + (_unit_normalize(fa) - _unit_normalize(fb)).pow(2).mean()
    return total


def perceptual_net() -> RandomFeatureNet:
    return seeded_build(RandomFeatureNet, PERCEPTUAL_NET_SEED)


def metric_net() -> RandomFeatureNet:
    return seeded_build(RandomFeatureNet, METRIC_NET_SEED)
