"""Efficient multi-scale attention (EMA) with cross-spatial learning."""

from __future__ import annotations

import torch
import torch.nn as nn

from oreyolo.errors import InvalidConfigError, ShapeError


def global_avg_pool2d(x: torch.Tensor) -> torch.Tensor:
    """Mean over all spatial positions, one value per channel: (N, C, H, W) -> (N, C)."""
    if x.dim() != 4:
        raise ShapeError(f"expected a 4-d feature map, got shape {tuple(x.shape)}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError("global pooling needs non-empty spatial dims")
    return x.mean(dim=(2, 3))


def directional_pool(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Row and column profiles of a feature map.

    Returns ``(h_profile, w_profile)`` with shapes (N, C, H, 1) and (N, C, 1, W):
    the mean over width for every row and the mean over height for every column.
    """
    if x.dim() != 4:
        raise ShapeError(f"expected a 4-d feature map, got shape {tuple(x.shape)}")
    return x.mean(dim=3, keepdim=True), x.mean(dim=2, keepdim=True)


class EMA(nn.Module):
    """Grouped attention with a 1x1 directional branch, a 3x3 branch and cross-spatial fusion.

    The input is split into ``groups`` sub-feature groups along channels. Each
    group gets a spatial attention map built from both branches; the output has
    the input's shape.
    """

    def __init__(self, channels: int, groups: int = 4):
        super().__init__()
        if groups < 1 or channels % groups:
            raise InvalidConfigError(f"channels {channels} not divisible by groups {groups}")
        cg = channels // groups
        if cg < 4:
            raise InvalidConfigError(f"EMA needs >= 4 channels per group, got {cg}")
        self.channels = channels
        self.groups = groups
        self.conv1x1 = nn.Conv2d(cg, cg, kernel_size=1)
        self.conv3x3 = nn.Conv2d(cg, cg, kernel_size=3, padding=1)
        self.gn = nn.GroupNorm(cg, cg)

    def branches(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Grouped outputs of the 1x1 (directional) and 3x3 branches, each (N*G, C/G, H, W)."""
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"EMA built for {self.channels} channels, got {c}")
        g = x.reshape(n * self.groups, c // self.groups, h, w)

        # 1x1 branch: shared conv over the concatenated row/column profiles
        x_h, x_w = directional_pool(g)
        hw = self.conv1x1(torch.cat([x_h, x_w.transpose(2, 3)], dim=2))
        a_h, a_w = torch.split(hw, [h, w], dim=2)
        x1 = self.gn(g * a_h.sigmoid() * a_w.transpose(2, 3).sigmoid())

        # 3x3 branch
        x2 = self.conv3x3(g)
        return x1, x2

    @staticmethod
    def descriptors(x1: torch.Tensor, x2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Softmax over the channels of each branch's pooled descriptor, (N*G, C/G) each."""
        return torch.softmax(global_avg_pool2d(x1), dim=-1), torch.softmax(global_avg_pool2d(x2), dim=-1)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Sigmoid attention map per group, shape (N*G, 1, H, W)."""
        n, _, h, w = x.shape
        x1, x2 = self.branches(x)
        # cross-spatial learning: pooled descriptor of one branch against the other branch's pixels
        d1, d2 = self.descriptors(x1, x2)
        y1 = torch.bmm(d1.unsqueeze(1), x2.flatten(2))  # (NG, 1, HW)
        y2 = torch.bmm(d2.unsqueeze(1), x1.flatten(2))
        return (y1 + y2).reshape(n * self.groups, 1, h, w).sigmoid()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        weights = self.attention(x)
        g = x.reshape(n * self.groups, c // self.groups, h, w)
        return (g * weights).reshape(n, c, h, w)

    def extra_macs(self, x_shape: torch.Size) -> int:
        # two (1 x C/G) @ (C/G x HW) products per group
        n, c, h, w = x_shape
        return 2 * n * c * h * w

