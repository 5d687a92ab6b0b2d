"""Fast spatial pyramid pooling (SPPF) and its cross-stage-partial form (SPPFCSPC)."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from oreyolo.errors import InvalidConfigError, ShapeError
from oreyolo.layers import ConvBlock


def _check_kernel(k: int) -> None:
    if k < 3 or k % 2 == 0:
        raise InvalidConfigError(f"pool kernel must be odd and >= 3, got {k}")


def sppf_chain(x: torch.Tensor, k: int = 5) -> torch.Tensor:
    """Concatenate ``x`` with three chained stride-1 max pools of kernel ``k`` (4x channels)."""
    _check_kernel(k)
    p1 = F.max_pool2d(x, k, 1, k // 2)
    p2 = F.max_pool2d(p1, k, 1, k // 2)
    p3 = F.max_pool2d(p2, k, 1, k // 2)
    return torch.cat([x, p1, p2, p3], dim=1)


class SPPF(nn.Module):
    def __init__(self, channels: int, k: int = 5):
        super().__init__()
        _check_kernel(k)
        hidden = channels // 2
        self.channels = channels
        self.k = k
        self.cv1 = ConvBlock(channels, hidden, 1)
        self.cv2 = ConvBlock(hidden * 4, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"SPPF expects {self.channels} channels, got {x.shape[1]}")
        return self.cv2(sppf_chain(self.cv1(x), self.k))


class SPPFCSPC(nn.Module):
    """SPPF wrapped in a CSP structure.

    Path A: 1x1 -> 3x3 -> 1x1 -> pooling chain -> 1x1 -> 3x3.
    Path B: a single 1x1 residual projection. Hidden width equals ``channels``.
    """

    def __init__(self, channels: int, k: int = 5):
        super().__init__()
        _check_kernel(k)
        c = channels
        self.channels = channels
        self.k = k
        self.cv1 = ConvBlock(c, c, 1)
        self.cv2 = ConvBlock(c, c, 1)
        self.cv3 = ConvBlock(c, c, 3)
        self.cv4 = ConvBlock(c, c, 1)
        self.cv5 = ConvBlock(4 * c, c, 1)
        self.cv6 = ConvBlock(c, c, 3)
        self.cv7 = ConvBlock(2 * c, c, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"SPPFCSPC expects {self.channels} channels, got {x.shape[1]}")
        a = self.cv4(self.cv3(self.cv1(x)))
        a = self.cv6(self.cv5(sppf_chain(a, self.k)))
        return self.cv7(torch.cat([a, self.cv2(x)], dim=1))


def build_spp(kind: str, channels: int, k: int = 5) -> nn.Module:
    if kind == "SPPFCSPC":
        return SPPFCSPC(channels, k)
    if kind == "SPPF":
        return SPPF(channels, k)
    raise InvalidConfigError(f"unknown spp kind {kind!r}")
