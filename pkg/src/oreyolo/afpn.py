"""Asymptotic feature pyramid neck with adaptive spatial feature fusion (ASFF).

Also holds the classic FPN+PAN neck used as the ablation baseline.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from oreyolo.errors import InvalidConfigError, ShapeError
from oreyolo.layers import CSP3, ConvBlock


def _octaves(src: int, dst: int) -> int:
    """Signed number of 2x steps from ``src`` to ``dst`` spatial size (positive = upsample)."""
    if src <= 0 or dst <= 0:
        raise InvalidConfigError("spatial sizes must be positive")
    ratio = dst / src
    n = round(math.log2(ratio))
    if 2.0 ** n != ratio:
        raise InvalidConfigError(f"resampling ratio {src}->{dst} is not a power of 2")
    return n


class Resample(nn.Module):
    """Bring a map to another level's size and width.

    Upsampling: nearest-neighbour interpolation then a 1x1 conv. Downsampling: one
    kernel-2 stride-2 conv per octave. Same size: 1x1 conv, or identity if the
    widths already agree.
    """

    def __init__(self, c_in: int, c_out: int, octaves: int):
        super().__init__()
        self.c_in = c_in
        self.octaves = octaves
        if octaves > 0:
            self.up = nn.Upsample(scale_factor=2 ** octaves, mode="nearest")
            self.proj = ConvBlock(c_in, c_out, 1)
        elif octaves < 0:
            steps = []
            for i in range(-octaves):
                last = i == -octaves - 1
                steps.append(ConvBlock(c_in, c_out if last else c_in, k=2, s=2, p=0))
            self.up = nn.Identity()
            self.proj = nn.Sequential(*steps)
        else:
            self.up = nn.Identity()
            self.proj = nn.Identity() if c_in == c_out else ConvBlock(c_in, c_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.c_in:
            raise ShapeError(f"resample expects {self.c_in} channels, got {x.shape[1]}")
        return self.proj(self.up(x))


def resample_to_level(x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Resample ``x`` to ``target``'s spatial size and channel count with fresh weights."""
    if x.shape[2] / target.shape[2] != x.shape[3] / target.shape[3]:
        raise InvalidConfigError("height and width ratios differ")
    n = _octaves(x.shape[2], target.shape[2])
    return Resample(x.shape[1], target.shape[1], n).to(x.dtype)(x)


def asff_weights(lambda_maps: list[torch.Tensor]) -> torch.Tensor:
    """Position-wise softmax over levels.

    ``lambda_maps`` holds one (N, 1, H, W) control map per level; the result has
    shape (N, L, H, W) and sums to 1 along dim 1.
    """
    shape = lambda_maps[0].shape
    for m in lambda_maps[1:]:
        if m.shape != shape:
            raise ShapeError(f"lambda maps differ in shape: {tuple(shape)} vs {tuple(m.shape)}")
    return torch.softmax(torch.cat(lambda_maps, dim=1), dim=1)


def asff_fuse(resampled: list[torch.Tensor], weights: torch.Tensor) -> torch.Tensor:
    """Convex combination of same-shape maps with per-position level weights (N, L, H, W)."""
    shape = resampled[0].shape
    if any(x.shape != shape for x in resampled):
        raise ShapeError("all fused inputs must share one shape")
    if weights.shape[1] != len(resampled) or weights.shape[2:] != shape[2:]:
        raise ShapeError(f"weights of shape {tuple(weights.shape)} do not fit {len(resampled)} inputs of {tuple(shape)}")
    out = resampled[0] * weights[:, 0:1]
    for i in range(1, len(resampled)):
        out = out + resampled[i] * weights[:, i : i + 1]
    return out


class ASFF(nn.Module):
    """Fuse already-resampled inputs with learned softmax weight maps (one 1x1 conv per input)."""

    def __init__(self, channels: int, n_inputs: int):
        super().__init__()
        self.weight_convs = nn.ModuleList(nn.Conv2d(channels, 1, 1) for _ in range(n_inputs))

    def weights(self, xs: list[torch.Tensor]) -> torch.Tensor:
        return asff_weights([conv(x) for conv, x in zip(self.weight_convs, xs)])

    def forward(self, xs: list[torch.Tensor]) -> torch.Tensor:
        if len(xs) != len(self.weight_convs):
            raise ShapeError(f"ASFF built for {len(self.weight_convs)} inputs, got {len(xs)}")
        return asff_fuse(xs, self.weights(xs))


class FusionNode(nn.Module):
    """Resample every source to one level, ASFF-fuse, refine with a CSP3 block."""

    def __init__(self, src_channels: list[int], src_octaves: list[int], c_out: int, repeats: int = 1):
        super().__init__()
        self.resample = nn.ModuleList(Resample(c, c_out, o) for c, o in zip(src_channels, src_octaves))
        self.asff = ASFF(c_out, len(src_channels))
        self.refine = CSP3(c_out, c_out, repeats, shortcut=False)

    def forward(self, xs: list[torch.Tensor]) -> torch.Tensor:
        return self.refine(self.asff([r(x) for r, x in zip(self.resample, xs)]))


class AFPN(nn.Module):
    """Two-stage progressive fusion.

    Stage 1 fuses the two shallow levels (strides 8 and 16) at both of their
    resolutions. Stage 2 brings in the deepest level and fuses all three at
    each resolution.
    """

    def __init__(self, channels: tuple[int, int, int], repeats: int = 1):
        super().__init__()
        c3, c4, c5 = channels
        self.channels = channels
        self.s1_l0 = FusionNode([c3, c4], [0, 1], c3, repeats)
        self.s1_l1 = FusionNode([c3, c4], [-1, 0], c4, repeats)
        self.s2_l0 = FusionNode([c3, c4, c5], [0, 1, 2], c3, repeats)
        self.s2_l1 = FusionNode([c3, c4, c5], [-1, 0, 1], c4, repeats)
        self.s2_l2 = FusionNode([c3, c4, c5], [-2, -1, 0], c5, repeats)

    def forward(self, p3: torch.Tensor, p4: torch.Tensor, p5: torch.Tensor):
        check_pyramid(p3, p4, p5)
        a3 = self.s1_l0([p3, p4])
        a4 = self.s1_l1([p3, p4])
        n3 = self.s2_l0([a3, a4, p5])
        n4 = self.s2_l1([a3, a4, p5])
        n5 = self.s2_l2([a3, a4, p5])
        return n3, n4, n5


class PAN(nn.Module):
    """Top-down FPN followed by bottom-up PAN, as in the YOLOv5 head."""

    def __init__(self, channels: tuple[int, int, int], repeats: int = 1):
        super().__init__()
        c3, c4, c5 = channels
        self.channels = channels
        self.lat5 = ConvBlock(c5, c4, 1)
        self.td4 = CSP3(2 * c4, c4, repeats, shortcut=False)
        self.lat4 = ConvBlock(c4, c3, 1)
        self.td3 = CSP3(2 * c3, c3, repeats, shortcut=False)
        self.down3 = ConvBlock(c3, c3, 3, 2)
        self.bu4 = CSP3(2 * c3, c4, repeats, shortcut=False)
        self.down4 = ConvBlock(c4, c4, 3, 2)
        self.bu5 = CSP3(2 * c4, c5, repeats, shortcut=False)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, p3: torch.Tensor, p4: torch.Tensor, p5: torch.Tensor):
        check_pyramid(p3, p4, p5)
        l5 = self.lat5(p5)
        t4 = self.td4(torch.cat([self.up(l5), p4], 1))
        l4 = self.lat4(t4)
        n3 = self.td3(torch.cat([self.up(l4), p3], 1))
        n4 = self.bu4(torch.cat([self.down3(n3), l4], 1))
        n5 = self.bu5(torch.cat([self.down4(n4), l5], 1))
        return n3, n4, n5


def check_pyramid(p3: torch.Tensor, p4: torch.Tensor, p5: torch.Tensor) -> None:
    for lo, hi in ((p3, p4), (p4, p5)):
        if lo.shape[2] != 2 * hi.shape[2] or lo.shape[3] != 2 * hi.shape[3]:
            raise InvalidConfigError(
                f"pyramid levels must halve in size, got {tuple(lo.shape[2:])} -> {tuple(hi.shape[2:])}"
            )


def afpn_forward(p3: torch.Tensor, p4: torch.Tensor, p5: torch.Tensor, neck: AFPN | None = None):
    if neck is None:
        neck = AFPN((p3.shape[1], p4.shape[1], p5.shape[1])).to(p3.dtype)
    return neck(p3, p4, p5)


def build_neck(kind: str, channels: tuple[int, int, int], repeats: int = 1) -> nn.Module:
    if kind == "AFPN":
        return AFPN(channels, repeats)
    if kind == "PAN":
        return PAN(channels, repeats)
    raise InvalidConfigError(f"unknown neck kind {kind!r}")
