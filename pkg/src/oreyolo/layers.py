"""Convolution blocks, CSP3 blocks, width/depth scaling and the backbone."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from oreyolo.ema import EMA
from oreyolo.errors import InvalidConfigError, ShapeError

# stem, then the four down-sampling stages
BACKBONE_WIDTHS = (64, 128, 256, 512, 1024)
BACKBONE_REPEATS = (3, 6, 9, 3)


def scale_channels(base: int, width_multiple: float) -> int:
    """Scaled width rounded up to a multiple of 8 (minimum 8)."""
    if base <= 0:
        raise InvalidConfigError(f"channel count must be positive, got {base}")
    if width_multiple <= 0:
        raise InvalidConfigError(f"width_multiple must be positive, got {width_multiple}")
    return max(8, int(math.ceil(base * width_multiple / 8) * 8))


def scale_depth(base_repeats: int, depth_multiple: float) -> int:
    return max(round(base_repeats * depth_multiple), 1)


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # CBS, CBM, CSP3 or CSP3_EMA
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    repeats: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("CBS", "CBM", "CSP3", "CSP3_EMA"):
            raise InvalidConfigError(f"unknown block kind {self.kind!r}")
        if self.repeats < 1:
            raise InvalidConfigError("repeats must be >= 1")
        if self.stride not in (1, 2):
            raise InvalidConfigError("stride must be 1 or 2")


class ConvBlock(nn.Module):
    """Bias-free convolution, batch norm, then SiLU (CBS) or Mish (CBM)."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, s: int = 1, p: int | None = None, act: str = "silu"):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.conv = nn.Conv2d(c_in, c_out, k, s, (k - 1) // 2 if p is None else p, bias=False)
        self.bn = nn.BatchNorm2d(c_out, eps=1e-3, momentum=0.03)
        self.act = nn.Mish() if act == "mish" else nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.c_in:
            raise ShapeError(f"block expects {self.c_in} input channels, got {x.shape[1]}")
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c: int, shortcut: bool = True):
        super().__init__()
        self.cv1 = ConvBlock(c, c, 1)
        self.cv2 = ConvBlock(c, c, 3)
        self.add = shortcut

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class CSP3(nn.Module):
    """Cross-stage-partial block with three convolutions.

    One half goes through ``repeats`` bottlenecks, the other half is a single
    1x1 projection; both are concatenated (optionally re-weighted by EMA) and
    projected to ``c_out``.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        repeats: int = 1,
        shortcut: bool = True,
        use_ema: bool = False,
        ema_groups: int = 4,
    ):
        super().__init__()
        if repeats < 1:
            raise InvalidConfigError("repeats must be >= 1")
        hidden = c_out // 2
        self.c_in = c_in
        self.cv1 = ConvBlock(c_in, hidden, 1)
        self.cv2 = ConvBlock(c_in, hidden, 1)
        self.m = nn.Sequential(*(Bottleneck(hidden, shortcut) for _ in range(repeats)))
        self.attn = EMA(2 * hidden, ema_groups) if use_ema else nn.Identity()
        self.cv3 = ConvBlock(2 * hidden, c_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.c_in:
            raise ShapeError(f"CSP3 expects {self.c_in} input channels, got {x.shape[1]}")
        y = torch.cat([self.m(self.cv1(x)), self.cv2(x)], dim=1)
        return self.cv3(self.attn(y))


def make_block(spec: BlockSpec, ema_groups: int = 4) -> nn.Module:
    if spec.kind in ("CBS", "CBM"):
        return ConvBlock(spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                         act="mish" if spec.kind == "CBM" else "silu")
    return CSP3(spec.in_channels, spec.out_channels, spec.repeats,
                use_ema=spec.kind == "CSP3_EMA", ema_groups=ema_groups)


def conv_block(x: torch.Tensor, spec: BlockSpec) -> torch.Tensor:
    """Run a freshly initialised CBS/CBM block described by ``spec`` on ``x``."""
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"spec expects {spec.in_channels} channels, got {x.shape[1]}")
    return make_block(spec)(x)


def csp3_block(x: torch.Tensor, spec: BlockSpec, use_ema: bool = False) -> torch.Tensor:
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"spec expects {spec.in_channels} channels, got {x.shape[1]}")
    kind = "CSP3_EMA" if use_ema else "CSP3"
    return make_block(BlockSpec(kind, spec.in_channels, spec.out_channels, repeats=spec.repeats))(x)


def backbone_specs(depth_multiple: float, width_multiple: float, ema_stages=()) -> list[list[BlockSpec]]:
    """Block layout: a k6/s2 CBM stem, then four stages of (CBM k3/s2, CSP3[_EMA])."""
    widths = [scale_channels(c, width_multiple) for c in BACKBONE_WIDTHS]
    stem = [BlockSpec("CBM", 3, widths[0], kernel=6, stride=2)]
    stages = []
    for i, base_n in enumerate(BACKBONE_REPEATS):
        c_in, c_out = widths[i], widths[i + 1]
        kind = "CSP3_EMA" if i in ema_stages else "CSP3"
        stages.append([
            BlockSpec("CBM", c_in, c_out, kernel=3, stride=2),
            BlockSpec(kind, c_out, c_out, repeats=scale_depth(base_n, depth_multiple)),
        ])
    return [stem, *stages]


class Backbone(nn.Module):
    """Maps an image batch to feature maps at strides 8, 16 and 32."""

    def __init__(self, depth_multiple: float = 0.20, width_multiple: float = 0.25,
                 use_ema: bool = False, ema_groups: int = 4, ema_stages=(3,)):
        super().__init__()
        specs = backbone_specs(depth_multiple, width_multiple, ema_stages if use_ema else ())
        self.specs = specs
        self.stem = make_block(specs[0][0])
        self.stages = nn.ModuleList(
            nn.Sequential(*(make_block(s, ema_groups) for s in stage)) for stage in specs[1:]
        )
        self.out_channels = tuple(stage[-1].out_channels for stage in specs[2:])

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs[1], outs[2], outs[3]


def build_backbone(cfg) -> Backbone:
    """Backbone for a :class:`~oreyolo.config.ModelConfig`."""
    return Backbone(cfg.depth_multiple, cfg.width_multiple, cfg.use_ema, cfg.ema_groups, cfg.ema_stages)
