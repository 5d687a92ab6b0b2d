"""Full detector assembly: backbone -> SPPF/SPPFCSPC -> AFPN/PAN neck -> YOLO head."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from oreyolo.afpn import build_neck
from oreyolo.config import STRIDES, ModelConfig
from oreyolo.errors import ShapeError
from oreyolo.layers import build_backbone, scale_depth
from oreyolo.spp import build_spp


class DetectHead(nn.Module):
    """Per-level 1x1 convolutions producing 3 x (5 + num_classes) channels per cell.

    Output per level has shape (N, 3, H, W, 5 + num_classes) with raw
    ``t_x, t_y, t_w, t_h, p_0, class logits`` along the last axis.
    """

    def __init__(self, channels: tuple[int, int, int], num_classes: int, num_anchors: int = 3):
        super().__init__()
        self.num_classes = num_classes
        self.num_anchors = num_anchors
        self.no = 5 + num_classes
        self.convs = nn.ModuleList(nn.Conv2d(c, num_anchors * self.no, 1) for c in channels)

    def init_biases(self, input_size: int) -> None:
        # objectness prior of a few objects per image, flat class prior
        for conv, stride in zip(self.convs, STRIDES):
            b = conv.bias.view(self.num_anchors, -1)
            with torch.no_grad():
                b[:, 4] += math.log(8 / (input_size / stride) ** 2)
                b[:, 5:] += math.log(0.6 / (self.num_classes - 0.99))

    def forward(self, feats) -> list[torch.Tensor]:
        outs = []
        for conv, x in zip(self.convs, feats):
            n, _, h, w = x.shape
            y = conv(x).view(n, self.num_anchors, self.no, h, w).permute(0, 1, 3, 4, 2).contiguous()
            outs.append(y)
        return outs


class OreYOLO(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.backbone = build_backbone(cfg)
        c3, c4, c5 = self.backbone.out_channels
        self.spp = build_spp(cfg.spp_kind, c5)
        self.neck = build_neck(cfg.neck_kind, (c3, c4, c5), scale_depth(3, cfg.depth_multiple))
        self.head = DetectHead((c3, c4, c5), cfg.num_classes)
        self.register_buffer(
            "anchors", torch.tensor(cfg.anchors, dtype=torch.float32), persistent=False
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected an (N, 3, H, W) image batch, got {tuple(x.shape)}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ShapeError(f"input height and width must be multiples of 32, got {tuple(x.shape[2:])}")
        p3, p4, p5 = self.backbone(x)
        p5 = self.spp(p5)
        return self.head(self.neck(p3, p4, p5))


def build_model(cfg: ModelConfig | None = None) -> OreYOLO:
    return OreYOLO(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
