"""Parameter, FLOP and throughput profiling.

FLOPs are counted as 2 per multiply-accumulate over convolutions, linear layers
and the EMA attention matrix products. Activations, normalisation, pooling and
element-wise ops are ignored.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from oreyolo.config import ModelConfig
from oreyolo.ema import EMA
from oreyolo.model import build_model, count_parameters


@dataclass
class ProfileReport:
    param_count: int
    gflops: float
    fps: float
    input_size: int

    def as_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        return "\n".join([
            f"param_count = {self.param_count}",
            f"params_m = {self.param_count / 1e6:.3f}",
            f"gflops = {self.gflops:.3f}",
            f"fps = {self.fps:.2f}",
            f"input_size = {self.input_size}",
        ])


def count_macs(model: nn.Module, input_size: int, batch: int = 1) -> int:
    total = 0

    def conv_hook(m: nn.Conv2d, inp, out):
        nonlocal total
        kh, kw = m.kernel_size
        total += out.numel() * (m.in_channels // m.groups) * kh * kw

    def linear_hook(m: nn.Linear, inp, out):
        nonlocal total
        total += out.numel() * m.in_features

    def ema_hook(m: EMA, inp, out):
        nonlocal total
        total += m.extra_macs(inp[0].shape)

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
        elif isinstance(m, EMA):
            handles.append(m.register_forward_hook(ema_hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(batch, 3, input_size, input_size))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total


def count_gflops(model: nn.Module, input_size: int) -> float:
    return 2 * count_macs(model, input_size) / 1e9


def measure_fps(model: nn.Module, input_size: int, runs: int = 10, warmup: int = 2) -> float:
    model.eval()
    x = torch.zeros(1, 3, input_size, input_size)
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        t0 = time.perf_counter()
        for _ in range(runs):
            model(x)
        dt = time.perf_counter() - t0
    return runs / dt if dt > 0 else float("inf")


def profile_model(cfg: ModelConfig, input_size: int | None = None, fps_runs: int = 10) -> ProfileReport:
    size = input_size or cfg.input_size
    model = build_model(cfg)
    fps = measure_fps(model, size, runs=fps_runs) if fps_runs > 0 else 0.0
    return ProfileReport(
        param_count=count_parameters(model),
        gflops=count_gflops(model, size),
        fps=fps,
        input_size=size,
    )
