"""Per-band learned quantization step sizes."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

from .freq_blocks import leaky

DELTA_MIN = 0.05
DELTA_MAX = 4.0


def round_half_away(x: Tensor) -> Tensor:
    """Round to nearest integer, ties away from zero (the bitstream's rounding rule)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


class DeltaHead(nn.Module):
    """Predicts a per-element step map ``delta`` from a band's hyperprior.

    Two 1x1 convolutions followed by ``exp(clamp(t, ln dmin, ln dmax))``.
    Biases start at zero, so a zero hyperprior yields ``delta == 1``.
    """

    def __init__(self, in_channels: int, out_channels: int, hidden: Optional[int] = None,
                 delta_min: float = DELTA_MIN, delta_max: float = DELTA_MAX):
        super().__init__()
        hidden = hidden or max(out_channels, in_channels // 2)
        self.conv1 = nn.Conv2d(in_channels, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, out_channels, 1)
        nn.init.zeros_(self.conv1.bias)
        nn.init.zeros_(self.conv2.bias)
        with torch.no_grad():
            self.conv2.weight.mul_(0.1)
        self.log_min = math.log(delta_min)
        self.log_max = math.log(delta_max)

    def forward(self, psi: Tensor) -> Tensor:
        t = self.conv2(leaky(self.conv1(psi)))
        return torch.exp(torch.clamp(t, self.log_min, self.log_max))


def quantize_train(y: Tensor, delta: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
    """Additive scaled-uniform noise ``y + delta * (v - 1/2)``, ``v ~ U(0, 1)``.

    Reparameterized, so gradients reach both ``y`` and ``delta``.
    """
    v = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device)
    return y + delta * (v - 0.5)


def quantize_test(y: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Return integer symbols ``k = round(y / delta)`` and ``y_hat = delta * k``."""
    k = round_half_away(y / delta)
    return k.to(torch.int64), delta * k
