"""Triple-scale fusion residual blocks and window attention."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

from .freq_blocks import GDN, ContractError, conv, leaky

BRANCH_KERNELS = (3, 5, 7)


class ResidualBlock(nn.Module):
    """conv - LeakyReLU - conv with identity skip."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv1 = conv(channels, channels, kernel_size)
        self.conv2 = conv(channels, channels, kernel_size)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(leaky(self.conv1(x)))


class TSFRB(nn.Module):
    """Triple-scale feature fusion residual block.

    Three branches (3x3, 5x5, 7x7) are fused by a 1x1 convolution, the fused
    map is refined per branch by a residual block and a convolution of the
    branch's kernel size, fused a second time and added to the input.
    """

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.branches = nn.ModuleList(conv(c, c, k) for k in BRANCH_KERNELS)
        self.fuse1 = conv(3 * c, c, 1)
        self.norm1 = GDN(c)
        self.refine_rb = nn.ModuleList(ResidualBlock(c) for _ in BRANCH_KERNELS)
        self.refine_conv = nn.ModuleList(conv(c, c, k) for k in BRANCH_KERNELS)
        self.fuse2 = conv(3 * c, c, 1)
        self.norm2 = GDN(c)
        self.channels = c

    def forward(self, f_in: Tensor) -> Tensor:
        if f_in.shape[1] != self.channels:
            raise ContractError(f"expected {self.channels} channels, got {f_in.shape[1]}")
        first = torch.cat([leaky(b(f_in)) for b in self.branches], dim=1)
        fused = self.norm1(self.fuse1(first))
        second = torch.cat(
            [leaky(c(rb(fused))) for rb, c in zip(self.refine_rb, self.refine_conv)], dim=1
        )
        return f_in + self.norm2(self.fuse2(second))


class CTSFRB(nn.Module):
    """Two cascaded TSFRBs under an outer skip, or a single TSFRB when ``cascaded=False``."""

    def __init__(self, channels: int, cascaded: bool = True):
        super().__init__()
        self.cascaded = cascaded
        self.block1 = TSFRB(channels)
        self.block2 = TSFRB(channels) if cascaded else None

    def forward(self, f_in: Tensor) -> Tensor:
        if not self.cascaded:
            return self.block1(f_in)
        return f_in + self.block2(self.block1(f_in))


def window_partition(x: Tensor, ws: int) -> Tensor:
    """(B, C, H, W) -> (B * nW, ws*ws, C), windows in raster order."""
    b, c, h, w = x.shape
    x = x.view(b, c, h // ws, ws, w // ws, ws)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, ws * ws, c)


def window_merge(win: Tensor, ws: int, b: int, h: int, w: int) -> Tensor:
    c = win.shape[-1]
    x = win.view(b, h // ws, w // ws, ws, ws, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


def fit_window(h: int, w: int, window_size: int) -> int:
    """Largest window not above ``window_size`` that tiles an ``h x w`` map."""
    for ws in range(min(window_size, h, w), 0, -1):
        if h % ws == 0 and w % ws == 0:
            return ws
    return 1


class WindowAttention(nn.Module):
    """Single-head self-attention inside non-overlapping windows, with residual.

    ``window_size=None`` picks the largest window not exceeding
    ``max_window`` that tiles the input (see :func:`fit_window`).
    """

    def __init__(self, channels: int, window_size: Optional[int] = 8, max_window: int = 8):
        super().__init__()
        self.window_size = window_size
        self.max_window = max_window
        self.norm = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.scale = 1.0 / math.sqrt(channels)

    def forward(self, f_in: Tensor, return_attention: bool = False):
        b, c, h, w = f_in.shape
        ws = self.window_size or fit_window(h, w, self.max_window)
        if h % ws or w % ws:
            raise ContractError(f"spatial size {h}x{w} not divisible by window {ws}")
        tokens = window_partition(f_in, ws)
        q, k, v = self.qkv(self.norm(tokens)).chunk(3, dim=-1)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = window_merge(self.proj(attn @ v), ws, b, h, w)
        out = f_in + out
        if return_attention:
            return out, attn
        return out
