"""Frequency-decomposed convolution blocks.

Features are carried as a :class:`FrequencyTriple` of high, mid and low
bands stored at resolutions ``r``, ``r/2`` and ``r/4``. Band ``b`` (0 = high,
1 = mid, 2 = low) therefore sits at scale ``2**b`` relative to the high band
and every cross-band transfer resamples by ``2**|i - j|``.

Besides the three-band blocks (:class:`MoConv`, :class:`MToRBDown`,
:class:`MToRBUp`) this module carries the two-band baselines used for
ablations (:class:`OctConv`, :class:`GoConv`, :class:`ToRB`) and GDN/IGDN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

BANDS = ("high", "mid", "low")
_TAG = ("h", "m", "l")
LEAKY_SLOPE = 0.01


class ContractError(ValueError):
    """Raised when tensors violate a block's shape contract."""


@dataclass(frozen=True)
class ChannelSplit:
    """Fractions of channels assigned to the low (``alpha``) and mid (``beta``) bands."""

    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta > 1 + 1e-12:
            raise ValueError(f"invalid channel split alpha={self.alpha} beta={self.beta}")

    def counts(self, channels: int) -> tuple[int, int, int]:
        """Return ``(c_high, c_mid, c_low)``; the high band absorbs rounding."""
        c_low = math.floor(self.alpha * channels + 1e-9)
        c_mid = math.floor(self.beta * channels + 1e-9)
        return channels - c_low - c_mid, c_mid, c_low


ALL_HIGH = ChannelSplit(0.0, 0.0)


class FrequencyTriple(NamedTuple):
    high: Optional[Tensor]
    mid: Optional[Tensor] = None
    low: Optional[Tensor] = None

    def map(self, fn) -> "FrequencyTriple":
        return FrequencyTriple(*(None if t is None else fn(t) for t in self))

    @property
    def shapes(self) -> tuple:
        return tuple(None if t is None else tuple(t.shape) for t in self)


def check_triple(x: FrequencyTriple, counts: tuple[int, int, int]) -> None:
    """Validate band presence, channel counts and the 1 : 1/2 : 1/4 resolution law."""
    ref = None
    for b, (t, c) in enumerate(zip(x, counts)):
        if c == 0:
            if t is not None and t.shape[1] != 0:
                raise ContractError(f"{BANDS[b]} band should be absent")
            continue
        if t is None:
            raise ContractError(f"{BANDS[b]} band missing (expected {c} channels)")
        if t.dim() != 4 or t.shape[1] != c:
            raise ContractError(f"{BANDS[b]} band has shape {tuple(t.shape)}, expected {c} channels")
        full = (t.shape[2] * 2**b, t.shape[3] * 2**b)
        if ref is None:
            ref = full
        elif full != ref:
            raise ContractError(f"band resolutions {x.shapes} break the 1:1/2:1/4 law")


def conv(cin: int, cout: int, kernel_size: int = 3, stride: int = 1, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size, stride=stride, padding=kernel_size // 2, bias=bias)


def down(cin: int, cout: int, factor: int, bias: bool = True) -> nn.Conv2d:
    """Strided convolution reducing resolution by ``factor`` (kernel ``factor + 1``)."""
    return conv(cin, cout, factor + 1, stride=factor, bias=bias)


def up(cin: int, cout: int, factor: int, bias: bool = True) -> nn.ConvTranspose2d:
    """Transposed convolution increasing resolution by exactly ``factor``."""
    k = factor + 1
    return nn.ConvTranspose2d(
        cin, cout, k, stride=factor, padding=k // 2, output_padding=factor - 1, bias=bias
    )


def resample_conv(cin: int, cout: int, src: int, dst: int, kernel_size: int = 3, bias: bool = True):
    """Convolution moving features from band ``src`` to band ``dst``."""
    if src == dst:
        return conv(cin, cout, kernel_size, bias=bias)
    if dst > src:
        return down(cin, cout, 2 ** (dst - src), bias=bias)
    return up(cin, cout, 2 ** (src - dst), bias=bias)


def leaky(x: Tensor) -> Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


class GDN(nn.Module):
    r"""Generalized divisive normalization.

    ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)``; the inverse variant
    multiplies instead. ``beta = beta_min + t^2`` and ``gamma = g^2`` keep both
    nonnegative with the denominator bounded below by ``beta_min``.
    """

    def __init__(self, channels: int, inverse: bool = False, beta_min: float = 1e-6, gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.beta_min = beta_min
        self.t = nn.Parameter(torch.full((channels,), math.sqrt(1.0 - beta_min)))
        # small off-diagonal pedestal so off-diagonal g receives gradient
        g = torch.full((channels, channels), 1e-4) + gamma_init * torch.eye(channels)
        self.g = nn.Parameter(g.sqrt())

    @property
    def beta(self) -> Tensor:
        return self.beta_min + self.t**2

    @property
    def gamma(self) -> Tensor:
        return self.g**2

    @torch.no_grad()
    def set_params(self, beta: Tensor, gamma: Tensor) -> None:
        self.t.copy_((torch.as_tensor(beta) - self.beta_min).clamp_min(0).sqrt())
        self.g.copy_(torch.as_tensor(gamma).clamp_min(0).sqrt())

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        norm = F.conv2d(x * x, self.gamma.view(c, c, 1, 1), self.beta)
        norm = torch.sqrt(norm)
        return x * norm if self.inverse else x / norm


def igdn(channels: int) -> GDN:
    return GDN(channels, inverse=True)


class MoConv(nn.Module):
    """First-stage three-band exchange.

    Each output band sums an intra-band 3x3 convolution with resampling
    convolutions from every other present input band: strided convolutions
    towards coarser bands, transposed convolutions towards finer ones.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        split_in: ChannelSplit,
        split_out: ChannelSplit,
        kernel_size: int = 3,
        bias: bool = True,
    ):
        super().__init__()
        self.in_counts = split_in.counts(in_channels)
        self.out_counts = split_out.counts(out_channels)
        self.paths = nn.ModuleDict()
        for i, ci in enumerate(self.in_counts):
            for j, co in enumerate(self.out_counts):
                if ci and co:
                    self.paths[f"{_TAG[i]}2{_TAG[j]}"] = resample_conv(ci, co, i, j, kernel_size, bias)

    def forward(self, x: FrequencyTriple) -> FrequencyTriple:
        check_triple(x, self.in_counts)
        out = []
        for j, co in enumerate(self.out_counts):
            if not co:
                out.append(None)
                continue
            acc = None
            for i, ci in enumerate(self.in_counts):
                if not ci:
                    continue
                term = self.paths[f"{_TAG[i]}2{_TAG[j]}"](x[i])
                acc = term if acc is None else acc + term
            out.append(acc)
        return FrequencyTriple(*out)


class MToRBDown(nn.Module):
    """Multi-frequency two-stage octave residual block with stride-2 output.

    ``Y^b = conv_s2(act(MoConv(X))^b) + shortcut_s2(X^b)`` for every band;
    all band resolutions are halved.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        split_in: ChannelSplit,
        split_out: ChannelSplit,
        bias: bool = True,
        activation: bool = True,
    ):
        super().__init__()
        if any((a == 0) != (b == 0) for a, b in zip(split_in.counts(in_channels), split_out.counts(out_channels))):
            raise ValueError("residual block needs identical band presence at input and output")
        self.activation = activation
        self.moconv = MoConv(in_channels, out_channels, split_in, split_out, bias=bias)
        self.stage2 = nn.ModuleList()
        self.shortcut = nn.ModuleList()
        for ci, co in zip(self.moconv.in_counts, self.moconv.out_counts):
            self.stage2.append(self._stage2(co, co, bias) if co else nn.Identity())
            self.shortcut.append(self._shortcut(ci, co, bias) if co else nn.Identity())

    def _stage2(self, cin, cout, bias):
        return conv(cin, cout, 3, stride=2, bias=bias)

    def _shortcut(self, cin, cout, bias):
        return conv(cin, cout, 1, stride=2, bias=bias)

    def _check(self, x: FrequencyTriple) -> None:
        for t in x:
            if t is not None and (t.shape[2] % 2 or t.shape[3] % 2):
                raise ContractError(f"odd spatial size in {x.shapes}; pad the input first")

    def forward(self, x: FrequencyTriple) -> FrequencyTriple:
        self._check(x)
        yp = self.moconv(x)
        out = []
        for b, (xb, yb) in enumerate(zip(x, yp)):
            if yb is None:
                out.append(None)
                continue
            if self.activation:
                yb = leaky(yb)
            out.append(self.stage2[b](yb) + self.shortcut[b](xb))
        return FrequencyTriple(*out)


class MToRBUp(MToRBDown):
    """Synthesis-side mirror of :class:`MToRBDown`; every band resolution doubles."""

    def _stage2(self, cin, cout, bias):
        return up(cin, cout, 2, bias=bias)

    def _shortcut(self, cin, cout, bias):
        return nn.ConvTranspose2d(cin, cout, 2, stride=2, bias=bias)

    def _check(self, x: FrequencyTriple) -> None:
        pass


# --- two-band baselines --------------------------------------------------------


def _two_band_counts(channels: int, alpha: float) -> tuple[int, int]:
    c_low = math.floor(alpha * channels + 1e-9)
    return channels - c_low, c_low


class OctConv(nn.Module):
    """Original octave convolution in its stride-2 form.

    ``Y^H = f(pool(X^H, 2)) + pool(up(f(X^L), 2), 2)`` and
    ``Y^L = f(pool(X^L, 2)) + f(pool(X^H, 4))`` with average pooling and
    nearest-neighbour upsampling.
    """

    def __init__(self, in_channels, out_channels, alpha_in, alpha_out, kernel_size=3, bias=True):
        super().__init__()
        self.in_counts = _two_band_counts(in_channels, alpha_in)
        self.out_counts = _two_band_counts(out_channels, alpha_out)
        (hi, li), (ho, lo) = self.in_counts, self.out_counts
        self.h2h = conv(hi, ho, kernel_size, bias=bias)
        self.l2h = conv(li, ho, kernel_size, bias=bias) if li else None
        self.l2l = conv(li, lo, kernel_size, bias=bias) if li and lo else None
        self.h2l = conv(hi, lo, kernel_size, bias=bias) if lo else None

    def forward(self, x_h: Tensor, x_l: Optional[Tensor] = None):
        y_h = self.h2h(F.avg_pool2d(x_h, 2))
        if self.l2h is not None:
            y_h = y_h + F.avg_pool2d(F.interpolate(self.l2h(x_l), scale_factor=2, mode="nearest"), 2)
        y_l = None
        if self.h2l is not None:
            y_l = self.h2l(F.avg_pool2d(x_h, 4))
            if self.l2l is not None:
                y_l = y_l + self.l2l(F.avg_pool2d(x_l, 2))
        return y_h, y_l


class GoConv(nn.Module):
    """Generalized octave convolution: strided convolutions replace pooling.

    Cross-band terms consume the intra-band outputs ``Y^{H->H}``, ``Y^{L->L}``.
    """

    def __init__(self, in_channels, out_channels, alpha_in, alpha_out, bias=True):
        super().__init__()
        self.in_counts = _two_band_counts(in_channels, alpha_in)
        self.out_counts = _two_band_counts(out_channels, alpha_out)
        (hi, li), (ho, lo) = self.in_counts, self.out_counts
        self.h2h = down(hi, ho, 2, bias=bias)
        self.l2l = down(li, lo, 2, bias=bias) if li and lo else None
        self.l2h = up(lo, ho, 2, bias=bias) if li and lo else None
        self.h2l = down(ho, lo, 2, bias=bias) if lo else None

    def forward(self, x_h: Tensor, x_l: Optional[Tensor] = None):
        y_hh = self.h2h(x_h)
        y_ll = self.l2l(x_l) if self.l2l is not None else None
        y_h = y_hh if y_ll is None else y_hh + self.l2h(y_ll)
        y_l = None
        if self.h2l is not None:
            y_l = self.h2l(y_hh)
            if y_ll is not None:
                y_l = y_l + y_ll
        return y_h, y_l


class ToRB(nn.Module):
    """Two-stage octave residual block (two bands).

    First stage ``Y^H_p = f(X^H) + f_up(X^L)``, ``Y^L_p = f(X^L) + f_down(X^H)``;
    second stage ``Y^b = f_down(Y^b_p) + f_sc(X^b)``.
    """

    def __init__(self, in_channels, out_channels, alpha, bias=True, activation=True):
        super().__init__()
        self.activation = activation
        self.in_counts = _two_band_counts(in_channels, alpha)
        self.out_counts = _two_band_counts(out_channels, alpha)
        (hi, li), (ho, lo) = self.in_counts, self.out_counts
        self.h2h = conv(hi, ho, bias=bias)
        self.sh = conv(ho, ho, 3, stride=2, bias=bias)
        self.sch = conv(hi, ho, 1, stride=2, bias=bias)
        self.l2h = up(li, ho, 2, bias=bias) if li else None
        if lo:
            self.l2l = conv(li, lo, bias=bias)
            self.h2l = down(hi, lo, 2, bias=bias)
            self.sl = conv(lo, lo, 3, stride=2, bias=bias)
            self.scl = conv(li, lo, 1, stride=2, bias=bias)

    def forward(self, x_h: Tensor, x_l: Optional[Tensor] = None):
        act = leaky if self.activation else (lambda t: t)
        yp_h = self.h2h(x_h)
        if self.l2h is not None:
            yp_h = yp_h + self.l2h(x_l)
        y_h = self.sh(act(yp_h)) + self.sch(x_h)
        y_l = None
        if self.out_counts[1]:
            yp_l = self.l2l(x_l) + self.h2l(x_h)
            y_l = self.sl(act(yp_l)) + self.scl(x_l)
        return y_h, y_l
