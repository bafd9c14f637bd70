"""Spatial and cross-band context models and entropy-parameter networks.

Within a band, symbols are coded in two checkerboard stages: anchors
(``(i + j)`` even) first, from the hyperprior and cross-band context alone,
then non-anchors, which additionally see a 5x5 convolution over the decoded
anchors. Across bands the decode order is high, mid, low; a lower band may
condition on fully decoded higher bands through stride-2 residual blocks.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

from .entropy_models import SIGMA_MIN, lower_bound
from .freq_blocks import ContractError, conv, leaky

# which cross-band contexts feed the entropy parameters, by ablation case
CONTEXT_CASES = {
    0: frozenset(),
    1: frozenset({"h2l"}),
    2: frozenset({"h2l", "m2l"}),
    3: frozenset({"h2l", "m2l", "h2m"}),
}


def anchor_mask(h: int, w: int, like: Optional[Tensor] = None) -> Tensor:
    """``(1, 1, h, w)`` mask with ones at anchor positions (``(i + j)`` even)."""
    i = torch.arange(h).view(h, 1)
    j = torch.arange(w).view(1, w)
    m = ((i + j) % 2 == 0).view(1, 1, h, w)
    if like is not None:
        return m.to(dtype=like.dtype, device=like.device)
    return m.float()


class IntraContext(nn.Module):
    """Checkerboard context: a 5x5 convolution over anchor-masked latents.

    The output is zero at anchor positions, so anchors depend only on the
    hyperprior and cross-band context.
    """

    def __init__(self, channels: int, out_channels: int, kernel_size: int = 5):
        super().__init__()
        self.conv = conv(channels, out_channels, kernel_size)
        self.out_channels = out_channels

    def forward(self, y_hat: Optional[Tensor], stage: int = 2, shape: Optional[tuple] = None) -> Tensor:
        """Context for ``stage`` 1 (all zero) or 2 (from decoded anchors of ``y_hat``).

        At stage 1 ``y_hat`` may be ``None`` if ``shape = (B, H, W)`` is given.
        """
        if stage == 1:
            if y_hat is None:
                b, h, w = shape
                return torch.zeros(b, self.out_channels, h, w, dtype=self.conv.weight.dtype)
            b, _, h, w = y_hat.shape
            return y_hat.new_zeros(b, self.out_channels, h, w)
        if stage != 2:
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        if y_hat is None:
            raise ContractError("stage-2 context needs the decoded anchors")
        mask = anchor_mask(y_hat.shape[2], y_hat.shape[3], y_hat)
        return self.conv(y_hat * mask) * (1 - mask)


class DownResidualBlock(nn.Module):
    """conv(stride 2) - LeakyReLU - conv, plus a 1x1 stride-2 skip."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = conv(in_channels, out_channels, 3, stride=2)
        self.conv2 = conv(out_channels, out_channels, 3)
        self.skip = conv(in_channels, out_channels, 1, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(leaky(self.conv1(x))) + self.skip(x)


class CrossContext(nn.Module):
    """Carries a decoded higher band down to a lower band's resolution.

    ``steps`` stride-2 residual blocks: one between adjacent bands, two from
    the high band to the low band.
    """

    def __init__(self, in_channels: int, out_channels: int, steps: int):
        super().__init__()
        blocks = [DownResidualBlock(in_channels, out_channels)]
        blocks += [DownResidualBlock(out_channels, out_channels) for _ in range(steps - 1)]
        self.blocks = nn.Sequential(*blocks)
        self.steps = steps
        self.out_channels = out_channels

    def forward(self, y_src: Tensor, target_hw: Optional[tuple] = None) -> Tensor:
        if target_hw is not None:
            f = 2**self.steps
            if (y_src.shape[2], y_src.shape[3]) != (target_hw[0] * f, target_hw[1] * f):
                raise ContractError(
                    f"source {tuple(y_src.shape[2:])} is not {f}x the target {tuple(target_hw)}"
                )
        return self.blocks(y_src)


class EntropyParameters(nn.Module):
    """Three 1x1 convolutions mapping concatenated features to ``(mu, sigma)``.

    The first ``channels`` outputs are the mean, the rest the scale, which is
    lower-bounded by ``SIGMA_MIN``.
    """

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        h1, h2 = in_channels * 2 // 3, in_channels // 3
        self.conv1 = conv(in_channels, h1, 1)
        self.conv2 = conv(h1, h2, 1)
        self.conv3 = conv(h2, 2 * channels, 1)
        with torch.no_grad():
            self.conv3.bias[channels:].fill_(1.0)
        self.in_channels = in_channels
        self.channels = channels

    def forward(self, *features: Tensor) -> tuple[Tensor, Tensor]:
        hw = features[0].shape[2:]
        for f in features:
            if f.shape[2:] != hw:
                raise ContractError(f"feature resolutions differ: {[tuple(f.shape[2:]) for f in features]}")
        x = torch.cat(features, dim=1)
        if x.shape[1] != self.in_channels:
            raise ContractError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        out = self.conv3(leaky(self.conv2(leaky(self.conv1(x)))))
        mu, sigma = out.chunk(2, dim=1)
        return mu, lower_bound(sigma, SIGMA_MIN)


class ContextModel(nn.Module):
    """Entropy parameters for all three bands from hyperpriors and decoded latents.

    ``band_channels`` are the latent channels per band, ``psi_channels`` the
    hyperprior channels per band, ``ctx_channels`` the width of each
    cross-band context. ``case`` selects which cross-band contexts are live
    (see ``CONTEXT_CASES``); disabled ones feed zero maps.
    """

    def __init__(self, band_channels: tuple[int, int, int], psi_channels: int, ctx_channels: int,
                 intra_channels: Optional[int] = None, case: int = 3):
        super().__init__()
        if case not in CONTEXT_CASES:
            raise ValueError(f"context case must be one of {sorted(CONTEXT_CASES)}")
        ch, cm, cl = band_channels
        intra_channels = intra_channels or psi_channels
        self.case = case
        self.live = CONTEXT_CASES[case]
        self.ctx_channels = ctx_channels
        self.intra = nn.ModuleList(IntraContext(c, intra_channels) for c in band_channels)
        self.cross = nn.ModuleDict({
            "h2m": CrossContext(ch, ctx_channels, 1),
            "h2l": CrossContext(ch, ctx_channels, 2),
            "m2l": CrossContext(cm, ctx_channels, 1),
        })
        base = intra_channels + psi_channels
        self.params = nn.ModuleList([
            EntropyParameters(base, ch),
            EntropyParameters(base + ctx_channels, cm),
            EntropyParameters(base + 2 * ctx_channels, cl),
        ])

    # cross-band sources for each band, in channel order of the parameter net input
    SOURCES = ((), ("h2m",), ("h2l", "m2l"))

    def cross_features(self, band: int, decoded: tuple) -> list[Tensor]:
        """Cross-band context maps for ``band`` given fully decoded higher bands."""
        out = []
        for name in self.SOURCES[band]:
            src = decoded[0] if name[0] == "h" else decoded[1]
            if name in self.live:
                out.append(self.cross[name](src))
            else:
                b = src.shape[0]
                f = 2 ** self.cross[name].steps
                out.append(src.new_zeros(b, self.ctx_channels, src.shape[2] // f, src.shape[3] // f))
        return out

    def band_params(self, band: int, psi: Tensor, y_hat: Optional[Tensor], stage: int,
                    cross: list[Tensor]) -> tuple[Tensor, Tensor]:
        """``(mu, sigma)`` for one band at one checkerboard stage.

        Stage 1 ignores ``y_hat``; stage 2 reads only its anchor positions.
        The result is meaningful at the stage's own positions.
        """
        b, _, h, w = psi.shape
        ctx = self.intra[band](y_hat, stage, shape=(b, h, w))
        if stage == 1:
            ctx = ctx.to(psi.dtype)
        return self.params[band](ctx, *cross, psi)

    def forward(self, y_hat: tuple, psi: tuple) -> tuple[list[Tensor], list[Tensor]]:
        """Parameters for all positions at once (training and rate estimation).

        Anchor positions see a zero intra context, so the result at every
        position equals what the staged decoder computes there.
        """
        mus, sigmas = [], []
        for band in range(3):
            cross = self.cross_features(band, y_hat)
            mu, sigma = self.band_params(band, psi[band], y_hat[band], 2, cross)
            mus.append(mu)
            sigmas.append(sigma)
        return mus, sigmas
