"""Analysis/synthesis transforms and the per-band hyperprior codec."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .freq_blocks import (
    ALL_HIGH,
    GDN,
    ChannelSplit,
    ContractError,
    FrequencyTriple,
    MoConv,
    MToRBDown,
    MToRBUp,
    check_triple,
    conv,
    leaky,
)
from .fusion_attention import CTSFRB, WindowAttention


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``N`` is the transform width, ``M`` the latent width; both are split into
    high/mid/low bands by ``(alpha, beta)``. ``main_stages`` stride-2 blocks
    map the image to the latent, ``hyper_stages`` stride-2 convolutions map
    each latent band to its hyper latent.
    """

    N: int = 192
    M: int = 192
    alpha: float = 1 / 3
    beta: float = 1 / 3
    main_stages: int = 4
    hyper_stages: int = 2
    window_size: int = 8
    context_case: int = 3
    adaptive_quant: bool = True

    def __post_init__(self):
        if self.N <= 0 or self.M <= 0:
            raise ValueError("N and M must be positive")
        if self.main_stages < 2 or self.hyper_stages < 1:
            raise ValueError("need main_stages >= 2 and hyper_stages >= 1")
        if self.window_size < 1:
            raise ValueError("window_size must be positive")
        if 0 in self.split.counts(self.N) or 0 in self.split.counts(self.M):
            raise ValueError("every band needs at least one channel")

    @property
    def split(self) -> ChannelSplit:
        return ChannelSplit(self.alpha, self.beta)

    @property
    def latent_counts(self) -> tuple[int, int, int]:
        return self.split.counts(self.M)

    @property
    def granularity(self) -> int:
        """Padded image sides must be multiples of this."""
        return 2 ** (self.main_stages + self.hyper_stages + 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


DESK = ModelConfig(N=64, M=96, main_stages=3, hyper_stages=1, window_size=4)
PRESETS = {
    "desk": DESK,
    "low": ModelConfig(N=192, M=192),
    "high": ModelConfig(N=320, M=320),
}


class BandwiseGDN(nn.Module):
    def __init__(self, counts: tuple[int, int, int], inverse: bool = False):
        super().__init__()
        self.norms = nn.ModuleList(GDN(c, inverse=inverse) for c in counts)

    def forward(self, x: FrequencyTriple) -> FrequencyTriple:
        return FrequencyTriple(*(n(t) for n, t in zip(self.norms, x)))


class Bandwise(nn.Module):
    """Applies an independent module of type ``cls(channels, **kw)`` to every band."""

    def __init__(self, cls, counts: tuple[int, int, int], **kw):
        super().__init__()
        self.blocks = nn.ModuleList(cls(c, **kw) for c in counts)

    def forward(self, x: FrequencyTriple) -> FrequencyTriple:
        return FrequencyTriple(*(m(t) for m, t in zip(self.blocks, x)))


def pad_image(x: Tensor, granularity: int) -> Tensor:
    """Replicate-pad the bottom/right edges up to multiples of ``granularity``."""
    h, w = x.shape[-2:]
    ph = -h % granularity
    pw = -w % granularity
    if ph == 0 and pw == 0:
        return x
    return F.pad(x, (0, pw, 0, ph), mode="replicate")


class Analysis(nn.Module):
    """Image -> latent triple.

    MoConv in, then ``main_stages`` stride-2 MToRBs with GDN between them;
    after the middle stage a per-band CTSFRB and window attention, and a
    second window attention after the last stage before the MoConv that
    produces the ``M`` latent channels.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        split = cfg.split
        counts = split.counts(cfg.N)
        self.mid = (cfg.main_stages + 1) // 2
        self.conv_in = MoConv(3, cfg.N, ALL_HIGH, split)
        self.stages = nn.ModuleList(MToRBDown(cfg.N, cfg.N, split, split) for _ in range(cfg.main_stages))
        self.norms = nn.ModuleList(BandwiseGDN(counts) for _ in range(cfg.main_stages - 1))
        self.fusion = Bandwise(CTSFRB, counts)
        self.attn_mid = Bandwise(WindowAttention, counts, window_size=None, max_window=cfg.window_size)
        self.attn_out = Bandwise(WindowAttention, counts, window_size=None, max_window=cfg.window_size)
        self.conv_out = MoConv(cfg.N, cfg.M, split, split)
        self.granularity = cfg.granularity

    def forward(self, x: Tensor) -> FrequencyTriple:
        h, w = x.shape[-2:]
        if x.dim() != 4 or x.shape[1] != 3:
            raise ContractError(f"expected a (B, 3, H, W) image, got {tuple(x.shape)}")
        if h % self.granularity or w % self.granularity:
            raise ContractError(f"image {h}x{w} is not padded to a multiple of {self.granularity}")
        f = self.conv_in(FrequencyTriple(x))
        for i, stage in enumerate(self.stages):
            f = stage(f)
            if i < len(self.norms):
                f = self.norms[i](f)
            if i + 1 == self.mid:
                f = self.attn_mid(self.fusion(f))
        return self.conv_out(self.attn_out(f))


class Synthesis(nn.Module):
    """Latent triple -> image; the mirror of :class:`Analysis`."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        split = cfg.split
        counts = split.counts(cfg.N)
        self.mid = cfg.main_stages - (cfg.main_stages + 1) // 2
        self.conv_in = MoConv(cfg.M, cfg.N, split, split)
        self.attn_in = Bandwise(WindowAttention, counts, window_size=None, max_window=cfg.window_size)
        self.attn_mid = Bandwise(WindowAttention, counts, window_size=None, max_window=cfg.window_size)
        self.fusion = Bandwise(CTSFRB, counts)
        self.stages = nn.ModuleList(MToRBUp(cfg.N, cfg.N, split, split) for _ in range(cfg.main_stages))
        self.norms = nn.ModuleList(BandwiseGDN(counts, inverse=True) for _ in range(cfg.main_stages - 1))
        self.conv_out = MoConv(cfg.N, 3, split, ALL_HIGH)
        self.counts = cfg.latent_counts

    def forward(self, y_hat: FrequencyTriple, clamp: bool = True) -> Tensor:
        check_triple(y_hat, self.counts)
        f = self.attn_in(self.conv_in(y_hat))
        for i, stage in enumerate(self.stages):
            if i == self.mid:
                f = self.fusion(self.attn_mid(f))
            f = stage(f)
            if i < len(self.norms):
                f = self.norms[i](f)
        x = self.conv_out(f).high
        return x.clamp(0.0, 1.0) if clamp else x


class HyperAnalysis(nn.Module):
    """One band's latent -> hyper latent: ``abs`` then ``hyper_stages`` stride-2 convolutions."""

    def __init__(self, channels: int, width: int, z_channels: int, stages: int):
        super().__init__()
        layers = [conv(channels, width, 3)]
        for i in range(stages):
            layers.append(conv(width, z_channels if i == stages - 1 else width, 5, stride=2))
        self.layers = nn.ModuleList(layers)

    def forward(self, y: Tensor) -> Tensor:
        x = torch.abs(y)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = leaky(x)
        return x


class HyperSynthesis(nn.Module):
    """One band's hyper latent -> hyperprior features at the latent's resolution."""

    def __init__(self, z_channels: int, width: int, out_channels: int, stages: int):
        super().__init__()
        layers = []
        cin = z_channels
        for _ in range(stages):
            layers.append(nn.ConvTranspose2d(cin, width, 5, stride=2, padding=2, output_padding=1))
            cin = width
        layers.append(conv(width, out_channels, 3))
        self.layers = nn.ModuleList(layers)

    def forward(self, z_hat: Tensor) -> Tensor:
        x = z_hat
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = leaky(x)
        return x


class HyperCodec(nn.Module):
    """Independent hyper analysis/synthesis per band (no cross-band mixing)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        counts = cfg.latent_counts
        self.analysis = nn.ModuleList(HyperAnalysis(c, cfg.N, c, cfg.hyper_stages) for c in counts)
        self.synthesis = nn.ModuleList(HyperSynthesis(c, cfg.N, 2 * cfg.M, cfg.hyper_stages) for c in counts)
        self.z_counts = counts

    def analyze(self, y: FrequencyTriple) -> FrequencyTriple:
        return FrequencyTriple(*(h(t) for h, t in zip(self.analysis, y)))

    def synthesize(self, z_hat: FrequencyTriple) -> FrequencyTriple:
        return FrequencyTriple(*(h(t) for h, t in zip(self.synthesis, z_hat)))
