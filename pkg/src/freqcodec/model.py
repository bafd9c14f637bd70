"""The complete learned codec: transforms, hyperprior, quantizers and entropy models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

from .adaptive_quant import DeltaHead, quantize_test, quantize_train, round_half_away
from .autoencoder import Analysis, HyperCodec, ModelConfig, Synthesis, pad_image
from .context_models import ContextModel
from .entropy_models import CdfTable, FactorizedModel, gaussian_uniform_likelihood
from .freq_blocks import BANDS, FrequencyTriple

LAMBDAS = (0.0018, 0.0035, 0.0067, 0.013, 0.025, 0.0483)


class NotFinalizedError(RuntimeError):
    """Raised when entropy coding is attempted before :meth:`FreqCodec.finalize`."""


@dataclass
class CodecOutput:
    """Result of a forward pass.

    ``likelihoods`` maps ``"y"`` and ``"z"`` to per-band likelihood tensors
    (keyed ``"high"``, ``"mid"``, ``"low"``).
    """

    x_hat: Tensor
    likelihoods: dict
    y: FrequencyTriple
    y_hat: FrequencyTriple
    z_hat: FrequencyTriple
    delta: FrequencyTriple
    mu: list
    sigma: list
    symbols: Optional[FrequencyTriple] = None
    z_symbols: Optional[FrequencyTriple] = None


class FreqCodec(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), lmbda: Optional[float] = None):
        super().__init__()
        self.cfg = cfg
        self.lmbda = lmbda
        counts = cfg.latent_counts
        self.g_a = Analysis(cfg)
        self.g_s = Synthesis(cfg)
        self.hyper = HyperCodec(cfg)
        self.z_models = nn.ModuleList(FactorizedModel(c) for c in counts)
        self.delta_heads = nn.ModuleList(DeltaHead(2 * cfg.M, c) for c in counts)
        self.context = ContextModel(counts, psi_channels=2 * cfg.M, ctx_channels=cfg.M, case=cfg.context_case)
        self.z_tables: Optional[list[CdfTable]] = None

    # --- shared pieces used by training, estimation and the bitstream ----------

    def pad(self, x: Tensor) -> Tensor:
        return pad_image(x, self.cfg.granularity)

    def deltas(self, psi: FrequencyTriple) -> FrequencyTriple:
        if not self.cfg.adaptive_quant:
            return FrequencyTriple(*(torch.ones_like(p[:, :c]) for p, c in zip(psi, self.cfg.latent_counts)))
        return FrequencyTriple(*(h(p) for h, p in zip(self.delta_heads, psi)))

    def z_likelihoods(self, z_hat: FrequencyTriple) -> dict:
        return {name: m.likelihood(z) for name, m, z in zip(BANDS, self.z_models, z_hat)}

    def y_likelihoods(self, y_hat, mu, sigma, delta) -> dict:
        return {
            name: gaussian_uniform_likelihood(y, m, s, d)
            for name, y, m, s, d in zip(BANDS, y_hat, mu, sigma, delta)
        }

    # --- forward passes ---------------------------------------------------------

    def forward(self, x: Tensor, generator: Optional[torch.Generator] = None) -> CodecOutput:
        """Training pass with additive-noise quantization; ``x`` must be padded."""
        y = self.g_a(x)
        z = self.hyper.analyze(y)
        z_tilde = z.map(lambda t: quantize_train(t, torch.ones_like(t), generator))
        psi = self.hyper.synthesize(z_tilde)
        delta = self.deltas(psi)
        y_tilde = FrequencyTriple(*(quantize_train(t, d, generator) for t, d in zip(y, delta)))
        mu, sigma = self.context(y_tilde, psi)
        x_hat = self.g_s(y_tilde, clamp=False)
        lik = {"y": self.y_likelihoods(y_tilde, mu, sigma, delta), "z": self.z_likelihoods(z_tilde)}
        return CodecOutput(x_hat, lik, y, y_tilde, z_tilde, delta, mu, sigma)

    def quantize_hyper(self, y: FrequencyTriple):
        z = self.hyper.analyze(y)
        z_sym = z.map(lambda t: round_half_away(t).to(torch.int64))
        z_hat = z_sym.map(lambda t: t.to(y.high.dtype))
        return z_sym, z_hat

    def quantized_forward(self, x: Tensor) -> CodecOutput:
        """Test-time pass with hard quantization; likelihoods give the estimated rate.

        ``x`` must be padded. The reconstruction is clamped to ``[0, 1]`` and
        matches what :func:`freqcodec.bitstream.decode_image` produces.
        """
        y = self.g_a(x)
        z_sym, z_hat = self.quantize_hyper(y)
        psi = self.hyper.synthesize(z_hat)
        delta = self.deltas(psi)
        sym, y_hat = zip(*(quantize_test(t, d) for t, d in zip(y, delta)))
        y_hat = FrequencyTriple(*y_hat)
        mu, sigma = self.context(y_hat, psi)
        x_hat = self.g_s(y_hat)
        lik = {"y": self.y_likelihoods(y_hat, mu, sigma, delta), "z": self.z_likelihoods(z_hat)}
        return CodecOutput(x_hat, lik, y, y_hat, z_hat, delta, mu, sigma, FrequencyTriple(*sym), z_sym)

    # --- entropy-coding state ---------------------------------------------------

    @torch.no_grad()
    def finalize(self) -> "FreqCodec":
        """Tabulate the hyper-latent CDFs from the current weights (call after training)."""
        self.z_tables = [m.build_table() for m in self.z_models]
        return self

    @property
    def finalized(self) -> bool:
        return self.z_tables is not None

    def require_finalized(self) -> list[CdfTable]:
        if self.z_tables is None:
            raise NotFinalizedError("model not finalized; call finalize() after loading or training")
        return self.z_tables

    def load_state_dict(self, *args, **kwargs):
        self.z_tables = None
        return super().load_state_dict(*args, **kwargs)

    def train(self, mode: bool = True):
        if mode:
            self.z_tables = None
        return super().train(mode)

    @property
    def lambda_index(self) -> int:
        """Index of ``lmbda`` in the standard list, 255 when it is not one of them."""
        if self.lmbda is None:
            return 255
        for i, v in enumerate(LAMBDAS):
            if abs(v - self.lmbda) <= 1e-9:
                return i
        return 255
