"""Probability models for rate estimation and entropy coding.

Two models are provided: a learned, channel-wise factorized density for the
hyper latents and a Gaussian convolved with a scaled uniform for the main
latents. Both expose differentiable likelihoods for training and integer
CDF tables (16-bit precision) for the range coder.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import expit, ndtr, ndtri
from torch import Tensor

SIGMA_MIN = 0.11
P_MIN = 1e-9
TAIL_MASS = 1e-9
PRECISION = 16
TOTAL_FREQ = 1 << PRECISION
SCALE_TABLE_MIN = 0.11 / 4.0
SCALE_TABLE_MAX = 256.0
SCALE_LEVELS = 64
MAX_SUPPORT = 4096

_TAIL_Z = float(-ndtri(TAIL_MASS / 2))


class LowerBound(torch.autograd.Function):
    """``max(x, bound)`` whose gradient still flows when it pushes ``x`` upwards."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return torch.clamp_min(x, bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        pass_through = (x >= ctx.bound) | (grad < 0)
        return grad * pass_through.to(grad.dtype), None


def lower_bound(x: Tensor, bound: float) -> Tensor:
    return LowerBound.apply(x, bound)


def _std_cdf(x: Tensor) -> Tensor:
    return 0.5 * torch.erfc(-x * (2**-0.5))


def gaussian_uniform_mass(y: Tensor, mu: Tensor, sigma: Tensor, delta) -> Tensor:
    """Mass of ``N(mu, sigma)`` on ``[y - delta/2, y + delta/2]`` (no floor, no clamp)."""
    v = torch.abs(y - mu)
    half = 0.5 * delta
    return _std_cdf((half - v) / sigma) - _std_cdf((-half - v) / sigma)


def gaussian_uniform_likelihood(y: Tensor, mu: Tensor, sigma: Tensor, delta=1.0,
                                p_min: float = P_MIN) -> Tensor:
    r"""Likelihood of ``y`` under ``N(mu, sigma) * U(-delta/2, delta/2)``.

    ``sigma`` is bounded below by ``SIGMA_MIN`` and the result by ``p_min``.
    With ``delta = 1`` this is the classical unit-noise conditional model.
    """
    sigma = lower_bound(sigma, SIGMA_MIN)
    p = gaussian_uniform_mass(y, mu, sigma, delta)
    return lower_bound(p, p_min) if p_min > 0 else p


def rate_bits(likelihoods: Tensor) -> Tensor:
    """Total information content ``sum(-log2 p)``."""
    return -torch.log2(likelihoods).sum()


def rate_breakdown(likelihoods: Mapping[str, Mapping[str, Tensor]]) -> dict[str, Tensor]:
    """Per-part bit totals from ``{"y": {band: p}, "z": {band: p}}``.

    Keys are ``"y_high"``, ``"z_low"`` ... plus ``"total"``.
    """
    out = {}
    for part, bands in likelihoods.items():
        for band, p in bands.items():
            if p is not None:
                out[f"{part}_{band}"] = rate_bits(p)
    out["total"] = sum(out.values())
    return out


class FactorizedModel(nn.Module):
    """Channel-wise univariate density built from monotone layers.

    ``K = len(filters) + 1`` layers map ``x`` to CDF logits through
    softplus-positive matrices, biases and tanh gates, which keeps the CDF
    non-decreasing. Likelihoods integrate the density over unit-width bins.
    """

    def __init__(self, channels: int, filters: Sequence[int] = (3, 3, 3), init_scale: float = 2.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cumulative(self, x: Tensor) -> Tensor:
        """``x`` of shape ``(C, 1, N)`` -> CDF logits of the same shape."""
        logits = x
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            logits = torch.matmul(F.softplus(m), logits) + b
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def _per_channel(self, z: Tensor) -> tuple[Tensor, tuple]:
        perm = z.transpose(0, 1)
        shape = perm.shape
        return perm.reshape(self.channels, 1, -1), shape

    def cdf(self, x: Tensor) -> Tensor:
        """CDF for ``x`` of shape ``(C, N)``."""
        return torch.sigmoid(self.logits_cumulative(x.unsqueeze(1))).squeeze(1)

    def likelihood(self, z: Tensor, p_min: float = P_MIN) -> Tensor:
        r"""Mass of the unit bin centred on each element of ``z`` (B, C, H, W)."""
        v, shape = self._per_channel(z)
        lower = self.logits_cumulative(v - 0.5)
        upper = self.logits_cumulative(v + 0.5)
        # evaluate in the tail where the sigmoid difference keeps precision
        sign = -torch.sign(lower + upper).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        p = p.reshape(shape).transpose(0, 1)
        return lower_bound(p, p_min) if p_min > 0 else p

    @torch.no_grad()
    def quantiles(self, levels: Sequence[float], lo: float = -1e4, hi: float = 1e4, iters: int = 80) -> np.ndarray:
        """Per-channel inverse CDF at each probability in ``levels`` (bisection)."""
        dtype = self.matrices[0].dtype
        targets = torch.tensor([math.log(q / (1 - q)) for q in levels], dtype=dtype)
        a = torch.full((self.channels, 1, len(levels)), lo, dtype=dtype)
        b = torch.full_like(a, hi)
        for _ in range(iters):
            mid = 0.5 * (a + b)
            below = self.logits_cumulative(mid) < targets
            a = torch.where(below, mid, a)
            b = torch.where(below, b, mid)
        return (0.5 * (a + b)).squeeze(1).numpy()

    @torch.no_grad()
    def build_table(self) -> "CdfTable":
        """Integer CDF rows, one per channel, for unit-step symbols (float64 evaluation)."""
        ref = copy.deepcopy(self).double()
        q = ref.quantiles([TAIL_MASS / 2, 1 - TAIL_MASS / 2])
        lo = np.floor(q[:, 0]).astype(np.int64)
        hi = np.ceil(q[:, 1]).astype(np.int64)
        hi = np.minimum(hi, lo + MAX_SUPPORT - 1)
        lengths = hi - lo + 1
        k = torch.from_numpy((lo[:, None] + np.arange(int(lengths.max()))[None, :]).astype(np.float64))
        lower = ref.logits_cumulative((k - 0.5).unsqueeze(1)).squeeze(1).numpy()
        upper = ref.logits_cumulative((k + 0.5).unsqueeze(1)).squeeze(1).numpy()
        sign = -np.sign(lower + upper)
        pmf = np.abs(expit(sign * upper) - expit(sign * lower))
        return CdfTable.from_pmf(pmf, lo, lengths)


# --- integer CDF tables ---------------------------------------------------------


@dataclass
class CdfTable:
    """Integer cumulative frequencies for a batch of coding distributions.

    Row ``i`` covers symbols ``offsets[i] .. offsets[i] + lengths[i] - 1``
    followed by one escape entry for out-of-range values. Rows are stored
    back to back in ``cdf``: row ``i`` is ``cdf[starts[i] : starts[i] +
    lengths[i] + 2]``, beginning at 0 and ending at ``2**16``.
    """

    offsets: np.ndarray
    lengths: np.ndarray
    starts: np.ndarray
    cdf: np.ndarray

    def __len__(self):
        return len(self.offsets)

    def row(self, i: int) -> np.ndarray:
        s = self.starts[i]
        return self.cdf[s : s + self.lengths[i] + 2]

    @classmethod
    def from_pmf(cls, pmf: np.ndarray, offsets: np.ndarray, lengths: np.ndarray) -> "CdfTable":
        """Quantize probability rows (regular symbols only) into frequency tables.

        ``pmf`` is ``(n, width)`` with row ``i`` valid up to ``lengths[i]``.
        Each regular symbol and the escape get frequency ``>= 1``; the escape
        carries the mass outside the support. Rows sum to exactly ``2**16``.
        """
        n, width = pmf.shape
        lengths = np.asarray(lengths, dtype=np.int64)
        cols = np.arange(width + 1)[None, :]
        full = np.zeros((n, width + 1))
        full[:, :width] = np.where(cols[:, :width] < lengths[:, None], np.clip(pmf, 0.0, None), 0.0)
        full[np.arange(n), lengths] = np.clip(1.0 - full.sum(axis=1), 0.0, None)
        full /= full.sum(axis=1, keepdims=True)
        valid = cols <= lengths[:, None]
        budget = TOTAL_FREQ - (lengths + 1)
        if (budget < 0).any():
            raise ValueError("support too wide for 16-bit precision")
        freq = np.where(valid, 1 + np.floor(full * budget[:, None]).astype(np.int64), 0)
        remainder = TOTAL_FREQ - freq.sum(axis=1)
        freq[np.arange(n), np.argmax(np.where(valid, full, -1.0), axis=1)] += remainder
        cdf = np.zeros((n, width + 2), dtype=np.int64)
        np.cumsum(freq, axis=1, out=cdf[:, 1:])
        keep = np.arange(width + 2)[None, :] < (lengths + 2)[:, None]
        starts = np.concatenate([[0], np.cumsum(lengths + 2)[:-1]]).astype(np.int64)
        return cls(np.asarray(offsets, dtype=np.int64), lengths, starts, cdf[keep])

    @classmethod
    def concat(cls, parts: Sequence["CdfTable"], order: np.ndarray | None = None) -> "CdfTable":
        """Join tables; ``order[i]`` names the row of the joined table placed at ``i``."""
        shift = np.cumsum([0] + [len(p.cdf) for p in parts[:-1]])
        offsets = np.concatenate([p.offsets for p in parts])
        lengths = np.concatenate([p.lengths for p in parts])
        starts = np.concatenate([p.starts + s for p, s in zip(parts, shift)])
        cdf = np.concatenate([p.cdf for p in parts])
        if order is not None:
            offsets, lengths, starts = offsets[order], lengths[order], starts[order]
        return cls(offsets, lengths, starts, cdf)

    def probabilities(self, i: int) -> np.ndarray:
        """Quantized probabilities of row ``i``; the last entry is the escape."""
        return np.diff(self.row(i)) / TOTAL_FREQ

    def lookup(self, symbols: np.ndarray, rows: np.ndarray | None = None):
        """Return ``(cum, freq, escape)`` for each symbol under its row."""
        rows = np.arange(len(symbols)) if rows is None else np.asarray(rows)
        idx = np.asarray(symbols, dtype=np.int64) - self.offsets[rows]
        escape = (idx < 0) | (idx >= self.lengths[rows])
        idx = np.where(escape, self.lengths[rows], idx)
        pos = self.starts[rows] + idx
        cum = self.cdf[pos]
        return cum, self.cdf[pos + 1] - cum, escape


def scale_table(levels: int = SCALE_LEVELS, smin: float = SCALE_TABLE_MIN, smax: float = SCALE_TABLE_MAX) -> np.ndarray:
    return np.exp(np.linspace(math.log(smin), math.log(smax), levels))


SCALES = scale_table()
_LOG_SCALES = np.log(SCALES)
_LOG_MIDPOINTS = 0.5 * (_LOG_SCALES[1:] + _LOG_SCALES[:-1])


def snap_scale(scale_eff: np.ndarray) -> np.ndarray:
    """Index of the nearest (log-domain) table scale; values outside clamp to the ends."""
    s = np.clip(np.asarray(scale_eff, dtype=np.float64), SCALES[0], SCALES[-1])
    return np.searchsorted(_LOG_MIDPOINTS, np.log(s))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def gaussian_support(mean_eff: np.ndarray, scale_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symbol range ``[offset, offset + length)`` covering all but ``TAIL_MASS``."""
    half = np.ceil(SCALES[scale_idx] * _TAIL_Z).astype(np.int64) + 1
    centre = _round_half_away(mean_eff).astype(np.int64)
    return centre - half, 2 * half + 1


def build_cdf_table(mu: np.ndarray, sigma: np.ndarray, delta: np.ndarray) -> CdfTable:
    """Coding rows for symbols ``k = round(y / delta)`` under the conditional model.

    The step is folded into effective parameters ``(mu/delta, sigma/delta)``
    so every row codes a unit grid; the effective scale is snapped to the
    64-entry log-spaced table, the effective mean is used exactly.
    """
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64).ravel(), SIGMA_MIN)
    delta = np.asarray(delta, dtype=np.float64).ravel()
    mean_eff = mu / delta
    scale_idx = snap_scale(sigma / delta)
    offsets, lengths = gaussian_support(mean_eff, scale_idx)
    parts, members = [], []
    for s in np.unique(scale_idx):
        sel = np.flatnonzero(scale_idx == s)
        width = int(lengths[sel[0]])
        k = offsets[sel, None] + np.arange(width)[None, :]
        v = np.abs(k - mean_eff[sel, None])
        pmf = ndtr((0.5 - v) / SCALES[s]) - ndtr((-0.5 - v) / SCALES[s])
        parts.append(CdfTable.from_pmf(pmf, offsets[sel], lengths[sel]))
        members.append(sel)
    if not parts:
        return CdfTable(*(np.zeros(0, dtype=np.int64) for _ in range(4)))
    order = np.empty(len(mu), dtype=np.int64)
    order[np.concatenate(members)] = np.arange(len(mu))
    return CdfTable.concat(parts, order)
