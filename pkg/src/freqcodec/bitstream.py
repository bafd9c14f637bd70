"""Container format and end-to-end image encoding/decoding.

Layout (all integers big-endian)::

    magic "FDSC" | version u8 | config-id u8 | lambda-index u8 | flags u8
    orig_w u32 | orig_h u32 | padded_w u32 | padded_h u32
    6 x (length u32 | payload)      order: z_high z_mid z_low y_high y_mid y_low
    [crc32 u32 over all preceding bytes, present when flags bit 0 is set]

See ``docs/bitstream.md`` for a byte-level walk-through.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .adaptive_quant import quantize_test
from .context_models import anchor_mask
from .entropy_models import build_cdf_table
from .freq_blocks import FrequencyTriple
from .model import FreqCodec
from .rangecoder import DecodeError, RangeDecoder, RangeEncoder, decode_symbols, encode_symbols

MAGIC = b"FDSC"
VERSION = 1
FLAG_CRC = 0x01
HEADER = struct.Struct(">4sBBBBIIII")
HEADER_SIZE = HEADER.size
N_STREAMS = 6
STREAM_NAMES = ("z_high", "z_mid", "z_low", "y_high", "y_mid", "y_low")
MAX_SIDE = 1 << 15


class HeaderMismatchError(DecodeError):
    """The container was produced by a different model configuration or rate point."""


def config_id(model: FreqCodec) -> int:
    """8-bit fingerprint of the model's architecture configuration."""
    text = json.dumps(model.cfg.to_dict(), sort_keys=True)
    return zlib.crc32(text.encode()) & 0xFF


@dataclass
class Container:
    config_id: int
    lambda_index: int
    orig_w: int
    orig_h: int
    padded_w: int
    padded_h: int
    streams: list = field(default_factory=list)
    flags: int = FLAG_CRC
    version: int = VERSION

    def to_bytes(self) -> bytes:
        if len(self.streams) != N_STREAMS:
            raise ValueError(f"expected {N_STREAMS} substreams, got {len(self.streams)}")
        parts = [HEADER.pack(MAGIC, self.version, self.config_id, self.lambda_index, self.flags,
                             self.orig_w, self.orig_h, self.padded_w, self.padded_h)]
        for s in self.streams:
            parts.append(struct.pack(">I", len(s)))
            parts.append(bytes(s))
        body = b"".join(parts)
        if self.flags & FLAG_CRC:
            body += struct.pack(">I", zlib.crc32(body))
        return body

    @classmethod
    def from_bytes(cls, data: bytes) -> "Container":
        data = bytes(data)
        if len(data) < HEADER_SIZE:
            raise DecodeError("truncated stream: header incomplete")
        magic, version, cid, lidx, flags, ow, oh, pw, ph = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise DecodeError(f"bad magic {magic!r}")
        if version != VERSION:
            raise DecodeError(f"unsupported version {version}")
        end = len(data)
        if flags & FLAG_CRC:
            if end < HEADER_SIZE + 4:
                raise DecodeError("truncated stream: checksum missing")
            end -= 4
        pos = HEADER_SIZE
        streams = []
        for name in STREAM_NAMES:
            if pos + 4 > end:
                raise DecodeError(f"truncated stream: length of {name} missing")
            (n,) = struct.unpack_from(">I", data, pos)
            pos += 4
            if pos + n > end:
                raise DecodeError(f"truncated stream: {name} declares {n} bytes, {end - pos} left")
            streams.append(data[pos : pos + n])
            pos += n
        if pos != end:
            raise DecodeError(f"{end - pos} unexpected trailing bytes")
        if flags & FLAG_CRC:
            (crc,) = struct.unpack_from(">I", data, end)
            if crc != zlib.crc32(data[:end]):
                raise DecodeError("checksum mismatch")
        if ow == 0 or oh == 0 or ow > pw or oh > ph:
            raise DecodeError(f"inconsistent geometry {ow}x{oh} in {pw}x{ph}")
        return cls(cid, lidx, ow, oh, pw, ph, streams, flags, version)

    @property
    def size(self) -> int:
        return HEADER_SIZE + sum(4 + len(s) for s in self.streams) + (4 if self.flags & FLAG_CRC else 0)


# --- shared per-element ordering and parameter evaluation ----------------------


def _z_rows(shape) -> np.ndarray:
    c, h, w = shape
    return np.repeat(np.arange(c), h * w)


def _stage_index(h: int, w: int, c: int, stage: int) -> np.ndarray:
    """Flat (C, H, W) raster indices of the positions coded at ``stage``."""
    m = anchor_mask(h, w).bool().view(h, w).numpy()
    m = m if stage == 1 else ~m
    return np.flatnonzero(np.broadcast_to(m, (c, h, w)))


def _stage_table(mu: Tensor, sigma: Tensor, delta: Tensor, idx: np.ndarray):
    pick = lambda t: t[0].detach().cpu().double().numpy().ravel()[idx]
    return build_cdf_table(pick(mu), pick(sigma), pick(delta))


def _anchor_latent(k: Tensor, delta: Tensor) -> Tensor:
    """Dequantized anchors with non-anchor positions zeroed (identical on both sides)."""
    mask = anchor_mask(k.shape[2], k.shape[3]).bool()
    return delta * torch.where(mask, k, torch.zeros_like(k))


def _latent_shapes(model: FreqCodec, ph: int, pw: int):
    s = 2**model.cfg.main_stages
    t = 2**model.cfg.hyper_stages
    y = [(c, ph // (s * 2**b), pw // (s * 2**b)) for b, c in enumerate(model.cfg.latent_counts)]
    z = [(c, h // t, w // t) for c, h, w in y]
    return y, z


# --- public API ---------------------------------------------------------------


def _as_batch(x: Tensor) -> Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ValueError(f"expected one RGB image, got shape {tuple(x.shape)}")
    return x


@torch.no_grad()
def encode_image(x: Tensor, model: FreqCodec, checksum: bool = True) -> Container:
    """Compress one RGB image with values in ``[0, 1]`` (shape ``(3, H, W)`` or ``(1, 3, H, W)``)."""
    z_tables = model.require_finalized()
    x = _as_batch(x).to(next(model.parameters()).dtype)
    oh, ow = x.shape[-2:]
    if oh > MAX_SIDE or ow > MAX_SIDE:
        raise ValueError(f"image {ow}x{oh} exceeds the maximum side {MAX_SIDE}")
    xp = model.pad(x)
    ph, pw = xp.shape[-2:]

    y = model.g_a(xp)
    z_sym, z_hat = model.quantize_hyper(y)
    streams = []
    for b in range(3):
        enc = RangeEncoder()
        sym = z_sym[b][0]
        encode_symbols(enc, sym.numpy().ravel(), z_tables[b], _z_rows(sym.shape))
        streams.append(enc.finish())

    psi = model.hyper.synthesize(z_hat)
    delta = model.deltas(psi)
    decoded = [None, None, None]
    for b in range(3):
        k, y_hat = quantize_test(y[b], delta[b])
        kf = k.to(y_hat.dtype)
        cross = model.context.cross_features(b, decoded)
        _, c, h, w = k.shape
        flat = k[0].numpy().ravel()
        enc = RangeEncoder()
        partial = None
        for stage in (1, 2):
            mu, sigma = model.context.band_params(b, psi[b], partial, stage, cross)
            idx = _stage_index(h, w, c, stage)
            encode_symbols(enc, flat[idx], _stage_table(mu, sigma, delta[b], idx))
            if stage == 1:
                partial = _anchor_latent(kf, delta[b])
        streams.append(enc.finish())
        decoded[b] = delta[b] * kf
    return Container(config_id(model), model.lambda_index, ow, oh, pw, ph, streams,
                     FLAG_CRC if checksum else 0)


@torch.no_grad()
def decode_image(data, model: FreqCodec, return_symbols: bool = False):
    """Reconstruct the image ``(1, 3, orig_h, orig_w)`` from a container or its bytes.

    With ``return_symbols`` also returns the decoded integer symbols as a
    dict keyed by substream name.
    """
    z_tables = model.require_finalized()
    cont = data if isinstance(data, Container) else Container.from_bytes(data)
    cid = config_id(model)
    if cont.config_id != cid or cont.lambda_index != model.lambda_index:
        raise HeaderMismatchError(
            f"container config-id {cont.config_id} / lambda-index {cont.lambda_index} does not match "
            f"model config-id {cid} / lambda-index {model.lambda_index}"
        )
    g = model.cfg.granularity
    if cont.padded_h % g or cont.padded_w % g or cont.padded_h - cont.orig_h >= g or cont.padded_w - cont.orig_w >= g:
        raise DecodeError(f"padded size {cont.padded_w}x{cont.padded_h} inconsistent with the model")
    y_shapes, z_shapes = _latent_shapes(model, cont.padded_h, cont.padded_w)
    dtype = next(model.parameters()).dtype
    symbols = {}

    z_hat = []
    for b in range(3):
        rows = _z_rows(z_shapes[b])
        s = decode_symbols(RangeDecoder(cont.streams[b]), z_tables[b], rows)
        symbols[f"z_{('high', 'mid', 'low')[b]}"] = s.reshape(z_shapes[b])
        z_hat.append(torch.from_numpy(s.reshape(1, *z_shapes[b])).to(dtype))
    psi = model.hyper.synthesize(FrequencyTriple(*z_hat))
    delta = model.deltas(psi)

    decoded = [None, None, None]
    for b in range(3):
        c, h, w = y_shapes[b]
        cross = model.context.cross_features(b, decoded)
        dec = RangeDecoder(cont.streams[3 + b])
        flat = np.zeros(c * h * w, dtype=np.int64)
        partial = None
        for stage in (1, 2):
            mu, sigma = model.context.band_params(b, psi[b], partial, stage, cross)
            idx = _stage_index(h, w, c, stage)
            flat[idx] = decode_symbols(dec, _stage_table(mu, sigma, delta[b], idx))
            kf = torch.from_numpy(flat.reshape(1, c, h, w)).to(dtype)
            if stage == 1:
                partial = _anchor_latent(kf, delta[b])
        symbols[f"y_{('high', 'mid', 'low')[b]}"] = flat.reshape(c, h, w)
        decoded[b] = delta[b] * kf
    x_hat = model.g_s(FrequencyTriple(*decoded))[..., : cont.orig_h, : cont.orig_w]
    return (x_hat, symbols) if return_symbols else x_hat


def bits_per_pixel(n_bytes: int, width: int, height: int) -> float:
    return 8.0 * n_bytes / (width * height)
