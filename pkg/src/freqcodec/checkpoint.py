"""Model checkpoints as safetensors files with the configuration in the header metadata.

The metadata keys are ``format`` (``"freqcodec-1"``), ``config`` (JSON of
:class:`ModelConfig`), ``lambda`` (decimal string or empty) and ``extra``
(free-form JSON, e.g. training provenance). Tensor names are the module
paths of ``FreqCodec.state_dict()``. See ``docs/checkpoint.md``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from safetensors import safe_open
from safetensors.torch import save_file

from .autoencoder import ModelConfig
from .model import FreqCodec

FORMAT = "freqcodec-1"


def save_checkpoint(model: FreqCodec, path, extra: Optional[dict] = None) -> None:
    meta = {
        "format": FORMAT,
        "config": json.dumps(model.cfg.to_dict(), sort_keys=True),
        "lambda": "" if model.lmbda is None else repr(float(model.lmbda)),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    tensors = {k: v.detach().contiguous().cpu() for k, v in model.state_dict().items()}
    save_file(tensors, str(path), metadata=meta)


def read_metadata(path) -> dict:
    """Header fields without loading any tensors."""
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} checkpoint")
    return {
        "config": ModelConfig.from_dict(json.loads(meta["config"])),
        "lambda": float(meta["lambda"]) if meta.get("lambda") else None,
        "extra": json.loads(meta.get("extra") or "{}"),
    }


def load_checkpoint(path, finalize: bool = True) -> FreqCodec:
    """Rebuild the model in eval mode; hyper-latent tables are tabulated when ``finalize``."""
    if not Path(path).is_file():
        raise FileNotFoundError(path)
    meta = read_metadata(path)
    model = FreqCodec(meta["config"], meta["lambda"])
    with safe_open(str(path), framework="pt") as f:
        state = {k: f.get_tensor(k) for k in f.keys()}
    model.load_state_dict(state)
    model.eval()
    if finalize:
        model.finalize()
    return model
