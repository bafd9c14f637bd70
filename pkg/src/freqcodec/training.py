"""Rate-distortion loss, data pipeline and the optimization loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .autoencoder import DESK, ModelConfig
from .entropy_models import rate_breakdown
from .imageio import to_tensor
from .model import FreqCodec

log = logging.getLogger(__name__)

PIXEL_SCALE = 255.0**2
LOG_COLUMNS = (
    "epoch", "L", "D_mse", "R_bpp", "R_yH", "R_yM", "R_yL", "R_zH", "R_zM", "R_zL",
    "meanDelta_H", "meanDelta_M", "meanDelta_L", "lr",
)
_RATE_KEYS = ("y_high", "y_mid", "y_low", "z_high", "z_mid", "z_low")


class NonFiniteLossError(FloatingPointError):
    pass


class RDLoss(NamedTuple):
    loss: Tensor
    distortion: Tensor  # 255^2 * MSE
    rate: Tensor  # bits per pixel
    rates: dict  # per part, bits per pixel
    mse: Tensor


def rd_loss(x: Tensor, x_hat: Tensor, likelihoods: dict, lmbda: float,
            num_pixels: Optional[int] = None) -> RDLoss:
    """``L = lmbda * 255^2 * MSE(x, x_hat) + R`` with ``R`` in bits per pixel.

    ``num_pixels`` defaults to ``B * H * W`` of ``x``.
    """
    if num_pixels is None:
        num_pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
    mse = torch.mean((x - x_hat) ** 2)
    distortion = PIXEL_SCALE * mse
    bits = rate_breakdown(likelihoods)
    rates = {k: v / num_pixels for k, v in bits.items() if k != "total"}
    rate = bits["total"] / num_pixels
    loss = lmbda * distortion + rate
    if not torch.isfinite(loss):
        bad = [k for k, v in rates.items() if not torch.isfinite(v)]
        if not torch.isfinite(distortion):
            bad.append("distortion")
        raise NonFiniteLossError(f"non-finite loss; offending terms: {', '.join(bad) or 'unknown'}")
    return RDLoss(loss, distortion, rate, rates, mse)


def crop_patches(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly placed ``size x size`` crop of an ``(H, W, C)`` image.

    Images smaller than ``size`` are replicate-padded first.
    """
    h, w = image.shape[:2]
    if h < size or w < size:
        image = np.pad(image, ((0, max(0, size - h)), (0, max(0, size - w)), (0, 0)), mode="edge")
        h, w = image.shape[:2]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top : top + size, left : left + size]


@dataclass
class TrainConfig:
    """Optimization settings.

    The learning rate is multiplied by ``lr_drop_factor`` from epoch
    ``lr_drop_epoch`` on (0-based; ``None`` keeps it constant).
    """

    lmbda: float = 0.0483
    lr: float = 1e-4
    lr_drop_epoch: Optional[int] = 300
    lr_drop_factor: float = 0.1
    epochs: int = 400
    batch_size: int = 8
    crop_size: int = 256
    seed: int = 0
    metric: str = "mse"
    grad_clip: float = 1.0
    max_skips: int = 20

    def lr_at(self, epoch: int) -> float:
        if self.lr_drop_epoch is not None and epoch >= self.lr_drop_epoch:
            return self.lr * self.lr_drop_factor
        return self.lr

    def validate(self, granularity: int) -> None:
        if self.metric != "mse":
            raise ValueError(f"unsupported distortion metric {self.metric!r}")
        if self.crop_size % granularity:
            raise ValueError(f"crop size {self.crop_size} is not a multiple of {granularity}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def desk_train_config(lmbda: float = 0.0483, seed: int = 0, epochs: int = 20) -> TrainConfig:
    """Desk-scale recipe: a larger step size and the same 3:1 schedule proportion."""
    return TrainConfig(lmbda=lmbda, lr=1e-3, lr_drop_epoch=math.ceil(0.75 * epochs), epochs=epochs,
                       batch_size=8, crop_size=256, seed=seed)


@dataclass
class TrainResult:
    model: FreqCodec
    history: list = field(default_factory=list)
    skipped_steps: int = 0


def _batches(dataset: Sequence[np.ndarray], cfg: TrainConfig, rng: np.random.Generator):
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), cfg.batch_size):
        crops = [crop_patches(dataset[i], cfg.crop_size, rng) for i in order[start : start + cfg.batch_size]]
        yield torch.cat([to_tensor(c) for c in crops])


def train_loop(dataset: Sequence[np.ndarray], cfg: TrainConfig, model_cfg: ModelConfig = DESK,
               model: Optional[FreqCodec] = None, log_path=None,
               on_step: Optional[Callable[[int, RDLoss], None]] = None) -> TrainResult:
    """Train with Adam on random crops; one log row per epoch.

    Everything random (initial weights, crop positions, order, quantization
    noise) is derived from ``cfg.seed``. Steps whose gradients are not
    finite are skipped; more than ``cfg.max_skips`` in a row aborts.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(cfg.seed)
    if model is None:
        model = FreqCodec(model_cfg, cfg.lmbda)
    cfg.validate(model.cfg.granularity)
    model.lmbda = cfg.lmbda
    model.train()
    rng = np.random.default_rng(cfg.seed)
    noise = torch.Generator().manual_seed(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr_at(0))
    result = TrainResult(model)
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)
    step = 0
    consecutive = 0
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            sums = dict.fromkeys(("L", "D", "R", *_RATE_KEYS, "dH", "dM", "dL"), 0.0)
            n = 0
            for x in _batches(dataset, cfg, rng):
                out = model(x, generator=noise)
                terms = rd_loss(x, out.x_hat, out.likelihoods, cfg.lmbda)
                opt.zero_grad(set_to_none=True)
                terms.loss.backward()
                norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                if not torch.isfinite(norm):
                    result.skipped_steps += 1
                    consecutive += 1
                    log.warning("step %d: non-finite gradient, skipped", step)
                    if consecutive > cfg.max_skips:
                        raise NonFiniteLossError(f"{consecutive} consecutive non-finite gradients")
                    opt.zero_grad(set_to_none=True)
                    step += 1
                    continue
                consecutive = 0
                opt.step()
                if on_step is not None:
                    on_step(step, terms)
                step += 1
                n += 1
                sums["L"] += terms.loss.item()
                sums["D"] += terms.mse.item()
                sums["R"] += terms.rate.item()
                for k in _RATE_KEYS:
                    sums[k] += terms.rates[k].item()
                for key, d in zip(("dH", "dM", "dL"), out.delta):
                    sums[key] += d.mean().item()
            n = max(n, 1)
            row = [epoch + 1] + [sums[k] / n for k in ("L", "D", "R", *_RATE_KEYS, "dH", "dM", "dL")] + [lr]
            result.history.append(dict(zip(LOG_COLUMNS, row)))
            if writer is not None:
                writer.writerow([row[0]] + [f"{v:.8g}" for v in row[1:]])
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return result


def config_record(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def load_dataset(directory) -> list[np.ndarray]:
    """All PNG/PPM images in ``directory``."""
    from .imageio import list_images, read_image

    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no PNG/PPM images in {Path(directory)}")
    return [read_image(p) for p in paths]
