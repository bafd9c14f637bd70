"""Quality metrics, Bjontegaard delta rate and dataset-level RD evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.interpolate import PchipInterpolator

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03
MS_SSIM_MIN_SIDE = (WIN_SIZE - 1) * 2 ** (len(MS_SSIM_WEIGHTS) - 1)  # exclusive


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(x, x_hat) -> float:
    """PSNR in dB for signals in ``[0, 1]``; identical inputs give ``PSNR_CAP``."""
    a, b = _as_array(x), _as_array(x_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def _to_nchw(x) -> torch.Tensor:
    t = torch.as_tensor(_as_array(x))
    if t.dim() == 3:
        # (H, W, 3) arrays or (3, H, W) tensors
        t = t.permute(2, 0, 1) if t.shape[-1] == 3 and t.shape[0] != 3 else t
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[1] != 3:
        raise ValueError(f"expected a 3-channel image, got shape {tuple(t.shape)}")
    return t


def _gaussian_window() -> torch.Tensor:
    coords = torch.arange(WIN_SIZE, dtype=torch.float64) - WIN_SIZE // 2
    g = torch.exp(-(coords**2) / (2 * WIN_SIGMA**2))
    return g / g.sum()


def _filter(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _ssim_terms(x, y, g):
    c1, c2 = K1**2, K2**2
    mu_x, mu_y = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mu_x**2
    syy = _filter(y * y, g) - mu_y**2
    sxy = _filter(x * y, g) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    # per image and channel
    return (lum * cs).flatten(2).mean(-1), cs.flatten(2).mean(-1)


def ms_ssim(x, x_hat) -> float:
    """Five-scale MS-SSIM of RGB images in ``[0, 1]``, averaged over channels (and batch).

    Each side must exceed ``MS_SSIM_MIN_SIDE`` (160) pixels so the 11x11
    window fits at the coarsest scale.
    """
    a, b = _to_nchw(x), _to_nchw(x_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) <= MS_SSIM_MIN_SIDE:
        raise ValueError(f"MS-SSIM needs both sides larger than {MS_SSIM_MIN_SIDE} pixels, got {tuple(a.shape[-2:])}")
    if torch.equal(a, b):
        return 1.0
    g = _gaussian_window()
    w = torch.tensor(MS_SSIM_WEIGHTS, dtype=torch.float64)
    levels = []
    for i in range(len(MS_SSIM_WEIGHTS)):
        ssim_val, cs = _ssim_terms(a, b, g)
        if i < len(MS_SSIM_WEIGHTS) - 1:
            levels.append(torch.relu(cs))
            pad = [s % 2 for s in a.shape[-2:]]
            a = F.avg_pool2d(a, 2, padding=pad)
            b = F.avg_pool2d(b, 2, padding=pad)
    levels.append(torch.relu(ssim_val))
    stacked = torch.stack(levels, dim=0)
    val = torch.prod(stacked ** w.view(-1, 1, 1), dim=0)
    return float(val.mean())


def bpp(n_bytes: int, width: int, height: int) -> float:
    """Bits per pixel of an ``n_bytes`` stream for a ``width x height`` image."""
    return 8.0 * n_bytes / (width * height)


# --- Bjontegaard delta rate ----------------------------------------------------


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float
    msssim: float = float("nan")
    image: str = ""
    lmbda: float = float("nan")


def _curve(points) -> tuple[np.ndarray, np.ndarray]:
    arr = [(p.bpp, p.psnr) if isinstance(p, RDPoint) else (float(p[0]), float(p[1])) for p in points]
    rate = np.array([r for r, _ in arr])
    quality = np.array([q for _, q in arr])
    if len(rate) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    if np.any(rate <= 0):
        raise ValueError("rates must be positive")
    order = np.argsort(quality)
    return np.log10(rate[order]), quality[order]


def bd_rate(anchor, test, method: str = "cubic") -> float:
    """Average bitrate difference (percent) of ``test`` against ``anchor`` at equal PSNR.

    Each curve is a sequence of ``(bpp, psnr)`` pairs or :class:`RDPoint`.
    ``method="cubic"`` fits a third-order polynomial of log10(rate) in PSNR
    (the classical method); ``"pchip"`` uses piecewise cubic Hermite
    interpolation instead.
    """
    la, qa = _curve(anchor)
    lt, qt = _curve(test)
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise ValueError("the two curves have no overlapping quality range")
    if method == "cubic":
        pa, pt = np.polyint(np.polyfit(qa, la, 3)), np.polyint(np.polyfit(qt, lt, 3))
        ia = np.polyval(pa, hi) - np.polyval(pa, lo)
        it = np.polyval(pt, hi) - np.polyval(pt, lo)
    elif method == "pchip":
        ia = PchipInterpolator(qa, la).integrate(lo, hi)
        it = PchipInterpolator(qt, lt).integrate(lo, hi)
    else:
        raise ValueError(f"unknown BD-rate method {method!r}")
    avg = (it - ia) / (hi - lo)
    return float((10.0**avg - 1.0) * 100.0)


# --- dataset evaluation --------------------------------------------------------

CSV_COLUMNS = ("image", "lambda", "bpp", "psnr", "msssim")


def evaluate_image(model, img: np.ndarray, name: str = "") -> RDPoint:
    """Encode/decode one ``(H, W, 3)`` image; quality measured on 8-bit output."""
    from .bitstream import decode_image, encode_image
    from .imageio import to_array, to_tensor, to_uint8

    h, w = img.shape[:2]
    data = encode_image(to_tensor(img), model).to_bytes()
    rec = to_uint8(to_array(decode_image(data, model))) / 255.0
    ref = to_uint8(img) / 255.0
    q = ms_ssim(ref, rec) if min(h, w) > MS_SSIM_MIN_SIDE else float("nan")
    lm = float("nan") if model.lmbda is None else float(model.lmbda)
    return RDPoint(bpp(len(data), w, h), psnr(ref, rec), q, name, lm)


def mean_points(points: Sequence[RDPoint]) -> list[RDPoint]:
    """Arithmetic means per lambda, sorted by bpp."""
    groups: dict = {}
    for p in points:
        groups.setdefault(p.lmbda, []).append(p)
    out = [
        RDPoint(float(np.mean([p.bpp for p in g])), float(np.mean([p.psnr for p in g])),
                float(np.mean([p.msssim for p in g])), "mean", lm)
        for lm, g in groups.items()
    ]
    return sorted(out, key=lambda p: p.bpp)


def write_rd_csv(path, points: Sequence[RDPoint]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(CSV_COLUMNS)
        for p in points:
            wr.writerow([p.image, f"{p.lmbda:.6g}", f"{p.bpp:.8g}", f"{p.psnr:.8g}", f"{p.msssim:.8g}"])


def read_rd_csv(path) -> list[RDPoint]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or set(CSV_COLUMNS) - set(rows[0]):
        raise ValueError(f"{path}: expected columns {', '.join(CSV_COLUMNS)}")
    return [RDPoint(float(r["bpp"]), float(r["psnr"]), float(r["msssim"]), r["image"], float(r["lambda"]))
            for r in rows]


def curve_from_points(points: Sequence[RDPoint]) -> list[RDPoint]:
    """Mean RD curve, one point per lambda."""
    return mean_points([p for p in points if p.image != "mean"] or list(points))


def eval_dataset(directory, models: Mapping[str, Sequence] | Sequence, out_csv=None, out_json=None) -> dict:
    """Evaluate every PNG/PPM image in ``directory`` with every model.

    ``models`` is a list of models forming one RD curve, or a mapping from
    curve label to such a list. Returns the summary written to ``out_json``:
    per-curve mean points, pairwise BD-rates and skipped files.
    """
    from .imageio import list_images, read_image

    paths = list_images(directory) if Path(directory).is_dir() else []
    if not paths:
        raise ValueError(f"no PNG/PPM images in {directory}")
    curves = models if isinstance(models, Mapping) else {"model": models}
    images, skipped = [], []
    for p in paths:
        try:
            images.append((p.name, read_image(p)))
        except Exception as exc:  # unreadable file: record and continue
            log.warning("skipping %s: %s", p, exc)
            skipped.append({"file": p.name, "error": str(exc)})
    if not images:
        raise ValueError(f"no readable images in {directory}")
    per_curve = {}
    all_rows = []
    for label, group in curves.items():
        pts = [evaluate_image(m, img, name) for m in group for name, img in images]
        per_curve[label] = pts
        all_rows.extend(pts)
    summary = {
        "images": len(images),
        "skipped": skipped,
        "curves": {k: [asdict(p) for p in mean_points(v)] for k, v in per_curve.items()},
        "bd_rate": {},
    }
    labels = list(per_curve)
    for a in labels:
        for b in labels:
            if a == b:
                continue
            try:
                summary["bd_rate"][f"{b} vs {a}"] = bd_rate(mean_points(per_curve[a]), mean_points(per_curve[b]))
            except ValueError as exc:
                summary["bd_rate"][f"{b} vs {a}"] = str(exc)
    if out_csv is not None:
        write_rd_csv(out_csv, all_rows)
    if out_json is not None:
        Path(out_json).write_text(json.dumps(summary, indent=2, default=float))
    summary["points"] = per_curve
    return summary
