"""PNG/PPM reading and writing for RGB images held as float arrays in ``[0, 1]``."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

EXTENSIONS = (".png", ".ppm")


def read_image(path) -> np.ndarray:
    """``(H, W, 3)`` float32 in ``[0, 1]``."""
    path = Path(path)
    if path.suffix.lower() not in EXTENSIONS:
        raise ValueError(f"{path}: only PNG and PPM images are supported")
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P", "LA"):
            raise ValueError(f"{path}: unsupported image mode {im.mode}")
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() not in EXTENSIONS:
        raise ValueError(f"{path}: only PNG and PPM images are supported")
    Image.fromarray(to_uint8(img), "RGB").save(path)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` array -> ``(1, 3, H, W)`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)


def to_array(x: torch.Tensor) -> np.ndarray:
    """``(1, 3, H, W)`` or ``(3, H, W)`` tensor -> ``(H, W, 3)`` float32 array."""
    if x.dim() == 4:
        x = x[0]
    return x.detach().cpu().permute(1, 2, 0).numpy().astype(np.float32)


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() in EXTENSIONS)
