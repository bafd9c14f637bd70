"""Synthetic screen-content patches: flat fields, UI boxes, grids, charts and bitmap text."""

from __future__ import annotations

import string

import numpy as np
from PIL import Image, ImageDraw, ImageFont

_PALETTE = np.array([
    (255, 255, 255), (245, 245, 245), (30, 30, 30), (0, 0, 0), (0, 120, 215),
    (230, 230, 250), (255, 200, 0), (200, 40, 40), (40, 160, 70), (90, 90, 90),
    (250, 250, 210), (60, 60, 120), (220, 220, 220), (255, 128, 64), (20, 90, 160),
])
_CHARS = string.ascii_letters + string.digits + "   .,:;()[]{}=+-*/_#"


def _color(rng: np.random.Generator) -> tuple:
    if rng.random() < 0.8:
        return tuple(int(v) for v in _PALETTE[rng.integers(len(_PALETTE))])
    return tuple(int(v) for v in rng.integers(0, 256, 3))


def _text(draw, rng, box, font_size):
    x0, y0, x1, y1 = box
    font = ImageFont.load_default(size=font_size)
    color = _color(rng)
    line_h = font_size + 2
    y = y0 + 2
    while y + line_h <= y1:
        n = int(rng.integers(4, 40))
        line = "".join(_CHARS[i] for i in rng.integers(len(_CHARS), size=n))
        draw.text((x0 + 2, y), line, fill=color, font=font)
        y += line_h


def _grid(draw, rng, box):
    x0, y0, x1, y1 = box
    step = int(rng.integers(6, 24))
    color = _color(rng)
    for x in range(x0, x1, step):
        draw.line([(x, y0), (x, y1 - 1)], fill=color, width=1)
    for y in range(y0, y1, step):
        draw.line([(x0, y), (x1 - 1, y)], fill=color, width=1)


def _chart(draw, rng, box):
    x0, y0, x1, y1 = box
    n = int(rng.integers(3, 10))
    width = max(1, (x1 - x0) // (2 * n))
    color = _color(rng)
    draw.line([(x0, y1 - 1), (x1 - 1, y1 - 1)], fill=(0, 0, 0), width=1)
    for i in range(n):
        h = int(rng.integers(2, max(3, y1 - y0)))
        bx = x0 + (2 * i + 1) * width
        draw.rectangle([bx, y1 - h, bx + width - 1, y1 - 1], fill=color)


def _tiles(img, draw, rng, box):
    """Repeated icon pattern."""
    x0, y0, x1, y1 = box
    size = int(rng.integers(8, 20))
    icon = Image.new("RGB", (size, size), _color(rng))
    d = ImageDraw.Draw(icon)
    d.rectangle([1, 1, size - 2, size - 2], outline=_color(rng))
    d.ellipse([3, 3, size - 4, size - 4], fill=_color(rng))
    for y in range(y0, y1 - size + 1, size + 2):
        for x in range(x0, x1 - size + 1, size + 2):
            img.paste(icon, (x, y))


def synth_sc_patch(rng: np.random.Generator, size: int = 256) -> np.ndarray:
    """One synthetic screen-content patch, ``(size, size, 3)`` float32 in ``[0, 1]``."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    img = Image.new("RGB", (size, size), _color(rng))
    draw = ImageDraw.Draw(img)
    draw.fontmode = "1"  # no anti-aliasing: sharp glyph edges
    n_regions = int(rng.integers(3, 8))
    for _ in range(n_regions):
        w = int(rng.integers(size // 6, size // 2 + 1))
        h = int(rng.integers(size // 8, size // 2 + 1))
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        box = (x0, y0, x0 + w, y0 + h)
        draw.rectangle([x0, y0, x0 + w - 1, y0 + h - 1], fill=_color(rng),
                       outline=_color(rng) if rng.random() < 0.7 else None)
        kind = rng.integers(5)
        if kind == 0 or kind == 1:
            _text(draw, rng, box, int(rng.choice([10, 11, 12, 14, 16])))
        elif kind == 2:
            _grid(draw, rng, box)
        elif kind == 3:
            _chart(draw, rng, box)
        else:
            _tiles(img, draw, rng, box)
    return np.asarray(img, dtype=np.float32) / 255.0


def synth_dataset(n: int, size: int = 256, seed: int = 0) -> list[np.ndarray]:
    """``n`` patches, patch ``i`` drawn from its own stream so subsets are stable."""
    seq = np.random.SeedSequence(seed)
    return [synth_sc_patch(np.random.default_rng(s), size) for s in seq.spawn(n)]
