"""Slow, obviously-correct reference implementations used only by tests."""

from __future__ import annotations

import math
import re

import numpy as np

from typostorm.typeset import fits_at


def brute_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Direct per-window SSIM: weighted moments over every full 11x11 patch."""
    def gray(img):
        img = img.astype(np.float64)
        return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]

    x, y = gray(a), gray(b)
    g = np.array([math.exp(-((k - 5) ** 2) / (2 * 1.5**2)) for k in range(11)])
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    total, count = 0.0, 0
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
            count += 1
    return total / count


_NUM = {w: str(i) for i, w in enumerate(
    "zero one two three four five six seven eight nine ten eleven twelve thirteen "
    "fourteen fifteen sixteen seventeen eighteen nineteen twenty".split())}


def brute_normalize(s: str) -> str:
    s = s.lower()
    tokens = [t for t in re.split(r"\s+", s) if t]
    s = " ".join(tokens)
    while s and s[-1] in ".!? ":
        s = s[:-1]
    return " ".join(_NUM.get(t, t) for t in s.split(" ")) if s else ""


def brute_exact(pred: str, ref: str) -> int:
    return 1 if brute_normalize(pred) == brute_normalize(ref) else 0


def linear_fit_size(text: str, width: int, height: int, min_px: int) -> int | None:
    """Largest size in [min_px, height] that fits, by exhaustive scan."""
    best = None
    for size in range(min_px, max(min_px, height) + 1):
        if fits_at(text, size, width, height) is not None:
            best = size
    return best
