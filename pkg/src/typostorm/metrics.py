"""Native metrics: answer normalization, exact match and SSIM."""

from __future__ import annotations

import re
from functools import lru_cache

import numpy as np

NUMBER_WORDS = {
    "zero": "0", "one": "1", "two": "2", "three": "3", "four": "4",
    "five": "5", "six": "6", "seven": "7", "eight": "8", "nine": "9",
    "ten": "10", "eleven": "11", "twelve": "12", "thirteen": "13",
    "fourteen": "14", "fifteen": "15", "sixteen": "16", "seventeen": "17",
    "eighteen": "18", "nineteen": "19", "twenty": "20",
}

_TERMINAL_PUNCT = re.compile(r"[.!?\s]+$")


def normalize_text(s: str) -> str:
    """Canonical form used for exact-match comparison.

    Lowercases, trims, collapses whitespace runs, strips terminal ``.!?``
    and maps standalone number words up to twenty onto digits.
    """
    s = " ".join(s.lower().split())
    s = _TERMINAL_PUNCT.sub("", s)
    return " ".join(NUMBER_WORDS.get(tok, tok) for tok in s.split(" ")) if s else ""


def exact_match(pred: str, ref: str) -> int:
    return int(normalize_text(pred) == normalize_text(ref))


def parse_count(s: str) -> int | None:
    """Integer value of an answer that normalizes to a bare number, else None."""
    norm = normalize_text(s)
    return int(norm) if re.fullmatch(r"\d+", norm) else None


# --- SSIM -------------------------------------------------------------------

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
DATA_RANGE = 255.0


class DimensionMismatch(ValueError):
    pass


def luma(image: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma as float64; 2-D inputs are taken as already gray."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] >= 3:
        return 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
    raise ValueError(f"expected HxW or HxWx3 image, got shape {arr.shape}")


@lru_cache(maxsize=4)
def gaussian_taps(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    g.setflags(write=False)
    return g


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a symmetric 1-D kernel on both axes."""
    n = taps.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=1) @ taps
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=0) @ taps


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, y = luma(a), luma(b)
    if x.shape != y.shape:
        raise DimensionMismatch(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.shape[0] < WINDOW or x.shape[1] < WINDOW:
        raise ValueError(f"images must be at least {WINDOW}x{WINDOW}")
    taps = gaussian_taps()
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    var_x = _filter_valid(x * x, taps) - mu_x * mu_x
    var_y = _filter_valid(y * y, taps) - mu_y * mu_y
    cov = _filter_valid(x * y, taps) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM on BT.601 luma: 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, L=255, averaged over all full-window positions."""
    return float(ssim_map(a, b).mean())
