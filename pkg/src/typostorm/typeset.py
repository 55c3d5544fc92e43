"""Placement planning and rasterization of attack text into images.

Text is drawn with the bundled DejaVu Sans face through FreeType's basic
layout engine, so output pixels depend only on the inputs and the Pillow /
FreeType build. Each placement box is first covered by a pad rectangle and
then receives the word-wrapped, centered text at the largest size that fits.
Nothing outside the placement boxes is touched.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Callable, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .compose import AttackString
from .corpus import PixelBox, QAItem
from .metrics import ssim

FONTS = {"dejavu-sans": "DejaVuSans.ttf"}
DEFAULT_FONT = "dejavu-sans"
DEFAULT_FRACTION = 0.10
MAX_FRACTION = 0.25
MIN_IMAGE_SIDE = 32


class PlacementKind(str, enum.Enum):
    BACKGROUND_TOP = "background_top"
    BACKGROUND_BOTTOM = "background_bottom"
    FOREGROUND = "foreground"


class TypesetError(Exception):
    pass


class ImageTooSmall(TypesetError):
    pass


class NoBoxesFound(TypesetError):
    def __init__(self, target_class: str | None):
        super().__init__(f"no boxes found for target {target_class!r}")
        self.target_class = target_class


class TextUnfittable(TypesetError):
    def __init__(self, placement: "Placement", text: str, reason: str = ""):
        msg = f"text {text!r} does not fit {placement.box} at the minimum font size"
        super().__init__(f"{msg} ({reason})" if reason else msg)
        self.placement = placement
        self.text = text


class OverlappingPlacements(TypesetError):
    pass


@dataclass(frozen=True)
class Placement:
    kind: PlacementKind
    box: PixelBox

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "box": self.box.as_list()}

    @classmethod
    def from_json(cls, data: dict) -> "Placement":
        return cls(PlacementKind(data["kind"]), PixelBox.from_list(data["box"]))


@dataclass(frozen=True)
class TypoStyle:
    font: str = DEFAULT_FONT
    color: tuple[int, int, int] = (0, 0, 0)
    pad_color: tuple[int, int, int] = (255, 255, 255)
    pad_alpha: float = 1.0
    min_font_px: int = 8
    margin_px: int = 2

    def __post_init__(self) -> None:
        if self.font not in FONTS:
            raise ValueError(f"unknown font {self.font!r}; bundled: {sorted(FONTS)}")
        if self.min_font_px < 8:
            raise ValueError("min_font_px must be at least 8")
        if self.margin_px < 0:
            raise ValueError("margin_px must be non-negative")
        if not 0.0 <= self.pad_alpha <= 1.0:
            raise ValueError("pad_alpha must lie in [0, 1]")
        for name in ("color", "pad_color"):
            rgb = getattr(self, name)
            if len(rgb) != 3 or any(not (0 <= int(c) <= 255) for c in rgb):
                raise ValueError(f"{name} must be an 8-bit RGB triple")
            object.__setattr__(self, name, tuple(int(c) for c in rgb))

    @classmethod
    def from_dict(cls, data: dict) -> "TypoStyle":
        kwargs = dict(data)
        for name in ("color", "pad_color"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "font": self.font,
            "color": list(self.color),
            "pad_color": list(self.pad_color),
            "pad_alpha": self.pad_alpha,
            "min_font_px": self.min_font_px,
            "margin_px": self.margin_px,
        }


@dataclass
class AttackedImage:
    pixels: np.ndarray
    source_id: str
    attack_text: str
    placements: list[Placement] = field(default_factory=list)
    ssim_vs_original: float = 1.0


# --- planning -----------------------------------------------------------------


def plan_background(
    width: int, height: int, position: str = "bottom", fraction: float = DEFAULT_FRACTION
) -> Placement:
    if not 0.0 < fraction <= MAX_FRACTION:
        raise ValueError(f"banner fraction {fraction} outside (0, {MAX_FRACTION}]")
    if width < MIN_IMAGE_SIDE or height < MIN_IMAGE_SIDE:
        raise ImageTooSmall(f"{width}x{height} image is below {MIN_IMAGE_SIDE}px per side")
    h = max(1, round(fraction * height))
    if position == "top":
        return Placement(PlacementKind.BACKGROUND_TOP, PixelBox(0, 0, width, h))
    if position == "bottom":
        return Placement(PlacementKind.BACKGROUND_BOTTOM, PixelBox(0, height - h, width, height))
    raise ValueError(f"banner position must be 'top' or 'bottom', got {position!r}")


def _box_order(box: PixelBox) -> tuple:
    score = box.score if box.score is not None else 0.0
    return (-score, box.y_min, box.x_min)


DetectFn = Callable[[np.ndarray, str], Sequence[PixelBox]]


def plan_foreground(
    item: QAItem,
    image: np.ndarray | None = None,
    detector: DetectFn | None = None,
    k: int = 1,
) -> list[Placement]:
    """Foreground placements for an item: annotated boxes when present,
    otherwise the detector's boxes for ``item.target_class``.

    Boxes are ranked by descending score, ties broken by (y_min, x_min), and
    the top ``k`` are returned.
    """
    if item.boxes:
        boxes = list(item.boxes)
    elif item.target_class and detector is not None:
        if image is None:
            raise ValueError("an image is required to query the detector")
        boxes = list(detector(image, item.target_class))
    else:
        raise NoBoxesFound(item.target_class)
    if not boxes:
        raise NoBoxesFound(item.target_class)
    boxes.sort(key=_box_order)
    return [Placement(PlacementKind.FOREGROUND, b) for b in boxes[:k]]


# --- text fitting -------------------------------------------------------------


@lru_cache(maxsize=256)
def load_font(size: int, font: str = DEFAULT_FONT) -> ImageFont.FreeTypeFont:
    ref = resources.files("typostorm").joinpath("fonts").joinpath(FONTS[font])
    with resources.as_file(ref) as path:
        return ImageFont.truetype(str(path), size=size, layout_engine=ImageFont.Layout.BASIC)


def line_height(size: int, font: str = DEFAULT_FONT) -> int:
    ascent, descent = load_font(size, font).getmetrics()
    return ascent + descent


def wrap_words(text: str, size: int, max_width: float, font: str = DEFAULT_FONT) -> list[str] | None:
    """Greedy word wrap at spaces; None if a single word is wider than the line."""
    face = load_font(size, font)
    lines: list[str] = []
    current = ""
    for word in text.split():
        if face.getlength(word) > max_width:
            return None
        candidate = f"{current} {word}" if current else word
        if current and face.getlength(candidate) > max_width:
            lines.append(current)
            current = word
        else:
            current = candidate
    if current:
        lines.append(current)
    return lines


def fits_at(text: str, size: int, width: int, height: int, font: str = DEFAULT_FONT) -> list[str] | None:
    """Wrapped lines if ``text`` fits a width x height area at ``size``, else None."""
    if size < 1 or width <= 0 or height <= 0:
        return None
    lines = wrap_words(text, size, width, font)
    if lines is None or len(lines) * line_height(size, font) > height:
        return None
    return lines


def fit_text(text: str, placement: Placement, style: TypoStyle) -> tuple[int, list[str]]:
    """Largest font size (binary search) at which ``text`` fits inside the
    placement box minus margins, together with the wrapped lines."""
    avail_w = placement.box.width - 2 * style.margin_px
    avail_h = placement.box.height - 2 * style.margin_px
    lo = style.min_font_px
    lines = fits_at(text, lo, avail_w, avail_h, style.font)
    if lines is None:
        raise TextUnfittable(placement, text, f"needs a font below {lo}px")
    best = (lo, lines)
    hi = max(lo, avail_h)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        got = fits_at(text, mid, avail_w, avail_h, style.font)
        if got is None:
            hi = mid - 1
        else:
            lo = mid
            best = (mid, got)
    return best


# --- rendering ----------------------------------------------------------------


def _overlap(a: PixelBox, b: PixelBox) -> bool:
    return a.x_min < b.x_max and b.x_min < a.x_max and a.y_min < b.y_max and b.y_min < a.y_max


def check_overlaps(placements: Sequence[Placement]) -> None:
    for i, p in enumerate(placements):
        for q in placements[i + 1:]:
            if _overlap(p.box, q.box):
                raise OverlappingPlacements(f"placements {p.box} and {q.box} overlap")


def _draw_into_box(region: np.ndarray, text: str, placement: Placement, style: TypoStyle) -> np.ndarray:
    size, lines = fit_text(text, placement, style)
    pad = np.asarray(style.pad_color, dtype=np.float64)
    if style.pad_alpha >= 1.0:
        padded = np.broadcast_to(pad.astype(np.uint8), region.shape).copy()
    else:
        blended = style.pad_alpha * pad + (1.0 - style.pad_alpha) * region.astype(np.float64)
        padded = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    canvas = Image.fromarray(padded, "RGB")
    draw = ImageDraw.Draw(canvas)
    face = load_font(size, style.font)
    lh = line_height(size, style.font)
    ascent = face.getmetrics()[0]
    h, w = region.shape[:2]
    y = (h - lh * len(lines)) // 2
    for line in lines:
        x = (w - face.getlength(line)) / 2.0
        draw.text((round(x), y + ascent), line, fill=style.color, font=face, anchor="ls")
        y += lh
    return np.asarray(canvas, dtype=np.uint8)


def render_attack(
    image: np.ndarray,
    text: AttackString | str | Sequence[AttackString | str],
    placements: Sequence[Placement],
    style: TypoStyle | None = None,
    source_id: str = "",
) -> AttackedImage:
    """Inpaint attack text into each placement box.

    ``text`` is either one payload for every placement or a sequence with
    one payload per placement.
    """
    style = style or TypoStyle()
    src = np.asarray(image, dtype=np.uint8)
    if src.ndim != 3 or src.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 uint8 image, got shape {src.shape}")
    placements = list(placements)
    if isinstance(text, (str, AttackString)):
        texts = [text] * len(placements)
    else:
        texts = list(text)
        if len(texts) != len(placements):
            raise ValueError("need one text per placement")
    payloads = [t.text if isinstance(t, AttackString) else t for t in texts]
    for t in payloads:
        if "\n" in t or "\r" in t:
            raise ValueError("attack text must be a single line")
    height, width = src.shape[:2]
    for p in placements:
        p.box.check(width, height)
    check_overlaps(placements)

    out = src.copy()
    for p, payload in zip(placements, payloads):
        b = p.box
        out[b.y_min:b.y_max, b.x_min:b.x_max] = _draw_into_box(
            src[b.y_min:b.y_max, b.x_min:b.x_max], payload, p, style
        )
    score = ssim(src, out) if placements else 1.0
    summary = payloads[0] if len(set(payloads)) == 1 else " | ".join(payloads)
    return AttackedImage(out, source_id, summary if payloads else "", placements, score)


def uniform_noise(image: np.ndarray, amplitude: int = 16, seed: int = 0) -> np.ndarray:
    """Full-image uniform integer noise in [-amplitude, amplitude], clamped to 8 bits."""
    rng = np.random.default_rng(seed)
    noise = rng.integers(-amplitude, amplitude, size=image.shape, endpoint=True)
    return np.clip(image.astype(np.int32) + noise, 0, 255).astype(np.uint8)
