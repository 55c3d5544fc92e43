"""Composition of adversarial answers into the rendered attack payload.

Composition rule: an optional ``"ANSWER: "`` command prefix, then the parts
joined by ``" AND "``, ``" OR "``, ``" WITH "`` or a single space.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Sequence

COMMAND_PREFIX = "ANSWER: "


class Conjunction(str, enum.Enum):
    EMPTY = "empty"
    AND = "and"
    OR = "or"
    WITH = "with"

    @property
    def keyword(self) -> str:
        return "" if self is Conjunction.EMPTY else self.value.upper()

    @property
    def separator(self) -> str:
        return " " if self is Conjunction.EMPTY else f" {self.keyword} "

    @classmethod
    def parse(cls, value: "str | Conjunction") -> "Conjunction":
        if isinstance(value, Conjunction):
            return value
        token = value.strip().lower()
        if token in ("", "none", "space"):
            return cls.EMPTY
        return cls(token)


KEYWORDS = frozenset(c.keyword for c in Conjunction if c.keyword)


class CompositionError(ValueError):
    pass


class EmptyParts(CompositionError):
    def __init__(self) -> None:
        super().__init__("attack needs at least one non-empty part")


class MultilinePart(CompositionError):
    def __init__(self, index: int):
        super().__init__(f"part {index} is empty or spans multiple lines")
        self.index = index


class AmbiguousParse(CompositionError):
    def __init__(self, text: str, reason: str):
        super().__init__(f"cannot parse {text!r}: {reason}")
        self.text = text


@dataclass(frozen=True)
class AttackString:
    parts: tuple[str, ...]
    command: bool
    conjunction: Conjunction
    text: str

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "parts": list(self.parts),
            "command": self.command,
            "conjunction": self.conjunction.value,
        }


def render_text(parts: Sequence[str], command: bool, conj: Conjunction) -> str:
    prefix = COMMAND_PREFIX if command else ""
    return prefix + conj.separator.join(parts)


def compose_attack(
    parts: Sequence[str], command: bool = False, conj: Conjunction | str = Conjunction.EMPTY
) -> AttackString:
    conj = Conjunction.parse(conj)
    parts = tuple(parts)
    if not parts:
        raise EmptyParts()
    for i, part in enumerate(parts):
        if not part.strip() or "\n" in part or "\r" in part:
            raise MultilinePart(i)
    # surrounding whitespace would break the one-space-per-side rule
    parts = tuple(" ".join(p.split()) for p in parts)
    return AttackString(parts, command, conj, render_text(parts, command, conj))


@dataclass(frozen=True)
class ParsedAttack:
    parts: tuple[str, ...]
    command: bool
    conjunction: Conjunction
    lossy: bool = False


def parse_attack(text: str, command_hint: bool | None = None) -> ParsedAttack:
    """Invert :func:`compose_attack`.

    With ``command_hint=None`` the command prefix is auto-detected. A text
    without keywords is returned as one segment with ``lossy=True`` when it
    contains spaces, since space-joined parts cannot be told apart.
    """
    command = text.startswith(COMMAND_PREFIX) if command_hint is None else command_hint
    body = text
    if command:
        if not text.startswith(COMMAND_PREFIX):
            raise AmbiguousParse(text, "command prefix expected but absent")
        body = text[len(COMMAND_PREFIX):]
    if not body or body != body.strip():
        raise AmbiguousParse(text, "empty body or stray whitespace")

    tokens = body.split(" ")
    found = {t for t in tokens if t in KEYWORDS}
    if not found:
        return ParsedAttack((body,), command, Conjunction.EMPTY, lossy=" " in body)
    if len(found) > 1:
        raise AmbiguousParse(text, f"mixed conjunction keywords {sorted(found)}")
    keyword = found.pop()
    conj = Conjunction(keyword.lower())
    parts = tuple(body.split(conj.separator))
    if any(not p or p != p.strip() or keyword in p.split(" ") for p in parts):
        raise AmbiguousParse(text, f"keyword {keyword} collides with part boundaries")
    return ParsedAttack(parts, command, conj)


# --- variant vocabulary -------------------------------------------------------

BASE_VARIANTS = ("auto", "single", "single+a", "composed", "composed+a", "naive_patch")
GRID_KEYWORDS = ("empty", "and", "or", "with", "combined")
POSITIONS = ("top", "bottom")
_GRID_RE = re.compile(r"grid:(?P<kw>[a-z]+):(?P<pos>[a-z]+)")

# column order of the keyword x location ablation grid
TABLE_GRID = (
    ("empty", "top"),
    ("and", "top"),
    ("or", "top"),
    ("or", "bottom"),
    ("with", "top"),
    ("with", "bottom"),
    ("combined", "bottom"),
)


def grid_id(keyword: str, position: str) -> str:
    return f"grid:{keyword}:{position}"


def is_valid_variant(variant: str) -> bool:
    if variant in BASE_VARIANTS:
        return True
    m = _GRID_RE.fullmatch(variant)
    return bool(m) and m["kw"] in GRID_KEYWORDS and m["pos"] in POSITIONS


def check_variants(variants: Sequence[str]) -> list[str]:
    if not variants:
        raise ValueError("at least one attack variant is required")
    bad = [v for v in variants if not is_valid_variant(v)]
    if bad:
        raise ValueError(
            f"unknown attack variant(s) {bad}; expected one of {list(BASE_VARIANTS)} "
            "or grid:<empty|and|or|with|combined>:<top|bottom>"
        )
    return list(variants)


def grid_conjunction(keyword: str) -> Conjunction:
    # "combined" is our reading of the grid's last column: command + WITH
    return Conjunction.WITH if keyword == "combined" else Conjunction(keyword)


def parse_grid(variant: str) -> tuple[Conjunction, str]:
    m = _GRID_RE.fullmatch(variant)
    if not m or not is_valid_variant(variant):
        raise ValueError(f"not a grid variant: {variant!r}")
    return grid_conjunction(m["kw"]), m["pos"]


@dataclass(frozen=True)
class GridVariant:
    id: str
    attack: AttackString
    position: str


def enumerate_variants(parts: Sequence[str]) -> list[GridVariant]:
    """The seven keyword x location ablation variants, all with the command prefix."""
    out = []
    for keyword, position in TABLE_GRID:
        attack = compose_attack(parts, True, grid_conjunction(keyword))
        out.append(GridVariant(grid_id(keyword, position), attack, position))
    return out
