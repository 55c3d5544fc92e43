"""Loading and organizing VQA datasets into the harness item model.

Three on-disk layouts are understood:

``canonical_jsonl``
    One item per line::

        {"id": "i1", "image": "a.png", "question": "...", "answer": "...",
         "task": "scene_reasoning", "target_class": "car",
         "boxes": [[x_min, y_min, x_max, y_max, score?], ...]}

``lingoqa``
    JSON array or JSON-Lines of LingoQA-style rows. Field mapping:
    ``question_id`` -> id (falls back to ``<segment_id>-<row>``),
    ``images`` (first frame) or ``image`` -> image, ``question``, ``answer``.
    LingoQA does not label tasks per row, so ``task`` is read if present and
    otherwise taken from the ``default_task`` argument; with neither the load
    fails.

``cvprw24``
    JSON array or JSON-Lines of CVPRW'24-challenge-style rows. Field mapping:
    ``id`` (falls back to ``<image stem>-q<n>``), ``image`` or ``image_id``,
    ``question``, ``answer``, ``category`` (``counting`` -> scene reasoning,
    ``recognition``/``grounding``/``object`` -> scene object reasoning,
    ``action``/``planning`` -> action reasoning), ``object_class`` ->
    target_class, ``bbox`` (one box) or ``boxes``.

Both external mappings are best-effort assumptions about the released files.
"""

from __future__ import annotations

import enum
import json
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError


class TaskKind(str, enum.Enum):
    SCENE_REASONING = "scene_reasoning"
    SCENE_OBJECT_REASONING = "scene_object_reasoning"
    ACTION_REASONING = "action_reasoning"

    @classmethod
    def parse(cls, value: str) -> "TaskKind":
        try:
            return cls(value.strip().lower())
        except ValueError:
            raise ValueError(f"unknown task kind {value!r}") from None


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class MissingField(DatasetError):
    def __init__(self, line: int, field_name: str):
        super().__init__(f"line {line}: missing required field {field_name!r}")
        self.line = line
        self.field = field_name


class InvalidField(DatasetError):
    def __init__(self, line: int, field_name: str, reason: str):
        super().__init__(f"line {line}: invalid field {field_name!r}: {reason}")
        self.line = line
        self.field = field_name


class UnreadableImage(DatasetError):
    def __init__(self, image_ref: str, reason: str = ""):
        msg = f"unreadable image {image_ref!r}"
        super().__init__(f"{msg}: {reason}" if reason else msg)
        self.image_ref = image_ref


class DuplicateId(DatasetError):
    def __init__(self, item_id: str, line: int):
        super().__init__(f"line {line}: duplicate item id {item_id!r}")
        self.id = item_id
        self.line = line


@dataclass(frozen=True)
class PixelBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    score: float | None = None

    def check(self, width: int, height: int) -> None:
        """Raise ValueError unless the box lies inside a width x height image."""
        if not (0 <= self.x_min < self.x_max <= width):
            raise ValueError(f"box x-range [{self.x_min}, {self.x_max}) outside width {width}")
        if not (0 <= self.y_min < self.y_max <= height):
            raise ValueError(f"box y-range [{self.y_min}, {self.y_max}) outside height {height}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"box score {self.score} outside [0, 1]")

    def fits(self, width: int, height: int) -> bool:
        try:
            self.check(width, height)
        except ValueError:
            return False
        return True

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def as_list(self) -> list:
        out: list = [self.x_min, self.y_min, self.x_max, self.y_max]
        if self.score is not None:
            out.append(self.score)
        return out

    @classmethod
    def from_list(cls, values: Iterable[Any]) -> "PixelBox":
        vals = list(values)
        if len(vals) not in (4, 5):
            raise ValueError(f"box needs 4 or 5 values, got {len(vals)}")
        coords = []
        for v in vals[:4]:
            if isinstance(v, bool) or not float(v).is_integer():
                raise ValueError(f"box coordinate {v!r} is not an integer")
            coords.append(int(v))
        score = float(vals[4]) if len(vals) == 5 and vals[4] is not None else None
        return cls(*coords, score=score)


@dataclass(frozen=True)
class QAItem:
    id: str
    image_ref: str
    question: str
    ground_answer: str
    task: TaskKind
    target_class: str | None = None
    boxes: tuple[PixelBox, ...] | None = None

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "image": self.image_ref,
            "question": self.question,
            "answer": self.ground_answer,
            "task": self.task.value,
        }
        if self.target_class is not None:
            out["target_class"] = self.target_class
        if self.boxes is not None:
            out["boxes"] = [b.as_list() for b in self.boxes]
        return out


@dataclass(frozen=True)
class Dataset:
    items: tuple[QAItem, ...]
    image_root: Path
    name: str
    image_sizes: dict[str, tuple[int, int]] = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[QAItem]:
        return iter(self.items)

    def by_id(self, item_id: str) -> QAItem:
        for item in self.items:
            if item.id == item_id:
                return item
        raise KeyError(item_id)

    def image_path(self, image_ref: str) -> Path:
        return self.image_root / image_ref

    def load_image(self, image_ref: str) -> np.ndarray:
        return read_rgb(self.image_path(image_ref), image_ref)

    def size_of(self, image_ref: str) -> tuple[int, int]:
        """(width, height) of an image, read from disk if not seen at load time."""
        if image_ref not in self.image_sizes:
            h, w = self.load_image(image_ref).shape[:2]
            return w, h
        return self.image_sizes[image_ref]


def read_rgb(path: Path | str, image_ref: str | None = None) -> np.ndarray:
    """Decode an image as an 8-bit RGB array (alpha dropped, grayscale promoted)."""
    ref = image_ref if image_ref is not None else str(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGBA", "LA") or (im.mode == "P" and "transparency" in im.info):
                im = im.convert("RGBA").convert("RGB")
            elif im.mode != "RGB":
                im = im.convert("RGB")
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise UnreadableImage(ref, str(exc)) from exc


def _image_size(path: Path, image_ref: str) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            im.load()
            return im.size
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise UnreadableImage(image_ref, str(exc)) from exc


def _read_rows(path: Path) -> list[tuple[int, dict]]:
    """Rows of a JSON array or JSON-Lines file as (1-based line/index, dict)."""
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        data = json.loads(text)
        return [(i + 1, row) for i, row in enumerate(data)]
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvalidField(lineno, "<line>", f"not valid JSON ({exc.msg})") from exc
        if not isinstance(row, dict):
            raise InvalidField(lineno, "<line>", "expected a JSON object")
        rows.append((lineno, row))
    return rows


def _require_text(row: dict, key: str, line: int) -> str:
    value = row.get(key)
    if value is None:
        raise MissingField(line, key)
    value = str(value)
    if not value.strip():
        raise InvalidField(line, key, "empty after trimming")
    return value


def _parse_boxes(raw: Any, line: int) -> tuple[PixelBox, ...] | None:
    if raw is None:
        return None
    if not isinstance(raw, list):
        raise InvalidField(line, "boxes", "expected a list")
    # a single flat box is accepted as a one-element list
    if raw and not isinstance(raw[0], (list, tuple)):
        raw = [raw]
    try:
        return tuple(PixelBox.from_list(b) for b in raw)
    except (TypeError, ValueError) as exc:
        raise InvalidField(line, "boxes", str(exc)) from exc


def _canonical_row(row: dict, line: int) -> dict:
    for key in ("id", "image", "question", "answer", "task"):
        if key not in row or row[key] is None:
            raise MissingField(line, key)
    return row


def _lingoqa_row(row: dict, line: int, default_task: TaskKind | None) -> dict:
    images = row.get("images")
    if isinstance(images, list) and images:
        image = images[0]
    else:
        image = row.get("image")
    if image is None:
        raise MissingField(line, "images")
    item_id = row.get("question_id")
    if item_id is None:
        if row.get("segment_id") is None:
            raise MissingField(line, "question_id")
        item_id = f"{row['segment_id']}-{line}"
    task = row.get("task")
    if task is None:
        if default_task is None:
            raise MissingField(line, "task")
        task = default_task.value
    return {
        "id": item_id,
        "image": image,
        "question": row.get("question"),
        "answer": row.get("answer"),
        "task": task,
    }


_CVPR_CATEGORIES = {
    "counting": TaskKind.SCENE_REASONING,
    "count": TaskKind.SCENE_REASONING,
    "scene": TaskKind.SCENE_REASONING,
    "recognition": TaskKind.SCENE_OBJECT_REASONING,
    "grounding": TaskKind.SCENE_OBJECT_REASONING,
    "object": TaskKind.SCENE_OBJECT_REASONING,
    "action": TaskKind.ACTION_REASONING,
    "planning": TaskKind.ACTION_REASONING,
}


def _cvprw24_row(row: dict, line: int, seen_per_image: Counter) -> dict:
    image = row.get("image", row.get("image_id"))
    if image is None:
        raise MissingField(line, "image")
    image = str(image)
    if "task" in row:
        task = row["task"]
    else:
        category = row.get("category")
        if category is None:
            raise MissingField(line, "category")
        mapped = _CVPR_CATEGORIES.get(str(category).strip().lower())
        if mapped is None:
            raise InvalidField(line, "category", f"unmapped category {category!r}")
        task = mapped.value
    seen_per_image[image] += 1
    item_id = row.get("id")
    if item_id is None:
        item_id = f"{Path(image).stem}-q{seen_per_image[image]}"
    boxes = row.get("boxes")
    if boxes is None and row.get("bbox") is not None:
        boxes = [row["bbox"]]
    return {
        "id": item_id,
        "image": image,
        "question": row.get("question"),
        "answer": row.get("answer"),
        "task": task,
        "target_class": row.get("object_class", row.get("target_class")),
        "boxes": boxes,
    }


FORMATS = ("canonical_jsonl", "lingoqa", "cvprw24")


def load_dataset(
    path: str | Path,
    format: str = "canonical_jsonl",
    image_root: str | Path | None = None,
    *,
    default_task: TaskKind | str | None = None,
    name: str | None = None,
) -> Dataset:
    """Load and validate a dataset file.

    ``image_root`` defaults to the directory holding ``path``. Every image is
    opened once to check it decodes and to validate boxes against its size.
    The first offending row aborts the load.
    """
    path = Path(path)
    if format not in FORMATS:
        raise ValueError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    root = Path(image_root) if image_root is not None else path.parent
    if isinstance(default_task, str):
        default_task = TaskKind.parse(default_task)

    rows = _read_rows(path)
    per_image: Counter = Counter()
    items: list[QAItem] = []
    seen: set[str] = set()
    sizes: dict[str, tuple[int, int]] = {}
    for line, row in rows:
        if format == "canonical_jsonl":
            mapped = _canonical_row(row, line)
        elif format == "lingoqa":
            mapped = _lingoqa_row(row, line, default_task)
        else:
            mapped = _cvprw24_row(row, line, per_image)

        item_id = str(mapped["id"])
        if item_id in seen:
            raise DuplicateId(item_id, line)
        seen.add(item_id)
        question = _require_text(mapped, "question", line)
        answer = _require_text(mapped, "answer", line)
        try:
            task = TaskKind.parse(str(mapped["task"]))
        except ValueError as exc:
            raise InvalidField(line, "task", str(exc)) from exc
        target = mapped.get("target_class")
        boxes = _parse_boxes(mapped.get("boxes"), line)
        image_ref = str(mapped["image"])

        if image_ref not in sizes:
            sizes[image_ref] = _image_size(root / image_ref, image_ref)
        width, height = sizes[image_ref]
        for box in boxes or ():
            try:
                box.check(width, height)
            except ValueError as exc:
                raise InvalidField(line, "boxes", str(exc)) from exc

        items.append(
            QAItem(
                id=item_id,
                image_ref=image_ref,
                question=question,
                ground_answer=answer,
                task=task,
                target_class=str(target) if target is not None else None,
                boxes=boxes,
            )
        )
    return Dataset(items=tuple(items), image_root=root, name=name or path.stem, image_sizes=sizes)


def dump_canonical(dataset: Dataset | Iterable[QAItem]) -> str:
    """Serialize items as canonical JSON-Lines text (stable key order)."""
    lines = [
        json.dumps(item.to_json(), ensure_ascii=False, separators=(",", ":"))
        for item in dataset
    ]
    return "".join(line + "\n" for line in lines)


def save_canonical(dataset: Dataset | Iterable[QAItem], path: str | Path) -> None:
    Path(path).write_text(dump_canonical(dataset), encoding="utf-8")


def group_by_image(dataset: Dataset | Iterable[QAItem]) -> "OrderedDict[str, list[QAItem]]":
    groups: OrderedDict[str, list[QAItem]] = OrderedDict()
    for item in dataset:
        groups.setdefault(item.image_ref, []).append(item)
    return groups


@dataclass
class ValidationReport:
    counts: dict[str, int]
    needs_detector_or_boxes: list[str]
    duplicate_questions: dict[str, list[str]]
    questions_per_image: dict[str, int]

    @property
    def warnings(self) -> list[str]:
        out = [
            f"{item_id}: scene object item has neither boxes nor target_class"
            for item_id in self.needs_detector_or_boxes
        ]
        for image, questions in self.duplicate_questions.items():
            for q in questions:
                out.append(f"{image}: duplicate question {q!r}")
        return out

    @property
    def ok(self) -> bool:
        return not self.warnings


def validate(dataset: Dataset | Iterable[QAItem]) -> ValidationReport:
    counts: Counter = Counter()
    needs: list[str] = []
    dupes: dict[str, list[str]] = {}
    per_image: dict[str, int] = {}
    for image, group in group_by_image(dataset).items():
        per_image[image] = len(group)
        seen_q: Counter = Counter(" ".join(it.question.lower().split()) for it in group)
        repeated = [q for q, n in seen_q.items() if n > 1]
        if repeated:
            dupes[image] = repeated
        for item in group:
            counts[item.task.value] += 1
            if (
                item.task is TaskKind.SCENE_OBJECT_REASONING
                and not item.boxes
                and not item.target_class
            ):
                needs.append(item.id)
    return ValidationReport(
        counts=dict(counts),
        needs_detector_or_boxes=needs,
        duplicate_questions=dupes,
        questions_per_image=per_image,
    )
