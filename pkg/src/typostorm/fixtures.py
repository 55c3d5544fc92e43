"""Seeded synthetic driving scenes and datasets for offline runs and tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .clients.gateway import encode_png
from .clients.mock import image_tag
from .corpus import Dataset, PixelBox, QAItem, TaskKind, save_canonical


def driving_scene(seed: int, width: int = 400, height: int = 300) -> np.ndarray:
    """Sky gradient, buildings, asphalt with lane marks and a few car boxes."""
    rng = np.random.default_rng(seed)
    horizon = int(height * rng.uniform(0.38, 0.5))
    y = np.linspace(0.0, 1.0, horizon)[:, None]
    sky_top = rng.uniform([90, 140, 200], [130, 180, 240])
    sky_bot = rng.uniform([170, 190, 210], [210, 220, 235])
    img = np.zeros((height, width, 3), dtype=np.float64)
    img[:horizon] = sky_top * (1 - y[..., None]) + sky_bot * y[..., None]
    road = rng.uniform(70, 110)
    rows = np.linspace(0.0, 1.0, height - horizon)[:, None]
    img[horizon:] = (road + 25 * rows)[..., None] * np.ones(3)
    img += rng.normal(0.0, 4.0, size=img.shape)

    pil = Image.fromarray(np.clip(img, 0, 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(pil)
    x = 0
    while x < width:
        w = int(rng.integers(30, 80))
        top = int(horizon - rng.integers(20, max(21, horizon - 10)))
        shade = tuple(int(c) for c in rng.integers(80, 200, size=3))
        draw.rectangle([x, top, x + w, horizon], fill=shade)
        for wy in range(top + 5, horizon - 8, 14):
            for wx in range(x + 4, x + w - 8, 12):
                draw.rectangle([wx, wy, wx + 5, wy + 7], fill=(230, 230, 180))
        x += w + int(rng.integers(0, 10))
    cx = width // 2
    for yy in range(horizon + 8, height, 22):
        draw.rectangle([cx - 2, yy, cx + 2, yy + 10], fill=(235, 235, 235))
    return np.asarray(pil, dtype=np.uint8).copy()


def car_boxes(seed: int, width: int, height: int, n: int) -> list[PixelBox]:
    rng = np.random.default_rng(seed + 10_000)
    boxes = []
    horizon = int(height * 0.5)
    for i in range(n):
        w = int(rng.integers(width // 8, width // 5))
        h = int(w * rng.uniform(0.55, 0.75))
        x0 = int((i + 0.5) * width / n - w / 2)
        x0 = max(0, min(width - w, x0))
        y0 = int(rng.integers(horizon, max(horizon + 1, int(height * 0.82) - h)))
        boxes.append(PixelBox(x0, y0, x0 + w, y0 + h, round(float(rng.uniform(0.5, 0.99)), 3)))
    return boxes


def draw_cars(image: np.ndarray, boxes: list[PixelBox], seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed + 20_000)
    pil = Image.fromarray(image, "RGB")
    draw = ImageDraw.Draw(pil)
    for b in boxes:
        color = tuple(int(c) for c in rng.integers(20, 230, size=3))
        draw.rectangle([b.x_min, b.y_min, b.x_max - 1, b.y_max - 1], fill=color)
        glass_bottom = b.y_min + (b.y_max - b.y_min) // 3
        if glass_bottom > b.y_min + 3 and b.x_max - 5 > b.x_min + 4:
            draw.rectangle([b.x_min + 4, b.y_min + 3, b.x_max - 5, glass_bottom], fill=(40, 50, 60))
    return np.asarray(pil, dtype=np.uint8).copy()


def build_dataset(
    root: str | Path,
    n_images: int = 10,
    per_image: int = 3,
    seed: int = 0,
    width: int = 400,
    height: int = 300,
    with_objects: bool = False,
) -> Dataset:
    """Write a seeded image set plus ``dataset.jsonl`` under ``root``.

    Every image gets ``per_image`` counting questions; with ``with_objects``
    the last question becomes a recognition question with an annotated box.
    """
    from .corpus import load_dataset

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    subjects = ["cars", "pedestrians", "traffic lights", "trucks", "cyclists", "road signs"]
    items = []
    for i in range(n_images):
        n_cars = int(rng.integers(1, 5))
        boxes = car_boxes(seed * 1000 + i, width, height, n_cars)
        img = draw_cars(driving_scene(seed * 1000 + i, width, height), boxes, seed * 1000 + i)
        ref = f"images/scene_{i:03d}.png"
        Image.fromarray(img, "RGB").save(root / ref, format="PNG")
        order = rng.permutation(len(subjects))
        for j in range(per_image):
            qid = f"img{i:03d}-q{j}"
            if with_objects and j == per_image - 1:
                box = max(boxes, key=lambda b: b.score or 0.0)
                items.append(QAItem(qid, ref, "What type of vehicle is in the highlighted area?",
                                    "car", TaskKind.SCENE_OBJECT_REASONING, "car", (box,)))
                continue
            subject = subjects[order[j % len(subjects)]]
            count = n_cars if subject == "cars" else int(rng.integers(0, 7))
            items.append(QAItem(qid, ref, f"How many {subject} are there?", str(count),
                                TaskKind.SCENE_REASONING))
    save_canonical(items, root / "dataset.jsonl")
    return load_dataset(root / "dataset.jsonl")


def truthful_answers(dataset: Dataset) -> dict[str, str]:
    """Mock-script ``vision.answers`` table making clean answers equal ground truth."""
    out = {}
    for item in dataset:
        tag = image_tag(encode_png(dataset.load_image(item.image_ref)))
        out[f"{tag}|{item.question}"] = item.ground_answer
    return out


def mock_script(dataset: Dataset | None = None, *, seed: int = 0,
                fool_probability: float | None = None, **overrides) -> dict:
    vision = {"clean": "unknown", "fooled_by_banner": True, "fool_probability": fool_probability}
    if dataset is not None:
        vision["answers"] = truthful_answers(dataset)
    script = {
        "seed": seed,
        "vision": vision,
        "generator": {"rule": "offset", "offset": 3},
        "judge": {"rule": "equality"},
        "scorer": {"rule": "overlap"},
        "detector": {"boxes": []},
    }
    script.update(overrides)
    return script
