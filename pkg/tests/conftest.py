from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from typostorm.clients import Gateway, ResponseCache, parse_endpoints, serve_mock
from typostorm.corpus import QAItem, TaskKind

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

FIXTURES = Path(__file__).parent / "fixtures"


def write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")


def write_jsonl(path: Path, rows: list[dict]) -> None:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


def make_item(**kw) -> QAItem:
    base = dict(
        id="q1",
        image_ref="a.png",
        question="How many cars are there?",
        ground_answer="4",
        task=TaskKind.SCENE_REASONING,
    )
    base.update(kw)
    return QAItem(**base)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def mock_server():
    servers = []

    def start(script: dict | None = None):
        server = serve_mock(script)
        servers.append(server)
        return server

    yield start
    for s in servers:
        s.close()


@pytest.fixture
def endpoints_for():
    def build(server, **kw):
        return parse_endpoints(tomllib.loads(server.endpoints_toml(**kw)))

    return build


@pytest.fixture
def gateway(tmp_path):
    gw = Gateway(ResponseCache(tmp_path / "cache"), sleep=lambda s: None)
    yield gw
    gw.close()


def campaign_manifest(root: Path, server, variants, *, dataset: Path | None = None,
                      out: str = "run", **kw):
    """A RunManifest over ``dataset`` (default root/data) against ``server``."""
    from typostorm.campaign import RunManifest

    endpoints = root / "endpoints.toml"
    endpoints.write_text(server.endpoints_toml())
    return RunManifest(
        dataset=dataset or root / "data" / "dataset.jsonl",
        endpoints=endpoints,
        variants=list(variants),
        out_dir=root / out,
        **kw,
    )
