import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from typostorm.campaign import (
    ComposedEntry,
    RunManifest,
    compose_variant,
    load_composed,
    load_manifest,
    output_name,
    run_campaign,
)
from typostorm.attackgen import AdversarialAnswer
from typostorm.corpus import PixelBox, TaskKind, save_canonical
from typostorm.fixtures import build_dataset, mock_script
from typostorm.report import load_records

from .conftest import campaign_manifest, make_item


@pytest.fixture
def small(tmp_path):
    ds = build_dataset(tmp_path / "data", n_images=3, per_image=3, seed=2, width=320, height=240,
                       with_objects=True)
    return tmp_path, ds


def answers_for(items, texts):
    return {it.id: AdversarialAnswer(it.id, t, 1, "x") for it, t in zip(items, texts)}


def test_compose_variant_semantics():
    obj = make_item(id="c", question="What is it?", ground_answer="car",
                    task=TaskKind.SCENE_OBJECT_REASONING, boxes=(PixelBox(0, 0, 50, 50),))
    items = [make_item(id="a"), make_item(id="b", question="How many?", ground_answer="2"), obj]
    answers = answers_for(items, ["7", "go faster", "bus"])

    [e], _ = compose_variant("composed", items, answers)
    assert e.attack.text == "7 go faster bus" and e.patches == [("c", "bus")]
    assert e.placement == "both"

    [e], _ = compose_variant("composed+a", items, answers, conjunction="or")
    assert e.attack.text == "ANSWER: 7 OR go faster OR bus"
    assert e.patches == [("c", "ANSWER: bus")]

    [e], _ = compose_variant("naive_patch", items, answers)
    assert e.attack is None and e.placement == "foreground" and e.patches == [("c", "bus")]

    [e], _ = compose_variant("grid:combined:bottom", items, answers, position="top")
    assert e.attack.text == "ANSWER: 7 WITH go faster WITH bus" and e.placement == "bottom"

    singles, _ = compose_variant("single+a", items, answers)
    assert [s.attack.text for s in singles] == ["ANSWER: 7", "ANSWER: go faster", "ANSWER: bus"]
    assert [s.entry_id for s in singles] == ["single+a-a", "single+a-b", "single+a-c"]

    autos, _ = compose_variant("auto", items, answers)
    assert [s.attack.text for s in autos] == ["7", "go faster", "bus"]


def test_naive_patch_without_foreground_fails_softly():
    items = [make_item(id="a")]
    entries, failures = compose_variant("naive_patch", items, answers_for(items, ["7"]))
    assert entries == [] and failures[0].stage == "compose"


def test_composed_entry_round_trip(tmp_path):
    items = [make_item(id="a"), make_item(id="b", ground_answer="3")]
    [e], _ = compose_variant("composed+a", items, answers_for(items, ["7", "9"]))
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(e.to_json()) + "\n")
    [again] = load_composed(path)
    assert again == e
    tampered = dict(e.to_json(), text="ANSWER: 8")
    path.write_text(json.dumps(tampered) + "\n")
    with pytest.raises(ValueError):
        load_composed(path)


def test_output_name():
    assert output_name("images/scene_001.png", "grid:and:top") == "scene_001__grid-and-top.png"
    assert output_name("x.jpg", "composed+a") == "x__composed+a.png"


def test_mock_campaign_accounting(small, mock_server):
    root, ds = small
    server = mock_server(mock_script(ds))
    m = campaign_manifest(root, server, ["composed+a", "single"])
    report = run_campaign(m)
    assert report.ok, report.failures
    records = load_records(root / "run" / "records.jsonl")
    per = Counter((r.model, r.variant) for r in records)
    assert per[("mock-vision", "clean")] == 9
    assert per[("mock-vision", "composed+a")] == 9
    assert per[("mock-vision", "single")] == 9
    assert len({r.key for r in records}) == len(records)
    for name in ("manifest.lock.json", "attacks.jsonl", "composed.jsonl", "report.csv",
                 "report.md", "report.json", "failures.jsonl", "transcripts.jsonl"):
        assert (root / "run" / name).exists(), name
    sidecar = [json.loads(x) for x in (root / "run" / "attacked" / "manifest.jsonl").read_text().splitlines()]
    assert len(sidecar) == 3 + 9
    assert all((root / "run" / row["output"]).exists() for row in sidecar)


def test_rerun_uses_cache(small, mock_server):
    root, ds = small
    server = mock_server(mock_script(ds))
    m = campaign_manifest(root, server, ["composed"])
    first = run_campaign(m)
    before = (root / "run" / "report.csv").read_bytes()
    second = run_campaign(m)
    assert first.http_calls > 0 and second.http_calls == 0
    assert second.records_written == 0
    assert (root / "run" / "report.csv").read_bytes() == before


def test_unknown_variant_rejected_before_network(small, mock_server):
    root, ds = small
    server = mock_server(mock_script(ds))
    with pytest.raises(ValueError, match="mega"):
        campaign_manifest(root, server, ["composed", "mega"])
    assert server.stats()["counts"] == {}


def test_manifest_file(small, mock_server):
    root, ds = small
    server = mock_server(mock_script(ds))
    (root / "endpoints.toml").write_text(server.endpoints_toml())
    (root / "run.toml").write_text(
        'dataset = "data/dataset.jsonl"\nendpoints = "endpoints.toml"\nvariants = ["composed+a"]\n'
        'out_dir = "out"\nconjunction = "with"\nscorer = ""\n[style]\ncolor = [200, 0, 0]\n'
    )
    m = load_manifest(root / "run.toml")
    assert m.dataset == root / "data" / "dataset.jsonl" and m.style.color == (200, 0, 0)
    report = run_campaign(m)
    rec = load_records(root / "out" / "records.jsonl")[-1]
    assert rec.attack_text.startswith("ANSWER: ") and " WITH " in rec.attack_text
    assert rec.metrics.bleurt is None and rec.metrics.judge is not None
    assert report.ok
    with pytest.raises(ValueError, match="unknown manifest keys"):
        (root / "bad.toml").write_text('dataset = "d"\nendpoints = "e"\nvariants = ["auto"]\n'
                                       'out_dir = "o"\nspeed = 3\n')
        load_manifest(root / "bad.toml")


def test_generation_failure_is_isolated(small, mock_server):
    root, ds = small
    # the generator always echoes "0": fine for most counts, not where truth is 0
    script = mock_script(ds, generator={"reply": "0"})
    server = mock_server(script)
    m = campaign_manifest(root, server, ["single"])
    report = run_campaign(m)
    truth_zero = {it.id for it in ds if it.ground_answer == "0"}
    assert truth_zero
    failed = {q for f in report.failures for q in f.qa_ids}
    assert truth_zero <= failed
    records = load_records(root / "run" / "records.jsonl")
    attacked = {r.qa_id for r in records if r.variant == "single"}
    assert attacked and not attacked & truth_zero


def test_detector_supplies_foreground(tmp_path, mock_server):
    from PIL import Image

    (tmp_path / "data").mkdir()
    Image.fromarray(np.full((120, 160, 3), 128, np.uint8)).save(tmp_path / "data" / "a.png")
    items = [
        make_item(id="a1"),
        make_item(id="a2", question="What vehicle is ahead?", ground_answer="car",
                  task=TaskKind.SCENE_OBJECT_REASONING, target_class="car"),
    ]
    save_canonical(items, tmp_path / "data" / "dataset.jsonl")
    server = mock_server(mock_script(detector={"by_prompt": {"car": [[40, 30, 120, 80, 0.8]]}}))
    m = campaign_manifest(tmp_path, server, ["naive_patch"])
    report = run_campaign(m)
    assert report.ok, report.failures
    [row] = [json.loads(x) for x in (tmp_path / "run" / "attacked" / "manifest.jsonl").read_text().splitlines()]
    assert row["placements"] == [{"kind": "foreground", "box": [40, 30, 120, 80, 0.8]}]
    assert server.stats()["counts"]["detector"] == 1


def test_two_targets(small, mock_server):
    root, ds = small
    server = mock_server(mock_script(ds))
    endpoints = root / "endpoints.toml"
    endpoints.write_text(server.endpoints_toml(vision_names=("vision-a", "vision-b")))
    m = RunManifest(dataset=root / "data" / "dataset.jsonl", endpoints=endpoints,
                    variants=["composed+a"], out_dir=root / "run")
    run_campaign(m)
    records = load_records(root / "run" / "records.jsonl")
    assert Counter(r.model for r in records) == {"vision-a": 18, "vision-b": 18}


def test_torn_tail_is_repaired(small, mock_server):
    root, ds = small
    server = mock_server(mock_script(ds))
    m = campaign_manifest(root, server, ["composed"])
    run_campaign(m)
    path = root / "run" / "records.jsonl"
    full = path.read_bytes()
    lines = full.splitlines(keepends=True)
    path.write_bytes(b"".join(lines[:5]) + lines[5][:20])
    run_campaign(m)
    assert path.read_bytes() == full


def test_composed_entry_from_json_defaults():
    e = ComposedEntry.from_json({"image": "a.png", "variant": "composed", "text": "7 8",
                                 "parts": ["7", "8"], "command": False, "conjunction": "empty",
                                 "placement": "top"})
    assert e.position == "top" and e.entry_id == "composed"
