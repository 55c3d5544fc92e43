import json
import random

import pytest

from typostorm.report import (
    CSV_HEADER,
    EmptyRecords,
    MetricBundle,
    MissingReference,
    RunRecord,
    UnknownVariant,
    aggregate,
    build_report,
    dump_record,
    load_records,
    report_tables,
    rows_from_csv,
    rows_from_json,
    score_record,
    write_reports,
)


def record(qa_id="q1", variant="composed+a", model="m", task="scene_reasoning", **metrics):
    return RunRecord(qa_id, variant, model, task, "a.png", "How many?", "4", "4",
                     metrics.pop("answer", "7"), "ANSWER: 7", "clean_answer", MetricBundle(**metrics))


def random_records(rng: random.Random, n: int) -> list[RunRecord]:
    out = []
    for i in range(n):
        out.append(record(
            qa_id=f"q{i}",
            model=rng.choice(["m1", "m2"]),
            variant=rng.choice(["composed", "composed+a", "clean"]),
            task=rng.choice(["scene_reasoning", "action_reasoning"]),
            exact=float(rng.random() < 0.4),
            judge=rng.choice([None, 0.0, 1.0]),
            bleurt=rng.uniform(-1, 1),
            bertscore=rng.random(),
            ssim=rng.uniform(0.8, 1.0),
        ))
    return out


def brute_means(records, by_task):
    groups = {}
    for r in records:
        groups.setdefault((r.model, r.variant, r.task if by_task else "all"), []).append(r)
    out = {}
    for key, recs in groups.items():
        means = {"n": len(recs)}
        for m in ("exact", "judge", "bleurt", "bertscore", "ssim"):
            vals = [getattr(r.metrics, m) for r in recs if getattr(r.metrics, m) is not None]
            means[m] = sum(vals) / len(vals) if vals else None
        out[key] = means
    return out


def test_two_records_mean():
    rows = aggregate([record("a", exact=1.0), record("b", exact=0.0)])
    assert len(rows) == 1 and rows[0].metrics.exact == 0.5 and rows[0].metrics.n == 2


def test_nulls_dropped_not_zeroed():
    rows = aggregate([record("a", exact=1.0, bleurt=None), record("b", exact=0.0, bleurt=0.2)])
    assert rows[0].metrics.bleurt == pytest.approx(0.2)
    assert rows[0].metrics.counts["bleurt"] == 1
    rows = aggregate([record("a", exact=1.0)])
    assert rows[0].metrics.bertscore is None


@pytest.mark.parametrize("by_task", [False, True])
def test_aggregate_permutation_invariant_and_matches_brute_force(by_task):
    rng = random.Random(5)
    records = random_records(rng, 300)
    base = {(r.model, r.variant, r.task): r.metrics for r in aggregate(records, by_task)}
    oracle = brute_means(records, by_task)
    assert set(base) == set(oracle)
    for key, bundle in base.items():
        assert bundle.n == oracle[key]["n"]
        for m in ("exact", "judge", "bleurt", "bertscore", "ssim"):
            if oracle[key][m] is None:
                assert bundle.get(m) is None
            else:
                assert abs(bundle.get(m) - oracle[key][m]) <= 1e-12
    for _ in range(5):
        shuffled = records[:]
        rng.shuffle(shuffled)
        again = aggregate(shuffled, by_task)
        assert [(r.model, r.variant, r.task, r.metrics.to_json()) for r in again] == \
               [(k[0], k[1], k[2], b.to_json()) for k, b in base.items()]


def test_empty_records():
    with pytest.raises(EmptyRecords):
        aggregate([])


def test_csv_header_and_single_row():
    text = build_report(aggregate([record(exact=1.0, ssim=0.95)]), "csv")
    lines = text.splitlines()
    assert lines[0] == "model,variant,task,n,exact,judge,bleurt,bertscore,ssim"
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1] == "m,composed+a,all,1,1.000000,,,,0.950000"
    assert len(lines) == 2


def test_markdown_columns():
    md = build_report(aggregate([record(exact=0.25)]), "markdown")
    header = md.splitlines()[0]
    for label in ("Exact↓", "Lingo-Judge↓", "BLEURT↓", "BERTScore↓"):
        assert label in header
    assert header.index("Exact↓") < header.index("Lingo-Judge↓") < header.index("BLEURT↓") \
        < header.index("BERTScore↓")
    assert "0.2500" in md and "n/a" in md


def test_json_csv_round_trip():
    rows = report_tables(random_records(random.Random(2), 80))
    from_json = rows_from_json(build_report(rows, "json"))
    from_csv = rows_from_csv(build_report(from_json, "csv"))
    assert len(from_csv) == len(rows)
    for a, b in zip(rows, from_csv):
        assert (a.model, a.variant, a.task, a.metrics.n) == (b.model, b.variant, b.task, b.metrics.n)
        for m in ("exact", "judge", "bleurt", "bertscore", "ssim"):
            x, y = a.metrics.get(m), b.metrics.get(m)
            assert (x is None) == (y is None)
            if x is not None:
                assert round(x, 6) == pytest.approx(y, abs=1e-12)


def test_report_bytes_deterministic(tmp_path):
    records = random_records(random.Random(9), 50)
    a = write_reports(report_tables(records), tmp_path / "a")
    b = write_reports(report_tables(list(reversed(records))), tmp_path / "b")
    for fmt in ("csv", "markdown", "json"):
        assert a[fmt].read_bytes() == b[fmt].read_bytes()


def test_unknown_format():
    with pytest.raises(ValueError):
        build_report([], "xlsx")


def test_record_vocabulary_checked(tmp_path):
    with pytest.raises(UnknownVariant):
        record(variant="mega")
    good = record(exact=1.0)
    bad = dict(good.to_json(), variant="mega")
    path = tmp_path / "r.jsonl"
    path.write_text(dump_record(good) + json.dumps(bad) + "\n")
    with pytest.raises(UnknownVariant, match="line 2"):
        load_records(path)


def test_record_round_trip(tmp_path):
    rec = record(exact=0.0, judge=1.0, ssim=0.9)
    path = tmp_path / "r.jsonl"
    path.write_text(dump_record(rec))
    [again] = load_records(path)
    assert dump_record(again) == dump_record(rec)
    assert again.key == ("m", "q1", "composed+a")


def test_score_record_modes():
    assert score_record("4", "4", "clean").exact == 1.0
    assert score_record("4", "7", "clean").exact == 0.0
    assert score_record("3", "4", "truth", ground_answer="four").exact == 1.0
    bundle = score_record("4", "7", "clean_answer", ssim=0.9)
    assert bundle.bleurt is None and bundle.bertscore is None and bundle.judge is None
    assert bundle.ssim == 0.9
    with pytest.raises(MissingReference):
        score_record("4", "7", "truth")
    with pytest.raises(ValueError):
        score_record("4", "7", "oracle")


def test_seeded_mock_run_exact_matches_realized_draws(tmp_path, mock_server):
    from typostorm.campaign import run_campaign
    from typostorm.fixtures import build_dataset, mock_script

    from .conftest import campaign_manifest

    build_dataset(tmp_path / "data", n_images=50, per_image=4, seed=9, width=160, height=120)
    script = mock_script(seed=7, fool_probability=0.3)
    # a clean answer no generated attack can equal, so fooled means inexact
    script["vision"]["clean"] = "no idea"
    server = mock_server(script)
    m = campaign_manifest(tmp_path, server, ["single+a"], judge="", scorer="", detector="",
                          fraction=0.25)
    assert run_campaign(m).ok
    decisions = server.stats()["decisions"]
    attacked = [r for r in load_records(tmp_path / "run" / "records.jsonl") if r.variant == "single+a"]
    assert len(attacked) == len(decisions) == 200
    unfooled = sum(not d["fooled"] for d in decisions)
    [row] = aggregate(attacked)
    assert row.metrics.exact == unfooled / 200
    assert 0 < unfooled < 200
