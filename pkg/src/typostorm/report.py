"""Run records, per-record scoring, aggregation and report rendering."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .clients.gateway import EndpointProfile, Gateway
from .compose import is_valid_variant
from .metrics import exact_match

METRICS = ("exact", "judge", "bleurt", "bertscore", "ssim")
CSV_HEADER = ("model", "variant", "task", "n") + METRICS
REFERENCE_MODES = ("clean_answer", "ground_truth")
ALL_TASKS = "all"

MARKDOWN_LABELS = {
    "exact": "Exact↓",
    "judge": "Lingo-Judge↓",
    "bleurt": "BLEURT↓",
    "bertscore": "BERTScore↓",
    "ssim": "SSIM↑",
}


class MissingReference(ValueError):
    pass


class UnknownVariant(ValueError):
    pass


class EmptyRecords(ValueError):
    pass


def reference_mode(value: str) -> str:
    aliases = {"clean": "clean_answer", "truth": "ground_truth", "gt": "ground_truth"}
    mode = aliases.get(value, value)
    if mode not in REFERENCE_MODES:
        raise ValueError(f"reference mode must be clean|truth, got {value!r}")
    return mode


@dataclass
class MetricBundle:
    exact: float | None = None
    judge: float | None = None
    bleurt: float | None = None
    bertscore: float | None = None
    ssim: float | None = None
    n: int = 1
    counts: dict[str, int] = field(default_factory=dict)

    def get(self, name: str) -> float | None:
        return getattr(self, name)

    def to_json(self) -> dict:
        return {m: self.get(m) for m in METRICS}


@dataclass
class RunRecord:
    qa_id: str
    variant: str
    model: str
    task: str
    image: str
    question: str
    ground_answer: str
    clean_answer: str
    attacked_answer: str
    attack_text: str
    reference_mode: str
    metrics: MetricBundle

    def __post_init__(self) -> None:
        if self.variant != "clean" and not is_valid_variant(self.variant):
            raise UnknownVariant(f"unknown variant {self.variant!r} for {self.qa_id}")
        if self.reference_mode not in REFERENCE_MODES:
            raise ValueError(f"bad reference_mode {self.reference_mode!r}")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.model, self.qa_id, self.variant)

    @property
    def condition(self) -> str:
        return "clean" if self.variant == "clean" else "attacked"

    def to_json(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "variant": self.variant,
            "model": self.model,
            "task": self.task,
            "image": self.image,
            "question": self.question,
            "ground_answer": self.ground_answer,
            "clean_answer": self.clean_answer,
            "attacked_answer": self.attacked_answer,
            "attack_text": self.attack_text,
            "reference_mode": self.reference_mode,
            "metrics": self.metrics.to_json(),
        }

    @classmethod
    def from_json(cls, row: dict) -> "RunRecord":
        metrics = MetricBundle(**{m: row.get("metrics", {}).get(m) for m in METRICS})
        return cls(
            qa_id=row["qa_id"],
            variant=row["variant"],
            model=row["model"],
            task=row["task"],
            image=row.get("image", ""),
            question=row.get("question", ""),
            ground_answer=row.get("ground_answer", ""),
            clean_answer=row["clean_answer"],
            attacked_answer=row["attacked_answer"],
            attack_text=row.get("attack_text", ""),
            reference_mode=row.get("reference_mode", "clean_answer"),
            metrics=metrics,
        )


def dump_record(rec: RunRecord) -> str:
    return json.dumps(rec.to_json(), ensure_ascii=False, separators=(",", ":")) + "\n"


def load_records(path: str | Path) -> list[RunRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(RunRecord.from_json(json.loads(line)))
        except UnknownVariant as exc:
            raise UnknownVariant(f"line {lineno}: {exc}") from None
    return out


def score_record(
    clean_answer: str | None,
    attacked_answer: str,
    mode: str = "clean_answer",
    *,
    ground_answer: str | None = None,
    question: str = "",
    gateway: Gateway | None = None,
    judge_ep: EndpointProfile | None = None,
    scorer_ep: EndpointProfile | None = None,
    ssim: float | None = None,
    context: str | None = None,
) -> MetricBundle:
    """Metrics for one answer against the reference picked by ``mode``.

    Delegated metrics are None when their endpoint is not configured.
    """
    mode = reference_mode(mode)
    reference = clean_answer if mode == "clean_answer" else ground_answer
    if reference is None or not reference.strip():
        raise MissingReference(f"no {mode} reference available" + (f" for {context}" if context else ""))
    bundle = MetricBundle(exact=float(exact_match(attacked_answer, reference)), ssim=ssim)
    if gateway is not None and judge_ep is not None:
        ok = gateway.judge(judge_ep, question, reference, attacked_answer, context=context)
        bundle.judge = 1.0 if ok else 0.0
    if gateway is not None and scorer_ep is not None:
        bundle.bleurt = gateway.score_pair(scorer_ep, attacked_answer, reference, "bleurt")
        bundle.bertscore = gateway.score_pair(scorer_ep, attacked_answer, reference, "bertscore")
    return bundle


@dataclass
class AggregateRow:
    model: str
    variant: str
    task: str
    metrics: MetricBundle

    def to_json(self) -> dict:
        out = {"model": self.model, "variant": self.variant, "task": self.task, "n": self.metrics.n}
        out.update(self.metrics.to_json())
        out["counts"] = dict(self.metrics.counts)
        return out


def _mean(values: list[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def aggregate(records: Sequence[RunRecord], by_task: bool = False) -> list[AggregateRow]:
    """Per-(model, variant[, task]) means; nulls are dropped per field."""
    if not records:
        raise EmptyRecords("cannot aggregate an empty record set")
    groups: dict[tuple[str, str, str], list[RunRecord]] = {}
    for rec in records:
        key = (rec.model, rec.variant, rec.task if by_task else ALL_TASKS)
        groups.setdefault(key, []).append(rec)
    rows = []
    for key in sorted(groups):
        recs = groups[key]
        bundle = MetricBundle(n=len(recs))
        for m in METRICS:
            vals = [rec.metrics.get(m) for rec in recs]
            vals = [v for v in vals if v is not None]
            setattr(bundle, m, _mean(vals))
            bundle.counts[m] = len(vals)
        rows.append(AggregateRow(*key, bundle))
    return rows


def report_tables(records: Sequence[RunRecord]) -> list[AggregateRow]:
    """Overall rows (task ``all``) followed by the per-task breakdown, sorted."""
    rows = aggregate(records) + aggregate(records, by_task=True)
    return sorted(rows, key=lambda r: (r.model, r.variant, r.task))


def _fmt(value: float | None, digits: int) -> str:
    return "" if value is None else f"{value:.{digits}f}"


def build_report(rows: Iterable[AggregateRow], format: str = "csv") -> str:
    rows = list(rows)
    if format == "json":
        return json.dumps({"rows": [r.to_json() for r in rows]}, indent=2, ensure_ascii=False) + "\n"
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow(
                [r.model, r.variant, r.task, r.metrics.n] + [_fmt(r.metrics.get(m), 6) for m in METRICS]
            )
        return buf.getvalue()
    if format == "markdown":
        header = ["Model", "Attack Type", "Task", "n"] + [MARKDOWN_LABELS[m] for m in METRICS]
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] * len(header)) + "|"]
        for r in rows:
            cells = [r.model, r.variant, r.task, str(r.metrics.n)]
            cells += [_fmt(r.metrics.get(m), 4) or "n/a" for m in METRICS]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {format!r}")


def rows_from_json(text: str) -> list[AggregateRow]:
    rows = []
    for d in json.loads(text)["rows"]:
        bundle = MetricBundle(**{m: d.get(m) for m in METRICS}, n=d["n"], counts=d.get("counts", {}))
        rows.append(AggregateRow(d["model"], d["variant"], d["task"], bundle))
    return rows


def rows_from_csv(text: str) -> list[AggregateRow]:
    rows = []
    for d in csv.DictReader(io.StringIO(text)):
        vals = {m: (float(d[m]) if d[m] != "" else None) for m in METRICS}
        rows.append(AggregateRow(d["model"], d["variant"], d["task"], MetricBundle(**vals, n=int(d["n"]))))
    return rows


def write_reports(rows: Sequence[AggregateRow], out_dir: str | Path, stem: str = "report") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for fmt, ext in (("csv", "csv"), ("markdown", "md"), ("json", "json")):
        path = out_dir / f"{stem}.{ext}"
        path.write_text(build_report(rows, fmt), encoding="utf-8")
        paths[fmt] = path
    return paths
