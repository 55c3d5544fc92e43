"""Campaign orchestration: generate -> compose -> render -> query -> score -> report.

Run directory layout::

    out_dir/
      manifest.lock.json   resolved manifest
      attacks.jsonl        one adversarial answer per item
      composed.jsonl       one attack payload per (image or item, variant)
      attacked/            rendered PNGs + manifest.jsonl sidecar
      cache/               content-addressed endpoint responses
      records.jsonl        one RunRecord per (model, qa_id, variant)
      transcripts.jsonl    raw answers with latencies (informational)
      failures.jsonl       per-item failures of the last run
      report.{csv,md,json}
"""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .attackgen import (
    AdversarialAnswer,
    DirectiveSet,
    GenerationExhausted,
    InvalidAttack,
    RetryPolicy,
    default_directives,
    dump_attacks,
    generate_false_answer,
    load_directives,
)
from .clients import (
    DetectorEndpoint,
    EndpointError,
    EndpointProfile,
    Gateway,
    ResponseCache,
    TextEndpoint,
    load_endpoints,
)
from .compose import (
    AttackString,
    Conjunction,
    check_variants,
    compose_attack,
    parse_grid,
)
from .corpus import Dataset, QAItem, TaskKind, group_by_image, load_dataset, read_rgb
from .report import (
    MissingReference,
    RunRecord,
    dump_record,
    load_records,
    reference_mode,
    report_tables,
    score_record,
    write_reports,
)
from .typeset import (
    DEFAULT_FRACTION,
    Placement,
    TypesetError,
    TypoStyle,
    plan_background,
    plan_foreground,
    render_attack,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

ItemError = (GenerationExhausted, InvalidAttack, EndpointError, TypesetError, MissingReference)


# --- manifest -----------------------------------------------------------------

_MANIFEST_KEYS = {
    "dataset", "format", "image_root", "default_task", "endpoints", "variants", "targets",
    "generator", "judge", "scorer", "detector", "position", "fraction", "patch_k",
    "conjunction", "reference", "max_attempts", "directives", "manual_attacks", "seed",
    "out_dir", "jobs", "cache", "style",
}
_PATH_KEYS = ("dataset", "image_root", "endpoints", "directives", "manual_attacks", "out_dir")


@dataclass
class RunManifest:
    dataset: Path
    endpoints: Path
    variants: list[str]
    out_dir: Path
    format: str = "canonical_jsonl"
    image_root: Path | None = None
    default_task: str | None = None
    targets: list[str] | None = None
    generator: str | None = None
    # None picks the first endpoint of the role; "" disables the role
    judge: str | None = None
    scorer: str | None = None
    detector: str | None = None
    position: str = "bottom"
    fraction: float = DEFAULT_FRACTION
    patch_k: int = 1
    conjunction: str = "and"
    reference: str = "clean_answer"
    max_attempts: int = 3
    directives: Path | None = None
    manual_attacks: Path | None = None
    seed: int = 0
    jobs: int = 4
    cache: bool = True
    style: TypoStyle = field(default_factory=TypoStyle)

    def __post_init__(self) -> None:
        self.variants = check_variants(list(self.variants))
        self.reference = reference_mode(self.reference)
        Conjunction.parse(self.conjunction)
        if self.position not in ("top", "bottom"):
            raise ValueError(f"position must be top or bottom, got {self.position!r}")
        if not 0.0 < self.fraction <= 0.25:
            raise ValueError(f"fraction {self.fraction} outside (0, 0.25]")
        if self.patch_k < 1 or self.jobs < 1 or self.max_attempts < 1:
            raise ValueError("patch_k, jobs and max_attempts must be >= 1")

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> "RunManifest":
        unknown = set(data) - _MANIFEST_KEYS
        if unknown:
            raise ValueError(f"unknown manifest keys {sorted(unknown)}")
        kwargs = dict(data)
        for key in _PATH_KEYS:
            if kwargs.get(key) is not None:
                p = Path(kwargs[key])
                kwargs[key] = p if p.is_absolute() or base is None else base / p
        if "style" in kwargs:
            kwargs["style"] = TypoStyle.from_dict(kwargs["style"])
        for key in ("dataset", "endpoints", "variants", "out_dir"):
            if key not in kwargs:
                raise ValueError(f"manifest is missing {key!r}")
        return cls(**kwargs)

    def to_json(self) -> dict:
        out = {}
        for key in sorted(_MANIFEST_KEYS):
            value = getattr(self, key)
            if isinstance(value, Path):
                value = str(value)
            elif isinstance(value, TypoStyle):
                value = value.to_dict()
            out[key] = value
        return out


def load_manifest(path: str | Path, **overrides) -> RunManifest:
    path = Path(path)
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunManifest.from_dict(data, base=path.parent)


# --- endpoints ----------------------------------------------------------------


@dataclass
class Roles:
    targets: list[EndpointProfile]
    generator: EndpointProfile | None
    judge: EndpointProfile | None
    scorer: EndpointProfile | None
    detector: EndpointProfile | None


def _pick(eps: dict[str, EndpointProfile], role: str, name: str | None) -> EndpointProfile | None:
    if name == "":
        return None
    if name is not None:
        if name not in eps:
            raise ValueError(f"endpoint {name!r} is not defined")
        if eps[name].role != role:
            raise ValueError(f"endpoint {name!r} has role {eps[name].role}, expected {role}")
        return eps[name]
    return next((ep for ep in eps.values() if ep.role == role), None)


def resolve_roles(eps: dict[str, EndpointProfile], m: RunManifest) -> Roles:
    if m.targets:
        targets = []
        for name in m.targets:
            ep = _pick(eps, "vision", name)
            assert ep is not None
            targets.append(ep)
    else:
        targets = [ep for ep in eps.values() if ep.role == "vision"]
    if not targets:
        raise ValueError("no vision endpoint to attack")
    return Roles(
        targets=targets,
        generator=_pick(eps, "generator", m.generator),
        judge=_pick(eps, "judge", m.judge),
        scorer=_pick(eps, "scorer", m.scorer),
        detector=_pick(eps, "detector", m.detector),
    )


# --- generation stage ---------------------------------------------------------


@dataclass
class Failure:
    stage: str
    qa_ids: list[str]
    variant: str | None
    model: str | None
    error: str

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "qa_ids": self.qa_ids,
            "variant": self.variant,
            "model": self.model,
            "error": self.error,
        }


def load_manual_attacks(path: Path, dataset: Dataset) -> dict[str, AdversarialAnswer]:
    """Hand-written attacks ({qa_id, text} per line) that bypass the generator."""
    out = {}
    ids = {it.id: it for it in dataset}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        item = ids.get(row["qa_id"])
        if item is None:
            raise ValueError(f"manual attack for unknown item {row['qa_id']!r}")
        out[item.id] = AdversarialAnswer.create(item, row["text"], generator="manual")
    return out


def generate_stage(
    dataset: Dataset,
    generator: Callable[[str, str], str] | None,
    directives: DirectiveSet,
    policy: RetryPolicy,
    manual: dict[str, AdversarialAnswer] | None = None,
    jobs: int = 1,
) -> tuple[dict[str, AdversarialAnswer], list[Failure]]:
    manual = manual or {}
    todo = [it for it in dataset if it.id not in manual]
    if todo and generator is None:
        raise ValueError("no generator endpoint configured and no manual attack for some items")

    def one(item: QAItem) -> AdversarialAnswer | Failure:
        try:
            return generate_false_answer(generator, directives, item, policy)
        except ItemError as exc:
            return Failure("generate", [item.id], None, None, str(exc))

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = dict(zip((it.id for it in todo), pool.map(one, todo)))
    answers: dict[str, AdversarialAnswer] = {}
    failures: list[Failure] = []
    for item in dataset:
        got = manual.get(item.id) or results[item.id]
        if isinstance(got, Failure):
            failures.append(got)
        else:
            answers[item.id] = got
    return answers, failures


# --- composition stage --------------------------------------------------------

_PER_ITEM = ("auto", "single", "single+a")


@dataclass
class ComposedEntry:
    image: str
    variant: str
    entry_id: str
    qa_ids: list[str]
    attack: AttackString | None
    # banner side (top/bottom); None for foreground-only entries
    position: str | None
    patches: list[tuple[str, str]] = field(default_factory=list)

    @property
    def placement(self) -> str:
        if self.patches:
            return "both" if self.position else "foreground"
        return self.position or "bottom"

    @property
    def payload(self) -> str:
        if self.attack is not None:
            return self.attack.text
        return " ".join(text for _, text in self.patches)

    def to_json(self) -> dict:
        out = {"image": self.image, "variant": self.variant, "entry_id": self.entry_id, "qa_ids": self.qa_ids}
        if self.attack is not None:
            out.update(self.attack.to_json())
        else:
            out.update({"text": None, "parts": [], "command": False, "conjunction": None})
        out["placement"] = self.placement
        out["position"] = self.position
        out["patches"] = [{"qa_id": q, "text": t} for q, t in self.patches]
        return out

    @classmethod
    def from_json(cls, d: dict) -> "ComposedEntry":
        attack = None
        if d.get("text") is not None:
            attack = compose_attack(d["parts"], d["command"], d["conjunction"])
            if attack.text != d["text"]:
                raise ValueError(f"composed text {d['text']!r} does not re-derive from its parts")
        return cls(
            image=d["image"],
            variant=d["variant"],
            entry_id=d.get("entry_id", d["variant"]),
            qa_ids=list(d.get("qa_ids", [])),
            attack=attack,
            position=d.get("position", d.get("placement") if d.get("placement") in ("top", "bottom") else None),
            patches=[(p["qa_id"], p["text"]) for p in d.get("patches", [])],
        )


def _has_foreground(item: QAItem, has_detector: bool) -> bool:
    return item.task is TaskKind.SCENE_OBJECT_REASONING and bool(
        item.boxes or (item.target_class and has_detector)
    )


def compose_variant(
    variant: str,
    items: Sequence[QAItem],
    answers: dict[str, AdversarialAnswer],
    *,
    position: str = "bottom",
    conjunction: Conjunction | str = Conjunction.AND,
    has_detector: bool = False,
) -> tuple[list[ComposedEntry], list[Failure]]:
    """Attack payloads for one image's items under one variant."""
    image = items[0].image_ref
    entries: list[ComposedEntry] = []
    failures: list[Failure] = []

    if variant in _PER_ITEM:
        command = variant == "single+a"
        for item in items:
            ans = answers.get(item.id)
            if ans is None:
                failures.append(Failure("compose", [item.id], variant, None, "no adversarial answer"))
                continue
            attack = compose_attack([ans.text], command, Conjunction.EMPTY)
            entries.append(ComposedEntry(image, variant, f"{variant}-{item.id}", [item.id], attack, position))
        return entries, failures

    qa_ids = [it.id for it in items]
    parts = [answers[it.id].text for it in items if it.id in answers]
    if not parts:
        failures.append(Failure("compose", qa_ids, variant, None, "no adversarial answers for image"))
        return entries, failures

    if variant == "naive_patch":
        patches = [(it.id, answers[it.id].text) for it in items
                   if it.id in answers and _has_foreground(it, has_detector)]
        if not patches:
            failures.append(Failure("compose", qa_ids, variant, None, "no foreground target in image"))
            return entries, failures
        entries.append(ComposedEntry(image, variant, variant, qa_ids, None, None, patches))
        return entries, failures

    if variant.startswith("grid:"):
        conj, pos = parse_grid(variant)
        attack = compose_attack(parts, True, conj)
        entries.append(ComposedEntry(image, variant, variant, qa_ids, attack, pos))
        return entries, failures

    # composed / composed+a: banner plus patches on foreground targets
    command = variant == "composed+a"
    conj = Conjunction.parse(conjunction) if command else Conjunction.EMPTY
    attack = compose_attack(parts, command, conj)
    patches = [
        (it.id, compose_attack([answers[it.id].text], command, Conjunction.EMPTY).text)
        for it in items
        if it.id in answers and _has_foreground(it, has_detector)
    ]
    entries.append(ComposedEntry(image, variant, variant, qa_ids, attack, position, patches))
    return entries, failures


def compose_stage(
    dataset: Dataset,
    answers: dict[str, AdversarialAnswer],
    variants: Sequence[str],
    *,
    position: str = "bottom",
    conjunction: Conjunction | str = Conjunction.AND,
    has_detector: bool = False,
) -> tuple[list[ComposedEntry], list[Failure]]:
    entries: list[ComposedEntry] = []
    failures: list[Failure] = []
    for items in group_by_image(dataset).values():
        for variant in variants:
            e, f = compose_variant(variant, items, answers, position=position,
                                   conjunction=conjunction, has_detector=has_detector)
            entries += e
            failures += f
    return entries, failures


def dump_composed(entries: Sequence[ComposedEntry]) -> str:
    return "".join(
        json.dumps(e.to_json(), ensure_ascii=False, separators=(",", ":")) + "\n" for e in entries
    )


def load_composed(path: str | Path) -> list[ComposedEntry]:
    return [
        ComposedEntry.from_json(json.loads(line))
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


# --- render stage -------------------------------------------------------------


_UNSAFE = re.compile(r"[^A-Za-z0-9._+-]+")


def output_name(image_ref: str, entry_id: str) -> str:
    return f"{Path(image_ref).stem}__{_UNSAFE.sub('-', entry_id)}.png"


@dataclass
class RenderedEntry:
    entry: ComposedEntry
    source: str
    output: str
    placements: list[Placement]
    ssim: float

    def to_json(self) -> dict:
        return {
            "source": self.source,
            "output": self.output,
            "variant": self.entry.variant,
            "entry_id": self.entry.entry_id,
            "qa_ids": self.entry.qa_ids,
            "text": self.entry.payload,
            "placements": [p.to_json() for p in self.placements],
            "ssim": self.ssim,
        }


def render_entry(
    entry: ComposedEntry,
    dataset: Dataset,
    style: TypoStyle,
    *,
    fraction: float = DEFAULT_FRACTION,
    placement: str | None = None,
    detector: Callable | None = None,
    patch_k: int = 1,
    image: np.ndarray | None = None,
):
    """Render one composed entry; returns (pixels, placements, ssim)."""
    if image is None:
        image = dataset.load_image(entry.image)
    height, width = image.shape[:2]
    mode = placement or entry.placement
    texts: list[str] = []
    placements: list[Placement] = []
    if mode in ("foreground", "both"):
        items = {it.id: it for it in dataset if it.image_ref == entry.image}
        patches = entry.patches
        if not patches and entry.attack is not None:
            # forced foreground on a banner entry: patch every object target
            patches = [(q, entry.attack.text) for q in entry.qa_ids
                       if items[q].task is TaskKind.SCENE_OBJECT_REASONING]
        for qa_id, text in patches:
            for p in plan_foreground(items[qa_id], image, detector, patch_k):
                placements.append(p)
                texts.append(text)
        if not placements:
            raise TypesetError(f"no foreground placement for {entry.entry_id} on {entry.image}")
    if mode in ("top", "bottom", "both"):
        if entry.attack is None:
            raise TypesetError(f"{entry.entry_id} has no banner text")
        pos = mode if mode in ("top", "bottom") else (entry.position or "bottom")
        placements.insert(0, plan_background(width, height, pos, fraction))
        texts.insert(0, entry.attack.text)
    if mode not in ("top", "bottom", "both", "foreground"):
        raise ValueError(f"unknown placement {mode!r}")
    result = render_attack(image, texts, placements, style, source_id=entry.image)
    return result.pixels, placements, result.ssim_vs_original


def save_png(pixels: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.png")
    Image.fromarray(pixels, "RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


def render_stage(
    entries: Sequence[ComposedEntry],
    dataset: Dataset,
    out_dir: Path,
    style: TypoStyle,
    *,
    fraction: float = DEFAULT_FRACTION,
    placement: str | None = None,
    detector: Callable | None = None,
    patch_k: int = 1,
    rel_to: Path | None = None,
) -> tuple[list[RenderedEntry], list[Failure]]:
    """Render every entry into ``out_dir`` and write its ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rel_base = rel_to or out_dir
    rendered: list[RenderedEntry] = []
    failures: list[Failure] = []
    cache: dict[str, np.ndarray] = {}
    for entry in entries:
        if entry.image not in cache:
            cache.clear()
            cache[entry.image] = dataset.load_image(entry.image)
        try:
            pixels, placements, score = render_entry(
                entry, dataset, style, fraction=fraction, placement=placement,
                detector=detector, patch_k=patch_k, image=cache[entry.image],
            )
        except (TypesetError, EndpointError) as exc:
            failures.append(Failure("render", entry.qa_ids, entry.variant, None, str(exc)))
            continue
        path = out_dir / output_name(entry.image, entry.entry_id)
        save_png(pixels, path)
        rendered.append(RenderedEntry(entry, entry.image, os.path.relpath(path, rel_base),
                                      placements, score))
    (out_dir / "manifest.jsonl").write_text(
        "".join(json.dumps(r.to_json(), ensure_ascii=False, separators=(",", ":")) + "\n"
                for r in rendered),
        encoding="utf-8",
    )
    return rendered, failures


# --- query + score stage ------------------------------------------------------


@dataclass
class RunReport:
    out_dir: Path
    records_total: int
    records_written: int
    failures: list[Failure]
    reports: dict[str, Path]
    http_calls: int

    @property
    def ok(self) -> bool:
        return not self.failures


class _Appender:
    """Serialized writer for records.jsonl that resumes past a torn tail."""

    def __init__(self, path: Path):
        self.path = path
        self.keys: set[tuple[str, str, str]] = set()
        if path.exists():
            raw = path.read_bytes()
            cut = raw.rfind(b"\n") + 1
            if cut != len(raw):
                with open(path, "r+b") as fh:
                    fh.truncate(cut)
            self.keys = {r.key for r in load_records(path)}
        self.fh = open(path, "a", encoding="utf-8")

    def write(self, rec: RunRecord) -> bool:
        if rec.key in self.keys:
            return False
        self.fh.write(dump_record(rec))
        self.fh.flush()
        self.keys.add(rec.key)
        return True

    def close(self) -> None:
        self.fh.close()


def run_campaign(
    manifest: RunManifest,
    *,
    gateway: Gateway | None = None,
    on_record: Callable[[RunRecord], None] | None = None,
) -> RunReport:
    """Run (or resume) a full campaign described by ``manifest``."""
    m = manifest
    # manifest and endpoint errors surface before any network traffic
    eps = load_endpoints(m.endpoints)
    roles = resolve_roles(eps, m)
    dataset = load_dataset(m.dataset, m.format, m.image_root, default_task=m.default_task)
    directives = load_directives(m.directives) if m.directives else default_directives()

    out = Path(m.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.lock.json").write_text(
        json.dumps(m.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    own_gateway = gateway is None
    if gateway is None:
        gateway = Gateway(ResponseCache(out / "cache") if m.cache else None)
    calls_before = gateway.http_calls
    failures: list[Failure] = []
    appender = None
    try:
        manual = load_manual_attacks(m.manual_attacks, dataset) if m.manual_attacks else None
        generator = TextEndpoint(gateway, roles.generator) if roles.generator else None
        answers, f = generate_stage(dataset, generator, directives, RetryPolicy(m.max_attempts),
                                    manual, m.jobs)
        failures += f
        (out / "attacks.jsonl").write_text(
            dump_attacks(answers[it.id] for it in dataset if it.id in answers), encoding="utf-8"
        )

        detector = DetectorEndpoint(gateway, roles.detector) if roles.detector else None
        entries, f = compose_stage(dataset, answers, m.variants, position=m.position,
                                   conjunction=m.conjunction, has_detector=detector is not None)
        failures += f
        (out / "composed.jsonl").write_text(dump_composed(entries), encoding="utf-8")

        rendered, f = render_stage(entries, dataset, out / "attacked", m.style, fraction=m.fraction,
                                   detector=detector, patch_k=m.patch_k, rel_to=out)
        failures += f

        appender = _Appender(out / "records.jsonl")
        written = 0
        transcripts = open(out / "transcripts.jsonl", "a", encoding="utf-8")
        try:
            for target in roles.targets:
                written += _query_model(target, dataset, rendered, gateway, roles, m, out,
                                        appender, transcripts, failures, on_record)
        finally:
            transcripts.close()
    finally:
        if appender is not None:
            appender.close()
        (out / "failures.jsonl").write_text(
            "".join(json.dumps(x.to_json(), separators=(",", ":")) + "\n" for x in failures),
            encoding="utf-8",
        )
        http_calls = gateway.http_calls - calls_before
        if own_gateway:
            gateway.close()

    records = load_records(out / "records.jsonl")
    reports = write_reports(report_tables(records), out) if records else {}
    return RunReport(out, len(records), written, failures, reports, http_calls)


def _query_model(
    target: EndpointProfile,
    dataset: Dataset,
    rendered: Sequence[RenderedEntry],
    gateway: Gateway,
    roles: Roles,
    m: RunManifest,
    out: Path,
    appender: _Appender,
    transcripts,
    failures: list[Failure],
    on_record: Callable[[RunRecord], None] | None,
) -> int:
    by_image: dict[str, list[RenderedEntry]] = {}
    for r in rendered:
        by_image.setdefault(r.entry.image, []).append(r)
    model = target.name
    written = 0

    def ask(image: np.ndarray, item: QAItem, condition: str, payload: str | None):
        t = gateway.ask_vision(target, image, item.question, qa_id=item.id,
                               condition=condition, payload=payload)
        transcripts.write(json.dumps(t.to_json(), ensure_ascii=False) + "\n")
        return t.answer_text

    def score(item: QAItem, clean: str, attacked: str, ssim: float | None):
        return score_record(
            clean, attacked, m.reference, ground_answer=item.ground_answer,
            question=item.question, gateway=gateway, judge_ep=roles.judge,
            scorer_ep=roles.scorer, ssim=ssim, context=item.id,
        )

    def emit(rec: RunRecord) -> None:
        nonlocal written
        if appender.write(rec):
            written += 1
            if on_record is not None:
                on_record(rec)

    with ThreadPoolExecutor(max_workers=m.jobs) as pool:
        for image_ref, items in group_by_image(dataset).items():
            todo_entries = [
                r for r in by_image.get(image_ref, [])
                if any((model, q, r.entry.variant) not in appender.keys for q in r.entry.qa_ids)
            ]
            clean_needed = any((model, it.id, "clean") not in appender.keys for it in items)
            if not clean_needed and not todo_entries:
                continue
            source = dataset.load_image(image_ref)

            def clean_job(item: QAItem):
                try:
                    answer = ask(source, item, "clean", None)
                    return answer, score(item, answer, answer, 1.0)
                except ItemError as exc:
                    return exc

            clean_results = dict(zip((it.id for it in items), pool.map(clean_job, items)))
            clean_answers: dict[str, str] = {}
            for item in items:
                res = clean_results[item.id]
                if isinstance(res, Exception):
                    failures.append(Failure("query", [item.id], "clean", model, str(res)))
                    continue
                answer, bundle = res
                clean_answers[item.id] = answer
                emit(_record(item, "clean", model, answer, answer, "", m.reference, bundle))

            for r in todo_entries:
                attacked = read_rgb(out / r.output)
                ids = [q for q in r.entry.qa_ids if q in clean_answers]
                lookup = {it.id: it for it in items}

                def attacked_job(qa_id: str, r=r, attacked=attacked):
                    item = lookup[qa_id]
                    try:
                        answer = ask(attacked, item, f"attacked({r.entry.entry_id})", r.entry.payload)
                        return answer, score(item, clean_answers[qa_id], answer, r.ssim)
                    except ItemError as exc:
                        return exc

                for qa_id, res in zip(ids, pool.map(attacked_job, ids)):
                    if isinstance(res, Exception):
                        failures.append(Failure("query", [qa_id], r.entry.variant, model, str(res)))
                        continue
                    answer, bundle = res
                    emit(_record(lookup[qa_id], r.entry.variant, model, clean_answers[qa_id],
                                 answer, r.entry.payload, m.reference, bundle))
    return written


def _record(item: QAItem, variant: str, model: str, clean: str, attacked: str,
            attack_text: str, mode: str, bundle) -> RunRecord:
    return RunRecord(
        qa_id=item.id,
        variant=variant,
        model=model,
        task=item.task.value,
        image=item.image_ref,
        question=item.question,
        ground_answer=item.ground_answer,
        clean_answer=clean,
        attacked_answer=attacked,
        attack_text=attack_text,
        reference_mode=mode,
        metrics=bundle,
    )
