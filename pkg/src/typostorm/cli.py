"""``typostorm`` command line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .attackgen import RetryPolicy, default_directives, dump_attacks, load_attacks, load_directives
from .campaign import (
    compose_stage,
    dump_composed,
    generate_stage,
    load_composed,
    load_manifest,
    render_stage,
    run_campaign,
)
from .clients import (
    DetectorEndpoint,
    EndpointError,
    Gateway,
    MockScript,
    ResponseCache,
    TextEndpoint,
    load_endpoints,
)
from .clients.mock import MockServer
from .compose import BASE_VARIANTS, Conjunction, check_variants
from .corpus import FORMATS, DatasetError, load_dataset
from .report import (
    METRICS,
    MetricBundle,
    build_report,
    load_records,
    reference_mode,
    report_tables,
    rows_from_json,
    score_record,
    write_reports,
)
from .typeset import TypesetError, TypoStyle

log = logging.getLogger("typostorm")


def _dataset_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--dataset", type=Path, required=required, help="dataset file")
    p.add_argument("--format", choices=FORMATS, default="canonical_jsonl")
    p.add_argument("--image-root", type=Path, default=None)
    p.add_argument("--default-task", default=None, help="task for rows without one (lingoqa)")


def _load_ds(args: argparse.Namespace):
    return load_dataset(args.dataset, args.format, args.image_root, default_task=args.default_task)


def _gateway(args: argparse.Namespace, cache_dir: Path) -> Gateway:
    return Gateway(None if args.no_cache else ResponseCache(cache_dir))


def _endpoint(eps: dict, name: str | None, role: str):
    if name:
        if name not in eps or eps[name].role != role:
            raise SystemExit(f"no {role} endpoint named {name!r}")
        return eps[name]
    return next((ep for ep in eps.values() if ep.role == role), None)


def cmd_generate(args: argparse.Namespace) -> int:
    dataset = _load_ds(args)
    if not args.endpoints:
        raise SystemExit("generate needs --endpoints")
    ep = _endpoint(load_endpoints(args.endpoints), args.generator, "generator")
    if ep is None:
        raise SystemExit("no generator endpoint configured")
    directives = load_directives(args.directives) if args.directives else default_directives()
    with _gateway(args, args.cache_dir or args.out.parent / "cache") as gw:
        answers, failures = generate_stage(
            dataset, TextEndpoint(gw, ep), directives, RetryPolicy(args.max_attempts), jobs=args.jobs
        )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(dump_attacks(answers[it.id] for it in dataset if it.id in answers), encoding="utf-8")
    for f in failures:
        log.error("%s: %s", ",".join(f.qa_ids), f.error)
    print(f"{len(answers)} attacks written to {args.out}; {len(failures)} failed")
    return 1 if failures else 0


def cmd_compose(args: argparse.Namespace) -> int:
    dataset = _load_ds(args)
    answers = load_attacks(args.attacks)
    if args.variant:
        variants = check_variants(args.variant)
        conj = args.conj or "and"
    else:
        conj = args.conj or "empty"
        variants = ["composed+a" if args.command else "composed"]
        if not args.command and Conjunction.parse(conj) is not Conjunction.EMPTY:
            raise SystemExit("a conjunction without --command matches no known variant; add --command")
    entries, failures = compose_stage(
        dataset, answers, variants, position=args.position, conjunction=conj,
        has_detector=args.with_detector,
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(dump_composed(entries), encoding="utf-8")
    for f in failures:
        log.error("%s [%s]: %s", ",".join(f.qa_ids), f.variant, f.error)
    print(f"{len(entries)} composed attacks written to {args.out}")
    return 1 if failures else 0


def cmd_render(args: argparse.Namespace) -> int:
    dataset = _load_ds(args)
    entries = load_composed(args.composed)
    style = TypoStyle.from_dict(json.loads(args.style.read_text())) if args.style else TypoStyle()
    detector = None
    gw = None
    if args.endpoints:
        ep = _endpoint(load_endpoints(args.endpoints), args.detector, "detector")
        if ep is not None:
            gw = _gateway(args, args.out_dir.parent / "cache")
            detector = DetectorEndpoint(gw, ep)
    try:
        rendered, failures = render_stage(
            entries, dataset, args.out_dir, style, fraction=args.fraction,
            placement=args.placement, detector=detector, patch_k=args.patch_k,
            rel_to=args.out_dir.parent,
        )
    finally:
        if gw is not None:
            gw.close()
    for f in failures:
        log.error("%s [%s]: %s", ",".join(f.qa_ids), f.variant, f.error)
    print(f"{len(rendered)} images rendered into {args.out_dir}")
    return 1 if failures else 0


def cmd_attack(args: argparse.Namespace) -> int:
    overrides = {
        "endpoints": str(args.endpoints.resolve()) if args.endpoints else None,
        "out_dir": str(args.out.resolve()) if args.out else None,
        "seed": args.seed,
        "jobs": args.jobs if args.jobs_given else None,
        "cache": False if args.no_cache else None,
    }
    manifest = load_manifest(args.manifest, **overrides)
    report = run_campaign(manifest)
    for f in report.failures:
        log.error("[%s] %s %s/%s: %s", f.stage, ",".join(f.qa_ids), f.model or "-", f.variant or "-", f.error)
    print(
        f"{report.records_written} new records ({report.records_total} total), "
        f"{report.http_calls} HTTP calls, {len(report.failures)} failures; output in {report.out_dir}"
    )
    if "markdown" in report.reports:
        print(report.reports["markdown"].read_text(encoding="utf-8"))
    return 0 if report.ok else 1


def cmd_eval(args: argparse.Namespace) -> int:
    records = load_records(args.records)
    mode = reference_mode(args.reference)
    judge_ep = scorer_ep = None
    gw = None
    if args.endpoints:
        eps = load_endpoints(args.endpoints)
        judge_ep = _endpoint(eps, args.judge, "judge")
        scorer_ep = _endpoint(eps, args.scorer, "scorer")
        gw = _gateway(args, args.out / "cache")
    try:
        for rec in records:
            fresh = score_record(
                rec.clean_answer, rec.attacked_answer, mode, ground_answer=rec.ground_answer,
                question=rec.question, gateway=gw, judge_ep=judge_ep, scorer_ep=scorer_ep,
                ssim=rec.metrics.ssim, context=rec.qa_id,
            )
            if gw is None and mode == rec.reference_mode:
                # delegated scores stay valid when the reference is unchanged
                for m in ("judge", "bleurt", "bertscore"):
                    setattr(fresh, m, rec.metrics.get(m))
            rec.metrics = MetricBundle(**{m: fresh.get(m) for m in METRICS})
            rec.reference_mode = mode
    finally:
        if gw is not None:
            gw.close()
    paths = write_reports(report_tables(records), args.out)
    print(paths["markdown"].read_text(encoding="utf-8"))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    if args.tables:
        rows = rows_from_json(args.tables.read_text(encoding="utf-8"))
    elif args.records:
        rows = report_tables(load_records(args.records))
    else:
        raise SystemExit("report needs --records or --tables")
    text = build_report(rows, args.format)
    if args.output:
        args.output.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_serve_mock(args: argparse.Namespace) -> int:
    script = MockScript.load(args.script) if args.script else MockScript()
    if args.seed is not None:
        script.seed = args.seed
    server = MockServer(script, port=args.port, host=args.host)
    if args.write_endpoints:
        args.write_endpoints.write_text(server.endpoints_toml(), encoding="utf-8")
    print(f"mock endpoints serving on {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--endpoints", type=Path, default=None, help="endpoints.toml")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--no-cache", action="store_true", help="bypass the response cache")
    common.add_argument("--jobs", type=int, default=None, help="parallel requests per stage")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="typostorm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"typostorm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="generate adversarial answers")
    _dataset_args(p)
    p.add_argument("--generator", default=None, help="generator endpoint name")
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--directives", type=Path, default=None, help="directives override JSON")
    p.add_argument("--cache-dir", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True, help="attacks.jsonl")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("compose", parents=[common], help="compose attack payloads")
    _dataset_args(p)
    p.add_argument("--attacks", type=Path, required=True)
    p.add_argument("--command", action="store_true", help='prefix "ANSWER: "')
    p.add_argument("--conj", choices=[c.value for c in Conjunction], default=None)
    p.add_argument("--variant", action="append", default=None,
                   help=f"variant id ({', '.join(BASE_VARIANTS)}, grid:<kw>:<pos>); repeatable")
    p.add_argument("--position", choices=("top", "bottom"), default="bottom")
    p.add_argument("--with-detector", action="store_true",
                   help="treat target_class-only object items as patchable")
    p.add_argument("--out", type=Path, required=True, help="composed.jsonl")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("render", parents=[common], help="render composed attacks into images")
    _dataset_args(p)
    p.add_argument("--composed", type=Path, required=True)
    p.add_argument("--placement", choices=("top", "bottom", "foreground", "both"), default=None,
                   help="override each entry's placement")
    p.add_argument("--fraction", type=float, default=0.10)
    p.add_argument("--patch-k", type=int, default=1)
    p.add_argument("--detector", default=None, help="detector endpoint name")
    p.add_argument("--style", type=Path, default=None, help="TypoStyle JSON")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("attack", parents=[common], help="run a full campaign from a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="run directory (overrides manifest)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", parents=[common], help="score records and write reports")
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--reference", choices=("clean", "truth"), default="clean")
    p.add_argument("--judge", default=None)
    p.add_argument("--scorer", default=None)
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="print a report table")
    p.add_argument("--records", type=Path, default=None)
    p.add_argument("--tables", type=Path, default=None, help="report.json")
    p.add_argument("--format", choices=("json", "csv", "markdown"), default="markdown")
    p.add_argument("--output", type=Path, default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve-mock", parents=[common], help="serve the offline mock endpoints")
    p.add_argument("--script", type=Path, default=None)
    p.add_argument("--port", type=int, default=8099)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--write-endpoints", type=Path, default=None,
                   help="write an endpoints.toml pointing at this server")
    p.set_defaults(func=cmd_serve_mock)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    args.jobs_given = args.jobs is not None
    if args.jobs is None:
        args.jobs = 4
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if not args.verbose:
        # one line per request drowns the progress output
        logging.getLogger("httpx").setLevel(logging.WARNING)
    try:
        return args.func(args)
    except (ValueError, OSError, DatasetError, EndpointError, TypesetError) as exc:
        # usage, data and endpoint problems: one line, no traceback
        log.error("%s", exc)
        if args.verbose:
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
