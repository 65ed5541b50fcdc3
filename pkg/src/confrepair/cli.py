"""Command-line entry point: ``confrepair repair|evaluate|oracle|report``.

Exit codes: 0 success, 1 usage, 2 corpus or KB error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from .backends import BackendUnavailable, LiveBackend, ScriptedBackend
from .evaluation import (
    CorpusError,
    bundled_transcripts_path,
    emit_report,
    evaluate,
    judge,
    load_corpus,
    report_from_sessions,
)
from .agents import PromptTemplates
from .kb import KbInconsistent, KbSchemaError, default_kb, load_kb, render
from .orchestrator import RepairConfig, persist_session, repair_bug
from .xmlmodel import MalformedXml, parse_document, serialize_canonical

EXIT_OK, EXIT_USAGE, EXIT_CORPUS, EXIT_BACKEND = 0, 1, 2, 3

log = logging.getLogger("confrepair")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


_DURATION = re.compile(r"^(\d+(?:\.\d+)?)([smh]?)$")


def parse_duration(text: str) -> float:
    """``90s``, ``120m``, ``2h`` or plain seconds."""
    m = _DURATION.match(text.strip())
    if m is None:
        raise argparse.ArgumentTypeError(f"bad duration {text!r}; use e.g. 30s, 120m or 2h")
    return float(m.group(1)) * {"": 1, "s": 1, "m": 60, "h": 3600}[m.group(2)]


def _level(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"API level must be an integer, got {text!r}") from None


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kb", help="knowledge base JSON file (default: bundled)")
    p.add_argument("--backend", default="scripted",
                   help="live, or scripted[:PATH] with a transcript file or directory "
                        "(default: bundled golden transcripts)")
    p.add_argument("--config", help="JSON file with the live endpoint and model")
    p.add_argument("--feedback", choices=("coarse", "fine"), default="coarse")
    p.add_argument("--n", type=int, default=10, help="interaction loop budget in rounds")
    p.add_argument("--time-budget", type=parse_duration, default=120 * 60.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--prompts", help="directory of prompt template overrides")
    p.add_argument("--sessions", help="directory for session logs")
    p.add_argument("--corpus", help="corpus manifest file or directory (default: bundled)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="confrepair", description="Repair Android XML compatibility bugs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("repair", help="repair one bug")
    p.add_argument("--bug", required=True, help="corpus record id, or a JSON record file")
    _add_run_flags(p)

    p = sub.add_parser("evaluate", help="repair a corpus k times per bug and report")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--method", default="confrepair")
    p.add_argument("--format", choices=("table", "machine"), default="table")
    p.add_argument("--out", help="write the report here instead of stdout")
    _add_run_flags(p)

    p = sub.add_parser("oracle", help="print the rendered fields of a layout")
    p.add_argument("--fixture", required=True)
    p.add_argument("--level", required=True, type=_level)
    p.add_argument("--kb")

    p = sub.add_parser("report", help="rebuild a report from session logs")
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--format", choices=("table", "machine"), default="table")
    return parser


def _kb(args):
    return load_kb(args.kb) if args.kb else default_kb()


def _backend(args):
    spec = args.backend
    if spec == "live":
        if not args.config:
            raise UsageError("--backend live needs --config with endpoint and model")
        try:
            conf = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(conf, dict) or "endpoint" not in conf or "model" not in conf:
            raise UsageError("config must be a JSON object with endpoint and model")
        if any("key" in k.lower() for k in conf):
            raise UsageError("credentials are not accepted from config files; "
                             "set COMPAT_REPAIR_API_KEY instead")
        return LiveBackend(conf["endpoint"], conf["model"], float(conf.get("timeout", 60.0)))
    if spec == "scripted":
        return ScriptedBackend.from_path(bundled_transcripts_path())
    if spec.startswith("scripted:"):
        try:
            return ScriptedBackend.from_path(spec.split(":", 1)[1])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    raise UsageError(f"unknown backend {spec!r}; use live or scripted:PATH")


def _config(args, runs_k: int = 1) -> RepairConfig:
    try:
        return RepairConfig(loop_budget_n=args.n, time_budget_s=args.time_budget, runs_k=runs_k,
                            temperature=args.temperature, feedback_mode=args.feedback,
                            rng_seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _templates(args):
    return PromptTemplates.load(args.prompts) if args.prompts else None


def _find_record(args, kb):
    target = Path(args.bug)
    if target.suffix == ".json" and target.is_file():
        records = load_corpus(target, kb)
        if len(records) != 1:
            raise UsageError(f"{target} holds {len(records)} records; expected one")
        return records[0]
    records = load_corpus(args.corpus, kb)
    for r in records:
        if r.id == args.bug:
            return r
    raise UsageError(f"no corpus record with id {args.bug!r}")


def cmd_repair(args, out) -> int:
    kb = _kb(args)
    record = _find_record(args, kb)
    backend = _backend(args)
    outcome, session = repair_bug(record.bug, kb, backend, _config(args), seed=args.seed,
                                  templates=_templates(args))
    if args.sessions:
        persist_session(session, args.sessions)
    verdict = judge(outcome, record.bug, kb)
    summary = {"bug": record.id, "kind": outcome.kind, "rounds_used": outcome.rounds_used,
               "backend_calls": outcome.backend_calls, "judgment": verdict.label,
               "note": outcome.note}
    out.write(json.dumps(summary, sort_keys=True) + "\n")
    out.write(serialize_canonical(outcome.final_document).decode("utf-8"))
    if outcome.note.startswith("backend unavailable"):
        return EXIT_BACKEND
    return EXIT_OK


def cmd_evaluate(args, out) -> int:
    kb = _kb(args)
    records = load_corpus(args.corpus, kb)
    backend = _backend(args)
    report = evaluate(records, kb, backend, _config(args, args.k), method=args.method,
                      sessions_dir=args.sessions, workers=args.workers, templates=_templates(args))
    data = emit_report(report, args.format)
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        out.write(data.decode("utf-8"))
    return EXIT_OK


def cmd_oracle(args, out) -> int:
    kb = _kb(args)
    try:
        doc = parse_document(Path(args.fixture).read_bytes())
    except OSError as exc:
        raise CorpusError(args.fixture, f"cannot read fixture: {exc.strerror}") from None
    except MalformedXml as exc:
        raise CorpusError(args.fixture, str(exc)) from None
    try:
        state = render(doc, args.level, kb)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out.write(json.dumps(state.to_json(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_report(args, out) -> int:
    if not Path(args.source).is_dir():
        raise UsageError(f"{args.source} is not a directory")
    out.write(emit_report(report_from_sessions(args.source), args.format).decode("utf-8"))
    return EXIT_OK


COMMANDS = {"repair": cmd_repair, "evaluate": cmd_evaluate, "oracle": cmd_oracle, "report": cmd_report}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"confrepair: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, KbSchemaError, KbInconsistent) as exc:
        print(f"confrepair: {exc}", file=sys.stderr)
        return EXIT_CORPUS
    except BackendUnavailable as exc:
        print(f"confrepair: backend error: {exc.detail}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
