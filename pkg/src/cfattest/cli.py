"""Command-line entry point: ``cfattest <command> ...``.

Exit codes: 0 success / Valid verdict, 1 non-Valid verdict or failed
scenario, 2 transport or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

from . import attacks
from .cfg import AnalysisError, analyze, tables_to_json
from .engine import MeasurementEngine
from .isa import AsmError
from .measurements import Bounds, MeasurementDB, enumerate_measurements
from .prover import run_attested
from .service import TransportError, attest, serve
from .verifier import Policy, Valid, profile_db, verdict_to_json
from .wire import NO_END, Challenge, encode_report, serialize_auth

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_ERROR = 2


class UsageError(Exception):
    pass


def _words(text: str) -> list[int]:
    return [int(w, 0) for w in text.replace(",", " ").split()]


def _region(text: str | None) -> tuple[int, int]:
    if not text:
        return (0, NO_END)
    begin, _, end = text.partition(":")
    return int(begin, 0), int(end, 0) if end else NO_END


def _key(path: str | None) -> bytes:
    path = path or os.environ.get("CFA_KEY_FILE")
    if not path:
        raise UsageError("no MAC key: pass --key-file or set CFA_KEY_FILE")
    with open(path, "rb") as fh:
        key = fh.read()
    if len(key) != 32:
        raise UsageError(f"key file {path} must hold exactly 32 bytes, found {len(key)}")
    return key


def _iv(text: str | None) -> bytes | None:
    if text is None:
        return None
    iv = bytes.fromhex(text)
    if len(iv) != 32:
        raise UsageError("--iv must be 64 hex digits")
    return iv


def _targets(path: str | None) -> dict[int, set[int]] | None:
    """Indirect targets from a database or a plain ``{"addr": [targets]}`` file."""
    if not path:
        return None
    with open(path) as fh:
        doc = json.load(fh)
    doc = doc.get("indirect_targets", doc)
    return {int(k): set(v) for k, v in doc.items()}


def _emit(doc: dict, text: str, fmt: str, out: str | None = None) -> None:
    body = json.dumps(doc, indent=2) if fmt == "json" else text
    if out:
        with open(out, "w") as fh:
            fh.write(body + "\n")
    else:
        print(body)


# -- commands ----------------------------------------------------------------


def cmd_analyze(args) -> int:
    p = attacks.load_program(args.program)
    tables = analyze(p, _targets(args.targets))
    doc = tables_to_json(tables)
    lines = [f"program {p.name}: {len(p)} instructions, digest {tables.digest.hex()}"]
    lines.append(f"nodes ({len(tables.cfg.nodes)}):")
    lines += [f"  {n.entry}..{n.exit}" for n in tables.cfg.nodes.values()]
    lines.append(f"edges ({len(tables.cfg.edges)}):")
    for e in tables.cfg.edges:
        idx = f" #{e.index}" if e.index is not None else ""
        lines.append(f"  {e.src} -> {e.dst} {e.kind.value}{idx}")
    lines.append(f"loops ({len(tables.loops)}):")
    for lp in tables.loops.loops:
        name = p.label_at(lp.header) or lp.header
        exits = ", ".join(f"{x.kind.value} {x.src}->{x.dst}" for x in lp.exits)
        lines.append(f"  {name} [{lp.kind.value}] body {sorted(lp.body)} exits: {exits}")
    _emit(doc, "\n".join(lines), args.format, args.output)
    return EXIT_OK


def _db_text(db: MeasurementDB) -> str:
    lines = [f"complete: {db.complete}"] + [f"note: {n}" for n in db.notes]
    lines.append(f"final hashes ({len(db.final)}):")
    lines += [f"  {h.hex()}  {i.description}" for h, i in sorted(db.final.items())]
    for (header, ctx), entry in sorted(db.loops.items()):
        lines.append(f"loop {header} context {ctx.hex()[:16]}: {len(entry.paths)} paths")
        lines += [f"  {h.hex()}  {i.description}" for h, i in sorted(entry.paths.items())]
    return "\n".join(lines)


def cmd_enumerate(args) -> int:
    p = attacks.load_program(args.program)
    tables = analyze(p, _targets(args.targets))
    db = enumerate_measurements(tables, Bounds(max_paths=args.max_paths), _iv(args.iv), _region(args.region))
    _emit(db.to_json(), _db_text(db), args.format, args.output)
    return EXIT_OK


def cmd_profile(args) -> int:
    p = attacks.load_program(args.program)
    inputs = [_words(s) for s in args.input or []]
    if args.inputs:
        with open(args.inputs) as fh:
            inputs += [list(x) for x in json.load(fh)]
    if not inputs:
        raise UsageError("profile needs at least one --input or an --inputs file")
    db = profile_db(p, inputs, merge=not args.no_merge, iv=_iv(args.iv), region=_region(args.region))
    _emit(db.to_json(), _db_text(db), args.format, args.output)
    return EXIT_OK


def cmd_run(args) -> int:
    p = attacks.load_program(args.program)
    tables = analyze(p, _targets(args.targets))
    key = _key(args.key_file)
    begin, end = _region(args.region)
    nonce = bytes.fromhex(args.nonce) if args.nonce else os.urandom(16)
    challenge = Challenge(tables.digest, nonce, begin, end, _iv(args.iv))
    result, report = run_attested(p, _words(args.input or ""), challenge, tables, engine=MeasurementEngine(key))
    doc = {
        "output": result.output,
        "steps": result.steps,
        "status": result.status.value,
        "auth": serialize_auth(report.auth).hex(),
        "final_hash": report.auth.final_hash.hex(),
        "records": [
            {
                "header": r.header_entry,
                "context": r.context_hash.hex(),
                "kind": r.exit_kind.name.lower(),
                "detail": r.detail,
                "paths": [{"hash": h.hex(), "count": c} for h, c in r.paths],
            }
            for r in report.auth.records
        ],
        "tag": report.tag.hex(),
        "report_frame": encode_report(report).hex(),
    }
    text = [f"output: {result.output}", f"status: {result.status.value} after {result.steps} steps",
            f"final hash: {report.auth.final_hash.hex()}"]
    for r in report.auth.records:
        text.append(f"record {r.exit_kind.name.lower()} @{r.header_entry} detail={r.detail} iterations={r.iterations}")
    text.append(f"tag: {report.tag.hex()}")
    _emit(doc, "\n".join(text), args.format, args.output)
    return EXIT_OK if result.ok else EXIT_REJECTED


def cmd_serve(args) -> int:
    p = attacks.load_program(args.program)
    tables = analyze(p, _targets(args.targets))
    key = _key(args.key_file)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    print(f"serving {p.name} ({tables.digest.hex()}) on {args.host}:{args.port}", flush=True)
    try:
        serve(p, tables, key, args.port, args.host, input=_words(args.input or ""))
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_attest(args) -> int:
    with open(args.db) as fh:
        db = MeasurementDB.from_json(json.load(fh))
    policy = Policy.load(args.policy, db.labels) if args.policy else None
    params = {}
    for item in args.param or []:
        name, _, value = item.partition("=")
        params[name] = int(value, 0)
    try:
        verdict = attest(args.host, args.port, db, policy, _key(args.key_file), params=params, timeout=args.timeout)
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    doc = verdict_to_json(verdict)
    text = f"{type(verdict).__name__}: " + ", ".join(f"{k}={v}" for k, v in doc.items() if k != "verdict")
    _emit(doc, text, args.format)
    return EXIT_OK if isinstance(verdict, Valid) else EXIT_REJECTED


def cmd_attack(args) -> int:
    result = attacks.SCENARIOS[args.scenario]()
    doc = {
        "scenario": result.name,
        "passed": result.passed,
        "cases": [
            {"case": c.label, "expected": c.expected, "matched": c.matched} | verdict_to_json(c.verdict)
            for c in result.cases
        ],
    }
    lines = [f"scenario {result.name}: {'detection as expected' if result.passed else 'UNEXPECTED verdicts'}"]
    for c in result.cases:
        mark = "ok " if c.matched else "BAD"
        lines.append(f"  [{mark}] {c.label}: {c.verdict} (expected {c.expected})")
    _emit(doc, "\n".join(lines), args.format)
    return EXIT_OK if result.passed else EXIT_REJECTED


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfattest", description="Control-flow attestation for a toy ISA.")
    sub = ap.add_subparsers(dest="command", required=True)

    def program_cmd(name: str, help: str, func) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help)
        sp.add_argument("program", help="assembly file, or a corpus name (" + ", ".join(attacks.CORPUS) + ")")
        sp.add_argument("--targets", help="JSON with profiled indirect targets (a database file works)")
        sp.set_defaults(func=func)
        return sp

    def fmt(sp: argparse.ArgumentParser, out: bool = True) -> None:
        sp.add_argument("--format", choices=("json", "text"), default="text")
        if out:
            sp.add_argument("-o", "--output", help="write to a file instead of stdout")

    def region(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--region", help="BEGIN[:END] node entries; END omitted means until HALT")
        sp.add_argument("--iv", help="64 hex digit chain start value")

    sp = program_cmd("analyze", "print CFG, loop table and branch table", cmd_analyze)
    fmt(sp)

    sp = program_cmd("enumerate", "build the measurement database by path enumeration", cmd_enumerate)
    sp.add_argument("--max-paths", type=int, default=Bounds.max_paths)
    region(sp)
    fmt(sp)

    sp = sub.add_parser("profile", help="build the measurement database from observed runs")
    sp.add_argument("program")
    sp.add_argument("--input", action="append", help="comma-separated input words; repeatable")
    sp.add_argument("--inputs", help="JSON file with a list of input lists")
    sp.add_argument("--no-merge", action="store_true", help="do not add enumerated paths")
    sp.set_defaults(func=cmd_profile)
    region(sp)
    fmt(sp)

    sp = program_cmd("run", "run once under attestation and print the report", cmd_run)
    sp.add_argument("--input", help="comma-separated input words")
    sp.add_argument("--nonce", help="32 hex digits; random by default")
    sp.add_argument("--key-file")
    region(sp)
    fmt(sp)

    sp = program_cmd("serve", "prover service: answer challenges over TCP", cmd_serve)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=7878)
    sp.add_argument("--input", help="comma-separated input words fed to every run")
    sp.add_argument("--key-file")

    sp = sub.add_parser("attest", help="challenge a prover and print the verdict")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=7878)
    sp.add_argument("--db", required=True, help="measurement database JSON")
    sp.add_argument("--policy", help="loop count policy JSON")
    sp.add_argument("--param", action="append", help="NAME=VALUE for parameterised policy rules")
    sp.add_argument("--key-file")
    sp.add_argument("--timeout", type=float, default=10.0)
    sp.set_defaults(func=cmd_attest)
    fmt(sp, out=False)

    sp = sub.add_parser("attack", help="run an attack scenario against the pump")
    sp.add_argument("--scenario", required=True, choices=sorted(attacks.SCENARIOS))
    sp.set_defaults(func=cmd_attack)
    fmt(sp, out=False)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, AsmError, AnalysisError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
