"""Offline measurement database: legal final hashes and per-loop path hashes.

The enumerator walks the CFG depth-first, driving a real engine state along
each path, so the database and the runtime measurement can never disagree on
hashing rules. A path is cut the first time it completes a loop iteration:
the state after a back edge equals the state at loop entry apart from the
counters, so everything reachable from there has already been explored.
Recursion has no such fixed point; it is unrolled to a bound that is raised
until the database stops changing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

from .cfg import LoopKind, Tables
from .engine import MeasurementState, cfa_finish, cfa_init, record_event
from .isa import COND_BRANCHES, TERMINATORS, Opcode
from .vm import BranchEvent, EventKind
from .wire import NO_END, Auth, Challenge, RecordKind

ENUMERATED = "enumerated"
PROFILED = "profiled"


@dataclass(frozen=True)
class Bounds:
    max_paths: int = 100_000  # final hashes plus loop-path hashes
    max_steps: int = 2_000_000  # DFS expansions per pass
    max_recursion: int = 8  # deepest recursion unrolling tried


@dataclass
class PathInfo:
    description: str
    provenance: set[str] = field(default_factory=set)

    def to_json(self) -> dict:
        return {"description": self.description, "provenance": sorted(self.provenance)}


@dataclass
class LoopEntry:
    paths: dict[bytes, PathInfo] = field(default_factory=dict)
    exits: set[tuple[int, int | None]] = field(default_factory=set)  # (record kind, break node)


@dataclass
class MeasurementDB:
    program_digest: bytes
    iv: bytes | None = None
    region: tuple[int, int] = (0, NO_END)
    final: dict[bytes, PathInfo] = field(default_factory=dict)
    loops: dict[tuple[int, bytes], LoopEntry] = field(default_factory=dict)
    complete: bool = True
    notes: list[str] = field(default_factory=list)
    indirect_targets: dict[int, set[int]] = field(default_factory=dict)
    labels: dict[str, int] = field(default_factory=dict)
    collisions: list[tuple[str, str, str]] = field(default_factory=list)

    # -- building ------------------------------------------------------------

    def mark_incomplete(self, why: str) -> None:
        self.complete = False
        if why not in self.notes:
            self.notes.append(why)

    def _add(self, table: dict[bytes, PathInfo], h: bytes, desc: str, prov: str) -> None:
        info = table.get(h)
        if info is None:
            table[h] = PathInfo(desc, {prov})
            return
        if prov == ENUMERATED and ENUMERATED in info.provenance and info.description != desc:
            self.collisions.append((h.hex(), info.description, desc))
        if prov == ENUMERATED and ENUMERATED not in info.provenance:
            info.description = desc
        info.provenance.add(prov)

    def add_final(self, h: bytes, desc: str, prov: str = ENUMERATED) -> None:
        self._add(self.final, h, desc, prov)

    def loop(self, header: int, context: bytes) -> LoopEntry:
        return self.loops.setdefault((header, context), LoopEntry())

    def add_loop_path(self, header: int, context: bytes, h: bytes, desc: str, prov: str = ENUMERATED) -> None:
        self._add(self.loop(header, context).paths, h, desc, prov)

    def add_exit(self, header: int, context: bytes, kind: RecordKind, detail: int | None) -> None:
        self.loop(header, context).exits.add((int(kind), detail))

    def add_auth(self, auth: Auth, desc: str, prov: str = PROFILED) -> bool:
        """Record an observed Auth; runs with anomaly records are refused."""
        if auth.anomalies:
            self.notes.append(f"ignored anomalous run: {desc}")
            return False
        self.add_final(auth.final_hash, desc, prov)
        for rec in auth.records:
            for h, _ in rec.paths:
                self.add_loop_path(rec.header_entry, rec.context_hash, h, f"{desc} loop@{rec.header_entry}", prov)
            self.add_exit(rec.header_entry, rec.context_hash, rec.exit_kind, rec.detail)
        return True

    def merge(self, other: MeasurementDB) -> MeasurementDB:
        if other.program_digest != self.program_digest or other.iv != self.iv or other.region != self.region:
            raise ValueError("cannot merge databases for different programs, IVs or regions")
        for h, info in other.final.items():
            for prov in sorted(info.provenance):
                self.add_final(h, info.description, prov)
        for key, entry in other.loops.items():
            mine = self.loop(*key)
            for h, info in entry.paths.items():
                for prov in sorted(info.provenance):
                    self._add(mine.paths, h, info.description, prov)
            mine.exits |= entry.exits
        for src, targets in other.indirect_targets.items():
            self.indirect_targets.setdefault(src, set()).update(targets)
        self.notes += [n for n in other.notes if n not in self.notes]
        self.collisions += other.collisions
        self.labels.update(other.labels)
        return self

    # -- queries ---------------------------------------------------------------

    def loop_paths(self, header: int) -> set[bytes]:
        return {h for (hd, _), e in self.loops.items() if hd == header for h in e.paths}

    def contains(self, auth: Auth) -> bool:
        return self.first_unknown(auth) is None

    def first_unknown(self, auth: Auth) -> str | None:
        """Describe the first element of ``auth`` absent from the database."""
        if auth.final_hash not in self.final:
            return f"final hash {auth.final_hash.hex()}"
        for rec in auth.records:
            if not rec.exit_kind.is_loop:
                return f"{rec.exit_kind.name.lower()} record at {rec.header_entry} (detail {rec.detail})"
            entry = self.loops.get((rec.header_entry, rec.context_hash))
            if entry is None:
                return f"loop {rec.header_entry} in unknown context {rec.context_hash.hex()}"
            for h, _ in rec.paths:
                if h not in entry.paths:
                    return f"loop {rec.header_entry} path {h.hex()}"
            if (int(rec.exit_kind), rec.detail) not in entry.exits:
                return f"loop {rec.header_entry} exit {rec.exit_kind.name.lower()} {rec.detail}"
        return None

    # -- JSON ------------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "program_digest": self.program_digest.hex(),
            "iv": self.iv.hex() if self.iv is not None else None,
            "region": list(self.region),
            "complete": self.complete,
            "notes": list(self.notes),
            "final": {h.hex(): info.to_json() for h, info in sorted(self.final.items())},
            "loops": [
                {
                    "header": header,
                    "context": ctx.hex(),
                    "paths": {h.hex(): info.to_json() for h, info in sorted(entry.paths.items())},
                    "exits": [{"kind": RecordKind(k).name.lower(), "node": d} for k, d in sorted(entry.exits, key=str)],
                }
                for (header, ctx), entry in sorted(self.loops.items())
            ],
            "indirect_targets": {str(k): sorted(v) for k, v in sorted(self.indirect_targets.items())},
            "labels": dict(self.labels),
            "collisions": [list(c) for c in self.collisions],
        }

    @classmethod
    def from_json(cls, doc: dict) -> MeasurementDB:
        def info(d: dict) -> PathInfo:
            return PathInfo(d["description"], set(d["provenance"]))

        db = cls(
            program_digest=bytes.fromhex(doc["program_digest"]),
            iv=bytes.fromhex(doc["iv"]) if doc.get("iv") else None,
            region=tuple(doc.get("region", (0, NO_END))),
            complete=doc["complete"],
            notes=list(doc.get("notes", [])),
            final={bytes.fromhex(h): info(d) for h, d in doc["final"].items()},
            indirect_targets={int(k): set(v) for k, v in doc.get("indirect_targets", {}).items()},
            labels=dict(doc.get("labels", {})),
            collisions=[tuple(c) for c in doc.get("collisions", [])],
        )
        for item in doc["loops"]:
            entry = db.loop(item["header"], bytes.fromhex(item["context"]))
            entry.paths = {bytes.fromhex(h): info(d) for h, d in item["paths"].items()}
            entry.exits = {(int(RecordKind[x["kind"].upper()]), x["node"]) for x in item["exits"]}
        return db

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def loads(cls, text: str) -> MeasurementDB:
        return cls.from_json(json.loads(text))

    def same_content(self, other: MeasurementDB) -> bool:
        return set(self.final) == set(other.final) and {
            k: (set(e.paths), e.exits) for k, e in self.loops.items()
        } == {k: (set(e.paths), e.exits) for k, e in other.loops.items()}


# -- enumeration ---------------------------------------------------------------


class _Budget(Exception):
    pass


def _new_db(tables: Tables, iv: bytes | None, region: tuple[int, int]) -> MeasurementDB:
    return MeasurementDB(
        program_digest=tables.digest,
        iv=iv,
        region=region,
        indirect_targets={k: set(v) for k, v in tables.cfg.indirect_targets.items()},
        labels=dict(tables.program.labels),
    )


class _Walker:
    def __init__(self, tables: Tables, bounds: Bounds, iv: bytes | None, region: tuple[int, int], rec_limit: int | None):
        self.tables = tables
        self.bounds = bounds
        self.code = tables.program.instructions
        self.region = region
        self.rec_limit = rec_limit
        self.db = _new_db(tables, iv, region)
        self.steps = 0
        self.recursion_cut = False
        cfg = tables.cfg
        # call instructions that re-enter their own function
        self.self_calls = set()
        for lp in tables.loops.loops:
            if lp.kind is LoopKind.RECURSION:
                for e in lp.back_edges:
                    self.self_calls.add(cfg.nodes[e].exit)
        challenge = Challenge(tables.digest, bytes(16), region[0], region[1], iv)
        self.root = cfa_init(challenge, tables, entry=region[0])

    def _label(self, entry: int, exit_: int) -> str:
        return f"{self.tables.program.describe(entry)}..{exit_}"

    def _absorb(self, trace: list[tuple], descs: list[list[str]]) -> bool:
        """Fold one step's trace into the DB; True if the path should stop."""
        stop = False
        for item in trace:
            tag = item[0]
            if tag == "node":
                descs[-1].append(self._label(item[1], item[2]))
            elif tag == "enter":
                descs.append([])
            elif tag == "count":
                _, header, ctx, h, kind = item
                self._note_path()
                self.db.add_loop_path(header, ctx, h, " > ".join(descs[-1]))
                descs[-1] = []
                if kind is LoopKind.LOOP:
                    stop = True
            elif tag == "exit":
                rec = item[1]
                descs.pop()
                self.db.add_exit(rec.header_entry, rec.context_hash, rec.exit_kind, rec.detail)
                how = "" if rec.exit_kind is RecordKind.NORMAL else f" break@{rec.detail}"
                descs[-1].append(f"loop@{rec.header_entry}{how}")
            elif tag == "anomaly":
                stop = True  # not a legal path
        return stop

    def _note_path(self) -> None:
        size = len(self.db.final) + sum(len(e.paths) for e in self.db.loops.values())
        if size >= self.bounds.max_paths:
            self.db.mark_incomplete(f"path bound {self.bounds.max_paths} reached")
            raise _Budget

    def _finish(self, state: MeasurementState, last_src: int, descs: list[list[str]]) -> None:
        s = state.clone()
        s.trace = []
        cfa_finish(s, last_src)
        d = [list(x) for x in descs]
        self._absorb(s.trace, d)
        self._note_path()
        self.db.add_final(s.main_hash, " > ".join(d[0]))

    def _transitions(self, state: MeasurementState, exit_: int) -> list[tuple[EventKind, int | None]]:
        ins = self.code[exit_]
        op = ins.op
        if op is Opcode.B:
            return [(EventKind.DIRECT_JUMP, ins.value)]
        if op in COND_BRANCHES:
            return [(EventKind.COND_TAKEN, ins.value), (EventKind.COND_NOT_TAKEN, exit_ + 1)]
        if op is Opcode.BL:
            return [(EventKind.CALL, ins.value)]
        if op in (Opcode.BLX, Opcode.BX):
            kind = EventKind.INDIRECT_CALL if op is Opcode.BLX else EventKind.INDIRECT_JUMP
            targets = sorted(self.tables.cfg.indirect_targets.get(exit_, ()))
            if not targets:
                self.db.mark_incomplete(f"unresolved indirect branch at {exit_}")
            return [(kind, t) for t in targets]
        if op is Opcode.RET:
            return [(EventKind.RETURN, state.shadow_stack[-1][0] if state.shadow_stack else None)]
        raise AssertionError(op)

    def run(self) -> MeasurementDB:
        try:
            self._walk()
        except _Budget:
            pass
        if self.db.collisions:
            self.db.notes.append(f"{len(self.db.collisions)} hash collisions between distinct paths")
        return self.db

    def _walk(self) -> None:
        n = len(self.code)
        end = self.region[1]
        stack: list[tuple[MeasurementState, int, list[list[str]]]] = [(self.root, self.region[0], [[]])]
        while stack:
            state, pos, descs = stack.pop()
            self.steps += 1
            if self.steps > self.bounds.max_steps:
                self.db.mark_incomplete(f"step bound {self.bounds.max_steps} reached")
                return
            exit_ = self.tables.cfg.segment_exit(pos)
            op = self.code[exit_].op
            if op not in TERMINATORS:
                nxt = exit_ + 1
                if nxt >= n:
                    continue  # runs off the end: the VM faults, no legal measurement
                if nxt == end:
                    self._finish(state, exit_, descs)
                else:
                    stack.append((state, nxt, descs))
                continue
            if op is Opcode.HALT:
                self._finish(state, exit_, descs)
                continue
            for kind, dst in reversed(self._transitions(state, exit_)):
                if kind is EventKind.RETURN and dst is None:
                    if self.region[0] != 0:
                        # leaving the frame the region started in ends the region
                        self._finish(state, exit_, descs)
                    continue
                if dst is None or not 0 <= dst < n:
                    continue
                if self.rec_limit is not None and kind in (EventKind.CALL, EventKind.INDIRECT_CALL) and exit_ in self.self_calls:
                    frames = sum(1 for ret, _ in state.shadow_stack if ret - 1 in self.self_calls)
                    if frames >= self.rec_limit:
                        self.recursion_cut = True
                        continue
                if dst == end:
                    self._finish(state, exit_, descs)
                    continue
                s = state.clone()
                s.trace = []
                record_event(s, BranchEvent(kind, exit_, dst))
                d = [list(x) for x in descs]
                if not self._absorb(s.trace, d):
                    s.trace = None
                    stack.append((s, dst, d))


def enumerate_measurements(
    tables: Tables,
    bounds: Bounds | None = None,
    iv: bytes | None = None,
    region: tuple[int, int] | None = None,
) -> MeasurementDB:
    """Every legal final hash and loop-path hash of ``tables.program``.

    The result is flagged incomplete when a bound is hit or an indirect branch
    has no known targets; the verifier should then rely on profiling.
    """
    bounds = bounds or Bounds()
    region = region or (0, NO_END)
    has_recursion = any(lp.kind is LoopKind.RECURSION for lp in tables.loops.loops)
    if not has_recursion:
        return _Walker(tables, bounds, iv, region, None).run()
    previous = None
    for k in range(1, bounds.max_recursion + 1):
        walker = _Walker(tables, bounds, iv, region, k)
        db = walker.run()
        if not walker.recursion_cut:
            return db
        if previous is not None and db.same_content(previous) and db.complete:
            db.notes.append(f"recursion unrolled to depth {k}; database stable since depth {k - 1}")
            return db
        previous = db
    db.mark_incomplete(f"recursion did not stabilize within depth {bounds.max_recursion}")
    return db


def collect_indirect_targets(events: Iterable) -> dict[int, set[int]]:
    out: dict[int, set[int]] = {}
    for ev in events:
        if ev.kind in (EventKind.INDIRECT_CALL, EventKind.INDIRECT_JUMP):
            out.setdefault(ev.src, set()).add(ev.dst)
    return out
