"""The measurement engine: a cumulative hash chain over executed nodes.

Each node ``(entry, exit)`` extends the active chain with
``BLAKE2s-256(h_prev | LE32(entry) | LE32(exit))``. Loops run on their own
sub-chain that restarts at zero on every back edge; each completed iteration
bumps a counter keyed by the sub-chain value, so the main chain stays the same
no matter how many times a loop runs. The chain value at loop entry (the
"context") keys the loop's record and is where the parent chain resumes on
exit.

Calls push the return site on a shadow stack together with the loop depth at
the call; loop exit detection is suspended while execution is inside a callee.

The engine only sees branch events. Node boundaries that execution crosses by
falling through (no branch) are synthesized from the block leaders before each
event, so every node is hashed exactly once per visit.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

from .cfg import Loop, LoopKind, Tables
from .vm import BranchEvent, EventKind
from .wire import Auth, Challenge, LoopRecord, RecordKind, Report, mac

ZERO = bytes(32)
_CALLS = (EventKind.CALL, EventKind.INDIRECT_CALL)
_DIRECT = (EventKind.DIRECT_JUMP, EventKind.COND_TAKEN, EventKind.CALL)


class EngineError(RuntimeError):
    pass


def extend(h_prev: bytes, node_entry: int, branch_src: int) -> bytes:
    data = h_prev + struct.pack("<II", node_entry & 0xFFFFFFFF, branch_src & 0xFFFFFFFF)
    return hashlib.blake2s(data, digest_size=32).digest()


@dataclass
class LoopContext:
    header_entry: int
    kind: LoopKind
    context_hash: bytes
    call_depth: int  # shadow-stack depth at entry; exit detection is suspended above it
    addresses: frozenset[int]
    sub_hash: bytes = ZERO
    path_counts: dict[bytes, int] = field(default_factory=dict)

    def clone(self) -> LoopContext:
        return LoopContext(
            self.header_entry, self.kind, self.context_hash, self.call_depth,
            self.addresses, self.sub_hash, dict(self.path_counts),
        )


@dataclass
class MeasurementState:
    tables: Tables
    main_hash: bytes
    challenge_iv: bytes
    current_node_entry: int = 0
    loop_stack: list[LoopContext] = field(default_factory=list)
    shadow_stack: list[tuple[int, int]] = field(default_factory=list)  # (return address, loop depth)
    records: list[LoopRecord] = field(default_factory=list)
    finished: bool = False
    # Optional observer used by the path enumerator; None in normal runs.
    trace: list[tuple] | None = None

    def clone(self) -> MeasurementState:
        return MeasurementState(
            tables=self.tables,
            main_hash=self.main_hash,
            challenge_iv=self.challenge_iv,
            current_node_entry=self.current_node_entry,
            loop_stack=[c.clone() for c in self.loop_stack],
            shadow_stack=list(self.shadow_stack),
            records=list(self.records),
            finished=self.finished,
            trace=None,
        )

    @property
    def active_hash(self) -> bytes:
        return self.loop_stack[-1].sub_hash if self.loop_stack else self.main_hash

    def _set_active(self, h: bytes) -> None:
        if self.loop_stack:
            self.loop_stack[-1].sub_hash = h
        else:
            self.main_hash = h

    def auth(self) -> Auth:
        return Auth(self.main_hash, tuple(self.records), self.tables.digest)


# Per-Tables lookup caches; Tables are treated as immutable once built.
_LOOKUP: dict[int, tuple[Tables, dict[int, Loop], dict[int, Loop]]] = {}


def _loops(tables: Tables) -> tuple[dict[int, Loop], dict[int, Loop]]:
    hit = _LOOKUP.get(id(tables))
    if hit is None or hit[0] is not tables:
        hit = (tables, tables.loops.by_header(LoopKind.LOOP), tables.loops.by_header(LoopKind.RECURSION))
        _LOOKUP[id(tables)] = hit
    return hit[1], hit[2]


def cfa_init(challenge: Challenge, tables: Tables, entry: int | None = None) -> MeasurementState:
    """Fresh measurement state; the chain starts at the challenge IV (or zero)."""
    if challenge.program_digest != tables.digest:
        raise EngineError("challenge names a different program than the loaded tables")
    iv = challenge.start_hash
    start = challenge.begin if entry is None else entry
    return MeasurementState(tables=tables, main_hash=iv, challenge_iv=iv, current_node_entry=start)


def _anomaly(state: MeasurementState, kind: RecordKind, at: int, detail: int, h: bytes) -> None:
    rec = LoopRecord(at & 0xFFFFFFFF, h, (), kind, detail & 0xFFFFFFFF)
    state.records.append(rec)
    if state.trace is not None:
        state.trace.append(("anomaly", rec))


def _close(state: MeasurementState, ctx: LoopContext, cur: int, src: int) -> bytes:
    normal = ctx.kind is LoopKind.LOOP and cur == ctx.header_entry
    rec = LoopRecord(
        ctx.header_entry,
        ctx.context_hash,
        tuple(ctx.path_counts.items()),
        RecordKind.NORMAL if normal else RecordKind.BREAK,
        None if normal else cur,
    )
    state.records.append(rec)
    if state.trace is not None:
        state.trace.append(("exit", rec))
    return extend(ctx.context_hash, cur, src)


def _count(state: MeasurementState, ctx: LoopContext, h: bytes) -> None:
    ctx.path_counts[h] = ctx.path_counts.get(h, 0) + 1
    ctx.sub_hash = ZERO
    if state.trace is not None:
        state.trace.append(("count", ctx.header_entry, ctx.context_hash, h, ctx.kind))


def _step(state: MeasurementState, src: int, dst: int, kind: EventKind | None) -> None:
    loops, recursions = _loops(state.tables)
    cur = state.current_node_entry
    h = extend(state.active_hash, cur, src)
    if state.trace is not None:
        state.trace.append(("node", cur, src))

    shadow = state.shadow_stack
    stack = state.loop_stack
    if kind in _CALLS:
        shadow.append((src + 1, len(stack)))
    elif kind is EventKind.RETURN:
        if shadow:
            shadow.pop()  # a wrong destination is caught by the hash, not here
        else:
            _anomaly(state, RecordKind.UNDERFLOW, src, dst, h)
    depth = len(shadow)

    # leave every loop this edge exits; a context opened deeper in the call
    # stack than we now are has been left by returning past it
    while stack:
        top = stack[-1]
        if top.call_depth > depth:
            pass
        elif top.call_depth == depth and top.kind is LoopKind.LOOP and dst not in top.addresses:
            pass
        else:
            break
        stack.pop()
        h = _close(state, top, cur, src)

    top = stack[-1] if stack else None
    if top is not None and top.kind is LoopKind.LOOP and top.call_depth == depth and dst == top.header_entry:
        _count(state, top, h)
    elif top is not None and top.kind is LoopKind.RECURSION and (
        (kind in _CALLS and dst == top.header_entry)
        or (kind is EventKind.RETURN and src in top.addresses)
    ):
        _count(state, top, h)
    else:
        state._set_active(h)
        lp = loops.get(dst)
        if lp is None and kind in _CALLS:
            lp = recursions.get(dst)
        if lp is not None:
            stack.append(LoopContext(dst, lp.kind, h, depth, lp.addresses))
            if state.trace is not None:
                state.trace.append(("enter", dst, h, lp.kind))
    state.current_node_entry = dst


def _fall_through(state: MeasurementState, upto: int) -> None:
    for leader in state.tables.cfg.leaders_between(state.current_node_entry, upto):
        _step(state, leader - 1, leader, None)


def record_event(state: MeasurementState, ev: BranchEvent) -> MeasurementState:
    if state.finished:
        raise EngineError("measurement already finished")
    expected = state.tables.branches.get(ev.src)
    if ev.kind in _DIRECT and expected != ev.dst or (
        ev.kind is EventKind.COND_NOT_TAKEN and ev.dst != ev.src + 1
    ):
        _anomaly(state, RecordKind.BRANCH_MISMATCH, ev.src, ev.dst, state.active_hash)
    _fall_through(state, ev.src)
    _step(state, ev.src, ev.dst, ev.kind)
    return state


def cfa_finish(state: MeasurementState, last_src: int) -> MeasurementState:
    """Hash the final node (ending at ``last_src``) and close open loops."""
    if state.finished:
        raise EngineError("measurement already finished")
    _fall_through(state, last_src)
    cur = state.current_node_entry
    h = extend(state.active_hash, cur, last_src)
    if state.trace is not None:
        state.trace.append(("node", cur, last_src))
    while state.loop_stack:
        h = _close(state, state.loop_stack.pop(), cur, last_src)
    state.main_hash = h
    state.finished = True
    return state


def cfa_fault(state: MeasurementState, pc: int, code: int) -> MeasurementState:
    """Close the measurement at a VM fault and flag it."""
    cfa_finish(state, pc)
    _anomaly(state, RecordKind.FAULT, pc, code, state.main_hash)
    return state


def empty_region(challenge: Challenge, tables: Tables, fault: tuple[int, int] | None = None) -> MeasurementState:
    """A finished state for a region that was never entered; ``fault`` is an
    optional ``(pc, status code)`` if the run also faulted."""
    state = cfa_init(challenge, tables)
    _anomaly(state, RecordKind.EMPTY_REGION, challenge.begin, challenge.end, state.main_hash)
    if fault is not None:
        _anomaly(state, RecordKind.FAULT, fault[0], fault[1], state.main_hash)
    state.finished = True
    return state


class MeasurementEngine:
    """Holds the attestation key; the only place reports are tagged."""

    def __init__(self, key: bytes):
        if len(key) != 32:
            raise ValueError("attestation key must be 32 bytes")
        self._key = bytes(key)

    def cfa_init(self, challenge: Challenge, tables: Tables, entry: int | None = None) -> MeasurementState:
        return cfa_init(challenge, tables, entry)

    record_event = staticmethod(record_event)
    cfa_finish = staticmethod(cfa_finish)
    cfa_fault = staticmethod(cfa_fault)

    def cfa_quote(self, state: MeasurementState | None, challenge: Challenge) -> Report:
        if state is None:
            raise EngineError("quote requested before cfa_init")
        if not state.finished:
            raise EngineError("quote requested before the measurement finished")
        if state.tables.digest != challenge.program_digest:
            raise EngineError("challenge names a different program than the measured one")
        auth = state.auth()
        return Report(auth, mac(self._key, auth, challenge.nonce))
