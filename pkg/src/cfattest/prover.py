"""Run a program under attestation and produce a tagged report."""

from __future__ import annotations

from typing import Iterable

from .cfg import Tables
from .engine import MeasurementEngine, MeasurementState, cfa_fault, cfa_finish, cfa_init, empty_region, record_event
from .isa import Program, program_digest
from .vm import DEFAULT_STEP_BUDGET, BranchEvent, EventKind, FaultInjection, RunResult, vm_run
from .wire import NO_END, Challenge, Report


class _RegionTracer:
    """Event sink that measures only between the first arrival at ``begin``
    and the first arrival at ``end``. Arrivals by fall-through are detected
    from the straight-line span between consecutive events. A region that
    begins inside a function also ends when that activation returns."""

    def __init__(self, challenge: Challenge, tables: Tables, begin: int, end: int):
        self.challenge = challenge
        self.tables = tables
        self.begin = begin
        self.end = end
        self.state: MeasurementState | None = None
        self.pos = 0  # where straight-line execution resumed after the last event
        if begin == 0:
            self.state = cfa_init(challenge, tables, entry=0)

    def _crosses(self, target: int, upto: int) -> bool:
        return self.pos < target <= upto

    def __call__(self, ev: BranchEvent) -> None:
        state = self.state
        if state is not None and state.finished:
            return
        if state is None:
            if not self._crosses(self.begin, ev.src):
                if ev.dst == self.begin:
                    self.state = cfa_init(self.challenge, self.tables, entry=self.begin)
                self.pos = ev.dst
                return
            state = self.state = cfa_init(self.challenge, self.tables, entry=self.begin)
        if self.end != NO_END:
            if self._crosses(self.end, ev.src) and self.end > state.current_node_entry:
                cfa_finish(state, self.end - 1)
                return
            if ev.dst == self.end:
                cfa_finish(state, ev.src)
                return
        if ev.kind is EventKind.RETURN and not state.shadow_stack and self.begin != 0:
            cfa_finish(state, ev.src)
            return
        record_event(state, ev)
        self.pos = ev.dst

    def close(self, result: RunResult) -> MeasurementState:
        state = self.state
        if state is None and result.ok and self._crosses(self.begin, result.pc):
            state = self.state = cfa_init(self.challenge, self.tables, entry=self.begin)
        if state is None:
            fault = None if result.ok else (result.pc, result.status.code)
            return empty_region(self.challenge, self.tables, fault)
        if state.finished:
            return state
        if self.end != NO_END and self._crosses(self.end, result.pc) and self.end > state.current_node_entry:
            return cfa_finish(state, self.end - 1)
        if result.ok:
            return cfa_finish(state, result.pc)
        return cfa_fault(state, result.pc, result.status.code)


def attested_region(
    p: Program,
    input: Iterable[int],
    challenge: Challenge,
    tables: Tables,
    begin: int,
    end: int,
    *,
    engine: MeasurementEngine,
    fault: FaultInjection | None = None,
    step_budget: int = DEFAULT_STEP_BUDGET,
) -> tuple[RunResult, Report]:
    if program_digest(p) != tables.digest:
        raise ValueError("tables were derived from a different program")
    tracer = _RegionTracer(challenge, tables, begin, end)
    result = vm_run(p, input, event_sink=tracer, fault=fault, step_budget=step_budget)
    state = tracer.close(result)
    return result, engine.cfa_quote(state, challenge)


def run_attested(
    p: Program,
    input: Iterable[int],
    challenge: Challenge,
    tables: Tables,
    *,
    engine: MeasurementEngine,
    fault: FaultInjection | None = None,
    step_budget: int = DEFAULT_STEP_BUDGET,
) -> tuple[RunResult, Report]:
    """Run ``p`` under the region named by the challenge (whole program by default)."""
    return attested_region(
        p, input, challenge, tables, challenge.begin, challenge.end,
        engine=engine, fault=fault, step_budget=step_budget,
    )

