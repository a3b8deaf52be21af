"""Deterministic interpreter for the toy ISA.

Every executed control-flow instruction is reported to an event sink as a
:class:`BranchEvent`, including conditional branches that fall through. The
sink is the measurement boundary: the VM knows nothing about attestation.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

from .isa import COND_BRANCHES, CONTROL_FLOW, Form, Opcode, Program

DEFAULT_STEP_BUDGET = 10_000_000
_MASK = 0xFFFFFFFF


class EventKind(Enum):
    DIRECT_JUMP = "DirectJump"
    COND_TAKEN = "CondTaken"
    COND_NOT_TAKEN = "CondNotTaken"
    CALL = "Call"
    INDIRECT_CALL = "IndirectCall"
    INDIRECT_JUMP = "IndirectJump"
    RETURN = "Return"


@dataclass(frozen=True)
class BranchEvent:
    kind: EventKind
    src: int
    dst: int


class Status(Enum):
    HALTED = "halted"
    STEP_BUDGET = "step-budget"
    MEMORY = "memory"
    INPUT_EMPTY = "input-empty"
    STACK_UNDERFLOW = "stack-underflow"
    BAD_PC = "bad-pc"

    @property
    def code(self) -> int:
        return list(Status).index(self)


# -- fault injection -----------------------------------------------------------
# A fault fires either at an absolute step number or on the n-th time the VM is
# about to execute the instruction at ``at_pc``.


@dataclass(frozen=True)
class DataWrite:
    """Overwrite ``data[address]`` with ``value`` before the trigger step executes."""

    address: int
    value: int
    at_step: int | None = None
    at_pc: int | None = None
    occurrence: int = 1


@dataclass(frozen=True)
class RegWrite:
    reg: int
    value: int
    at_step: int | None = None
    at_pc: int | None = None
    occurrence: int = 1


@dataclass(frozen=True)
class ReturnOverride:
    """Replace the address popped by the RET executed at the trigger."""

    target: int
    at_step: int | None = None
    at_pc: int | None = None
    occurrence: int = 1


Fault = DataWrite | RegWrite | ReturnOverride
FaultInjection = Sequence[Fault]


@dataclass
class MachineState:
    pc: int = 0
    regs: list[int] = field(default_factory=lambda: [0] * 8)
    lr: int = 0
    eq: bool = False
    lt: bool = False
    data: list[int] = field(default_factory=list)
    call_stack: list[int] = field(default_factory=list)
    input: list[int] = field(default_factory=list)
    output: list[int] = field(default_factory=list)
    halted: bool = False


@dataclass
class RunResult:
    output: list[int]
    steps: int
    status: Status
    pc: int  # address of the HALT or of the faulting instruction
    op_counts: Counter = field(default_factory=Counter)
    state: MachineState | None = None

    @property
    def ok(self) -> bool:
        return self.status is Status.HALTED

    @property
    def control_flow_count(self) -> int:
        return sum(n for op, n in self.op_counts.items() if op in CONTROL_FLOW)


def _s32(x: int) -> int:
    x &= _MASK
    return x - 0x100000000 if x & 0x80000000 else x


class _Triggers:
    def __init__(self, faults: Iterable[Fault]):
        self.by_step: dict[int, list[Fault]] = {}
        self.by_pc: dict[int, list[Fault]] = {}
        for f in faults:
            if f.at_step is not None:
                self.by_step.setdefault(f.at_step, []).append(f)
            elif f.at_pc is not None:
                self.by_pc.setdefault(f.at_pc, []).append(f)
            else:
                raise ValueError(f"fault {f} has no trigger")
        self.visits: Counter = Counter()

    def due(self, step: int, pc: int) -> list[Fault]:
        fired = list(self.by_step.get(step, ()))
        if pc in self.by_pc:
            self.visits[pc] += 1
            fired += [f for f in self.by_pc[pc] if f.occurrence == self.visits[pc]]
        return fired


def vm_run(
    p: Program,
    input: Iterable[int] = (),
    event_sink: Callable[[BranchEvent], None] | None = None,
    fault: FaultInjection | None = None,
    step_budget: int = DEFAULT_STEP_BUDGET,
    start_pc: int = 0,
) -> RunResult:
    """Run ``p`` to HALT or until it faults; faults are reported in ``status``."""
    code = p.instructions
    n = len(code)
    st = MachineState(pc=start_pc, data=[0] * p.data_size, input=list(input))
    regs = st.regs
    inp = st.input
    inp.reverse()  # pop from the end
    out = st.output
    data = st.data
    stack = st.call_stack
    emit = event_sink or (lambda ev: None)
    triggers = _Triggers(fault) if fault else None
    op_counts: Counter = Counter()
    steps = 0
    pc = start_pc
    status = Status.HALTED

    while True:
        if not 0 <= pc < n:
            status = Status.BAD_PC
            break
        if steps >= step_budget:
            status = Status.STEP_BUDGET
            break
        ins = code[pc]
        op = ins.op
        ret_override = None
        if triggers is not None:
            for f in triggers.due(steps, pc):
                if isinstance(f, DataWrite):
                    if not 0 <= f.address < len(data):
                        raise ValueError(f"fault writes outside data memory: {f}")
                    data[f.address] = _s32(f.value)
                elif isinstance(f, RegWrite):
                    regs[f.reg] = _s32(f.value)
                elif op is Opcode.RET:
                    ret_override = f.target
        steps += 1
        op_counts[op] += 1
        form = ins.form
        if form is Form.RR:
            operand = regs[ins.value]
        else:
            operand = ins.value

        if op is Opcode.MOV:
            regs[ins.reg] = operand
        elif op is Opcode.ADD or op is Opcode.SUB:
            r = _s32(regs[ins.reg] + operand if op is Opcode.ADD else regs[ins.reg] - operand)
            regs[ins.reg] = r
            st.eq = r == 0
            st.lt = r < 0
        elif op is Opcode.CMP:
            a = regs[ins.reg]
            st.eq = a == operand
            st.lt = a < operand
        elif op is Opcode.LDR or op is Opcode.STR:
            if not 0 <= operand < len(data):
                status = Status.MEMORY
                break
            if op is Opcode.LDR:
                regs[ins.reg] = data[operand]
            else:
                data[operand] = regs[ins.reg]
        elif op is Opcode.IN:
            if not inp:
                status = Status.INPUT_EMPTY
                break
            regs[ins.reg] = _s32(inp.pop())
        elif op is Opcode.OUT:
            out.append(regs[ins.reg])
        elif op is Opcode.HALT:
            st.halted = True
            break
        elif op in COND_BRANCHES:
            if op is Opcode.BEQ:
                taken = st.eq
            elif op is Opcode.BNE:
                taken = not st.eq
            elif op is Opcode.BLT:
                taken = st.lt
            else:
                taken = not st.lt
            if taken:
                emit(BranchEvent(EventKind.COND_TAKEN, pc, operand))
                pc = operand
            else:
                emit(BranchEvent(EventKind.COND_NOT_TAKEN, pc, pc + 1))
                pc += 1
            continue
        elif op is Opcode.B:
            emit(BranchEvent(EventKind.DIRECT_JUMP, pc, operand))
            pc = operand
            continue
        elif op is Opcode.BL or op is Opcode.BLX:
            target = operand if op is Opcode.BL else regs[ins.reg]
            stack.append(pc + 1)
            st.lr = pc + 1
            kind = EventKind.CALL if op is Opcode.BL else EventKind.INDIRECT_CALL
            emit(BranchEvent(kind, pc, target))
            pc = target
            continue
        elif op is Opcode.BX:
            target = regs[ins.reg]
            emit(BranchEvent(EventKind.INDIRECT_JUMP, pc, target))
            pc = target
            continue
        elif op is Opcode.RET:
            if not stack:
                status = Status.STACK_UNDERFLOW
                break
            target = stack.pop()
            if ret_override is not None:
                target = ret_override
            emit(BranchEvent(EventKind.RETURN, pc, target))
            pc = target
            continue
        pc += 1

    if status is not Status.HALTED and status is not Status.BAD_PC and status is not Status.STEP_BUDGET:
        # the faulting instruction did not complete
        steps -= 1
        op_counts[code[pc].op] -= 1
        op_counts += Counter()  # drop zero entries
    st.pc = pc
    return RunResult(output=out, steps=steps, status=status, pc=pc, op_counts=op_counts, state=st)
