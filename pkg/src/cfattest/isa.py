"""Toy instruction set: instructions, programs, assembly text and the binary image.

Addresses are instruction indices and address 0 is the entry point. The
binary image is what gets hashed for static attestation, so its layout is
fixed (see docs/isa.md):

    "CFAP" | 0x01 | u32 count | count * 8-byte record | u32 data_size

Each record is ``opcode u8 | form u8 | operand u32 | spare u16``. The low
nibble of the form byte names the operand pattern; the high nibble carries
the first register operand.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from enum import IntEnum

MAGIC = b"CFAP"
VERSION = 1
NUM_REGS = 8
INT_MIN = -(2**31)
INT_MAX = 2**31 - 1


class Opcode(IntEnum):
    MOV = 0
    ADD = 1
    SUB = 2
    CMP = 3
    LDR = 4
    STR = 5
    IN = 6
    OUT = 7
    B = 8
    BEQ = 9
    BNE = 10
    BLT = 11
    BGE = 12
    BL = 13
    BLX = 14
    BX = 15
    RET = 16
    HALT = 17


class Form(IntEnum):
    NONE = 0
    R = 1  # one register
    RR = 2  # register, register
    RI = 3  # register, immediate
    A = 4  # address


COND_BRANCHES = frozenset({Opcode.BEQ, Opcode.BNE, Opcode.BLT, Opcode.BGE})
DIRECT_BRANCHES = COND_BRANCHES | {Opcode.B, Opcode.BL}
CONTROL_FLOW = DIRECT_BRANCHES | {Opcode.BLX, Opcode.BX, Opcode.RET}
# instructions that end a basic block
TERMINATORS = CONTROL_FLOW | {Opcode.HALT}

_ALLOWED_FORMS = {
    Opcode.MOV: {Form.RR, Form.RI},
    Opcode.ADD: {Form.RR, Form.RI},
    Opcode.SUB: {Form.RR, Form.RI},
    Opcode.CMP: {Form.RR, Form.RI},
    Opcode.LDR: {Form.RR, Form.RI},
    Opcode.STR: {Form.RR, Form.RI},
    Opcode.IN: {Form.R},
    Opcode.OUT: {Form.R},
    Opcode.BLX: {Form.R},
    Opcode.BX: {Form.R},
    Opcode.RET: {Form.NONE},
    Opcode.HALT: {Form.NONE},
    **{op: {Form.A} for op in DIRECT_BRANCHES},
}


class ProgramError(ValueError):
    """A program violates an ISA invariant."""


class AsmError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Instruction:
    op: Opcode
    form: Form = Form.NONE
    reg: int = 0
    value: int = 0  # second register, signed immediate or address depending on form

    @property
    def target(self) -> int | None:
        return self.value if self.form == Form.A else None

    def __str__(self) -> str:
        return format_instruction(self)


@dataclass
class Program:
    instructions: list[Instruction]
    name: str = "program"
    data_size: int = 0
    # labels are assembler metadata; they are not part of the binary image
    labels: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instructions)

    def label_at(self, addr: int) -> str | None:
        for name, a in self.labels.items():
            if a == addr:
                return name
        return None

    def describe(self, addr: int) -> str:
        name = self.label_at(addr)
        return f"{addr}({name})" if name else str(addr)


def validate_program(p: Program) -> None:
    n = len(p.instructions)
    if n == 0:
        raise ProgramError("empty program")
    if p.data_size < 0:
        raise ProgramError("negative data size")
    for i, ins in enumerate(p.instructions):
        if ins.form not in _ALLOWED_FORMS[ins.op]:
            raise ProgramError(f"{i}: {ins.op.name} cannot take form {ins.form.name}")
        if ins.form in (Form.R, Form.RR, Form.RI) and not 0 <= ins.reg < NUM_REGS:
            raise ProgramError(f"{i}: bad register r{ins.reg}")
        if ins.form == Form.RR and not 0 <= ins.value < NUM_REGS:
            raise ProgramError(f"{i}: bad register r{ins.value}")
        if ins.form == Form.RI and not INT_MIN <= ins.value <= INT_MAX:
            raise ProgramError(f"{i}: immediate {ins.value} out of 32-bit range")
        if ins.form == Form.A and not 0 <= ins.value < n:
            raise ProgramError(f"{i}: branch target {ins.value} outside program")


# -- assembly text ---------------------------------------------------------

_LABEL_RE = re.compile(r"^([A-Za-z_.][\w.]*)\s*:")
_REG_RE = re.compile(r"^[rR]([0-9]+)$")
_NAME_RE = re.compile(r"^[A-Za-z_.][\w.]*$")


def _parse_int(tok: str) -> int | None:
    tok = tok.strip()
    if tok.startswith("#"):
        tok = tok[1:]
    try:
        return int(tok, 0)
    except ValueError:
        return None


def parse_asm(text: str, name: str = "program") -> Program:
    """Assemble ``text`` into a Program.

    One instruction per line, ``;`` starts a comment, ``label:`` names the
    next instruction. Directives: ``.name NAME`` and ``.data WORDS``.
    """
    pending: list[tuple[int, str, list[str]]] = []
    labels: dict[str, int] = {}
    data_size = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        while True:
            m = _LABEL_RE.match(line)
            if not m:
                break
            label = m.group(1)
            if label in labels:
                raise AsmError(lineno, f"duplicate label {label!r}")
            labels[label] = len(pending)
            line = line[m.end():].strip()
        if not line:
            continue
        head, *tail = line.split(None, 1)
        rest = tail[0] if tail else ""
        if head.startswith("."):
            arg = rest.strip()
            if head == ".name":
                if not arg:
                    raise AsmError(lineno, ".name needs an argument")
                name = arg
            elif head == ".data":
                size = _parse_int(arg)
                if size is None or size < 0:
                    raise AsmError(lineno, f"bad data size {arg!r}")
                data_size = size
            else:
                raise AsmError(lineno, f"unknown directive {head}")
            continue
        operands = [t.strip() for t in rest.split(",")] if rest.strip() else []
        pending.append((lineno, head.upper(), operands))

    instructions = [_assemble(lineno, mnem, ops, labels, len(pending)) for lineno, mnem, ops in pending]
    prog = Program(instructions, name=name, data_size=data_size, labels=labels)
    try:
        validate_program(prog)
    except ProgramError as exc:
        raise AsmError(0, str(exc)) from None
    return prog


def _reg(lineno: int, tok: str) -> int:
    m = _REG_RE.match(tok)
    if not m:
        raise AsmError(lineno, f"expected register, got {tok!r}")
    r = int(m.group(1))
    if r >= NUM_REGS:
        raise AsmError(lineno, f"register {tok} out of range (r0-r7)")
    return r


def _address(lineno: int, tok: str, labels: dict[str, int], n: int) -> int:
    value = _parse_int(tok)
    if value is None:
        if not _NAME_RE.match(tok):
            raise AsmError(lineno, f"bad address {tok!r}")
        if tok not in labels:
            raise AsmError(lineno, f"undefined label {tok!r}")
        value = labels[tok]
    if not 0 <= value < n:
        raise AsmError(lineno, f"address {value} outside program (0..{n - 1})")
    return value


def _imm(lineno: int, tok: str, labels: dict[str, int]) -> int:
    value = _parse_int(tok)
    if value is None:
        if tok in labels:
            return labels[tok]
        if _NAME_RE.match(tok):
            raise AsmError(lineno, f"undefined label {tok!r}")
        raise AsmError(lineno, f"bad immediate {tok!r}")
    if not INT_MIN <= value <= INT_MAX:
        raise AsmError(lineno, f"immediate {value} out of 32-bit range")
    return value


def _assemble(lineno: int, mnem: str, ops: list[str], labels: dict[str, int], n: int) -> Instruction:
    try:
        op = Opcode[mnem]
    except KeyError:
        raise AsmError(lineno, f"unknown mnemonic {mnem!r}") from None

    def need(k: int) -> None:
        if len(ops) != k:
            raise AsmError(lineno, f"{mnem} takes {k} operand(s), got {len(ops)}")

    if op in (Opcode.RET, Opcode.HALT):
        need(0)
        return Instruction(op)
    if op in DIRECT_BRANCHES:
        need(1)
        return Instruction(op, Form.A, 0, _address(lineno, ops[0], labels, n))
    if op in (Opcode.IN, Opcode.OUT, Opcode.BLX, Opcode.BX):
        need(1)
        return Instruction(op, Form.R, _reg(lineno, ops[0]))
    need(2)
    ra = _reg(lineno, ops[0])
    src = ops[1]
    if op in (Opcode.LDR, Opcode.STR) and src.startswith("[") and src.endswith("]"):
        src = src[1:-1].strip()
    if _REG_RE.match(src):
        return Instruction(op, Form.RR, ra, _reg(lineno, src))
    return Instruction(op, Form.RI, ra, _imm(lineno, src, labels))


def format_instruction(ins: Instruction, labels: dict[int, str] | None = None) -> str:
    op = ins.op.name
    if ins.form == Form.NONE:
        return op
    if ins.form == Form.R:
        return f"{op} r{ins.reg}"
    if ins.form == Form.A:
        target = labels.get(ins.value) if labels else None
        return f"{op} {target if target is not None else ins.value}"
    second = f"r{ins.value}" if ins.form == Form.RR else str(ins.value)
    if ins.op in (Opcode.LDR, Opcode.STR):
        second = f"[{second}]"
    return f"{op} r{ins.reg}, {second}"


def serialize_asm(p: Program) -> str:
    by_addr: dict[int, list[str]] = {}
    for label, addr in p.labels.items():
        by_addr.setdefault(addr, []).append(label)
    first_label = {addr: names[0] for addr, names in by_addr.items()}
    lines = [f".name {p.name}", f".data {p.data_size}"]
    for i, ins in enumerate(p.instructions):
        for label in by_addr.get(i, ()):
            lines.append(f"{label}:")
        lines.append(f"    {format_instruction(ins, first_label)}")
    # labels may point one past the end
    for label in by_addr.get(len(p.instructions), ()):
        lines.append(f"{label}:")
    return "\n".join(lines) + "\n"


# -- binary image ------------------------------------------------------------

_RECORD = struct.Struct("<BBIH")


def encode_program(p: Program) -> bytes:
    out = bytearray(MAGIC)
    out.append(VERSION)
    out += struct.pack("<I", len(p.instructions))
    for ins in p.instructions:
        form_byte = int(ins.form) | (ins.reg << 4)
        out += _RECORD.pack(int(ins.op), form_byte, ins.value & 0xFFFFFFFF, 0)
    out += struct.pack("<I", p.data_size)
    return bytes(out)


def decode_program(blob: bytes, name: str = "program") -> Program:
    if blob[:4] != MAGIC:
        raise ProgramError("bad program magic")
    if len(blob) < 9 or blob[4] != VERSION:
        raise ProgramError("unsupported program version")
    (count,) = struct.unpack_from("<I", blob, 5)
    expected = 9 + count * _RECORD.size + 4
    if len(blob) != expected:
        raise ProgramError(f"program image is {len(blob)} bytes, expected {expected}")
    instructions = []
    for i in range(count):
        opcode, form_byte, operand, _spare = _RECORD.unpack_from(blob, 9 + i * _RECORD.size)
        try:
            op = Opcode(opcode)
            form = Form(form_byte & 0x0F)
        except ValueError:
            raise ProgramError(f"{i}: bad opcode or form") from None
        value = operand
        if form == Form.RI and value >= 2**31:
            value -= 2**32
        instructions.append(Instruction(op, form, form_byte >> 4, value))
    (data_size,) = struct.unpack_from("<I", blob, expected - 4)
    prog = Program(instructions, name=name, data_size=data_size)
    validate_program(prog)
    return prog


def program_digest(p: Program) -> bytes:
    """BLAKE2s-256 over the canonical binary image."""
    return hashlib.blake2s(encode_program(p), digest_size=32).digest()
