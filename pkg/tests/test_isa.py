import hashlib
import re
import struct

import pytest
from hypothesis import given, strategies as st

from cfattest.attacks import corpus_source
from cfattest.isa import (
    AsmError,
    Form,
    Instruction,
    Opcode,
    Program,
    decode_program,
    encode_program,
    parse_asm,
    program_digest,
    serialize_asm,
)


def lines(text: str) -> str:
    # the one-line examples use " ; " between instructions
    return "\n".join(part.strip() for part in text.split(" ; "))


def test_single_halt():
    p = parse_asm("HALT")
    assert len(p) == 1
    assert p.data_size == 0
    assert p.instructions[0].op is Opcode.HALT


def test_label_resolution():
    p = parse_asm(lines("loop: SUB r0, 1 ; BNE loop ; HALT"))
    assert len(p) == 3
    assert p.instructions[1].op is Opcode.BNE
    assert p.instructions[1].target == 0


def test_pump_instruction_count_matches_manual_tally():
    src = corpus_source("pump")
    tally = 0
    for raw in src.splitlines():
        line = raw.split(";")[0].strip()
        line = re.sub(r"^(\w+:\s*)+", "", line)
        if line and not line.startswith("."):
            tally += 1
    assert len(parse_asm(src)) == tally


@pytest.mark.parametrize(
    "src, fragment",
    [
        ("FOO r1", "unknown mnemonic"),
        ("B nowhere", "undefined label"),
        ("MOV r9, 1", "out of range"),
        ("HALT\nB 5", "outside program"),
        ("MOV r1, 99999999999", "32-bit"),
        ("ADD r1", "operand"),
        ("x: HALT\nx: HALT", "duplicate label"),
    ],
)
def test_errors_carry_line_numbers(src, fragment):
    with pytest.raises(AsmError) as exc:
        parse_asm(src)
    assert fragment in str(exc.value)
    assert exc.value.line == src.count("\n") + 1


def test_comments_tabs_and_memory_operands():
    p = parse_asm(".data 4\n\tMOV\tr1, #3 ; three\n  STR r1, [2]\nLDR r2, [r1]\n HALT")
    assert p.data_size == 4
    assert p.instructions[1] == Instruction(Opcode.STR, Form.RI, 1, 2)
    assert p.instructions[2] == Instruction(Opcode.LDR, Form.RR, 2, 1)


def test_labels_as_immediates():
    p = parse_asm("MOV r1, target\nBLX r1\nHALT\ntarget: RET")
    assert p.instructions[0].value == 3


@pytest.mark.parametrize("name", ["pump", "fig3", "fig4", "fig5", "fig6", "recursive", "dispatch"])
def test_corpus_round_trips(name):
    p = parse_asm(corpus_source(name))
    again = parse_asm(serialize_asm(p))
    assert again.instructions == p.instructions
    assert again.labels == p.labels
    assert program_digest(again) == program_digest(p)
    assert decode_program(encode_program(p)).instructions == p.instructions


def test_one_immediate_changes_digest():
    a = parse_asm("MOV r0, 5\nOUT r0\nHALT")
    b = parse_asm("MOV r0, 6\nOUT r0\nHALT")
    assert program_digest(a) != program_digest(b)


def test_halt_digest_matches_documented_bytes():
    image = b"CFAP" + b"\x01" + struct.pack("<I", 1) + bytes([17, 0]) + struct.pack("<IH", 0, 0) + struct.pack("<I", 0)
    assert encode_program(parse_asm("HALT")) == image
    assert program_digest(parse_asm("HALT")) == hashlib.blake2s(image, digest_size=32).digest()


def test_decode_rejects_bad_images():
    good = encode_program(parse_asm("HALT"))
    with pytest.raises(ValueError):
        decode_program(b"XFAP" + good[4:])
    with pytest.raises(ValueError):
        decode_program(good[:-1])


instructions = st.one_of(
    st.builds(lambda r, v: Instruction(Opcode.MOV, Form.RI, r, v), st.integers(0, 7), st.integers(-(2**31), 2**31 - 1)),
    st.builds(lambda r, s: Instruction(Opcode.ADD, Form.RR, r, s), st.integers(0, 7), st.integers(0, 7)),
    st.builds(lambda r: Instruction(Opcode.OUT, Form.R, r), st.integers(0, 7)),
    st.just(Instruction(Opcode.RET)),
)


@given(st.lists(instructions, max_size=20), st.integers(0, 64))
def test_binary_image_round_trip(body, data_size):
    p = Program(body + [Instruction(Opcode.HALT)], data_size=data_size)
    q = decode_program(encode_program(p))
    assert q.instructions == p.instructions
    assert q.data_size == data_size
    assert parse_asm(serialize_asm(p)).instructions == p.instructions
