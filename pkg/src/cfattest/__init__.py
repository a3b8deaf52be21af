"""Control-flow attestation for a toy instruction set.

The prover runs a program on a small VM whose branch events feed a
measurement engine; the verifier checks the resulting hash chain and loop
counters against a database of legal paths.
"""

from .cfg import Tables, analyze, build_cfg, detect_loops, index_call_returns
from .engine import MeasurementEngine, MeasurementState, cfa_finish, cfa_init, extend, record_event
from .isa import Instruction, Opcode, Program, parse_asm, program_digest, serialize_asm
from .measurements import Bounds, MeasurementDB, enumerate_measurements
from .prover import attested_region, run_attested
from .verifier import Policy, Verifier, profile_db, verify_report
from .vm import BranchEvent, EventKind, vm_run
from .wire import Auth, Challenge, LoopRecord, RecordKind, Report

__all__ = [
    "Auth", "BranchEvent", "Bounds", "Challenge", "EventKind", "Instruction", "LoopRecord", "MeasurementDB",
    "MeasurementEngine", "MeasurementState", "Opcode", "Policy", "Program", "RecordKind", "Report", "Tables",
    "Verifier", "analyze", "attested_region", "build_cfg", "cfa_finish", "cfa_init", "detect_loops",
    "enumerate_measurements", "extend", "index_call_returns", "parse_asm", "profile_db", "program_digest",
    "record_event", "run_attested", "serialize_asm", "verify_report", "vm_run",
]
