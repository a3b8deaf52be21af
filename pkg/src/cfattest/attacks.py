"""Demo corpus and attack scenarios against the syringe pump.

Each scenario attests a benign run and one or more faulted runs with the same
verifier database, and reports whether every verdict matched expectations.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .cfg import Tables, analyze
from .engine import MeasurementEngine
from .isa import Program, parse_asm
from .measurements import MeasurementDB, enumerate_measurements
from .prover import run_attested
from .verifier import Policy, PolicyViolation, UnknownPath, Valid, Verdict, Verifier
from .vm import DataWrite, Fault, ReturnOverride

CORPUS = {
    "pump": "pump.asm",
    "fig3": "figures/fig3.asm",
    "fig4": "figures/fig4.asm",
    "fig5": "figures/fig5.asm",
    "fig6": "figures/fig6.asm",
    "countdown": "countdown.asm",
    "recursive": "recursive.asm",
    "dispatch": "dispatch.asm",
}

DEMO_KEY = hashlib.blake2s(b"cfattest demo key", digest_size=32).digest()

# analog readings inside each key's range in the pump's key map
KEY_RIGHT = 30  # move syringe
KEY_UP = 100
KEY_DOWN = 300
KEY_LEFT = 500
KEY_SELECT = 700  # set quantity
KEY_NONE = 900


def corpus_source(name: str) -> str:
    return resources.files(__package__).joinpath("corpus", CORPUS[name]).read_text()


def load_program(name_or_path: str) -> Program:
    """A corpus program by name, or an assembly file by path."""
    if name_or_path in CORPUS:
        return parse_asm(corpus_source(name_or_path), name_or_path)
    path = Path(name_or_path)
    return parse_asm(path.read_text(), path.stem)


def build_corpus() -> dict[str, Program]:
    return {name: load_program(name) for name in CORPUS}


# -- scenarios -------------------------------------------------------------------


@dataclass
class Case:
    label: str
    verdict: Verdict
    expected: str  # verdict class name, or "non-Valid"
    output: list[int] = field(default_factory=list)

    @property
    def matched(self) -> bool:
        name = type(self.verdict).__name__
        if self.expected == "non-Valid":
            return name != "Valid"
        return name == self.expected


@dataclass
class ScenarioResult:
    name: str
    cases: list[Case]

    @property
    def passed(self) -> bool:
        return all(c.matched for c in self.cases)

    @property
    def attacked(self) -> Verdict:
        return self.cases[1].verdict


@dataclass
class PumpLab:
    """Pump program, tables, enumerated database and a shared key."""

    program: Program
    tables: Tables
    db: MeasurementDB
    key: bytes = DEMO_KEY

    @classmethod
    def build(cls) -> PumpLab:
        p = load_program("pump")
        tables = analyze(p)
        return cls(p, tables, enumerate_measurements(tables))

    def addr(self, label: str) -> int:
        return self.program.labels[label]

    def attest(
        self,
        inp: Sequence[int],
        policy: Policy | None = None,
        fault: Sequence[Fault] | None = None,
        params: Mapping[str, int] | None = None,
    ) -> tuple[Verdict, list[int]]:
        verifier = Verifier(self.db, self.key, policy)
        challenge = verifier.challenge()
        result, report = run_attested(
            self.program, inp, challenge, self.tables, engine=MeasurementEngine(self.key), fault=fault
        )
        return verifier.verify(report, challenge, params), result.output

    def policy(self, doc: dict) -> Policy:
        return Policy.from_json(doc, self.program.labels)


def scenario_hijack_return(lab: PumpLab | None = None) -> ScenarioResult:
    """Redirect display's return into the dispense routine, skipping the trigger key."""
    lab = lab or PumpLab.build()
    ret = lab.addr("display") + 1
    target = lab.addr("move_syringe")
    inp = [KEY_SELECT, 5]
    cases = []
    v, out = lab.attest(inp)
    cases.append(Case("benign set-quantity", v, "Valid", out))
    v, out = lab.attest(inp, fault=[ReturnOverride(target, at_pc=ret)])
    cases.append(Case("return into move_syringe", v, "UnknownPath", out))
    v, out = lab.attest(inp, fault=[ReturnOverride(target + 1, at_pc=ret)])
    cases.append(Case("return into the middle of move_syringe", v, "UnknownPath", out))
    return ScenarioResult("hijack-return", cases)


def scenario_loop_count(lab: PumpLab | None = None, quantity: int = 5) -> ScenarioResult:
    """Overwrite the validated quantity after input checking."""
    lab = lab or PumpLab.build()
    policy = lab.policy({"loops": {"dispense_loop": {"param": "quantity"}}})
    params = {"quantity": quantity}
    inp = [KEY_RIGHT, quantity]
    at = lab.addr("move_syringe")

    def corrupt(value: int) -> list[Fault]:
        return [DataWrite(10, value, at_pc=at)]

    cases = []
    v, out = lab.attest(inp, policy, params=params)
    cases.append(Case("benign move-syringe", v, "Valid", out))
    v, out = lab.attest(inp, policy, corrupt(quantity * 10), params)
    cases.append(Case(f"quantity {quantity} -> {quantity * 10}", v, "PolicyViolation", out))
    v, out = lab.attest(inp, policy, corrupt(quantity), params)
    cases.append(Case(f"quantity {quantity} -> {quantity} (no-op)", v, "Valid", out))
    v, out = lab.attest(inp, policy, corrupt(0), params)
    cases.append(Case(f"quantity {quantity} -> 0", v, "non-Valid", out))
    return ScenarioResult("loop-count", cases)


def scenario_keymap(lab: PumpLab | None = None) -> ScenarioResult:
    """Stretch the 'right' key range so a select press reads as the trigger.

    Only detectable when the verifier knows which key was really pressed:
    the key loop's iteration count is the index of the matched key.
    """
    lab = lab or PumpLab.build()
    expects_select = lab.policy({"loops": {"key_loop": {"exact": 4}}})
    inp = [KEY_SELECT, 5]
    corrupt = [DataWrite(1, 1000, at_pc=lab.addr("read_key"))]
    cases = []
    v, out = lab.attest(inp, expects_select)
    cases.append(Case("benign select", v, "Valid", out))
    v, out = lab.attest(inp, expects_select, corrupt)
    cases.append(Case("corrupted key map, select expected", v, "PolicyViolation", out))
    v, out = lab.attest(inp, None, corrupt)
    cases.append(Case("corrupted key map, no expectation", v, "Valid", out))
    return ScenarioResult("keymap", cases)


SCENARIOS: dict[str, Callable[..., ScenarioResult]] = {
    "hijack-return": scenario_hijack_return,
    "loop-count": scenario_loop_count,
    "keymap": scenario_keymap,
}

__all__ = [
    "CORPUS", "Case", "PolicyViolation", "PumpLab", "SCENARIOS", "ScenarioResult", "UnknownPath", "Valid",
    "build_corpus", "load_program", "scenario_hijack_return", "scenario_keymap", "scenario_loop_count",
]
