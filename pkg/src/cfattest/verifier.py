"""Verifier side: measurement databases, loop-count policies and verdicts.

Checks run in a fixed order and the first failure decides the verdict:
tag, nonce freshness, program digest, final hash, loop records, policy.
"""

from __future__ import annotations

import json
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .cfg import Tables, analyze
from .engine import MeasurementEngine
from .isa import Program
from .measurements import PROFILED, Bounds, MeasurementDB, collect_indirect_targets, enumerate_measurements
from .prover import attested_region
from .vm import vm_run
from .wire import NO_END, NONCE_LEN, Challenge, RecordKind, Report, tag_matches

# -- verdicts ------------------------------------------------------------------


@dataclass(frozen=True)
class Valid:
    path: str
    loop_counts: dict[str, list[int]] = field(default_factory=dict)
    ok = True


@dataclass(frozen=True)
class UnknownPath:
    element: str
    ok = False


@dataclass(frozen=True)
class PolicyViolation:
    loop: str
    observed: int
    allowed: str
    ok = False


@dataclass(frozen=True)
class BadTag:
    reason: str = "tag does not verify"
    ok = False


@dataclass(frozen=True)
class ReplayedNonce:
    nonce: str
    ok = False


@dataclass(frozen=True)
class StaticMismatch:
    expected: str
    reported: str
    ok = False


Verdict = Valid | UnknownPath | PolicyViolation | BadTag | ReplayedNonce | StaticMismatch


def verdict_to_json(v: Verdict) -> dict:
    doc = {"verdict": type(v).__name__}
    doc.update(v.__dict__)
    return doc


# -- policy ----------------------------------------------------------------------


@dataclass(frozen=True)
class CountRule:
    """Allowed iteration count: exactly ``exact``, within ``[low, high]``, or
    equal to a parameter supplied with the challenge."""

    exact: int | None = None
    low: int | None = None
    high: int | None = None
    param: str | None = None

    def bounds(self, params: Mapping[str, int]) -> tuple[int, int]:
        if self.exact is not None:
            return self.exact, self.exact
        if self.param is not None:
            if self.param not in params:
                raise KeyError(f"policy parameter {self.param!r} not supplied")
            v = int(params[self.param])
            return v, v
        lo = self.low if self.low is not None else 0
        hi = self.high if self.high is not None else 2**32 - 1
        return lo, hi

    def describe(self, params: Mapping[str, int]) -> str:
        lo, hi = self.bounds(params)
        return str(lo) if lo == hi else f"{lo}..{hi}"

    def allows(self, n: int, params: Mapping[str, int]) -> bool:
        lo, hi = self.bounds(params)
        return lo <= n <= hi

    def to_json(self) -> dict:
        if self.exact is not None:
            return {"exact": self.exact}
        if self.param is not None:
            return {"param": self.param}
        return {"range": [self.low, self.high]}

    @classmethod
    def from_json(cls, doc: Mapping) -> CountRule:
        if "exact" in doc:
            return cls(exact=int(doc["exact"]))
        if "param" in doc:
            return cls(param=str(doc["param"]))
        if "range" in doc:
            lo, hi = doc["range"]
            return cls(low=lo, high=hi)
        raise ValueError(f"unrecognised count rule {dict(doc)}")


@dataclass
class Policy:
    rules: dict[int, CountRule] = field(default_factory=dict)  # loop header -> rule
    names: dict[int, str] = field(default_factory=dict)

    def name(self, header: int) -> str:
        return self.names.get(header, str(header))

    @classmethod
    def from_json(cls, doc: Mapping, labels: Mapping[str, int] | None = None) -> Policy:
        """``{"loops": {"<label or address>": {"exact": n} | {"range": [lo, hi]} | {"param": "name"}}}``"""
        labels = labels or {}
        pol = cls()
        for key, rule in doc.get("loops", {}).items():
            if key in labels:
                header = labels[key]
                pol.names[header] = key
            else:
                try:
                    header = int(key)
                except ValueError:
                    raise ValueError(f"policy names unknown loop {key!r}") from None
            pol.rules[header] = CountRule.from_json(rule)
        return pol

    @classmethod
    def load(cls, path: str, labels: Mapping[str, int] | None = None) -> Policy:
        with open(path) as fh:
            return cls.from_json(json.load(fh), labels)

    def to_json(self) -> dict:
        return {"loops": {self.name(h): r.to_json() for h, r in sorted(self.rules.items())}}


# -- replay window -----------------------------------------------------------------


class ReplayWindow:
    """The last ``size`` nonces seen per program; thread-safe."""

    def __init__(self, size: int = 1024):
        self.size = size
        self._seen: dict[bytes, OrderedDict[bytes, None]] = {}
        self._lock = threading.Lock()

    def accept(self, program_digest: bytes, nonce: bytes) -> bool:
        """Record ``nonce``; False if it is already in the window."""
        with self._lock:
            window = self._seen.setdefault(program_digest, OrderedDict())
            if nonce in window:
                return False
            window[nonce] = None
            if len(window) > self.size:
                window.popitem(last=False)
            return True


# -- verification -------------------------------------------------------------------


def _loop_label(header: int, db: MeasurementDB, policy: Policy | None) -> str:
    if policy is not None and header in policy.names:
        return policy.names[header]
    for name, addr in db.labels.items():
        if addr == header:
            return name
    return str(header)


def verify_report(
    report: Report,
    challenge: Challenge,
    db: MeasurementDB,
    policy: Policy | None,
    key: bytes,
    replay: ReplayWindow | None = None,
    params: Mapping[str, int] | None = None,
) -> Verdict:
    if not tag_matches(key, report, challenge.nonce):
        return BadTag()
    if replay is not None and not replay.accept(challenge.program_digest, challenge.nonce):
        return ReplayedNonce(challenge.nonce.hex())
    auth = report.auth
    if auth.program_digest != challenge.program_digest or auth.program_digest != db.program_digest:
        return StaticMismatch(db.program_digest.hex(), auth.program_digest.hex())
    if db.iv != challenge.iv or db.region != (challenge.begin, challenge.end):
        raise ValueError("measurement database was built for a different IV or region than the challenge")

    missing = db.first_unknown(auth)
    if missing is not None:
        return UnknownPath(missing)

    params = params or {}
    counts: dict[str, list[int]] = {}
    for rec in auth.records:
        name = _loop_label(rec.header_entry, db, policy)
        counts.setdefault(name, []).append(rec.iterations)
        rule = policy.rules.get(rec.header_entry) if policy is not None else None
        if rule is not None and not rule.allows(rec.iterations, params):
            return PolicyViolation(name, rec.iterations, rule.describe(params))
    return Valid(db.final[auth.final_hash].description, counts)


class Verifier:
    """Issues challenges and checks the answers against one program's database."""

    def __init__(self, db: MeasurementDB, key: bytes, policy: Policy | None = None, window: int = 1024):
        self.db = db
        self.policy = policy
        self._key = bytes(key)
        self.replay = ReplayWindow(window)

    def challenge(self, nonce: bytes | None = None) -> Challenge:
        begin, end = self.db.region
        return Challenge(self.db.program_digest, nonce or os.urandom(NONCE_LEN), begin, end, self.db.iv)

    def verify(self, report: Report, challenge: Challenge, params: Mapping[str, int] | None = None) -> Verdict:
        return verify_report(report, challenge, self.db, self.policy, self._key, self.replay, params)


# -- profiling ----------------------------------------------------------------------


def observe_indirect_targets(p: Program, inputs: Iterable[Sequence[int]]) -> dict[int, set[int]]:
    events = []
    for inp in inputs:
        vm_run(p, inp, event_sink=events.append)
    return collect_indirect_targets(events)


def profile_db(
    p: Program,
    inputs: Sequence[Sequence[int]],
    tables: Tables | None = None,
    *,
    merge: bool = True,
    iv: bytes | None = None,
    region: tuple[int, int] = (0, NO_END),
    bounds: Bounds | None = None,
) -> MeasurementDB:
    """Database of the Auths observed for ``inputs``.

    Indirect branch targets seen during the runs are folded into the analysis
    first, so the database is built against the same tables a prover would use
    once those targets are deployed. With ``merge`` the enumerated database
    for those tables is added.
    """
    tables = tables or analyze(p)
    seen = observe_indirect_targets(p, inputs)
    known = tables.cfg.indirect_targets
    if any(not t <= known.get(src, set()) for src, t in seen.items()):
        merged = {src: set(t) for src, t in known.items()}
        for src, t in seen.items():
            merged.setdefault(src, set()).update(t)
        tables = analyze(p, merged)

    engine = MeasurementEngine(bytes(32))  # tags are irrelevant here
    challenge = Challenge(tables.digest, bytes(NONCE_LEN), region[0], region[1], iv)
    db = MeasurementDB(
        program_digest=tables.digest,
        iv=iv,
        region=region,
        indirect_targets={k: set(v) for k, v in tables.cfg.indirect_targets.items()},
        labels=dict(p.labels),
    )
    for inp in inputs:
        result, report = attested_region(p, inp, challenge, tables, region[0], region[1], engine=engine)
        db.add_auth(report.auth, f"input {list(inp)}", PROFILED)
    db.complete = False
    db.notes.append(f"profiled over {len(inputs)} inputs")
    if merge:
        enumerated = enumerate_measurements(tables, bounds, iv, region)
        profiled_notes = db.notes
        db = enumerated.merge(db)
        db.complete = enumerated.complete
        db.notes = enumerated.notes + [n for n in profiled_notes if n not in enumerated.notes]
    return db


def tables_for(p: Program, db: MeasurementDB) -> Tables:
    """The tables a prover must load to produce measurements ``db`` accepts."""
    return analyze(p, db.indirect_targets or None)


def loop_headers(tables: Tables) -> dict[str, int]:
    return {tables.program.label_at(lp.header) or str(lp.header): lp.header for lp in tables.loops.loops}


__all__ = [
    "BadTag", "CountRule", "MeasurementDB", "Policy", "PolicyViolation", "RecordKind", "ReplayWindow",
    "ReplayedNonce", "StaticMismatch", "UnknownPath", "Valid", "Verdict", "Verifier", "loop_headers",
    "observe_indirect_targets", "profile_db", "tables_for", "verdict_to_json", "verify_report",
]
