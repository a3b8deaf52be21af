import hashlib
import itertools
import struct
import time

import pytest

from cfattest.attacks import build_corpus
from cfattest.cfg import analyze
from cfattest.engine import MeasurementEngine
from cfattest.measurements import enumerate_measurements
from cfattest.prover import run_attested
from cfattest.wire import Challenge

KEY = bytes(range(32))
NONCE = bytes(16)


def blake(data: bytes) -> bytes:
    """Independent oracle for one chain step: BLAKE2s-256 over the documented bytes."""
    return hashlib.blake2s(data, digest_size=32).digest()


def step(h: bytes, entry: int, exit_: int) -> bytes:
    return blake(h + struct.pack("<II", entry, exit_))


def chain(nodes, h: bytes = bytes(32)) -> bytes:
    for entry, exit_ in nodes:
        h = step(h, entry, exit_)
    return h


def small_inputs(name):
    """Exhaustive small input sets for the corpus programs."""
    if name in ("fig3", "fig6"):
        return [[x] for x in (-1, 0, 1, 2)]
    if name in ("fig4", "fig5"):
        out = []
        for n in range(4):
            out += [[n, *bits] for bits in itertools.product((0, 1), repeat=n)]
        return out
    if name == "pump":
        keys = (-5, 0, 30, 59, 60, 100, 199, 200, 300, 500, 700, 799, 800, 900, 2000)
        return [[k, q] for k in keys for q in (-1, 0, 1, 2, 3, 1000, 1001)]
    if name == "countdown":
        return [[n] for n in range(1, 6)]
    if name == "recursive":
        return [[n] for n in range(7)]
    raise KeyError(name)


@pytest.fixture(scope="session")
def corpus():
    return build_corpus()


@pytest.fixture(scope="session")
def tables(corpus):
    return {name: analyze(p) for name, p in corpus.items() if name != "dispatch"}


@pytest.fixture(scope="session")
def dbs(tables):
    return {name: enumerate_measurements(t) for name, t in tables.items()}


@pytest.fixture
def attested(corpus, tables):
    """``attested(name, input, fault=None, nonce=NONCE, key=KEY)`` -> (RunResult, Report)."""

    def run(name, inp, fault=None, nonce=NONCE, key=KEY, iv=None):
        t = tables[name]
        ch = Challenge(t.digest, nonce, iv=iv)
        return run_attested(corpus[name], inp, ch, t, engine=MeasurementEngine(key), fault=fault)

    return run


# -- acceptance criterion reporting ------------------------------------------------

_CRITERIA: list[tuple[int, str, str, float]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    item._started = time.perf_counter()
    yield


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    elapsed = time.perf_counter() - getattr(item, "_started", time.perf_counter())
    _CRITERIA.append((number, title, "PASS" if rep.passed else "FAIL", elapsed))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, elapsed in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({elapsed:.2f}s)")
