"""TCP transport: a prover service and a one-shot verifier client.

One connection carries one attestation: the verifier sends a challenge frame,
the prover runs the program and answers with a report frame, and the
connection closes.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .cfg import Tables
from .engine import MeasurementEngine
from .isa import Program
from .measurements import MeasurementDB
from .prover import run_attested
from .verifier import Policy, Verdict, Verifier
from .vm import FaultInjection
from .wire import Challenge, Report, WireError, encode_challenge, encode_report, read_frame

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 10.0


class TransportError(ConnectionError):
    """The exchange failed before a report could be judged."""


def _reader(sock: socket.socket):
    def read(n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                break
            buf += chunk
        return bytes(buf)

    return read


@dataclass
class ProverConfig:
    program: Program
    tables: Tables
    key: bytes
    input: Sequence[int] = ()
    fault: FaultInjection | None = None
    misbehave: str | None = None  # "replay" re-sends the first report; "truncate" drops the connection mid-report
    cached: dict = field(default_factory=dict)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        cfg: ProverConfig = self.server.config  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        sock.settimeout(DEFAULT_TIMEOUT)
        try:
            challenge = read_frame(_reader(sock))
        except (WireError, OSError) as exc:
            log.warning("bad challenge from %s: %s", self.client_address, exc)
            return
        if not isinstance(challenge, Challenge):
            log.warning("expected a challenge frame from %s", self.client_address)
            return
        if challenge.program_digest != cfg.tables.digest:
            log.warning("challenge for unknown program %s", challenge.program_digest.hex())
            return
        engine = MeasurementEngine(cfg.key)
        _, report = run_attested(cfg.program, cfg.input, challenge, cfg.tables, engine=engine, fault=cfg.fault)
        frame = encode_report(report)
        with self.server.lock:  # type: ignore[attr-defined]
            if cfg.misbehave == "replay":
                frame = cfg.cached.setdefault("frame", frame)
        if cfg.misbehave == "truncate":
            frame = frame[: len(frame) // 2]
        sock.sendall(frame)


class ProverServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], config: ProverConfig):
        super().__init__(address, _Handler)
        self.config = config
        self.lock = threading.Lock()

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve(
    program: Program,
    tables: Tables,
    key: bytes,
    port: int,
    host: str = "127.0.0.1",
    *,
    input: Sequence[int] = (),
    fault: FaultInjection | None = None,
    misbehave: str | None = None,
    background: bool = False,
) -> ProverServer:
    """Start the prover service; with ``background`` it runs on a daemon thread
    and the caller owns ``shutdown()``. ``port=0`` picks a free port."""
    server = ProverServer((host, port), ProverConfig(program, tables, key, list(input), fault, misbehave))
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
    else:
        try:
            server.serve_forever()
        finally:
            server.server_close()
    return server


def request_report(host: str, port: int, challenge: Challenge, timeout: float = DEFAULT_TIMEOUT) -> Report:
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            sock.sendall(encode_challenge(challenge))
            frame = read_frame(_reader(sock))
    except WireError as exc:
        raise TransportError(f"malformed or truncated reply: {exc}") from exc
    except OSError as exc:
        raise TransportError(str(exc)) from exc
    if not isinstance(frame, Report):
        raise TransportError("prover answered with a non-report frame")
    return frame


def attest(
    host: str,
    port: int,
    db: MeasurementDB,
    policy: Policy | None,
    key: bytes,
    *,
    verifier: Verifier | None = None,
    params: Mapping[str, int] | None = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> Verdict:
    """One challenge-response round. Raises :class:`TransportError` when no
    report arrives; every report that does arrive gets a verdict."""
    verifier = verifier or Verifier(db, key, policy)
    challenge = verifier.challenge()
    report = request_report(host, port, challenge, timeout)
    return verifier.verify(report, challenge, params)
