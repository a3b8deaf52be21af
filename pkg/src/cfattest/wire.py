"""Protocol messages and their byte-exact encodings.

All integers are little-endian. Frames are self-delimiting, so they can be
read straight off a TCP stream without an outer length prefix.

Challenge frame::

    "CFA1" | 0x01 | program_digest[32] | begin u32 | end u32 | nonce[16]
           | iv_present u8 | [iv[32]]

Report frame::

    "CFA1" | 0x02 | auth | tag[32]

Canonical Auth (also the MAC input, followed by the nonce)::

    final_hash[32] | program_digest[32] | u16 record count | records

    record = header u32 | context_hash[32] | kind u8 | [detail u32 if kind != 0]
             | u16 path count | (path_hash[32] | count u32) * path count
"""

from __future__ import annotations

import hashlib
import hmac
import io
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable

FRAME_MAGIC = b"CFA1"
TYPE_CHALLENGE = 0x01
TYPE_REPORT = 0x02
NO_END = 0xFFFFFFFF  # region end meaning "until HALT"
HASH_LEN = 32
NONCE_LEN = 16
TAG_LEN = 32
U32_MAX = 0xFFFFFFFF


class WireError(ValueError):
    pass


class TruncatedFrame(WireError):
    pass


class RecordKind(IntEnum):
    NORMAL = 0  # loop left through its header
    BREAK = 1  # loop left from a body node; detail = that node's entry
    UNDERFLOW = 2  # return with an empty shadow stack; header = RET address, detail = destination
    FAULT = 3  # VM fault; header = pc, detail = status code
    EMPTY_REGION = 4  # attested region never entered; header = begin, detail = end
    BRANCH_MISMATCH = 5  # reported destination disagrees with the branch table

    @property
    def is_loop(self) -> bool:
        return self in (RecordKind.NORMAL, RecordKind.BREAK)


@dataclass(frozen=True)
class Challenge:
    program_digest: bytes
    nonce: bytes
    begin: int = 0
    end: int = NO_END
    iv: bytes | None = None

    def __post_init__(self) -> None:
        if len(self.program_digest) != HASH_LEN:
            raise ValueError("program digest must be 32 bytes")
        if len(self.nonce) != NONCE_LEN:
            raise ValueError("nonce must be 16 bytes")
        if self.iv is not None and len(self.iv) != HASH_LEN:
            raise ValueError("iv must be 32 bytes")
        if not (0 <= self.begin <= U32_MAX and 0 <= self.end <= U32_MAX):
            raise ValueError("region bounds must fit in u32")

    @property
    def start_hash(self) -> bytes:
        return self.iv if self.iv is not None else bytes(HASH_LEN)


@dataclass(frozen=True)
class LoopRecord:
    header_entry: int
    context_hash: bytes
    paths: tuple[tuple[bytes, int], ...] = ()
    exit_kind: RecordKind = RecordKind.NORMAL
    detail: int | None = None  # break node entry, fault code, ...

    @property
    def iterations(self) -> int:
        return sum(c for _, c in self.paths)


@dataclass(frozen=True)
class Auth:
    final_hash: bytes
    records: tuple[LoopRecord, ...] = ()
    program_digest: bytes = bytes(HASH_LEN)

    @property
    def loop_records(self) -> tuple[LoopRecord, ...]:
        return tuple(r for r in self.records if r.exit_kind.is_loop)

    @property
    def anomalies(self) -> tuple[LoopRecord, ...]:
        return tuple(r for r in self.records if not r.exit_kind.is_loop)


@dataclass(frozen=True)
class Report:
    auth: Auth
    tag: bytes = field(repr=False)


def _u32(x: int) -> bytes:
    return struct.pack("<I", x & U32_MAX)


def serialize_auth(auth: Auth) -> bytes:
    if len(auth.records) > 0xFFFF:
        raise WireError("too many records")
    out = bytearray(auth.final_hash)
    out += auth.program_digest
    out += struct.pack("<H", len(auth.records))
    for rec in auth.records:
        out += _u32(rec.header_entry)
        out += rec.context_hash
        out.append(int(rec.exit_kind))
        if rec.exit_kind is not RecordKind.NORMAL:
            out += _u32(rec.detail if rec.detail is not None else 0)
        if len(rec.paths) > 0xFFFF:
            raise WireError("too many paths in record")
        out += struct.pack("<H", len(rec.paths))
        for h, count in rec.paths:
            out += h
            out += _u32(count)
    return bytes(out)


def mac(key: bytes, auth: Auth, nonce: bytes) -> bytes:
    """Keyed BLAKE2s-256 over the canonical Auth followed by the nonce."""
    return hashlib.blake2s(serialize_auth(auth) + nonce, key=key, digest_size=TAG_LEN).digest()


def tag_matches(key: bytes, report: Report, nonce: bytes) -> bool:
    return hmac.compare_digest(mac(key, report.auth, nonce), report.tag)


# -- decoding ------------------------------------------------------------------

Read = Callable[[int], bytes]


def _exact(read: Read, n: int) -> bytes:
    data = read(n)
    if len(data) != n:
        raise TruncatedFrame(f"needed {n} bytes, got {len(data)}")
    return data


def _read_header(read: Read) -> int:
    magic = _exact(read, 4)
    if magic != FRAME_MAGIC:
        raise WireError(f"bad magic {magic!r}")
    return _exact(read, 1)[0]


def _read_auth(read: Read) -> Auth:
    final_hash = _exact(read, HASH_LEN)
    digest = _exact(read, HASH_LEN)
    (nrec,) = struct.unpack("<H", _exact(read, 2))
    records = []
    for _ in range(nrec):
        (header,) = struct.unpack("<I", _exact(read, 4))
        context = _exact(read, HASH_LEN)
        try:
            kind = RecordKind(_exact(read, 1)[0])
        except ValueError as exc:
            raise WireError(f"unknown record kind: {exc}") from None
        detail = None
        if kind is not RecordKind.NORMAL:
            (detail,) = struct.unpack("<I", _exact(read, 4))
        (npaths,) = struct.unpack("<H", _exact(read, 2))
        paths = []
        for _ in range(npaths):
            h = _exact(read, HASH_LEN)
            (count,) = struct.unpack("<I", _exact(read, 4))
            paths.append((h, count))
        records.append(LoopRecord(header, context, tuple(paths), kind, detail))
    return Auth(final_hash, tuple(records), digest)


def _read_challenge_body(read: Read) -> Challenge:
    digest = _exact(read, HASH_LEN)
    begin, end = struct.unpack("<II", _exact(read, 8))
    nonce = _exact(read, NONCE_LEN)
    flag = _exact(read, 1)[0]
    if flag not in (0, 1):
        raise WireError(f"bad iv-present flag {flag}")
    iv = _exact(read, HASH_LEN) if flag else None
    return Challenge(digest, nonce, begin, end, iv)


def read_frame(read: Read) -> Challenge | Report:
    """Read exactly one frame from ``read`` (a ``recv``-like callable returning
    up to n bytes; a short read means end of stream)."""
    kind = _read_header(read)
    if kind == TYPE_CHALLENGE:
        return _read_challenge_body(read)
    if kind == TYPE_REPORT:
        auth = _read_auth(read)
        return Report(auth, _exact(read, TAG_LEN))
    raise WireError(f"unknown frame type 0x{kind:02x}")


def _decode(frame: bytes, expected: type):
    buf = io.BytesIO(frame)
    msg = read_frame(buf.read)
    if not isinstance(msg, expected):
        raise WireError(f"expected {expected.__name__} frame, got {type(msg).__name__}")
    if buf.tell() != len(frame):
        raise WireError(f"{len(frame) - buf.tell()} trailing bytes after frame")
    return msg


def encode_challenge(c: Challenge) -> bytes:
    out = bytearray(FRAME_MAGIC)
    out.append(TYPE_CHALLENGE)
    out += c.program_digest
    out += struct.pack("<II", c.begin, c.end)
    out += c.nonce
    if c.iv is None:
        out.append(0)
    else:
        out.append(1)
        out += c.iv
    return bytes(out)


def decode_challenge(frame: bytes) -> Challenge:
    return _decode(frame, Challenge)


def encode_report(r: Report) -> bytes:
    if len(r.tag) != TAG_LEN:
        raise WireError("tag must be 32 bytes")
    return FRAME_MAGIC + bytes([TYPE_REPORT]) + serialize_auth(r.auth) + r.tag


def decode_report(frame: bytes) -> Report:
    return _decode(frame, Report)
