import pathlib

import pytest
from hypothesis import given, settings, strategies as st

from cfattest.wire import (
    NO_END,
    Auth,
    Challenge,
    LoopRecord,
    RecordKind,
    Report,
    TruncatedFrame,
    WireError,
    decode_challenge,
    decode_report,
    encode_challenge,
    encode_report,
    serialize_auth,
)

GOLDEN = pathlib.Path(__file__).parent / "golden"


def golden(name: str) -> bytes:
    text = (GOLDEN / name).read_text()
    return bytes.fromhex(" ".join(line.split("#")[0] for line in text.splitlines()))


GOLDEN_CHALLENGE = Challenge(b"\x11" * 32, bytes(range(16)), 5, NO_END, b"\x22" * 32)
GOLDEN_REPORT = Report(
    Auth(
        b"\xaa" * 32,
        (
            LoopRecord(1, b"\xcc" * 32, ((b"\xd1" * 32, 3), (b"\xd2" * 32, 1)), RecordKind.NORMAL),
            LoopRecord(38, b"\xee" * 32, ((b"\xf0" * 32, 4),), RecordKind.BREAK, 44),
        ),
        b"\xbb" * 32,
    ),
    b"\x77" * 32,
)


def test_golden_challenge():
    assert encode_challenge(GOLDEN_CHALLENGE) == golden("challenge.hex")
    assert decode_challenge(golden("challenge.hex")) == GOLDEN_CHALLENGE


def test_golden_report():
    assert encode_report(GOLDEN_REPORT) == golden("report.hex")
    assert decode_report(golden("report.hex")) == GOLDEN_REPORT


hashes = st.binary(min_size=32, max_size=32)
u32 = st.integers(0, 2**32 - 1)
challenges = st.builds(
    Challenge, hashes, st.binary(min_size=16, max_size=16), u32, u32, st.none() | hashes
)


@settings(max_examples=1000)
@given(challenges)
def test_challenge_round_trip(c):
    assert decode_challenge(encode_challenge(c)) == c


@st.composite
def records(draw):
    kind = draw(st.sampled_from(list(RecordKind)))
    detail = None if kind is RecordKind.NORMAL else draw(u32)
    paths = tuple(draw(st.lists(st.tuples(hashes, u32), max_size=3)))
    return LoopRecord(draw(u32), draw(hashes), paths, kind, detail)


@settings(max_examples=200)
@given(hashes, st.lists(records(), max_size=4), hashes, hashes)
def test_report_round_trip(final, recs, digest, tag):
    r = Report(Auth(final, tuple(recs), digest), tag)
    assert decode_report(encode_report(r)) == r


def test_zero_iv_challenge_length():
    # 4 magic + 1 type + 32 digest + 4 begin + 4 end + 16 nonce + 1 flag
    assert len(encode_challenge(Challenge(bytes(32), bytes(16)))) == 62
    assert len(encode_challenge(Challenge(bytes(32), bytes(16), iv=bytes(32)))) == 94


def test_report_lengths():
    empty = Report(Auth(bytes(32), (), bytes(32)), bytes(32))
    assert len(encode_report(empty)) == 4 + 1 + 32 + 32 + 2 + 32 == 103
    rec = LoopRecord(0, bytes(32), ((bytes(32), 1), (b"\x01" * 32, 2)))
    one = Auth(bytes(32), (rec,), bytes(32))
    assert len(serialize_auth(one)) - len(serialize_auth(empty.auth)) == 4 + 32 + 1 + 2 + 2 * 36 == 111


def test_bad_magic():
    frame = encode_challenge(GOLDEN_CHALLENGE)
    with pytest.raises(WireError, match="magic"):
        decode_challenge(b"XFA1" + frame[4:])


def test_unknown_type():
    frame = bytearray(encode_challenge(GOLDEN_CHALLENGE))
    frame[4] = 9
    with pytest.raises(WireError, match="type"):
        decode_challenge(bytes(frame))


def test_wrong_frame_type():
    with pytest.raises(WireError):
        decode_challenge(encode_report(GOLDEN_REPORT))


@pytest.mark.parametrize("cut", [1, 5, 36, 60, 100, 200, 300])
def test_truncation(cut):
    frame = golden("report.hex")
    with pytest.raises(TruncatedFrame):
        decode_report(frame[: len(frame) - cut])


def test_trailing_bytes_rejected():
    with pytest.raises(WireError, match="trailing"):
        decode_report(golden("report.hex") + b"\x00")


def test_record_count_inconsistent_with_length():
    frame = bytearray(golden("report.hex"))
    frame[69] = 3  # claim three records
    with pytest.raises(TruncatedFrame):
        decode_report(bytes(frame))
    frame[69] = 1
    with pytest.raises(WireError):
        decode_report(bytes(frame))


def test_unknown_record_kind():
    frame = bytearray(golden("report.hex"))
    frame[71 + 4 + 32] = 9
    with pytest.raises(WireError, match="record kind"):
        decode_report(bytes(frame))


def test_challenge_field_validation():
    with pytest.raises(ValueError):
        Challenge(bytes(31), bytes(16))
    with pytest.raises(ValueError):
        Challenge(bytes(32), bytes(15))
    with pytest.raises(ValueError):
        Challenge(bytes(32), bytes(16), iv=bytes(8))


def test_pump_auth_fits_in_two_kilobytes(attested):
    sizes = []
    for inp in ([30, 1000], [700, 3], [900, 1], [30, 0]):
        _, r = attested("pump", inp)
        sizes.append(len(serialize_auth(r.auth)))
    assert max(sizes) <= 2048
