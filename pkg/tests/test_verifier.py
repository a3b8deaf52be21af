import dataclasses
import json

import pytest
from hypothesis import given, settings, strategies as st

from conftest import KEY, NONCE, small_inputs
from cfattest.engine import MeasurementEngine
from cfattest.measurements import ENUMERATED, PROFILED, enumerate_measurements
from cfattest.prover import run_attested
from cfattest.verifier import (
    BadTag,
    CountRule,
    Policy,
    PolicyViolation,
    ReplayedNonce,
    ReplayWindow,
    StaticMismatch,
    UnknownPath,
    Valid,
    Verifier,
    profile_db,
    tables_for,
    verdict_to_json,
    verify_report,
)
from cfattest.vm import ReturnOverride
from cfattest.wire import Auth, Report, mac


def pump_policy(corpus):
    return Policy.from_json({"loops": {"dispense_loop": {"param": "quantity"}}}, corpus["pump"].labels)


def test_profile_one_input(corpus):
    db = profile_db(corpus["fig3"], [[1]], merge=False)
    assert len(db.final) == 1
    assert not db.complete
    (info,) = db.final.values()
    assert info.provenance == {PROFILED}


def test_profile_pump_two_final_hashes(corpus):
    inputs = [[key, q] for q in range(1, 11) for key in (30, 700)]
    db = profile_db(corpus["pump"], inputs, merge=False)
    assert len(db.final) == 2
    lo = corpus["pump"].labels["dispense_loop"]
    assert len(db.loop_paths(lo)) == 1


@pytest.mark.parametrize("name", ["fig3", "fig4", "fig5", "fig6", "pump", "countdown", "recursive"])
def test_profiled_subset_of_enumerated(name, corpus, dbs):
    prof = profile_db(corpus[name], small_inputs(name), merge=False)
    full = dbs[name]
    assert set(prof.final) <= set(full.final)
    for key, entry in prof.loops.items():
        assert key in full.loops
        assert set(entry.paths) <= set(full.loops[key].paths)
        assert entry.exits <= full.loops[key].exits


def test_merge_keeps_provenance(corpus):
    db = profile_db(corpus["fig3"], [[1]])
    assert db.complete
    prov = sorted(sorted(i.provenance) for i in db.final.values())
    assert prov == [[ENUMERATED], [ENUMERATED, PROFILED]]


def test_profiling_resolves_indirect_targets(corpus):
    p = corpus["dispatch"]
    db = profile_db(p, [[0, 5], [1, 5]])
    assert db.complete
    assert db.indirect_targets == {7: {p.labels["op_add"], p.labels["op_neg"]}}
    t = tables_for(p, db)
    v = Verifier(db, KEY)
    ch = v.challenge()
    res, r = run_attested(p, [1, 5], ch, t, engine=MeasurementEngine(KEY))
    assert res.output == [-5]
    assert v.verify(r, ch).ok


def test_anomalous_runs_are_not_profiled(corpus):
    db = profile_db(corpus["fig4"], [[2, 1]], merge=False)
    assert db.final == {}
    assert any("anomalous" in n for n in db.notes)


# -- verify_report ------------------------------------------------------------------


@pytest.fixture
def pump_verifier(corpus, dbs):
    return Verifier(dbs["pump"], KEY, pump_policy(corpus))


def prove(corpus, tables, ch, inp, fault=None, key=KEY):
    return run_attested(corpus["pump"], inp, ch, tables["pump"], engine=MeasurementEngine(key), fault=fault)[1]


@pytest.mark.parametrize("q", [0, 1, 5, 17])
def test_benign_pump_is_valid(q, corpus, tables, pump_verifier):
    ch = pump_verifier.challenge()
    v = pump_verifier.verify(prove(corpus, tables, ch, [30, q]), ch, {"quantity": q})
    assert isinstance(v, Valid)
    assert v.loop_counts["dispense_loop"] == [q]
    assert "move_syringe" in v.path


def test_report_under_new_nonce_is_bad_tag(corpus, tables, pump_verifier):
    old = pump_verifier.challenge()
    report = prove(corpus, tables, old, [30, 3])
    new = pump_verifier.challenge()
    assert new.nonce != old.nonce
    assert isinstance(pump_verifier.verify(report, new, {"quantity": 3}), BadTag)


def test_reused_nonce_is_replay(corpus, tables, pump_verifier):
    ch = pump_verifier.challenge(NONCE)
    report = prove(corpus, tables, ch, [30, 3])
    assert pump_verifier.verify(report, ch, {"quantity": 3}).ok
    assert pump_verifier.verify(report, ch, {"quantity": 3}) == ReplayedNonce(NONCE.hex())


def test_wrong_key_is_bad_tag(corpus, tables, pump_verifier):
    ch = pump_verifier.challenge()
    assert isinstance(pump_verifier.verify(prove(corpus, tables, ch, [30, 3], key=bytes(32)), ch), BadTag)


def test_static_mismatch(corpus, tables, dbs):
    v = Verifier(dbs["pump"], KEY)
    ch = v.challenge()
    honest = prove(corpus, tables, ch, [30, 3])
    forged_auth = dataclasses.replace(honest.auth, program_digest=dbs["fig3"].program_digest)
    forged = Report(forged_auth, mac(KEY, forged_auth, ch.nonce))
    verdict = v.verify(forged, ch)
    assert verdict == StaticMismatch(dbs["pump"].program_digest.hex(), dbs["fig3"].program_digest.hex())


def test_order_tag_before_everything(corpus, tables, dbs):
    # a report failing every check still reports the tag first
    v = Verifier(dbs["pump"], KEY)
    ch = v.challenge()
    junk = Report(Auth(bytes(32), (), bytes(32)), bytes(32))
    assert isinstance(v.verify(junk, ch), BadTag)


def test_hijack_is_unknown_path(corpus, tables, pump_verifier):
    labels = corpus["pump"].labels
    ch = pump_verifier.challenge()
    fault = [ReturnOverride(labels["move_syringe"], at_pc=labels["display"] + 1)]
    v = pump_verifier.verify(prove(corpus, tables, ch, [700, 5], fault), ch, {"quantity": 5})
    assert isinstance(v, UnknownPath)


def test_policy_violation_names_loop(corpus, tables, pump_verifier):
    ch = pump_verifier.challenge()
    v = pump_verifier.verify(prove(corpus, tables, ch, [30, 50]), ch, {"quantity": 5})
    assert v == PolicyViolation("dispense_loop", 50, "5")


def test_verdicts_are_deterministic(corpus, tables, dbs):
    ch = Verifier(dbs["pump"], KEY).challenge(NONCE)
    report = prove(corpus, tables, ch, [30, 50])
    policy = pump_policy(corpus)
    first = verify_report(report, ch, dbs["pump"], policy, KEY, None, {"quantity": 5})
    for _ in range(10):
        assert verify_report(report, ch, dbs["pump"], policy, KEY, None, {"quantity": 5}) == first


def test_db_region_must_match_challenge(corpus, tables, dbs):
    v = Verifier(dbs["pump"], KEY)
    ch = dataclasses.replace(v.challenge(), begin=5)
    with pytest.raises(ValueError):
        verify_report(prove(corpus, tables, ch, [30, 1]), ch, dbs["pump"], None, KEY)


def test_verdict_json():
    doc = verdict_to_json(PolicyViolation("dispense_loop", 50, "5"))
    assert doc == {"verdict": "PolicyViolation", "loop": "dispense_loop", "observed": 50, "allowed": "5"}
    json.dumps(verdict_to_json(Valid("x", {"a": [1]})))


# -- policy ----------------------------------------------------------------------------


def test_policy_json_round_trip(corpus):
    doc = {"loops": {"dispense_loop": {"range": [1, 10]}, "key_loop": {"exact": 4}}}
    labels = corpus["pump"].labels
    pol = Policy.from_json(doc, labels)
    assert pol.rules == {labels["dispense_loop"]: CountRule(low=1, high=10), labels["key_loop"]: CountRule(exact=4)}
    assert Policy.from_json({"loops": {"56": {"param": "q"}}}).rules == {56: CountRule(param="q")}
    assert Policy.from_json(pol.to_json(), labels) == pol
    with pytest.raises(ValueError):
        Policy.from_json({"loops": {"nope": {"exact": 1}}}, labels)
    with pytest.raises(ValueError):
        CountRule.from_json({"at_most": 3})


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 100))
def test_range_rule(lo, hi, n):
    assert CountRule(low=lo, high=hi).allows(n, {}) == (lo <= n <= hi)


def test_param_rule_requires_value():
    with pytest.raises(KeyError):
        CountRule(param="quantity").allows(3, {})


@settings(max_examples=50)
@given(st.lists(st.binary(min_size=16, max_size=16), min_size=1, max_size=40))
def test_replay_window(nonces):
    w = ReplayWindow(size=8)
    seen = []
    for n in nonces:
        fresh = n not in seen[-8:]
        assert w.accept(b"p", n) == fresh
        if fresh:
            seen.append(n)
    assert w.accept(b"other program", nonces[0])


def test_enumerated_db_with_iv(corpus, tables):
    iv = bytes(range(32))
    db = enumerate_measurements(tables["fig4"], iv=iv)
    v = Verifier(db, KEY)
    ch = v.challenge()
    assert ch.iv == iv
    _, r = run_attested(corpus["fig4"], [2, 0, 1], ch, tables["fig4"], engine=MeasurementEngine(KEY))
    assert v.verify(r, ch).ok
