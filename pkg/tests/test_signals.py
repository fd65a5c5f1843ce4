from __future__ import annotations

import glob
import json
import os

import pytest

from cti_triage.contract import parse_output
from cti_triage.core import ReferenceMaterial
from cti_triage.ingestion import instance_from_record
from cti_triage.signals import RULE_MODE_IDS, Signal, Strength, extract_signals

from conftest import make_instance

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "fixtures_signals")


def fixture_names():
    return sorted(
        os.path.basename(p)[: -len(".instance.json")]
        for p in glob.glob(os.path.join(FIXTURE_DIR, "*.instance.json"))
    )


def load_fixture(name):
    with open(os.path.join(FIXTURE_DIR, f"{name}.instance.json"), encoding="utf-8") as f:
        instance = instance_from_record(json.load(f))
    with open(os.path.join(FIXTURE_DIR, f"{name}.output.txt"), encoding="utf-8") as f:
        out = parse_output(f.read())
    with open(os.path.join(FIXTURE_DIR, f"{name}.expected.json"), encoding="utf-8") as f:
        expected = json.load(f)["signals"]
    return instance, out, expected


def test_fixture_corpus_is_large_enough():
    names = fixture_names()
    assert len(names) >= 12
    # Every registered rule has a positive and a negative fixture.
    for mode in RULE_MODE_IDS:
        tag = mode.replace(".", "_")
        assert any(n == f"rule_{tag}_positive" for n in names), mode
        assert any(n == f"rule_{tag}_negative" for n in names), mode


@pytest.mark.parametrize("name", fixture_names())
def test_fixture_signals_match_expected(name):
    instance, out, expected = load_fixture(name)
    signals = extract_signals(instance, out)
    got = [{"mode_hint": s.mode_hint, "strength": s.strength.value} for s in signals]
    assert got == expected
    for signal in signals:
        if signal.strength is Strength.STRONG:
            assert signal.evidence


def test_rule_order_is_stable_and_complete():
    instance, out, _ = load_fixture("rule_1_1_negative")
    signals = extract_signals(instance, out)
    assert [s.mode_hint for s in signals] == list(RULE_MODE_IDS)


def test_extract_signals_is_deterministic():
    instance, out, _ = load_fixture("rule_2_1_positive")
    assert extract_signals(instance, out) == extract_signals(instance, out)


def test_missing_reference_fields_yield_absent_not_errors():
    instance = make_instance(
        "bare", reference=ReferenceMaterial(gold_label="campaign-1", reference_texts=("campaign-1",))
    )
    _, out, _ = load_fixture("rule_1_1_positive")
    signals = extract_signals(instance, out)
    # The bare reference states no relations, anchors, tags, or scope; the
    # technique rule sees no reference ids either.
    assert all(s.strength is Strength.ABSENT for s in signals)


def test_date_tolerance_is_configurable():
    instance, out, _ = load_fixture("rule_2_1_weak_drift")
    default = {s.mode_hint: s.strength for s in extract_signals(instance, out)}
    assert default["2.1"] is Strength.WEAK
    tight = {s.mode_hint: s.strength for s in extract_signals(instance, out, date_tolerance_days=10)}
    assert tight["2.1"] is Strength.STRONG
    lax = {s.mode_hint: s.strength for s in extract_signals(instance, out, date_tolerance_days=60)}
    assert lax["2.1"] is Strength.ABSENT


def test_signal_invariants_enforced():
    with pytest.raises(ValueError):
        Signal("1.1", Strength.STRONG, ())
    with pytest.raises(ValueError):
        Signal("1.1", Strength.ABSENT, (("a", "b", "c"),))
