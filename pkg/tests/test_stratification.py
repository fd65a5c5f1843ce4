from __future__ import annotations

import random

import pytest

from cti_triage.core import Verdict
from cti_triage.stratification import (
    BudgetExhausted,
    StratificationError,
    anchor_candidates,
    append_mode_ratios,
    assign_verdicts,
    build_strata,
    check_termination,
    init_state,
    record_anchor,
    resolve_boundary,
)

from conftest import make_scores


def test_hundred_instances_twenty_strata_of_five():
    strata = build_strata(make_scores([i / 100 for i in range(100)]), delta=0.05)
    assert len(strata) == 20
    assert all(len(s.member_ids) == 5 for s in strata)


def test_seven_instances_two_strata_pigeonhole():
    strata = build_strata(make_scores([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]), delta=0.5)
    assert [len(s.member_ids) for s in strata] == [4, 3]


def test_equal_scores_still_split_by_id():
    strata = build_strata(make_scores([0.5] * 10), delta=0.5)
    assert [len(s.member_ids) for s in strata] == [5, 5]
    # Ties split by id order across the bin edge.
    assert strata[0].member_ids == ("i00000", "i00001", "i00002", "i00003", "i00004")
    assert strata[1].member_ids[0] == "i00005"


def test_non_integral_inverse_delta_rejected():
    with pytest.raises(StratificationError):
        build_strata(make_scores([0.1, 0.2]), delta=0.07)


def test_delta_bounds_rejected():
    for delta in (0.0, -0.1, 0.6):
        with pytest.raises(StratificationError):
            build_strata(make_scores([0.1]), delta=delta)


def test_empty_input_rejected():
    with pytest.raises(StratificationError):
        build_strata([], delta=0.5)


def test_partition_and_monotone_bins_on_random_input():
    rng = random.Random(5)
    scores = make_scores([rng.random() for _ in range(237)])
    strata = build_strata(scores, delta=0.05)
    seen: list[str] = []
    for stratum in strata:
        seen.extend(stratum.member_ids)
    assert sorted(seen) == sorted(s.instance_id for s in scores)
    assert len(seen) == len(set(seen))
    for left, right in zip(strata, strata[1:]):
        if left.score_range and right.score_range:
            assert left.score_range[1] <= right.score_range[0] + 1e-12
    sizes = [len(s.member_ids) for s in strata]
    assert max(sizes) - min(sizes) <= 1


def test_record_anchor_singleton_then_hull():
    state = init_state(make_scores([0.12, 0.30, 0.95]), delta=0.5, budget_cap=1.0)
    state = record_anchor(state, "i00000", Verdict.FAILED)
    assert state.anchors.failed_range == (0.12, 0.12)
    state = record_anchor(state, "i00001", Verdict.FAILED)
    assert state.anchors.failed_range == (0.12, 0.30)
    assert state.inspected_count == 2


def test_record_anchor_rejects_boundary_and_unscored():
    state = init_state(make_scores([0.1, 0.9]), delta=0.5, budget_cap=1.0)
    with pytest.raises(StratificationError):
        record_anchor(state, "i00000", Verdict.BOUNDARY)
    with pytest.raises(StratificationError):
        record_anchor(state, "nope", Verdict.FAILED)


def test_budget_enforced_on_anchors_and_boundaries():
    state = init_state(make_scores([i / 10 for i in range(10)]), delta=0.5, budget_cap=0.2)
    assert state.budget_limit == 2
    state = record_anchor(state, "i00000", Verdict.FAILED)
    state = record_anchor(state, "i00009", Verdict.CORRECT)
    with pytest.raises(BudgetExhausted):
        record_anchor(state, "i00001", Verdict.FAILED)
    with pytest.raises(BudgetExhausted):
        resolve_boundary(state, "i00005", Verdict.FAILED)


def test_assign_verdicts_disjoint_overlap_and_outside():
    scores = make_scores([0.1, 0.45, 0.55, 0.7, 0.0, 1.0])
    state = init_state(scores, delta=0.5, budget_cap=1.0)
    # failed hull [0, 0.5), correct hull [0.4, 1.0] via anchors:
    state = record_anchor(state, "i00004", Verdict.FAILED)  # 0.0
    state = record_anchor(state, "i00001", Verdict.FAILED)  # 0.45
    state = record_anchor(state, "i00005", Verdict.CORRECT)  # 1.0
    state = record_anchor(state, "i00003", Verdict.CORRECT)  # 0.7
    verdicts = assign_verdicts(state)
    assert verdicts["i00000"] is Verdict.FAILED  # 0.1 in failed only
    assert verdicts["i00002"] is Verdict.BOUNDARY  # 0.55 outside both hulls
    # Anchors keep their human verdicts.
    assert verdicts["i00001"] is Verdict.FAILED
    assert verdicts["i00003"] is Verdict.CORRECT


def test_assign_verdicts_overlapping_region_is_boundary():
    scores = make_scores([0.0, 0.5, 0.45, 0.4, 1.0])
    state = init_state(scores, delta=0.5, budget_cap=1.0)
    state = record_anchor(state, "i00000", Verdict.FAILED)  # 0.0
    state = record_anchor(state, "i00001", Verdict.FAILED)  # 0.5
    state = record_anchor(state, "i00003", Verdict.CORRECT)  # 0.4
    state = record_anchor(state, "i00004", Verdict.CORRECT)  # 1.0
    verdicts = assign_verdicts(state)
    # 0.45 sits in the hull intersection [0.4, 0.5].
    assert verdicts["i00002"] is Verdict.BOUNDARY


def test_assign_verdicts_requires_both_ranges():
    state = init_state(make_scores([0.1, 0.9]), delta=0.5, budget_cap=1.0)
    state = record_anchor(state, "i00000", Verdict.FAILED)
    with pytest.raises(StratificationError):
        assign_verdicts(state)


def test_boundary_resolution_overrides_range_rule():
    scores = make_scores([0.0, 0.5, 1.0, 0.9])
    state = init_state(scores, delta=0.5, budget_cap=1.0)
    state = record_anchor(state, "i00000", Verdict.FAILED)
    state = record_anchor(state, "i00002", Verdict.CORRECT)
    state = record_anchor(state, "i00003", Verdict.CORRECT)
    assert assign_verdicts(state)["i00001"] is Verdict.BOUNDARY
    state = resolve_boundary(state, "i00001", Verdict.FAILED)
    assert assign_verdicts(state)["i00001"] is Verdict.FAILED


def test_verdict_determinism():
    scores = make_scores([0.0, 0.2, 0.5, 0.8, 1.0])
    state = init_state(scores, delta=0.5, budget_cap=1.0)
    state = record_anchor(state, "i00000", Verdict.FAILED)
    state = record_anchor(state, "i00004", Verdict.CORRECT)
    assert assign_verdicts(state) == assign_verdicts(state)


def test_anchor_candidates_extremes_first():
    scores = make_scores([i / 100 for i in range(100)])
    state = init_state(scores, delta=0.05, budget_cap=1.0)
    candidates = anchor_candidates(state)
    # Stratum 0's two lowest and two highest members come first, then
    # stratum 19's, then inward.
    assert candidates[:4] == ["i00000", "i00001", "i00003", "i00004"]
    assert candidates[4:8] == ["i00095", "i00096", "i00098", "i00099"]


def test_check_termination_rules():
    state = init_state(make_scores([0.1, 0.9]), delta=0.5, budget_cap=1.0)
    with pytest.raises(StratificationError):
        check_termination(state, 0.02)

    h1 = {"1.1": 0.5, "2.1": 0.5}
    stable = append_mode_ratios(append_mode_ratios(state, h1), dict(h1))
    assert check_termination(stable, 0.02) is True

    new_mode = append_mode_ratios(
        append_mode_ratios(state, h1), {"1.1": 0.5, "2.1": 0.3, "3.4": 0.2}
    )
    assert check_termination(new_mode, 0.02) is False

    drifted = append_mode_ratios(
        append_mode_ratios(state, h1), {"1.1": 0.55, "2.1": 0.45}
    )
    assert check_termination(drifted, 0.02) is False
    assert check_termination(drifted, 0.06) is True
