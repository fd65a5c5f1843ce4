"""Quantile stratification of scored instances and verdict assignment.

Instances are ranked by similarity score and cut into balanced rank bins.
Humans anchor a small sample with Failed/Correct verdicts; the min-max hull
of each anchor group then classifies everything else. Scores landing in the
hull overlap, or outside both hulls, stay Boundary and go back to humans.
A hard budget caps the manually inspected fraction.

State transitions are functional (each operation returns a new state) so
snapshots can be shared across threads without locking; the pipeline owns
the single mutation sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

from .core import Verdict
from .metrics import SimilarityScore

DEFAULT_DELTA = 0.05
DEFAULT_BUDGET_CAP = 0.03
DEFAULT_EPSILON_DIST = 0.02

# Anchor sampling policy: per selected stratum take this many members from
# each end, selecting strata from the distribution extremes inward.
ANCHORS_PER_END = 2


class StratificationError(Exception):
    pass


class BudgetExhausted(StratificationError):
    """The manual-inspection budget would be exceeded."""


@dataclass(frozen=True)
class Stratum:
    index: int
    score_range: Optional[tuple[float, float]]
    member_ids: tuple[str, ...]


@dataclass(frozen=True)
class AnchorRanges:
    failed_range: Optional[tuple[float, float]] = None
    correct_range: Optional[tuple[float, float]] = None
    anchors: tuple[tuple[str, Verdict], ...] = ()

    def overlap(self) -> Optional[tuple[float, float]]:
        if self.failed_range is None or self.correct_range is None:
            return None
        low = max(self.failed_range[0], self.correct_range[0])
        high = min(self.failed_range[1], self.correct_range[1])
        return (low, high) if low <= high else None


@dataclass(frozen=True)
class StratificationState:
    strata: tuple[Stratum, ...]
    scores: Mapping[str, float]
    anchors: AnchorRanges = AnchorRanges()
    boundary_resolutions: Mapping[str, Verdict] = field(default_factory=dict)
    inspected_count: int = 0
    budget_cap: float = DEFAULT_BUDGET_CAP
    mode_ratio_history: tuple[Mapping[str, float], ...] = ()

    @property
    def total(self) -> int:
        return len(self.scores)

    @property
    def budget_limit(self) -> int:
        return math.floor(self.budget_cap * self.total)

    def remaining_budget(self) -> int:
        return self.budget_limit - self.inspected_count


def build_strata(scored: Sequence[SimilarityScore], delta: float = DEFAULT_DELTA) -> tuple[Stratum, ...]:
    """Balanced contiguous rank bins over the stable (score, id) order."""
    n_bins = _bin_count(delta)
    if not scored:
        raise StratificationError("no scored instances to stratify")
    ids = {s.instance_id for s in scored}
    if len(ids) != len(scored):
        raise StratificationError("duplicate instance ids in scored input")

    ordered = sorted(scored, key=lambda s: (s.value, s.instance_id))
    n = len(ordered)
    base, extra = divmod(n, n_bins)
    strata = []
    cursor = 0
    for index in range(n_bins):
        size = base + (1 if index < extra else 0)
        members = ordered[cursor : cursor + size]
        cursor += size
        strata.append(
            Stratum(
                index=index,
                score_range=(members[0].value, members[-1].value) if members else None,
                member_ids=tuple(m.instance_id for m in members),
            )
        )
    return tuple(strata)


def _bin_count(delta: float) -> int:
    if not 0.0 < delta <= 0.5:
        raise StratificationError(f"delta must be in (0, 0.5], got {delta}")
    n_bins = round(1.0 / delta)
    if abs(1.0 / delta - n_bins) > 1e-9:
        raise StratificationError(f"1/delta must be integral, got delta={delta}")
    return n_bins


def init_state(
    scored: Sequence[SimilarityScore],
    delta: float = DEFAULT_DELTA,
    budget_cap: float = DEFAULT_BUDGET_CAP,
) -> StratificationState:
    strata = build_strata(scored, delta)
    return StratificationState(
        strata=strata,
        scores={s.instance_id: s.value for s in scored},
        budget_cap=budget_cap,
    )


def anchor_candidates(state: StratificationState) -> list[str]:
    """Ids to anchor next: extremes-first strata, ends-first members.

    Yields candidates stratum by stratum (lowest stratum, then highest, then
    inward), taking ANCHORS_PER_END from each end of every selected stratum.
    """
    order = []
    lo, hi = 0, len(state.strata) - 1
    while lo <= hi:
        order.append(lo)
        if hi != lo:
            order.append(hi)
        lo += 1
        hi -= 1
    candidates: list[str] = []
    for index in order:
        members = state.strata[index].member_ids
        ends = list(members[:ANCHORS_PER_END]) + [
            m for m in members[-ANCHORS_PER_END:] if m not in members[:ANCHORS_PER_END]
        ]
        candidates.extend(ends)
    return candidates


def record_anchor(
    state: StratificationState, instance_id: str, verdict: Verdict
) -> StratificationState:
    """Fold one human anchor verdict into the state, extending its hull."""
    if verdict is Verdict.BOUNDARY:
        raise StratificationError("Boundary is not a legal anchor verdict")
    if instance_id not in state.scores:
        raise StratificationError(f"no score recorded for {instance_id!r}")
    if state.inspected_count + 1 > state.budget_limit:
        raise BudgetExhausted(
            f"inspection budget {state.budget_limit} would be exceeded"
        )
    score = state.scores[instance_id]
    anchors = state.anchors
    if verdict is Verdict.FAILED:
        anchors = replace(
            anchors,
            failed_range=_extend(anchors.failed_range, score),
            anchors=anchors.anchors + ((instance_id, verdict),),
        )
    else:
        anchors = replace(
            anchors,
            correct_range=_extend(anchors.correct_range, score),
            anchors=anchors.anchors + ((instance_id, verdict),),
        )
    return replace(state, anchors=anchors, inspected_count=state.inspected_count + 1)


def resolve_boundary(
    state: StratificationState, instance_id: str, verdict: Verdict
) -> StratificationState:
    """Fold a human verdict for a boundary instance without extending hulls."""
    if verdict is Verdict.BOUNDARY:
        raise StratificationError("humans must decide Failed or Correct")
    if instance_id not in state.scores:
        raise StratificationError(f"no score recorded for {instance_id!r}")
    if state.inspected_count + 1 > state.budget_limit:
        raise BudgetExhausted(
            f"inspection budget {state.budget_limit} would be exceeded"
        )
    resolutions = dict(state.boundary_resolutions)
    resolutions[instance_id] = verdict
    return replace(
        state,
        boundary_resolutions=resolutions,
        inspected_count=state.inspected_count + 1,
    )


def _extend(bounds: Optional[tuple[float, float]], score: float) -> tuple[float, float]:
    if bounds is None:
        return (score, score)
    return (min(bounds[0], score), max(bounds[1], score))


def assign_verdicts(state: StratificationState) -> dict[str, Verdict]:
    """Verdict for every scored instance.

    Human truth first (anchors, resolved boundaries), then range rules: a
    score in exactly one hull takes that hull's verdict; scores in the hull
    intersection or outside both hulls stay Boundary for manual inspection.
    """
    failed = state.anchors.failed_range
    correct = state.anchors.correct_range
    if failed is None or correct is None:
        raise StratificationError("both anchor ranges are required before assignment")

    human: dict[str, Verdict] = dict(state.boundary_resolutions)
    for instance_id, verdict in state.anchors.anchors:
        human[instance_id] = verdict

    verdicts: dict[str, Verdict] = {}
    for instance_id, score in state.scores.items():
        if instance_id in human:
            verdicts[instance_id] = human[instance_id]
            continue
        in_failed = failed[0] <= score <= failed[1]
        in_correct = correct[0] <= score <= correct[1]
        if in_failed and not in_correct:
            verdicts[instance_id] = Verdict.FAILED
        elif in_correct and not in_failed:
            verdicts[instance_id] = Verdict.CORRECT
        else:
            verdicts[instance_id] = Verdict.BOUNDARY
    return verdicts


def append_mode_ratios(
    state: StratificationState, histogram: Mapping[str, float]
) -> StratificationState:
    return replace(state, mode_ratio_history=state.mode_ratio_history + (dict(histogram),))


def check_termination(state: StratificationState, epsilon_dist: float = DEFAULT_EPSILON_DIST) -> bool:
    """True iff the last batch introduced no new mode and ratios drifted less
    than ``epsilon_dist`` in L-infinity distance."""
    history = state.mode_ratio_history
    if len(history) < 2:
        raise StratificationError("termination check needs at least two ratio batches")
    previous, latest = history[-2], history[-1]
    new_modes = [m for m, ratio in latest.items() if ratio > 0 and m not in previous]
    if new_modes:
        return False
    drift = max(
        abs(latest.get(mode, 0.0) - previous.get(mode, 0.0))
        for mode in set(previous) | set(latest)
    )
    return drift < epsilon_dist
