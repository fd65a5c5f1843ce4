"""Deterministic advisory signals comparing a parsed output with its reference.

Each registered rule inspects one structured facet of the disagreement
between the model's answer and the reference material and emits a Signal
hinting at one failure mode. Signals feed classification prompts and the
annotation view; nothing in the pipeline assigns a final label from them.

Modes whose determination needs cross-source corpora or knowledge of the
training distribution have no rule here; the catalog marks them
detection="agent_or_human" and leaves them to agents and annotators.
"""

from __future__ import annotations

import datetime
import enum
import re
from dataclasses import dataclass
from typing import Callable, Optional

from .contract import ContractOutput
from .core import ThreatInstance

DEFAULT_DATE_TOLERANCE_DAYS = 31

_TECHNIQUE_RE = re.compile(r"\bT\d{4}(?:\.\d{3})?\b")
_STANDARD_TAG_RE = re.compile(r"\bCVSS[:\s]?v?(\d(?:\.\d)?)\b", re.IGNORECASE)
_PARTIAL_DATE_RE = re.compile(r"^(\d{4})(?:-(\d{2}))?(?:-(\d{2}))?$")


class Strength(enum.Enum):
    ABSENT = "absent"
    WEAK = "weak"
    STRONG = "strong"


@dataclass(frozen=True)
class Signal:
    mode_hint: str
    strength: Strength
    evidence: tuple[tuple[str, str, str], ...] = ()

    def __post_init__(self):
        if self.strength is Strength.STRONG and not self.evidence:
            raise ValueError("Strong signals need at least one evidence pair")
        if self.strength is Strength.ABSENT and self.evidence:
            raise ValueError("Absent signals carry no evidence")


def extract_signals(
    instance: ThreatInstance,
    out: ContractOutput,
    date_tolerance_days: int = DEFAULT_DATE_TOLERANCE_DAYS,
) -> list[Signal]:
    """One Signal per registered rule, in mode-id order. Pure function of
    (instance, out); rules lacking their reference fields emit Absent."""
    signals = []
    for mode_hint, rule in _RULES:
        signals.append(rule(instance, out, mode_hint, date_tolerance_days))
    return signals


# ---------------------------------------------------------------------------
# Rules.
# ---------------------------------------------------------------------------


def _rule_unsupported_relation(instance, out, mode_hint, _tol) -> Signal:
    """Output asserts a relation the reference does not state."""
    reference = instance.reference.relations
    if reference is None:
        return Signal(mode_hint, Strength.ABSENT)
    claimed = _claimed_relations(out.answer)
    if not claimed:
        return Signal(mode_hint, Strength.ABSENT)
    stated = {tuple(_fold(part) for part in triple) for triple in reference}
    evidence = []
    for triple in claimed:
        if tuple(_fold(part) for part in triple) not in stated:
            evidence.append(
                (" -> ".join(triple), _render_relations(reference), "relation not stated by reference")
            )
    if evidence:
        return Signal(mode_hint, Strength.STRONG, tuple(evidence[:5]))
    return Signal(mode_hint, Strength.ABSENT)


def _rule_legacy_ioc(instance, out, mode_hint, _tol) -> Signal:
    """Output cites indicators the reference marks as legacy."""
    reference = instance.reference.relations
    if reference is None:
        return Signal(mode_hint, Strength.ABSENT)
    legacy = {
        _fold(entity) for entity, relation, status in reference
        if relation == "ioc_status" and status == "legacy"
    }
    if not legacy:
        return Signal(mode_hint, Strength.ABSENT)
    evidence = []
    for ioc in _cited_iocs(out):
        if _fold(ioc) in legacy:
            evidence.append((ioc, "marked legacy by reference", "recycled indicator cited as current"))
    if evidence:
        return Signal(mode_hint, Strength.STRONG, tuple(evidence[:5]))
    return Signal(mode_hint, Strength.ABSENT)


def _rule_granularity(instance, out, mode_hint, _tol) -> Signal:
    """Output technique id is a strict ancestor of the reference id."""
    reference_ids = _reference_technique_ids(instance)
    if not reference_ids:
        return Signal(mode_hint, Strength.ABSENT)
    output_ids = set(_TECHNIQUE_RE.findall(_flatten_text(out.answer)))
    evidence = []
    for out_id in sorted(output_ids):
        for ref_id in sorted(reference_ids):
            if _is_strict_ancestor(out_id, ref_id) and ref_id not in output_ids:
                evidence.append((out_id, ref_id, "reported coarser than the reference hierarchy"))
    if evidence:
        return Signal(mode_hint, Strength.STRONG, tuple(evidence[:5]))
    return Signal(mode_hint, Strength.ABSENT)


def _rule_temporal(instance, out, mode_hint, tolerance_days) -> Signal:
    """Output event dates disagree with the reference time anchors.

    Partial dates (year or year-month) compare by their midpoint; mismatches
    within twice the tolerance grade Weak, beyond that Strong. The tolerance
    absorbs ordinary advisory publication lag.
    """
    anchors = instance.reference.time_anchors
    if anchors is None:
        return Signal(mode_hint, Strength.ABSENT)
    claims = _claimed_dates(out.answer)
    evidence = []
    weak_evidence = []
    for event, claimed_text in sorted(claims.items()):
        anchor_text = _lookup_fold(anchors, event)
        if anchor_text is None:
            continue
        claimed = _parse_partial_date(claimed_text)
        anchor = _parse_partial_date(anchor_text)
        if claimed is None or anchor is None:
            continue
        drift = abs((claimed - anchor).days)
        pair = (f"{event}: {claimed_text}", f"{event}: {anchor_text}", f"{drift} days apart")
        if drift > 2 * tolerance_days:
            evidence.append(pair)
        elif drift > tolerance_days:
            weak_evidence.append(pair)
    if evidence:
        return Signal(mode_hint, Strength.STRONG, tuple(evidence[:5]))
    if weak_evidence:
        return Signal(mode_hint, Strength.WEAK, tuple(weak_evidence[:5]))
    return Signal(mode_hint, Strength.ABSENT)


def _rule_standards(instance, out, mode_hint, _tol) -> Signal:
    """Output cites a scoring-framework version the reference does not use."""
    reference_tags = instance.reference.taxonomy_version_tags
    if reference_tags is None:
        return Signal(mode_hint, Strength.ABSENT)
    reference_set = {_normalize_standard(t) for t in reference_tags}
    reference_set.discard(None)
    if not reference_set:
        return Signal(mode_hint, Strength.ABSENT)
    evidence = []
    for raw in sorted(_output_standard_tags(out.answer)):
        tag = _normalize_standard(raw)
        if tag is not None and tag not in reference_set:
            evidence.append((raw, ", ".join(sorted(reference_set)), "scoring framework version differs"))
    if evidence:
        return Signal(mode_hint, Strength.STRONG, tuple(evidence[:5]))
    return Signal(mode_hint, Strength.ABSENT)


def _rule_scope(instance, out, mode_hint, _tol) -> Signal:
    """Output claims platforms or sectors outside the reference scope."""
    scope = instance.reference.scope
    if scope is None:
        return Signal(mode_hint, Strength.ABSENT)
    allowed = {_fold(s) for s in scope}
    evidence = []
    for item in sorted(_output_scope(out.answer)):
        if _fold(item) not in allowed:
            evidence.append((item, ", ".join(scope), "outside the stated scope"))
    if evidence:
        return Signal(mode_hint, Strength.STRONG, tuple(evidence[:5]))
    return Signal(mode_hint, Strength.ABSENT)


# The granularity comparator backs both the taxonomy-structure mode (1.5)
# and the structure-fusion mode (2.4); each keeps its own catalog entry.
_RULES: list[tuple[str, Callable]] = [
    ("1.1", _rule_unsupported_relation),
    ("1.2", _rule_legacy_ioc),
    ("1.5", _rule_granularity),
    ("2.1", _rule_temporal),
    ("2.4", _rule_granularity),
    ("2.5", _rule_standards),
    ("3.4", _rule_scope),
]

RULE_MODE_IDS = tuple(mode for mode, _ in _RULES)


# ---------------------------------------------------------------------------
# Extraction helpers (answer side).
# ---------------------------------------------------------------------------


def _fold(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip()).casefold()


def _lookup_fold(mapping, key: str) -> Optional[str]:
    folded = {_fold(k): v for k, v in mapping.items()}
    return folded.get(_fold(key))


def _flatten_text(value) -> str:
    parts = []

    def walk(node):
        if isinstance(node, str):
            parts.append(node)
        elif isinstance(node, dict):
            for key in sorted(node):
                parts.append(str(key))
                walk(node[key])
        elif isinstance(node, list):
            for item in node:
                walk(item)

    walk(value)
    return " ".join(parts)


def _claimed_relations(answer: dict) -> list[tuple[str, str, str]]:
    claims = []
    graph = answer.get("relation_graph")
    if isinstance(graph, dict):
        for triple in graph.get("relations", []):
            if isinstance(triple, list) and len(triple) == 3:
                claims.append(tuple(triple))
    actors = answer.get("actor_linking")
    if isinstance(actors, dict):
        top = None
        best = -1.0
        for cand in actors.get("actor_candidates", []):
            if isinstance(cand, dict) and isinstance(cand.get("score"), (int, float)):
                if cand["score"] > best and isinstance(cand.get("name"), str):
                    top, best = cand["name"], cand["score"]
        if top is not None:
            for ttp in actors.get("shared_ttps", []):
                if isinstance(ttp, str):
                    claims.append((top, "uses", ttp))
    return claims


def _render_relations(relations) -> str:
    return "; ".join(" -> ".join(triple) for triple in relations) or "(none)"


def _cited_iocs(out: ContractOutput) -> list[str]:
    cited = []
    for entry in out.answer.get("ioc_normalization", []) or []:
        if isinstance(entry, dict) and isinstance(entry.get("value"), str):
            cited.append(entry["value"])
    rule = out.answer.get("rule_generation")
    if isinstance(rule, dict):
        for ioc in rule.get("test_iocs", []) or []:
            if isinstance(ioc, str):
                cited.append(ioc)
    cited.extend(out.evidence_refs)
    return cited


def _reference_technique_ids(instance: ThreatInstance) -> set[str]:
    ids = set()
    if instance.reference.gold_label:
        ids.update(_TECHNIQUE_RE.findall(instance.reference.gold_label))
    for text in instance.reference.reference_texts:
        ids.update(_TECHNIQUE_RE.findall(text))
    for triple in instance.reference.relations or ():
        for part in triple:
            ids.update(_TECHNIQUE_RE.findall(part))
    return ids


def _is_strict_ancestor(ancestor: str, descendant: str) -> bool:
    return ancestor != descendant and descendant.startswith(ancestor + ".")


def _claimed_dates(answer: dict) -> dict[str, str]:
    claims: dict[str, str] = {}
    timeline = answer.get("event_timeline")
    if isinstance(timeline, list):
        for entry in timeline:
            if isinstance(entry, dict) and isinstance(entry.get("type"), str):
                t = entry.get("t")
                if isinstance(t, str):
                    claims[entry["type"]] = t
    time_claims = answer.get("time_claims")
    if isinstance(time_claims, dict):
        for event, date_text in time_claims.items():
            if isinstance(event, str) and isinstance(date_text, str):
                claims[event] = date_text
    return claims


def _parse_partial_date(text: str) -> Optional[datetime.date]:
    match = _PARTIAL_DATE_RE.match(text.strip())
    if not match:
        return None
    year, month, day = match.groups()
    try:
        if day is not None:
            return datetime.date(int(year), int(month), int(day))
        if month is not None:
            return datetime.date(int(year), int(month), 15)
        return datetime.date(int(year), 7, 1)
    except ValueError:
        return None


def _output_standard_tags(answer: dict) -> set[str]:
    tags = set()
    for match in _STANDARD_TAG_RE.finditer(_flatten_text(answer)):
        tags.add(match.group(0))
    return tags


def _normalize_standard(raw: str) -> Optional[str]:
    match = _STANDARD_TAG_RE.search(raw)
    if match is None:
        return None
    return f"CVSS{match.group(1)}"


def _output_scope(answer: dict) -> list[str]:
    scope = []
    for entry in answer.get("target_sector", []) or []:
        if isinstance(entry, dict) and isinstance(entry.get("name"), str):
            scope.append(entry["name"])
    patches = answer.get("patch_recommendation")
    if isinstance(patches, dict):
        for asset in patches.get("affected_assets", []) or []:
            if isinstance(asset, str):
                scope.append(asset)
    extra = answer.get("scope")
    if isinstance(extra, list):
        scope.extend(s for s in extra if isinstance(s, str))
    return scope
