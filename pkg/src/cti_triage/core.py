"""Shared domain types and the seed failure-mode catalog.

Everything here is an immutable value object; instances can be shared across
concurrent tasks without coordination. The seed catalog ships as a versioned
UTF-8 data file (one record per mode) and is loaded at import of the caller,
never mutated.
"""

from __future__ import annotations

import datetime
import enum
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Optional


class CtiStage(enum.Enum):
    """The four stages of the threat-intelligence pipeline."""

    CONTEXTUALIZATION = "contextualization"
    ATTRIBUTION = "attribution"
    PREDICTION = "prediction"
    MITIGATION = "mitigation"


class MetricKind(enum.Enum):
    F1 = "f1"
    ACCURACY = "accuracy"
    BLEU = "bleu"
    AUC = "auc"
    NDCG = "ndcg"


class VulnerabilityCategory(enum.Enum):
    SPURIOUS_CORRELATION = "spurious_correlation"
    CONTRADICTORY_KNOWLEDGE = "contradictory_knowledge"
    CONSTRAINED_GENERALIZATION = "constrained_generalization"
    # Reserved for human-proposed categories; their modes carry prefix >= 4.
    EMERGENT = "emergent"


class Verdict(enum.Enum):
    FAILED = "failed"
    CORRECT = "correct"
    BOUNDARY = "boundary"


CATEGORY_BY_PREFIX = {
    "1": VulnerabilityCategory.SPURIOUS_CORRELATION,
    "2": VulnerabilityCategory.CONTRADICTORY_KNOWLEDGE,
    "3": VulnerabilityCategory.CONSTRAINED_GENERALIZATION,
}

# Catalog namespace: single-digit major.minor with major reserved to the three
# seeded categories. Human-proposed modes use prefix >= 4 (see FailureMode).
_CATALOG_MODE_ID_RE = re.compile(r"^[1-3]\.[0-9]$")
_ANY_MODE_ID_RE = re.compile(r"^[0-9]+\.[0-9]+$")


def validate_mode_id(mode_id: str) -> bool:
    """True iff ``mode_id`` belongs to the seeded catalog namespace (1.x-3.x)."""
    return bool(_CATALOG_MODE_ID_RE.match(mode_id))


def is_mode_id(text: str) -> bool:
    """True iff ``text`` is shaped like any taxonomy mode id (digits.digits)."""
    return bool(_ANY_MODE_ID_RE.match(text))


def parse_iso_date(text: str) -> datetime.date:
    """Strict ISO-8601 calendar date. Timestamps and compact forms rejected."""
    if not isinstance(text, str) or not re.match(r"^\d{4}-\d{2}-\d{2}$", text):
        raise ValueError(f"not an ISO-8601 calendar date: {text!r}")
    return datetime.date.fromisoformat(text)


@dataclass(frozen=True)
class CtiTask:
    """One evaluation task. (name, stage) is unique within a registry."""

    name: str
    stage: CtiStage
    metric_kind: MetricKind


@dataclass(frozen=True)
class ReferenceMaterial:
    """Ground-truth material attached to an instance.

    ``relations`` / ``time_anchors`` / ``scope`` / ``taxonomy_version_tags``
    use None to mean "reference is silent on this" as opposed to an empty
    statement (the distinction matters to the advisory signal rules).
    """

    gold_label: Optional[str] = None
    reference_texts: tuple[str, ...] = ()
    relations: Optional[tuple[tuple[str, str, str], ...]] = None
    time_anchors: Optional[Mapping[str, str]] = None
    scope: Optional[tuple[str, ...]] = None
    taxonomy_version_tags: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.gold_label is None and not self.reference_texts:
            raise ValueError("reference needs a gold label or reference texts")


@dataclass(frozen=True)
class InputPayload:
    """What the evaluated model sees: text blocks plus structured extras."""

    text_blocks: tuple[str, ...] = ()
    iocs: tuple[str, ...] = ()
    cve_ids: tuple[str, ...] = ()
    time_anchors: Mapping[str, str] = field(default_factory=dict)
    extra: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class ThreatInstance:
    """One standardized CTI scenario."""

    id: str
    task: CtiTask
    input_payload: InputPayload
    reference: ReferenceMaterial
    source: str
    snapshot_date: str

    def __post_init__(self):
        parse_iso_date(self.snapshot_date)


@dataclass(frozen=True)
class FailureMode:
    """A named vulnerability subtype, addressed as ``<category>.<minor>``.

    ``detection`` records whether a deterministic advisory signal rule exists
    for the mode ("signal") or whether detection is delegated to agents and
    human annotators ("agent_or_human").
    """

    mode_id: str
    name: str
    category: VulnerabilityCategory
    description: str
    applicable_stages: frozenset[CtiStage]
    detection: str = "agent_or_human"

    def __post_init__(self):
        if not _ANY_MODE_ID_RE.match(self.mode_id):
            raise ValueError(f"bad mode id: {self.mode_id!r}")
        prefix = self.mode_id.split(".", 1)[0]
        expected = CATEGORY_BY_PREFIX.get(prefix)
        if expected is not None:
            if self.category is not expected:
                raise ValueError(
                    f"mode {self.mode_id} must carry category {expected.value}"
                )
        elif self.category is not VulnerabilityCategory.EMERGENT:
            raise ValueError(
                f"mode {self.mode_id}: prefixes >= 4 are reserved for emergent categories"
            )
        if self.detection not in ("signal", "agent_or_human"):
            raise ValueError(f"bad detection kind: {self.detection!r}")


@dataclass(frozen=True)
class Taxonomy:
    """A versioned catalog of failure modes. Growth across versions is monotone."""

    version: int
    modes: tuple[FailureMode, ...]
    parent_version: Optional[int] = None

    def __post_init__(self):
        if self.version < 0:
            raise ValueError("taxonomy version must be non-negative")
        ids = [m.mode_id for m in self.modes]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate mode ids in taxonomy")
        object.__setattr__(
            self, "modes", tuple(sorted(self.modes, key=lambda m: _mode_sort_key(m.mode_id)))
        )

    def mode_ids(self) -> frozenset[str]:
        return frozenset(m.mode_id for m in self.modes)

    def get(self, mode_id: str) -> Optional[FailureMode]:
        for mode in self.modes:
            if mode.mode_id == mode_id:
                return mode
        return None

    def extended(self, new_modes: tuple[FailureMode, ...]) -> "Taxonomy":
        """Next version containing every current mode plus ``new_modes``."""
        for mode in new_modes:
            existing = self.get(mode.mode_id)
            if existing is not None and existing.name != mode.name:
                raise ValueError(
                    f"mode id {mode.mode_id} already names {existing.name!r}"
                )
        merged = {m.mode_id: m for m in self.modes}
        merged.update({m.mode_id: m for m in new_modes})
        return Taxonomy(
            version=self.version + 1,
            modes=tuple(merged.values()),
            parent_version=self.version,
        )


def _mode_sort_key(mode_id: str) -> tuple[int, int]:
    major, minor = mode_id.split(".", 1)
    return int(major), int(minor)


def _load_data_lines(name: str) -> list[dict]:
    text = resources.files("cti_triage.data").joinpath(name).read_text("utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def seed_catalog() -> Taxonomy:
    """Version-0 taxonomy: the 15 seeded failure modes from the data file."""
    modes = []
    for rec in _load_data_lines("seed_catalog.jsonl"):
        modes.append(
            FailureMode(
                mode_id=rec["mode_id"],
                name=rec["name"],
                category=VulnerabilityCategory(rec["category"]),
                description=rec["description"],
                applicable_stages=frozenset(CtiStage(s) for s in rec["stages"]),
                detection=rec["detection"],
            )
        )
    return Taxonomy(version=0, modes=tuple(modes))


def task_registry() -> dict[str, CtiTask]:
    """All known tasks keyed by name, from the task registry data file."""
    tasks = {}
    for rec in _load_data_lines("task_registry.jsonl"):
        task = CtiTask(
            name=rec["name"],
            stage=CtiStage(rec["stage"]),
            metric_kind=MetricKind(rec["metric"]),
        )
        if task.name in tasks:
            raise ValueError(f"duplicate task name in registry: {task.name}")
        tasks[task.name] = task
    return tasks


def task_profiles() -> dict[str, str]:
    """Task name -> output-profile key used by the output contract."""
    return {rec["name"]: rec["profile"] for rec in _load_data_lines("task_registry.jsonl")}
