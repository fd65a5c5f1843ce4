"""Adapters from external benchmark records to standardized ThreatInstances.

Adapters are data-driven field mappings plus small per-source normalizers.
Records that cannot be standardized land in the rejects list with a reason;
accepted + rejected always equals the input count. The corpus manifest
carries content checksums for reproducibility audits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional

from .core import (
    CtiStage,
    CtiTask,
    InputPayload,
    ReferenceMaterial,
    ThreatInstance,
    task_registry,
)


class IngestionError(Exception):
    pass


class RecordRejected(IngestionError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class IngestResult:
    instances: tuple[ThreatInstance, ...]
    rejects: tuple[tuple[dict, str], ...]
    manifest: dict


# ---------------------------------------------------------------------------
# Instance wire format (shared by the corpus files, the journal payloads, and
# the annotation service).
# ---------------------------------------------------------------------------


def instance_to_record(instance: ThreatInstance) -> dict:
    reference = instance.reference
    return {
        "id": instance.id,
        "task": instance.task.name,
        "source": instance.source,
        "snapshot_date": instance.snapshot_date,
        "input": {
            "text_blocks": list(instance.input_payload.text_blocks),
            "iocs": list(instance.input_payload.iocs),
            "cve_ids": list(instance.input_payload.cve_ids),
            "time_anchors": dict(instance.input_payload.time_anchors),
            "extra": dict(instance.input_payload.extra),
        },
        "reference": {
            "gold_label": reference.gold_label,
            "reference_texts": list(reference.reference_texts),
            "relations": [list(t) for t in reference.relations]
            if reference.relations is not None
            else None,
            "time_anchors": dict(reference.time_anchors)
            if reference.time_anchors is not None
            else None,
            "scope": list(reference.scope) if reference.scope is not None else None,
            "taxonomy_version_tags": list(reference.taxonomy_version_tags)
            if reference.taxonomy_version_tags is not None
            else None,
        },
    }


def instance_from_record(record: dict, registry: Optional[dict[str, CtiTask]] = None) -> ThreatInstance:
    registry = registry if registry is not None else task_registry()
    task_name = record.get("task")
    if task_name not in registry:
        raise RecordRejected(f"unknown task {task_name!r}")
    ref = record.get("reference") or {}
    payload = record.get("input") or {}
    try:
        reference = ReferenceMaterial(
            gold_label=ref.get("gold_label"),
            reference_texts=tuple(ref.get("reference_texts") or ()),
            relations=tuple(tuple(t) for t in ref["relations"])
            if ref.get("relations") is not None
            else None,
            time_anchors=dict(ref["time_anchors"])
            if ref.get("time_anchors") is not None
            else None,
            scope=tuple(ref["scope"]) if ref.get("scope") is not None else None,
            taxonomy_version_tags=tuple(ref["taxonomy_version_tags"])
            if ref.get("taxonomy_version_tags") is not None
            else None,
        )
    except ValueError as exc:
        raise RecordRejected(str(exc))
    try:
        return ThreatInstance(
            id=str(record["id"]),
            task=registry[task_name],
            input_payload=InputPayload(
                text_blocks=tuple(payload.get("text_blocks") or ()),
                iocs=tuple(payload.get("iocs") or ()),
                cve_ids=tuple(payload.get("cve_ids") or ()),
                time_anchors=dict(payload.get("time_anchors") or {}),
                extra=dict(payload.get("extra") or {}),
            ),
            reference=reference,
            source=str(record.get("source", "unknown")),
            snapshot_date=str(record.get("snapshot_date", "")),
        )
    except (KeyError, ValueError) as exc:
        raise RecordRejected(f"bad instance record: {exc}")


# ---------------------------------------------------------------------------
# Adapters.
# ---------------------------------------------------------------------------


def jsonl_adapter(record: dict, registry: dict[str, CtiTask]) -> ThreatInstance:
    """Generic adapter for records already shaped like the wire format."""
    return instance_from_record(record, registry)


_STAGE_DEFAULT_TASK = {
    CtiStage.CONTEXTUALIZATION: "Vulnerability Linking",
    CtiStage.ATTRIBUTION: "Campaign Attribution",
    CtiStage.PREDICTION: "Target Sector Prediction",
    CtiStage.MITIGATION: "Mitigation-TTP Mapping",
}


def mcq_adapter(record: dict, registry: dict[str, CtiTask]) -> ThreatInstance:
    """Rewrite a multi-choice question into a concrete scenario instance.

    The scenario text comes from a per-stage template shipped as data; the
    gold option text becomes the reference gold label.
    """
    try:
        stage = CtiStage(str(record.get("stage", "")).lower())
    except ValueError:
        raise RecordRejected(f"unknown stage {record.get('stage')!r}")
    options = record.get("options")
    if not isinstance(options, list) or len(options) < 2:
        raise RecordRejected("MCQ needs at least two options")
    answer = record.get("answer_index")
    if not isinstance(answer, int) or not 0 <= answer < len(options):
        raise RecordRejected("MCQ answer_index out of range")
    question = record.get("question")
    if not isinstance(question, str) or not question.strip():
        raise RecordRejected("MCQ needs a question")

    template = _mcq_templates()[stage.value]
    scenario = template.format(question=question.strip(), options="; ".join(options))
    task_name = record.get("task") or _STAGE_DEFAULT_TASK[stage]
    if task_name not in registry:
        raise RecordRejected(f"unknown task {task_name!r}")
    gold = options[answer]
    return ThreatInstance(
        id=str(record.get("id", "")),
        task=registry[task_name],
        input_payload=InputPayload(
            text_blocks=(scenario,),
            extra={"options": list(options)},
        ),
        reference=ReferenceMaterial(gold_label=gold, reference_texts=(gold,)),
        source=str(record.get("source", "mcq")),
        snapshot_date=str(record.get("snapshot_date", "")),
    )


def _mcq_templates() -> dict:
    text = resources.files("cti_triage.data").joinpath("mcq_templates.json").read_text("utf-8")
    return json.loads(text)


ADAPTERS: dict[str, Callable[[dict, dict[str, CtiTask]], ThreatInstance]] = {
    "jsonl": jsonl_adapter,
    "mcq": mcq_adapter,
}


def ingest_corpus(path: str, adapter_name: str) -> IngestResult:
    """Standardize every record in a JSONL corpus file.

    Every accepted instance carries a stage, task, and non-empty reference;
    failures are rejected with a reason rather than dropped.
    """
    if adapter_name not in ADAPTERS:
        raise IngestionError(f"unknown adapter {adapter_name!r}")
    adapter = ADAPTERS[adapter_name]
    registry = task_registry()

    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as exc:
        raise IngestionError(f"unreadable corpus {path}: {exc}")

    instances: list[ThreatInstance] = []
    rejects: list[tuple[dict, str]] = []
    seen_ids: set[str] = set()
    count = 0
    for line_no, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        count += 1
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            rejects.append(({"line": line_no}, f"unparseable record: {exc}"))
            continue
        try:
            instance = adapter(record, registry)
            if not instance.id:
                raise RecordRejected("missing id")
            if instance.id in seen_ids:
                raise RecordRejected(f"duplicate id {instance.id}")
        except RecordRejected as exc:
            rejects.append((record, exc.reason))
            continue
        seen_ids.add(instance.id)
        instances.append(instance)

    manifest = {
        "corpus_path": path,
        "corpus_sha256": hashlib.sha256(raw).hexdigest(),
        "adapter": adapter_name,
        "records": count,
        "accepted": len(instances),
        "rejected": len(rejects),
    }
    return IngestResult(
        instances=tuple(instances), rejects=tuple(rejects), manifest=manifest
    )


def write_instances(path: str, instances: tuple[ThreatInstance, ...]):
    with open(path, "w", encoding="utf-8") as handle:
        for instance in instances:
            handle.write(json.dumps(instance_to_record(instance), sort_keys=True) + "\n")


def read_instances(path: str) -> list[ThreatInstance]:
    registry = task_registry()
    instances = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                instances.append(instance_from_record(json.loads(line), registry))
    return instances
