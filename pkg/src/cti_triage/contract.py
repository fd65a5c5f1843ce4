"""Strict parsing and validation of model responses against the output contract.

The contract demands exactly one top-level JSON object and nothing else, with
a fixed envelope (status/task/case_id/snapshot_date/answer/confidence/
justification/evidence_refs/metadata) and a per-task answer profile chosen
from a fixed menu of profile keys.

Parsing raises the first violation encountered, in envelope order; profile
validation returns the full violation list so callers can log everything.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass

from .core import CtiStage, CtiTask, parse_iso_date, task_profiles


class ContractStatus(enum.Enum):
    OK = "OK"
    NEED_MORE_CONTEXT = "NEED_MORE_CONTEXT"
    UNSUPPORTED = "UNSUPPORTED"


class ViolationCode(enum.Enum):
    MULTIPLE_OBJECTS = "MultipleObjects"
    NOT_AN_OBJECT = "NotAnObject"
    MISSING_FIELD = "MissingField"
    INVALID_ENUM = "InvalidEnum"
    CONFIDENCE_OUT_OF_RANGE = "ConfidenceOutOfRange"
    JUSTIFICATION_TOO_LONG = "JustificationTooLong"
    MALFORMED_DATE = "MalformedDate"
    PROFILE_MISMATCH = "ProfileMismatch"


class ContractViolation(Exception):
    """One violation of the output contract, addressed by a document path."""

    def __init__(self, code: ViolationCode, path: str, detail: str):
        super().__init__(f"{code.value} at {path}: {detail}")
        self.code = code
        self.path = path
        self.detail = detail


@dataclass(frozen=True)
class ContractMetadata:
    stage: CtiStage
    assumptions: tuple[str, ...] = ()
    missing_fields: tuple[str, ...] = ()


@dataclass(frozen=True)
class ContractOutput:
    status: ContractStatus
    task: str
    case_id: str
    snapshot_date: str
    answer: dict
    confidence: float
    justification: str
    evidence_refs: tuple[str, ...]
    metadata: ContractMetadata


MAX_JUSTIFICATION_TOKENS = 40

_STAGE_WIRE = {s: s.value.upper() for s in CtiStage}
_STAGE_FROM_WIRE = {v: k for k, v in _STAGE_WIRE.items()}


def justification_tokens(text: str) -> int:
    """Token count for the length cap: maximal non-whitespace runs after trim."""
    return len(text.split())


def parse_output(raw: str) -> ContractOutput:
    """Parse raw model text into a ContractOutput or raise ContractViolation.

    Leading prose means the document is not a single object (NotAnObject);
    any trailing content after the object counts as a second top-level
    element (MultipleObjects).
    """
    doc = _decode_single_object(raw)

    status = _required(doc, "status", str)
    try:
        parsed_status = ContractStatus(status)
    except ValueError:
        raise ContractViolation(
            ViolationCode.INVALID_ENUM, "status", f"unknown status {status!r}"
        )

    task = _required(doc, "task", str)
    case_id = _required(doc, "case_id", str)

    snapshot_date = _required(doc, "snapshot_date", str)
    try:
        parse_iso_date(snapshot_date)
    except ValueError as exc:
        raise ContractViolation(ViolationCode.MALFORMED_DATE, "snapshot_date", str(exc))

    answer = _required(doc, "answer", dict)

    confidence = doc.get("confidence")
    if not _is_number(confidence):
        raise ContractViolation(
            ViolationCode.CONFIDENCE_OUT_OF_RANGE, "confidence", "not a number"
        )
    if not 0.0 <= confidence <= 1.0:
        raise ContractViolation(
            ViolationCode.CONFIDENCE_OUT_OF_RANGE,
            "confidence",
            f"{confidence} outside [0, 1]",
        )

    justification = _required(doc, "justification", str)
    n_tokens = justification_tokens(justification)
    if n_tokens > MAX_JUSTIFICATION_TOKENS:
        raise ContractViolation(
            ViolationCode.JUSTIFICATION_TOO_LONG,
            "justification",
            f"{n_tokens} tokens exceeds {MAX_JUSTIFICATION_TOKENS}",
        )

    evidence_refs = tuple(_required_str_list(doc, "evidence_refs"))

    metadata_doc = _required(doc, "metadata", dict)
    stage_text = metadata_doc.get("stage")
    if not isinstance(stage_text, str):
        raise ContractViolation(ViolationCode.MISSING_FIELD, "metadata.stage", "absent")
    stage = _STAGE_FROM_WIRE.get(stage_text)
    if stage is None:
        raise ContractViolation(
            ViolationCode.INVALID_ENUM, "metadata.stage", f"unknown stage {stage_text!r}"
        )
    assumptions = tuple(_optional_str_list(metadata_doc, "assumptions", "metadata"))
    missing_fields = tuple(_optional_str_list(metadata_doc, "missing_fields", "metadata"))

    if parsed_status is ContractStatus.NEED_MORE_CONTEXT and not missing_fields:
        raise ContractViolation(
            ViolationCode.MISSING_FIELD,
            "metadata.missing_fields",
            "NEED_MORE_CONTEXT requires a non-empty missing_fields list",
        )

    return ContractOutput(
        status=parsed_status,
        task=task,
        case_id=case_id,
        snapshot_date=snapshot_date,
        answer=answer,
        confidence=float(confidence),
        justification=justification,
        evidence_refs=evidence_refs,
        metadata=ContractMetadata(
            stage=stage, assumptions=assumptions, missing_fields=missing_fields
        ),
    )


def serialize_output(out: ContractOutput) -> str:
    """Canonical wire form; parse_output(serialize_output(x)) == x."""
    doc = {
        "status": out.status.value,
        "task": out.task,
        "case_id": out.case_id,
        "snapshot_date": out.snapshot_date,
        "answer": out.answer,
        "confidence": out.confidence,
        "justification": out.justification,
        "evidence_refs": list(out.evidence_refs),
        "metadata": {
            "stage": _STAGE_WIRE[out.metadata.stage],
            "assumptions": list(out.metadata.assumptions),
            "missing_fields": list(out.metadata.missing_fields),
        },
    }
    return json.dumps(doc, ensure_ascii=False, sort_keys=True)


def _decode_single_object(raw: str) -> dict:
    text = raw.strip()
    if not text:
        raise ContractViolation(ViolationCode.NOT_AN_OBJECT, "$", "empty response")
    if not text.startswith("{"):
        raise ContractViolation(
            ViolationCode.NOT_AN_OBJECT, "$", "document does not start with an object"
        )
    decoder = json.JSONDecoder()
    try:
        doc, end = decoder.raw_decode(text)
    except json.JSONDecodeError as exc:
        raise ContractViolation(ViolationCode.NOT_AN_OBJECT, "$", f"unparseable: {exc}")
    if text[end:].strip():
        raise ContractViolation(
            ViolationCode.MULTIPLE_OBJECTS, "$", "content after the first top-level object"
        )
    if not isinstance(doc, dict):
        raise ContractViolation(ViolationCode.NOT_AN_OBJECT, "$", "top level is not an object")
    return doc


def _required(doc: dict, name: str, kind: type):
    value = doc.get(name)
    if value is None:
        raise ContractViolation(ViolationCode.MISSING_FIELD, name, "absent")
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ContractViolation(
            ViolationCode.MISSING_FIELD, name, f"expected {kind.__name__}"
        )
    return value


def _required_str_list(doc: dict, name: str) -> list[str]:
    value = doc.get(name)
    if value is None:
        raise ContractViolation(ViolationCode.MISSING_FIELD, name, "absent")
    if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
        raise ContractViolation(
            ViolationCode.MISSING_FIELD, name, "expected a list of strings"
        )
    return value


def _optional_str_list(doc: dict, name: str, parent: str) -> list[str]:
    value = doc.get(name)
    if value is None:
        return []
    if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
        raise ContractViolation(
            ViolationCode.MISSING_FIELD, f"{parent}.{name}", "expected a list of strings"
        )
    return value


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


# ---------------------------------------------------------------------------
# Answer profiles.
#
# Field spec mini-language: each profile maps to a checker built from the
# combinators below. Paths in emitted violations address the raw document
# (answer.<profile>.<field>...).
# ---------------------------------------------------------------------------


def _v(code: ViolationCode, path: str, detail: str) -> ContractViolation:
    return ContractViolation(code, path, detail)


def _check_str(value, path, sink):
    if not isinstance(value, str):
        sink.append(_v(ViolationCode.MISSING_FIELD, path, "expected string"))


def _check_bool(value, path, sink):
    if not isinstance(value, bool):
        sink.append(_v(ViolationCode.MISSING_FIELD, path, "expected boolean"))


def _check_prob(value, path, sink):
    if not _is_number(value):
        sink.append(_v(ViolationCode.CONFIDENCE_OUT_OF_RANGE, path, "not a number"))
    elif not 0.0 <= value <= 1.0:
        sink.append(
            _v(ViolationCode.CONFIDENCE_OUT_OF_RANGE, path, f"{value} outside [0, 1]")
        )


def _check_date(value, path, sink):
    if not isinstance(value, str):
        sink.append(_v(ViolationCode.MALFORMED_DATE, path, "expected date string"))
        return
    try:
        parse_iso_date(value)
    except ValueError as exc:
        sink.append(_v(ViolationCode.MALFORMED_DATE, path, str(exc)))


def _check_enum(allowed: frozenset[str]):
    def check(value, path, sink):
        if not isinstance(value, str) or value not in allowed:
            sink.append(
                _v(ViolationCode.INVALID_ENUM, path, f"expected one of {sorted(allowed)}")
            )

    return check


def _check_choice(allowed: frozenset):
    def check(value, path, sink):
        if isinstance(value, bool) or value not in allowed:
            sink.append(
                _v(ViolationCode.INVALID_ENUM, path, f"expected one of {sorted(allowed)}")
            )

    return check


def _check_str_list(value, path, sink):
    if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
        sink.append(_v(ViolationCode.MISSING_FIELD, path, "expected a list of strings"))


def _check_record(fields: dict[str, tuple[bool, object]]):
    def check(value, path, sink):
        if not isinstance(value, dict):
            sink.append(_v(ViolationCode.MISSING_FIELD, path, "expected object"))
            return
        for name, (required, checker) in fields.items():
            if name not in value:
                if required:
                    sink.append(_v(ViolationCode.MISSING_FIELD, f"{path}.{name}", "absent"))
                continue
            checker(value[name], f"{path}.{name}", sink)

    return check


def _check_list(item_checker):
    def check(value, path, sink):
        if not isinstance(value, list):
            sink.append(_v(ViolationCode.MISSING_FIELD, path, "expected list"))
            return
        for i, item in enumerate(value):
            item_checker(item, f"{path}[{i}]", sink)

    return check


def _check_record_or_list(record_checker):
    def check(value, path, sink):
        if isinstance(value, list):
            _check_list(record_checker)(value, path, sink)
        else:
            record_checker(value, path, sink)

    return check


def _check_triple(value, path, sink):
    ok = (
        isinstance(value, list)
        and len(value) == 3
        and all(isinstance(v, str) for v in value)
    )
    if not ok:
        sink.append(_v(ViolationCode.MISSING_FIELD, path, "expected [entity, relation, entity]"))


_EXPLOIT_RECORD = _check_record(
    {
        "cve_id": (True, _check_str),
        "horizon_days": (True, _check_choice(frozenset({7, 30, 90}))),
        "prob_exploit": (True, _check_prob),
        "drivers": (False, _check_str_list),
    }
)

# Profile menu. Keys mirror the contract's answer schema; the last five are
# generic profiles covering tasks the bespoke keys do not fit.
OUTPUT_PROFILES: dict[str, object] = {
    "ioc_normalization": _check_list(
        _check_record(
            {
                "raw": (True, _check_str),
                "type": (True, _check_enum(frozenset({"ipv4", "domain", "url", "hash"}))),
                "value": (True, _check_str),
                "first_seen": (False, _check_date),
                "tags": (False, _check_str_list),
            }
        )
    ),
    "vuln_linking": _check_record(
        {
            "cve_candidates": (
                True,
                _check_list(
                    _check_record(
                        {"cve_id": (True, _check_str), "score": (True, _check_prob)}
                    )
                ),
            ),
            "vector_string": (False, _check_str),
        }
    ),
    "malware_mapping": _check_record(
        {
            "family_candidates": (
                True,
                _check_list(
                    _check_record({"name": (True, _check_str), "score": (True, _check_prob)})
                ),
            ),
            "aliases": (False, _check_str_list),
            "capabilities": (False, _check_str_list),
        }
    ),
    "event_timeline": _check_list(
        _check_record(
            {
                "t": (True, _check_date),
                "type": (True, _check_enum(frozenset({"beacon", "phish", "lateral", "exfil"}))),
                "artifacts": (False, _check_str_list),
                "source_ref": (False, _check_str),
            }
        )
    ),
    "actor_linking": _check_record(
        {
            "actor_candidates": (
                True,
                _check_list(
                    _check_record({"name": (True, _check_str), "score": (True, _check_prob)})
                ),
            ),
            "shared_ttps": (False, _check_str_list),
            "infra_overlap": (
                False,
                _check_list(
                    _check_record(
                        {
                            "indicator": (True, _check_str),
                            "match": (True, _check_enum(frozenset({"exact", "fuzzy"}))),
                        }
                    )
                ),
            ),
        }
    ),
    "ttp_extraction": _check_list(
        _check_record(
            {
                "technique_id": (True, _check_str),
                "sub": (False, _check_str),
                "evidence_ref": (False, _check_str),
            }
        )
    ),
    "campaign_attribution": _check_record(
        {
            "name": (True, _check_str),
            "score": (True, _check_prob),
            "rationale_tags": (False, _check_str_list),
        }
    ),
    "false_flag": _check_record(
        {
            "likelihood": (True, _check_prob),
            "signals_for": (False, _check_str_list),
            "signals_against": (False, _check_str_list),
        }
    ),
    "exploit_likelihood": _check_record_or_list(_EXPLOIT_RECORD),
    "impact_forecast": _check_record(
        {
            "impact_vector": (True, _check_list(_check_enum(frozenset({"A", "I", "C"})))),
            "severity_band": (True, _check_enum(frozenset({"low", "med", "high", "critical"}))),
            "uncertainty": (True, _check_prob),
        }
    ),
    "target_sector": _check_list(
        _check_record({"name": (True, _check_str), "prob": (True, _check_prob)})
    ),
    "escalation": _check_record(
        {"prob": (True, _check_prob), "signals": (False, _check_str_list)}
    ),
    "patch_recommendation": _check_record(
        {
            "affected_assets": (True, _check_str_list),
            "patches": (
                True,
                _check_list(
                    _check_record(
                        {
                            "kb_or_id": (True, _check_str),
                            "priority": (True, _check_enum(frozenset({"P1", "P2", "P3"}))),
                        }
                    )
                ),
            ),
            "prechecks": (False, _check_str_list),
        }
    ),
    "rule_generation": _check_record(
        {
            "rule_type": (True, _check_enum(frozenset({"YARA", "Sigma"}))),
            "rule_name": (True, _check_str),
            "rule_body": (True, _check_str),
            "test_iocs": (False, _check_str_list),
        }
    ),
    "countermeasure_ranking": _check_list(
        _check_record(
            {
                "mitigation_id": (True, _check_str),
                "title": (True, _check_str),
                "effort": (False, _check_enum(frozenset({"low", "med", "high"}))),
                "expected_gain": (False, _check_str),
            }
        )
    ),
    "incident_ticket": _check_record(
        {
            "category": (True, _check_str),
            "priority": (True, _check_enum(frozenset({"P1", "P2", "P3"}))),
            "work_notes": (False, _check_str_list),
            "required_artifacts": (False, _check_str_list),
        }
    ),
    "decision_set": _check_list(
        _check_record({"item": (True, _check_str), "decision": (True, _check_bool)})
    ),
    "text_summary": _check_record({"text": (True, _check_str)}),
    "label_choice": _check_record({"label": (True, _check_str)}),
    "score_ranking": _check_list(
        _check_record({"item": (True, _check_str), "prob": (True, _check_prob)})
    ),
    "relation_graph": _check_record({"relations": (True, _check_list(_check_triple))}),
}


def profile_for_task(task: CtiTask) -> str:
    profiles = task_profiles()
    try:
        return profiles[task.name]
    except KeyError:
        raise KeyError(f"task {task.name!r} has no registered output profile")


def validate_profile(out: ContractOutput, task: CtiTask) -> list[ContractViolation]:
    """All profile violations for ``out`` against ``task``'s output profile.

    Unknown or off-profile answer keys become ProfileMismatch entries
    (warnings); a missing required profile key is a MissingField.
    """
    profile_key = profile_for_task(task)
    violations: list[ContractViolation] = []

    for key in out.answer:
        if key != profile_key:
            detail = (
                f"key {key!r} is not part of the {profile_key!r} profile"
                if key in OUTPUT_PROFILES
                else f"unknown profile key {key!r}"
            )
            violations.append(_v(ViolationCode.PROFILE_MISMATCH, f"answer.{key}", detail))

    if profile_key not in out.answer:
        violations.append(
            _v(ViolationCode.MISSING_FIELD, f"answer.{profile_key}", "required profile absent")
        )
        return violations

    checker = OUTPUT_PROFILES[profile_key]
    checker(out.answer[profile_key], f"answer.{profile_key}", violations)
    return violations
