"""Append-only run journal with strict sequencing and deterministic replay.

One UTF-8 JSON record per line, one journal file per run. Sequence numbers
are contiguous from 1; any gap, duplicate, or partial trailing line is
corruption. Timestamps are logical ticks, not wall clock, so two runs with
the same inputs produce byte-identical journals.

Single writer per run; readers may consume closed prefixes concurrently.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass
from typing import Iterator


class EventKind(enum.Enum):
    SCORE_RECORDED = "ScoreRecorded"
    ANCHOR_RECORDED = "AnchorRecorded"
    VERDICT_ASSIGNED = "VerdictAssigned"
    TAXONOMY_VERSIONED = "TaxonomyVersioned"
    LABEL_PROPOSED = "LabelProposed"
    DELIBERATION_RECORDED = "DeliberationRecorded"
    TASK_OPENED = "TaskOpened"
    TASK_CLOSED = "TaskClosed"
    AGENT_TRANSCRIPT = "AgentTranscript"


REQUIRED_PAYLOAD_KEYS = {
    EventKind.SCORE_RECORDED: {"instance_id", "metric", "value"},
    EventKind.ANCHOR_RECORDED: {"instance_id", "verdict"},
    EventKind.VERDICT_ASSIGNED: {"instance_id", "verdict"},
    EventKind.TAXONOMY_VERSIONED: {"version", "mode_ids"},
    EventKind.LABEL_PROPOSED: {"instance_id", "label"},
    EventKind.DELIBERATION_RECORDED: {"instance_id", "round1", "round2", "uncertain"},
    EventKind.TASK_OPENED: {"task_id", "kind", "instance_id"},
    EventKind.TASK_CLOSED: {"task_id", "resolution"},
    EventKind.AGENT_TRANSCRIPT: {"agent_id", "request", "response"},
}


class JournalError(Exception):
    pass


class JournalCorruption(JournalError):
    pass


class PayloadValidationError(JournalError):
    pass


@dataclass(frozen=True)
class JournalEvent:
    sequence: int
    timestamp: int
    kind: EventKind
    payload: dict
    run_id: str

    def to_line(self) -> str:
        doc = {
            "sequence": self.sequence,
            "timestamp": self.timestamp,
            "kind": self.kind.value,
            "payload": self.payload,
            "run_id": self.run_id,
        }
        return json.dumps(doc, ensure_ascii=False, sort_keys=True)


class Journal:
    """Single-writer append handle for one run's journal file."""

    def __init__(self, path: str, run_id: str):
        self.path = path
        self.run_id = run_id
        self._sequence = 0
        if os.path.exists(path):
            for event in read_events(path):
                if event.run_id != run_id:
                    raise JournalError(
                        f"journal {path} belongs to run {event.run_id}, not {run_id}"
                    )
                self._sequence = event.sequence
        self._handle = open(path, "a", encoding="utf-8")

    @property
    def sequence(self) -> int:
        return self._sequence

    def append(self, kind: EventKind, payload: dict) -> int:
        """Validate, write, and fsync one event; returns its sequence number."""
        missing = REQUIRED_PAYLOAD_KEYS[kind] - payload.keys()
        if missing:
            raise PayloadValidationError(
                f"{kind.value} payload missing keys: {sorted(missing)}"
            )
        try:
            json.dumps(payload)
        except (TypeError, ValueError) as exc:
            raise PayloadValidationError(f"{kind.value} payload not serializable: {exc}")
        event = JournalEvent(
            sequence=self._sequence + 1,
            timestamp=self._sequence + 1,
            kind=kind,
            payload=payload,
            run_id=self.run_id,
        )
        self._handle.write(event.to_line() + "\n")
        self._handle.flush()
        os.fsync(self._handle.fileno())
        self._sequence = event.sequence
        return event.sequence

    def close(self):
        self._handle.close()

    def __enter__(self) -> "Journal":
        return self

    def __exit__(self, *exc_info):
        self.close()


def read_events(path: str) -> Iterator[JournalEvent]:
    """Yield events, enforcing contiguous sequence numbers from 1."""
    expected = 1
    with open(path, "r", encoding="utf-8", newline="") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.endswith("\n"):
                raise JournalCorruption(f"{path}:{line_no}: partial trailing record")
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JournalCorruption(f"{path}:{line_no}: unparseable record: {exc}")
            try:
                event = JournalEvent(
                    sequence=doc["sequence"],
                    timestamp=doc["timestamp"],
                    kind=EventKind(doc["kind"]),
                    payload=doc["payload"],
                    run_id=doc["run_id"],
                )
            except (KeyError, ValueError) as exc:
                raise JournalCorruption(f"{path}:{line_no}: malformed event: {exc}")
            if event.sequence != expected:
                raise JournalCorruption(
                    f"{path}:{line_no}: sequence {event.sequence}, expected {expected}"
                )
            expected += 1
            yield event


def load_events(path: str) -> list[JournalEvent]:
    return list(read_events(path))


def last_sequence(path: str) -> int:
    if not os.path.exists(path):
        return 0
    sequence = 0
    for event in read_events(path):
        sequence = event.sequence
    return sequence


def kinds_present(path: str) -> set[EventKind]:
    if not os.path.exists(path):
        return set()
    return {event.kind for event in read_events(path)}
