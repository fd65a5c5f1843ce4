"""Human-in-the-loop task queue: the only mutation path for human decisions.

Four task kinds cover the pipeline's human gates: boundary verdicts from
stratification, taxonomy seeding, refinement of OTHER-labeled instances, and
resolution of uncertain deliberations. Every close writes a journal event and
fires the pipeline callback registered for the kind; the journal append is
the linearization point for task state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

from .core import CtiStage, FailureMode, VulnerabilityCategory, Verdict
from .journal import EventKind, Journal


class TaskKind(enum.Enum):
    BOUNDARY_VERDICT = "BoundaryVerdict"
    TAXONOMY_SEED = "TaxonomySeed"
    OTHER_REFINEMENT = "OtherRefinement"
    UNCERTAIN_RESOLUTION = "UncertainResolution"


class TaskStatus(enum.Enum):
    OPEN = "open"
    CLAIMED = "claimed"
    CLOSED = "closed"


class AnnotationError(Exception):
    pass


class UnknownTask(AnnotationError):
    pass


class InvalidResolution(AnnotationError):
    pass


class ResolutionConflict(AnnotationError):
    """A different resolution was already recorded (last writer rejected)."""


@dataclass
class AnnotationTask:
    task_id: str
    kind: TaskKind
    instance_ref: str
    context: dict
    status: TaskStatus = TaskStatus.OPEN
    resolution: Optional[dict] = None
    opened_seq: int = 0

    def summary(self) -> dict:
        return {
            "task_id": self.task_id,
            "kind": self.kind.value,
            "instance_ref": self.instance_ref,
            "status": self.status.value,
            "opened_seq": self.opened_seq,
        }

    def to_record(self) -> dict:
        record = self.summary()
        record["context"] = self.context
        record["resolution"] = self.resolution
        return record


ResolutionCallback = Callable[[AnnotationTask, dict], None]


class AnnotationQueue:
    """In-process queue backing the annotation service and the pipeline gates."""

    def __init__(self, journal: Optional[Journal] = None):
        self._journal = journal
        self._tasks: dict[str, AnnotationTask] = {}
        self._open_by_pair: dict[tuple[str, TaskKind], str] = {}
        self._pair_counts: dict[tuple[str, TaskKind], int] = {}
        self._callbacks: dict[TaskKind, ResolutionCallback] = {}
        self._seq = 0

    def on_resolution(self, kind: TaskKind, callback: ResolutionCallback):
        self._callbacks[kind] = callback

    def open_task(self, kind: TaskKind, instance_ref: str, context: dict) -> AnnotationTask:
        """Open (or return the already-open) task for (instance, kind)."""
        pair = (instance_ref, kind)
        existing_id = self._open_by_pair.get(pair)
        if existing_id is not None:
            return self._tasks[existing_id]
        count = self._pair_counts.get(pair, 0)
        task_id = f"{kind.value}:{instance_ref}:{count}"
        self._seq += 1
        task = AnnotationTask(
            task_id=task_id,
            kind=kind,
            instance_ref=instance_ref,
            context=context,
            opened_seq=self._seq,
        )
        self._tasks[task_id] = task
        self._open_by_pair[pair] = task_id
        self._pair_counts[pair] = count + 1
        if self._journal is not None:
            # Context rides along so a queue rebuilt from the journal can
            # serve the full task view without a second fetch.
            self._journal.append(
                EventKind.TASK_OPENED,
                {
                    "task_id": task_id,
                    "kind": kind.value,
                    "instance_id": instance_ref,
                    "context": context,
                },
            )
        return task

    def restore(self, task: AnnotationTask):
        """Re-insert a task rebuilt from the journal (no events emitted)."""
        pair = (task.instance_ref, task.kind)
        self._tasks[task.task_id] = task
        self._seq = max(self._seq, task.opened_seq)
        suffix = task.task_id.rsplit(":", 1)[-1]
        try:
            count = int(suffix) + 1
        except ValueError:
            count = self._pair_counts.get(pair, 0) + 1
        self._pair_counts[pair] = max(self._pair_counts.get(pair, 0), count)
        if task.status is not TaskStatus.CLOSED:
            self._open_by_pair[pair] = task.task_id

    def get(self, task_id: str) -> AnnotationTask:
        try:
            return self._tasks[task_id]
        except KeyError:
            raise UnknownTask(task_id)

    def list_tasks(
        self,
        kind: Optional[TaskKind] = None,
        status: Optional[TaskStatus] = None,
    ) -> list[AnnotationTask]:
        """Stable ordering by open time."""
        tasks = sorted(self._tasks.values(), key=lambda t: t.opened_seq)
        if kind is not None:
            tasks = [t for t in tasks if t.kind == kind]
        if status is not None:
            tasks = [t for t in tasks if t.status == status]
        return tasks

    def open_tasks(self, kind: Optional[TaskKind] = None) -> list[AnnotationTask]:
        return self.list_tasks(kind=kind, status=TaskStatus.OPEN) + self.list_tasks(
            kind=kind, status=TaskStatus.CLAIMED
        )

    def claim(self, task_id: str) -> AnnotationTask:
        task = self.get(task_id)
        if task.status is TaskStatus.CLOSED:
            raise InvalidResolution(f"{task_id} is already closed")
        task.status = TaskStatus.CLAIMED
        return task

    def submit_resolution(self, task_id: str, resolution: dict) -> AnnotationTask:
        """Close a task with a validated resolution.

        Double-close with the identical resolution is an idempotent no-op
        returning the prior result; a different resolution is rejected.
        """
        task = self.get(task_id)
        if task.status is TaskStatus.CLOSED:
            if task.resolution == resolution:
                return task
            raise ResolutionConflict(f"{task_id} already closed with another resolution")
        _validate_resolution(task.kind, resolution)

        callback = self._callbacks.get(task.kind)
        if callback is not None:
            # Callbacks perform the pipeline mutation and may still reject the
            # resolution on semantic grounds; nothing is journaled until they
            # accept.
            callback(task, resolution)

        if self._journal is not None:
            payload = {
                "task_id": task.task_id,
                "resolution": resolution,
                "kind": task.kind.value,
                "instance_id": task.instance_ref,
            }
            # The task's purpose disambiguates replay (anchor inspections and
            # boundary inspections share the BoundaryVerdict kind).
            if isinstance(task.context, dict) and "purpose" in task.context:
                payload["purpose"] = task.context["purpose"]
            self._journal.append(EventKind.TASK_CLOSED, payload)
        task.resolution = resolution
        task.status = TaskStatus.CLOSED
        self._open_by_pair.pop((task.instance_ref, task.kind), None)
        return task


def _validate_resolution(kind: TaskKind, resolution: dict):
    if not isinstance(resolution, dict):
        raise InvalidResolution("resolution must be an object")
    if kind is TaskKind.BOUNDARY_VERDICT:
        verdict = resolution.get("verdict")
        if verdict not in (Verdict.FAILED.value, Verdict.CORRECT.value):
            raise InvalidResolution(
                "boundary resolutions must decide 'failed' or 'correct'"
            )
        return
    if kind is TaskKind.UNCERTAIN_RESOLUTION:
        mode_id = resolution.get("mode_id")
        if not isinstance(mode_id, str) or not mode_id:
            raise InvalidResolution("uncertain resolutions need a mode_id")
        return
    # TaxonomySeed / OtherRefinement: an existing mode id, or a full proposal.
    mode_id = resolution.get("mode_id")
    if not isinstance(mode_id, str) or not mode_id:
        raise InvalidResolution("taxonomy resolutions need a mode_id")
    if "name" in resolution:
        proposed_mode_from_resolution(resolution)


def proposed_mode_from_resolution(resolution: dict) -> FailureMode:
    """Materialize a proposed FailureMode from a taxonomy resolution payload."""
    try:
        stages = resolution.get("stages")
        return FailureMode(
            mode_id=resolution["mode_id"],
            name=resolution["name"],
            category=VulnerabilityCategory(resolution.get("category", "emergent")),
            description=resolution.get("description", ""),
            applicable_stages=frozenset(
                CtiStage(s) for s in (stages if stages else [s.value for s in CtiStage])
            ),
        )
    except (KeyError, ValueError) as exc:
        raise InvalidResolution(f"bad mode proposal: {exc}")
