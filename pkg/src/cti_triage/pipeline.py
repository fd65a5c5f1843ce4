"""Stage orchestration over the run journal.

Every stage folds its starting state from the journal, performs its work
through the module operations, and appends events; replaying the journal
therefore reproduces the pipeline state exactly. Human gates open annotation
tasks; a scripted annotator resolves them inline, while with real humans the
stage stops at the gate and a later rerun consumes the resolutions that were
journaled through the service.

One run mutates through one process at a time (lock file per run directory).
"""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

from . import consensus, stratification, taxonomy_loop
from .agents import Agent, RemoteAgent, ScriptedAgent
from .annotation import (
    AnnotationQueue,
    AnnotationTask,
    TaskKind,
    TaskStatus,
    proposed_mode_from_resolution,
)
from .config import ConfigError, RunConfig
from .consensus import DeliberationRecord, InstanceEscalated, Provenance
from .contract import ContractViolation, parse_output, validate_profile
from .core import (
    FailureMode,
    MetricKind,
    Taxonomy,
    ThreatInstance,
    Verdict,
    task_registry,
)
from .ingestion import (
    ingest_corpus,
    instance_to_record,
    read_instances,
    write_instances,
)
from .journal import EventKind, Journal, JournalEvent, load_events
from .metrics import SimilarityScore, score_instance
from .signals import Signal, extract_signals
from .synthetic import (
    PlantedTruth,
    ScriptedAnnotator,
    make_classifier,
    make_corpus,
    make_evaluator,
)
from .taxonomy_loop import LoopResult, LoopState, OTHER_LABEL


class PipelineError(Exception):
    pass


class StageBlocked(PipelineError):
    """A human gate has open tasks and no annotator to resolve them."""


class MissingUpstream(PipelineError):
    """A stage was invoked before its upstream journal events exist."""


@dataclass(frozen=True)
class RunPaths:
    run_dir: str

    @property
    def manifest(self) -> str:
        return os.path.join(self.run_dir, "manifest.json")

    @property
    def journal(self) -> str:
        return os.path.join(self.run_dir, "journal.jsonl")

    @property
    def instances(self) -> str:
        return os.path.join(self.run_dir, "instances.jsonl")

    @property
    def outputs(self) -> str:
        return os.path.join(self.run_dir, "outputs.jsonl")

    @property
    def rejects(self) -> str:
        return os.path.join(self.run_dir, "rejects.jsonl")

    @property
    def report_json(self) -> str:
        return os.path.join(self.run_dir, "report.json")

    @property
    def report_text(self) -> str:
        return os.path.join(self.run_dir, "report.txt")

    @property
    def lock(self) -> str:
        return os.path.join(self.run_dir, ".lock")


@contextmanager
def run_lock(paths: RunPaths):
    """One pipeline run per journal at a time."""
    try:
        fd = os.open(paths.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineError(f"run is locked by another process: {paths.lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(paths.lock)


def compute_run_id(config: RunConfig, corpus_sha: str) -> str:
    """Content hash of (config, seed, corpus). Environment-only settings
    (runs directory, service binding) are excluded so the same inputs get the
    same run id wherever they execute."""
    content = config.to_dict()
    content.pop("runs_dir", None)
    content.pop("service", None)
    basis = json.dumps({"config": content, "corpus_sha256": corpus_sha}, sort_keys=True)
    return hashlib.sha256(basis.encode("utf-8")).hexdigest()[:16]


class RunContext:
    """Everything a stage needs: config, paths, journal, agents, annotator."""

    def __init__(self, config: RunConfig, run_id: str):
        self.config = config
        self.run_id = run_id
        self.paths = RunPaths(os.path.join(config.runs_dir, run_id))
        self._journal: Optional[Journal] = None
        self._instances: Optional[list[ThreatInstance]] = None
        self._plan: Optional[dict[str, PlantedTruth]] = None

    @classmethod
    def open(cls, config: RunConfig, run_id: str) -> "RunContext":
        ctx = cls(config, run_id)
        if not os.path.exists(ctx.paths.manifest):
            raise MissingUpstream(f"run {run_id} has no manifest; run ingest first")
        return ctx

    @property
    def journal(self) -> Journal:
        if self._journal is None:
            self._journal = Journal(self.paths.journal, self.run_id)
        return self._journal

    def close(self):
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    def events(self) -> list[JournalEvent]:
        if not os.path.exists(self.paths.journal):
            return []
        return load_events(self.paths.journal)

    def instances(self) -> list[ThreatInstance]:
        if self._instances is None:
            if not os.path.exists(self.paths.instances):
                raise MissingUpstream("no standardized instances; run ingest first")
            self._instances = read_instances(self.paths.instances)
        return self._instances

    def instance_map(self) -> dict[str, ThreatInstance]:
        return {i.id: i for i in self.instances()}

    # -- synthetic plan / agents -------------------------------------------

    def plan(self) -> dict[str, PlantedTruth]:
        if self._plan is None:
            synth = self.config.corpus.get("synthetic")
            if synth is None:
                self._plan = {}
            else:
                _, self._plan = make_corpus(
                    n=synth.get("n", 200), seed=self.config.seed
                )
        return self._plan

    def build_agent(self, spec: dict) -> Agent:
        kind = spec.get("kind")
        if kind == "synthetic-evaluator":
            return make_evaluator(self.plan(), seed=self.config.seed)
        if kind == "synthetic-classifier":
            return make_classifier(
                spec.get("agent_id", "clf"),
                self.plan(),
                seed=self.config.seed,
                disagree_bucket=spec.get("disagree_bucket"),
                persist_bucket=spec.get("persist_bucket"),
            )
        if kind == "scripted":
            return ScriptedAgent.from_file(spec.get("agent_id", "scripted"), spec["script"])
        if kind == "remote":
            return RemoteAgent(
                spec.get("agent_id", "remote"),
                endpoint=spec["endpoint"],
                model=spec.get("model", ""),
                token_env=spec.get("token_env", "CTI_TRIAGE_AGENT_TOKEN"),
                on_transcript=lambda rec: self.journal.append(
                    EventKind.AGENT_TRANSCRIPT, rec
                ),
            )
        raise ConfigError(f"unknown agent kind {kind!r}")

    def annotator(self) -> Optional[ScriptedAnnotator]:
        spec = self.config.annotator
        if spec is None:
            return None
        if spec.get("kind") == "scripted":
            return ScriptedAnnotator(self.plan())
        raise ConfigError(f"unknown annotator kind {spec.get('kind')!r}")

    def require_kinds(self, stage: str, *kinds: EventKind):
        present = {e.kind for e in self.events()}
        missing = [k.value for k in kinds if k not in present]
        if missing:
            raise MissingUpstream(
                f"{stage} requires upstream journal events {missing}; run earlier stages first"
            )


# ---------------------------------------------------------------------------
# Replay: fold the journal back into pipeline state.
# ---------------------------------------------------------------------------


@dataclass
class ReplayedState:
    scores: dict[str, SimilarityScore] = field(default_factory=dict)
    strat: Optional[stratification.StratificationState] = None
    verdicts: dict[str, str] = field(default_factory=dict)
    taxonomy: Optional[Taxonomy] = None
    loop_labels: dict[str, str] = field(default_factory=dict)
    loop_iterations: int = 0
    deliberations: dict[str, DeliberationRecord] = field(default_factory=dict)
    tasks: dict[str, dict] = field(default_factory=dict)

    def loop_state(self, rho: float, stability_epsilon=None) -> Optional[LoopState]:
        if self.taxonomy is None:
            return None
        other = frozenset(i for i, l in self.loop_labels.items() if l == OTHER_LABEL)
        return LoopState(
            taxonomy=self.taxonomy,
            iteration=self.loop_iterations,
            labels=dict(self.loop_labels),
            other_set=other,
            rho=rho,
            stability_epsilon=stability_epsilon,
        )


def mode_from_payload(doc: dict) -> FailureMode:
    from .core import CtiStage, VulnerabilityCategory

    return FailureMode(
        mode_id=doc["mode_id"],
        name=doc["name"],
        category=VulnerabilityCategory(doc["category"]),
        description=doc.get("description", ""),
        applicable_stages=frozenset(CtiStage(s) for s in doc["stages"]),
        detection=doc.get("detection", "agent_or_human"),
    )


def mode_to_payload(mode: FailureMode) -> dict:
    return {
        "mode_id": mode.mode_id,
        "name": mode.name,
        "category": mode.category.value,
        "description": mode.description,
        "stages": sorted(s.value for s in mode.applicable_stages),
        "detection": mode.detection,
    }


def replay(events: list[JournalEvent], config: RunConfig) -> ReplayedState:
    """Fold all events into the reconstructed pipeline state.

    The fold is idempotent against the re-announcements a resumed stage
    writes: repeated anchor records and task closures apply once.
    """
    state = ReplayedState()
    anchor_ids: set[str] = set()
    closed_task_ids: set[str] = set()
    pending_scores: list[SimilarityScore] = []

    for event in events:
        payload = event.payload
        kind = event.kind
        if kind is EventKind.SCORE_RECORDED:
            score = SimilarityScore(
                value=payload["value"],
                metric_kind=MetricKind(payload["metric"]),
                instance_id=payload["instance_id"],
                note=payload.get("note"),
            )
            state.scores[score.instance_id] = score
            pending_scores.append(score)
        elif kind is EventKind.ANCHOR_RECORDED:
            if payload["instance_id"] in anchor_ids:
                continue
            if state.strat is None:
                state.strat = stratification.init_state(
                    pending_scores,
                    delta=config.thresholds.delta,
                    budget_cap=config.thresholds.budget,
                )
            anchor_ids.add(payload["instance_id"])
            state.strat = stratification.record_anchor(
                state.strat, payload["instance_id"], Verdict(payload["verdict"])
            )
        elif kind is EventKind.TASK_CLOSED:
            task = state.tasks.setdefault(payload["task_id"], {})
            task.update(
                {
                    "task_id": payload["task_id"],
                    "kind": payload.get("kind"),
                    "instance_id": payload.get("instance_id"),
                    "status": "closed",
                    "resolution": payload["resolution"],
                }
            )
            if payload["task_id"] in closed_task_ids:
                continue
            closed_task_ids.add(payload["task_id"])
            if (
                payload.get("kind") == TaskKind.BOUNDARY_VERDICT.value
                and payload.get("purpose") == "boundary"
                and state.strat is not None
            ):
                state.strat = stratification.resolve_boundary(
                    state.strat,
                    payload["instance_id"],
                    Verdict(payload["resolution"]["verdict"]),
                )
        elif kind is EventKind.TASK_OPENED:
            state.tasks.setdefault(
                payload["task_id"],
                {
                    "task_id": payload["task_id"],
                    "kind": payload.get("kind"),
                    "instance_id": payload.get("instance_id"),
                    "status": "open",
                    "resolution": None,
                },
            )
        elif kind is EventKind.VERDICT_ASSIGNED:
            state.verdicts[payload["instance_id"]] = payload["verdict"]
        elif kind is EventKind.TAXONOMY_VERSIONED:
            if "modes" in payload:
                state.taxonomy = Taxonomy(
                    version=payload["version"],
                    modes=tuple(mode_from_payload(m) for m in payload["modes"]),
                    parent_version=payload.get("parent_version"),
                )
            if payload.get("mode_ratios") is not None and state.strat is not None:
                state.strat = stratification.append_mode_ratios(
                    state.strat, payload["mode_ratios"]
                )
            if payload.get("iteration") is not None:
                state.loop_iterations = max(state.loop_iterations, payload["iteration"])
        elif kind is EventKind.LABEL_PROPOSED:
            if payload.get("phase") == "taxonomy":
                state.loop_labels[payload["instance_id"]] = payload["label"]
        elif kind is EventKind.DELIBERATION_RECORDED:
            record = DeliberationRecord(
                instance_id=payload["instance_id"],
                round1=dict(payload["round1"]),
                round2=dict(payload["round2"]),
                uncertain=payload["uncertain"],
                final_label=payload.get("final_label"),
                provenance=Provenance(payload["provenance"])
                if payload.get("provenance")
                else None,
            )
            state.deliberations[record.instance_id] = record
    return state


def replay_run(ctx: RunContext) -> ReplayedState:
    return replay(ctx.events(), ctx.config)


# ---------------------------------------------------------------------------
# Resumable human gates.
# ---------------------------------------------------------------------------


def _closed_resolutions(events: list[JournalEvent]) -> dict[str, dict]:
    """task_id -> resolution for every closed task in the journal."""
    closed = {}
    for event in events:
        if event.kind is EventKind.TASK_CLOSED:
            closed[event.payload["task_id"]] = event.payload["resolution"]
    return closed


class HumanGate:
    """Opens tasks, consumes journaled resolutions, drives the annotator.

    Resolution order: already-journaled closure first (service round-trip),
    then the scripted annotator, else the task stays open and the stage
    raises StageBlocked at the end.
    """

    def __init__(
        self,
        queue: AnnotationQueue,
        events: list[JournalEvent],
        annotator: Optional[ScriptedAnnotator],
    ):
        self._queue = queue
        self._preresolved = _closed_resolutions(events)
        self._annotator = annotator
        self.blocked: list[str] = []

    def resolve(self, kind: TaskKind, instance_ref: str, context: dict) -> Optional[dict]:
        task = self._queue.open_task(kind, instance_ref, context)
        if task.status.value == "closed":
            return task.resolution
        if task.task_id in self._preresolved:
            resolution = self._preresolved[task.task_id]
            self._queue.submit_resolution(task.task_id, resolution)
            return resolution
        if self._annotator is not None:
            resolution = self._annotator.resolution_for(task)
            self._queue.submit_resolution(task.task_id, resolution)
            return resolution
        self.blocked.append(task.task_id)
        return None

    def check_blocked(self, stage: str):
        if self.blocked:
            raise StageBlocked(
                f"{stage}: {len(self.blocked)} annotation tasks are open; "
                "resolve them through the service and rerun"
            )


def _task_context(
    instance: ThreatInstance,
    raw_output: Optional[str] = None,
    signals: Optional[list[Signal]] = None,
    agent_labels: Optional[dict] = None,
    score: Optional[float] = None,
    purpose: Optional[str] = None,
) -> dict:
    context: dict = {"instance": instance_to_record(instance)}
    if raw_output is not None:
        context["model_output"] = raw_output
    if signals:
        context["signals"] = [
            {
                "mode_hint": s.mode_hint,
                "strength": s.strength.value,
                "evidence": [list(pair) for pair in s.evidence],
            }
            for s in signals
            if s.strength.value != "absent"
        ]
    if agent_labels is not None:
        context["agent_labels"] = agent_labels
    if score is not None:
        context["score"] = score
    if purpose is not None:
        context["purpose"] = purpose
    return context


# ---------------------------------------------------------------------------
# Stages.
# ---------------------------------------------------------------------------


def cmd_ingest(config: RunConfig, run_id_override: Optional[str] = None) -> RunContext:
    synth = config.corpus.get("synthetic")
    if synth is not None:
        instances, _ = make_corpus(n=synth.get("n", 200), seed=config.seed)
        corpus_blob = "\n".join(
            json.dumps(instance_to_record(i), sort_keys=True) for i in instances
        ).encode("utf-8")
        corpus_sha = hashlib.sha256(corpus_blob).hexdigest()
        rejects: tuple = ()
        manifest_extra = {
            "adapter": "synthetic",
            "records": len(instances),
            "accepted": len(instances),
            "rejected": 0,
            "corpus_sha256": corpus_sha,
        }
    else:
        result = ingest_corpus(config.corpus["path"], config.corpus.get("adapter", "jsonl"))
        instances = list(result.instances)
        rejects = result.rejects
        corpus_sha = result.manifest["corpus_sha256"]
        manifest_extra = result.manifest

    run_id = run_id_override or compute_run_id(config, corpus_sha)
    ctx = RunContext(config, run_id)
    os.makedirs(ctx.paths.run_dir, exist_ok=True)

    with run_lock(ctx.paths):
        write_instances(ctx.paths.instances, tuple(instances))
        with open(ctx.paths.rejects, "w", encoding="utf-8") as handle:
            for record, reason in rejects:
                handle.write(json.dumps({"record": record, "reason": reason}, sort_keys=True) + "\n")
        manifest = {
            "run_id": run_id,
            "config": config.to_dict(),
            "corpus": manifest_extra,
        }
        with open(ctx.paths.manifest, "w", encoding="utf-8") as handle:
            json.dump(manifest, handle, indent=2, sort_keys=True)
            handle.write("\n")
    return ctx


def _refuse_if_done(ctx: RunContext, stage: str, done: bool):
    if done:
        raise PipelineError(f"{stage} already completed for run {ctx.run_id}")


def cmd_evaluate(ctx: RunContext):
    _refuse_if_done(ctx, "evaluate", os.path.exists(ctx.paths.outputs))
    instances = ctx.instances()
    evaluator = ctx.build_agent(ctx.config.agents["evaluator"])
    from .agents import DecodeSettings

    decode = DecodeSettings(
        temperature=ctx.config.decode.get("temperature", 0.0),
        top_p=ctx.config.decode.get("top_p", 1.0),
    )
    with run_lock(ctx.paths):
        with open(ctx.paths.outputs, "w", encoding="utf-8") as handle:
            for instance in sorted(instances, key=lambda i: i.id):
                raw = evaluator.evaluate(instance, decode)
                ctx.journal.append(
                    EventKind.AGENT_TRANSCRIPT,
                    {
                        "agent_id": evaluator.agent_id,
                        "request": {"instance_id": instance.id, "task": instance.task.name},
                        "response": raw,
                    },
                )
                handle.write(
                    json.dumps({"instance_id": instance.id, "raw": raw}, sort_keys=True) + "\n"
                )
        ctx.close()


def _read_outputs(ctx: RunContext) -> dict[str, str]:
    if not os.path.exists(ctx.paths.outputs):
        raise MissingUpstream("no evaluation outputs; run evaluate first")
    outputs = {}
    with open(ctx.paths.outputs, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                doc = json.loads(line)
                outputs[doc["instance_id"]] = doc["raw"]
    return outputs


def cmd_score(ctx: RunContext):
    outputs = _read_outputs(ctx)
    _refuse_if_done(
        ctx, "score", any(e.kind is EventKind.SCORE_RECORDED for e in ctx.events())
    )
    registry = task_registry()
    with run_lock(ctx.paths):
        for instance in sorted(ctx.instances(), key=lambda i: i.id):
            raw = outputs.get(instance.id)
            payload = {
                "instance_id": instance.id,
                "metric": instance.task.metric_kind.value,
            }
            if raw is None:
                payload.update({"value": 0.0, "note": "missing model output"})
            else:
                try:
                    out = parse_output(raw)
                    violations = validate_profile(out, registry[instance.task.name])
                    score = score_instance(instance, out)
                    payload["value"] = score.value
                    if score.note:
                        payload["note"] = score.note
                    if violations:
                        payload["profile_violations"] = [
                            {"code": v.code.value, "path": v.path} for v in violations
                        ]
                except ContractViolation as exc:
                    payload.update(
                        {
                            "value": 0.0,
                            "note": f"contract-violation: {exc.code.value} at {exc.path}",
                        }
                    )
            ctx.journal.append(EventKind.SCORE_RECORDED, payload)
        ctx.close()


def cmd_stratify(ctx: RunContext) -> stratification.StratificationState:
    ctx.require_kinds("stratify", EventKind.SCORE_RECORDED)
    events = ctx.events()
    _refuse_if_done(
        ctx, "stratify", any(e.kind is EventKind.VERDICT_ASSIGNED for e in events)
    )
    replayed = replay(events, ctx.config)
    scored = sorted(replayed.scores.values(), key=lambda s: s.instance_id)
    state = stratification.init_state(
        scored, delta=ctx.config.thresholds.delta, budget_cap=ctx.config.thresholds.budget
    )
    instances = ctx.instance_map()

    with run_lock(ctx.paths):
        queue = AnnotationQueue(ctx.journal)
        gate = HumanGate(queue, events, ctx.annotator())

        # Anchor phase: extremes-first candidates. Stop once both verdict
        # classes are anchored and two full strata worth of ends are in, so
        # most of the budget stays available for boundary inspection.
        anchor_cap = max(2, state.budget_limit // 2)
        anchor_target = min(anchor_cap, 4 * stratification.ANCHORS_PER_END)
        for candidate in stratification.anchor_candidates(state):
            have_both = (
                state.anchors.failed_range is not None
                and state.anchors.correct_range is not None
            )
            if have_both and len(state.anchors.anchors) >= anchor_target:
                break
            if state.remaining_budget() <= 0:
                break
            if len(gate.blocked) >= anchor_target:
                # Humans aren't in-process: stop opening anchor requests at
                # the target and resume once those come back resolved.
                break
            context = _task_context(
                instances[candidate],
                score=state.scores[candidate],
                purpose="anchor",
            )
            resolution = gate.resolve(TaskKind.BOUNDARY_VERDICT, candidate, context)
            if resolution is None:
                continue
            state = stratification.record_anchor(
                state, candidate, Verdict(resolution["verdict"])
            )
            ctx.journal.append(
                EventKind.ANCHOR_RECORDED,
                {"instance_id": candidate, "verdict": resolution["verdict"]},
            )
        gate.check_blocked("stratify anchors")
        if state.anchors.failed_range is None or state.anchors.correct_range is None:
            raise PipelineError("anchoring ended without both verdict classes")

        # Boundary phase: whatever the hulls cannot decide goes to humans,
        # within the remaining budget.
        verdicts = stratification.assign_verdicts(state)
        boundary = sorted(i for i, v in verdicts.items() if v is Verdict.BOUNDARY)
        affordable = state.remaining_budget()
        for position, instance_id in enumerate(boundary):
            context = _task_context(
                instances[instance_id],
                score=state.scores[instance_id],
                purpose="boundary",
            )
            if position >= affordable:
                # Budget exhausted: the task still exists (every Boundary id
                # keeps an open task) but resolution waits for budget relief.
                queue.open_task(TaskKind.BOUNDARY_VERDICT, instance_id, context)
                continue
            resolution = gate.resolve(TaskKind.BOUNDARY_VERDICT, instance_id, context)
            if resolution is None:
                continue
            state = stratification.resolve_boundary(
                state, instance_id, Verdict(resolution["verdict"])
            )
        gate.check_blocked("stratify boundary")

        final = stratification.assign_verdicts(state)
        anchored = {i for i, _ in state.anchors.anchors}
        for instance_id in sorted(final):
            verdict = final[instance_id]
            if instance_id in anchored:
                source = "anchor"
            elif instance_id in state.boundary_resolutions:
                source = "boundary-human"
            else:
                source = "range"
            ctx.journal.append(
                EventKind.VERDICT_ASSIGNED,
                {"instance_id": instance_id, "verdict": verdict.value, "source": source},
            )
        ctx.close()
    return state


SEED_SAMPLE_SIZE = 8


def cmd_taxonomy(ctx: RunContext) -> LoopResult:
    ctx.require_kinds("taxonomy", EventKind.VERDICT_ASSIGNED)
    events = ctx.events()
    _refuse_if_done(
        ctx,
        "taxonomy",
        any(
            e.kind is EventKind.TAXONOMY_VERSIONED and "converged" in e.payload
            for e in events
        ),
    )
    replayed = replay(events, ctx.config)
    instances = ctx.instance_map()
    failed_ids = sorted(
        i for i, v in replayed.verdicts.items() if v == Verdict.FAILED.value
    )
    if not failed_ids:
        raise PipelineError("no failed instances; nothing to categorize")
    outputs = _read_outputs(ctx)

    with run_lock(ctx.paths):
        queue = AnnotationQueue(ctx.journal)
        gate = HumanGate(queue, events, ctx.annotator())

        evidence = {
            instance_id: _evidence_text(instances[instance_id], outputs.get(instance_id))
            for instance_id in failed_ids
        }

        # Step 1: humans seed the taxonomy from a small sample.
        sample = failed_ids[: min(SEED_SAMPLE_SIZE, len(failed_ids))]
        annotations: list[tuple[str, FailureMode | str]] = []
        seed_labels: dict[str, str] = {}
        for instance_id in sample:
            context = _task_context(
                instances[instance_id],
                raw_output=outputs.get(instance_id),
                signals=_safe_signals(instances[instance_id], outputs.get(instance_id)),
            )
            resolution = gate.resolve(TaskKind.TAXONOMY_SEED, instance_id, context)
            if resolution is None:
                continue
            if "name" in resolution:
                mode = proposed_mode_from_resolution(resolution)
                annotations.append((instance_id, mode))
                seed_labels[instance_id] = mode.mode_id
            else:
                annotations.append((instance_id, resolution["mode_id"]))
                seed_labels[instance_id] = resolution["mode_id"]
        gate.check_blocked("taxonomy seeding")

        taxonomy = taxonomy_loop.seed_taxonomy(annotations)
        ctx.journal.append(
            EventKind.TAXONOMY_VERSIONED,
            {
                "version": taxonomy.version,
                "parent_version": taxonomy.parent_version,
                "mode_ids": sorted(taxonomy.mode_ids()),
                "modes": [mode_to_payload(m) for m in taxonomy.modes],
            },
        )
        for instance_id, label in seed_labels.items():
            ctx.journal.append(
                EventKind.LABEL_PROPOSED,
                {
                    "instance_id": instance_id,
                    "label": label,
                    "agent_id": "human-seed",
                    "phase": "taxonomy",
                },
            )

        # Steps 2-3: classify and refine until stable.
        classifiers = [ctx.build_agent(spec) for spec in ctx.config.agents["classifier"]]
        strat_state = replayed.strat
        loop_state = LoopState(
            taxonomy=taxonomy,
            labels=dict(seed_labels),
            rho=ctx.config.thresholds.rho,
            stability_epsilon=ctx.config.thresholds.stability_epsilon,
        )

        def on_event(kind: str, payload: dict):
            payload = dict(payload)
            payload["phase"] = "taxonomy"
            ctx.journal.append(EventKind(kind), payload)

        def refiner(other_instances, current_taxonomy, iteration):
            findings: list[FailureMode] = []
            seen: set[str] = set()
            for instance in other_instances:
                context = _task_context(
                    instance,
                    raw_output=outputs.get(instance.id),
                    signals=_safe_signals(instance, outputs.get(instance.id)),
                )
                resolution = gate.resolve(TaskKind.OTHER_REFINEMENT, instance.id, context)
                if resolution is None:
                    continue
                if "name" in resolution and resolution["mode_id"] not in seen:
                    if current_taxonomy.get(resolution["mode_id"]) is None:
                        findings.append(proposed_mode_from_resolution(resolution))
                        seen.add(resolution["mode_id"])
            gate.check_blocked("taxonomy refinement")
            return findings

        iteration_counter = {"n": 0}

        def on_iteration(labels: dict[str, str], taxonomy_now: Taxonomy):
            iteration_counter["n"] += 1
            histogram = _mode_histogram(labels)
            nonlocal strat_state
            if strat_state is not None:
                strat_state = stratification.append_mode_ratios(strat_state, histogram)
            payload = {
                "version": taxonomy_now.version,
                "mode_ids": sorted(taxonomy_now.mode_ids()),
                "iteration": iteration_counter["n"],
                "mode_ratios": histogram,
            }
            # Convergence is checked on the global histogram; the per-stratum
            # breakdown is journaled for audit only.
            if strat_state is not None:
                payload["mode_ratios_by_stratum"] = {
                    str(stratum.index): _mode_histogram(
                        {i: labels[i] for i in stratum.member_ids if i in labels}
                    )
                    for stratum in strat_state.strata
                }
            ctx.journal.append(EventKind.TAXONOMY_VERSIONED, payload)

        result = taxonomy_loop.run_until_stable(
            loop_state,
            classifiers,
            [instances[i] for i in failed_ids],
            refiner,
            evidence=evidence,
            on_event=on_event,
            on_iteration=on_iteration,
        )
        ctx.journal.append(
            EventKind.TAXONOMY_VERSIONED,
            {
                "version": result.taxonomy.version,
                "parent_version": result.taxonomy.parent_version,
                "mode_ids": sorted(result.taxonomy.mode_ids()),
                "modes": [mode_to_payload(m) for m in result.taxonomy.modes],
                "converged": result.converged,
                "coverage": result.state.coverage,
            },
        )
        if not result.converged and result.escalated:
            # NonConvergent: the remaining OTHER instances go to the human
            # queue; resolution happens out of band, not in this stage.
            for instance_id in result.escalated:
                queue.open_task(
                    TaskKind.OTHER_REFINEMENT,
                    instance_id,
                    _task_context(instances[instance_id], purpose="escalation"),
                )
        if strat_state is not None and len(strat_state.mode_ratio_history) >= 2:
            terminated = stratification.check_termination(
                strat_state, ctx.config.thresholds.epsilon_dist
            )
        else:
            terminated = False
        ctx.journal.append(
            EventKind.TAXONOMY_VERSIONED,
            {
                "version": result.taxonomy.version,
                "mode_ids": sorted(result.taxonomy.mode_ids()),
                "stratification_terminated": terminated,
            },
        )
        ctx.close()
    return result


def _mode_histogram(labels: dict[str, str]) -> dict[str, float]:
    classified = [l for l in labels.values() if l != taxonomy_loop.UNLABELED]
    if not classified:
        return {}
    counts: dict[str, int] = {}
    for label in classified:
        counts[label] = counts.get(label, 0) + 1
    return {mode: counts[mode] / len(classified) for mode in sorted(counts)}


def _evidence_text(instance: ThreatInstance, raw_output: Optional[str]) -> str:
    lines = [f"task: {instance.task.name}", f"stage: {instance.task.stage.value}"]
    signals = _safe_signals(instance, raw_output)
    for signal in signals:
        if signal.strength.value != "absent":
            lines.append(f"signal {signal.mode_hint}: {signal.strength.value}")
            for out_frag, ref_frag, note in signal.evidence:
                lines.append(f"  output: {out_frag} | reference: {ref_frag} | {note}")
    return "\n".join(lines)


def _safe_signals(instance: ThreatInstance, raw_output: Optional[str]) -> list[Signal]:
    if raw_output is None:
        return []
    try:
        out = parse_output(raw_output)
    except ContractViolation:
        return []
    return extract_signals(instance, out)


def cmd_deliberate(ctx: RunContext) -> dict[str, DeliberationRecord]:
    ctx.require_kinds("deliberate", EventKind.TAXONOMY_VERSIONED)
    events = ctx.events()
    replayed = replay(events, ctx.config)
    if replayed.taxonomy is None:
        raise MissingUpstream("no taxonomy in journal; run taxonomy first")
    taxonomy = replayed.taxonomy
    instances = ctx.instance_map()
    outputs = _read_outputs(ctx)
    failed_ids = sorted(
        i for i, v in replayed.verdicts.items() if v == Verdict.FAILED.value
    )
    finalized = {
        i for i, r in replayed.deliberations.items() if r.final_label is not None
    }
    _refuse_if_done(ctx, "deliberate", bool(failed_ids) and set(failed_ids) <= finalized)
    agents = [ctx.build_agent(spec) for spec in ctx.config.agents["deliberation"]]

    records: dict[str, DeliberationRecord] = {}
    with run_lock(ctx.paths):
        queue = AnnotationQueue(ctx.journal)
        gate = HumanGate(queue, events, ctx.annotator())

        def on_event(kind: str, payload: dict):
            payload = dict(payload)
            payload["phase"] = "deliberation"
            ctx.journal.append(EventKind(kind), payload)

        def journal_record(record: DeliberationRecord):
            ctx.journal.append(
                EventKind.DELIBERATION_RECORDED,
                {
                    "instance_id": record.instance_id,
                    "round1": dict(sorted(record.round1.items())),
                    "round2": dict(sorted(record.round2.items())),
                    "uncertain": record.uncertain,
                    "final_label": record.final_label,
                    "provenance": record.provenance.value if record.provenance else None,
                },
            )

        for instance_id in failed_ids:
            if instance_id in finalized:
                records[instance_id] = replayed.deliberations[instance_id]
                continue
            instance = instances[instance_id]
            evidence = _evidence_text(instance, outputs.get(instance_id))
            try:
                record = consensus.deliberate_instance(
                    instance, agents, taxonomy, evidence=evidence, on_event=on_event
                )
            except InstanceEscalated:
                record = DeliberationRecord(
                    instance_id=instance_id, round1={}, round2={}, uncertain=True
                )
            journal_record(record)
            if record.uncertain:
                context = _task_context(
                    instance,
                    raw_output=outputs.get(instance_id),
                    signals=_safe_signals(instance, outputs.get(instance_id)),
                    agent_labels={
                        "round1": dict(sorted(record.round1.items())),
                        "round2": dict(sorted(record.round2.items())),
                    },
                )
                resolution = gate.resolve(
                    TaskKind.UNCERTAIN_RESOLUTION, instance_id, context
                )
                if resolution is None:
                    records[instance_id] = record
                    continue
                record = consensus.finalize(record, human_label=resolution["mode_id"])
            else:
                record = consensus.finalize(record)
            journal_record(record)
            records[instance_id] = record
        gate.check_blocked("deliberation")
        ctx.close()
    return records


# ---------------------------------------------------------------------------
# Report.
# ---------------------------------------------------------------------------


def cmd_report(ctx: RunContext) -> tuple[str, dict]:
    ctx.require_kinds("report", EventKind.SCORE_RECORDED, EventKind.DELIBERATION_RECORDED)
    replayed = replay_run(ctx)
    instances = ctx.instance_map()
    registry = task_registry()

    by_task: dict[str, list[float]] = {}
    for score in replayed.scores.values():
        task_name = instances[score.instance_id].task.name
        by_task.setdefault(task_name, []).append(score.value)
    task_rows = []
    for task_name in registry:
        if task_name not in by_task:
            continue
        values = by_task[task_name]
        task_rows.append(
            {
                "task": task_name,
                "stage": registry[task_name].stage.value,
                "metric": registry[task_name].metric_kind.value.upper(),
                "instances": len(values),
                "mean_score": round(sum(values) / len(values), 4),
            }
        )

    verdict_counts = {v.value: 0 for v in Verdict}
    for verdict in replayed.verdicts.values():
        verdict_counts[verdict] += 1

    final_labels = {
        r.instance_id: r.final_label
        for r in replayed.deliberations.values()
        if r.final_label is not None
    }
    mode_counts: dict[str, int] = {}
    for label in final_labels.values():
        mode_counts[label] = mode_counts.get(label, 0) + 1
    taxonomy = replayed.taxonomy
    mode_rows = []
    for mode_id in sorted(mode_counts, key=_mode_sort):
        mode = taxonomy.get(mode_id) if taxonomy else None
        mode_rows.append(
            {
                "mode_id": mode_id,
                "name": mode.name if mode else mode_id,
                "category": mode.category.value if mode else "unknown",
                "count": mode_counts[mode_id],
                "ratio": round(mode_counts[mode_id] / max(1, len(final_labels)), 4),
            }
        )

    uncertain = [r for r in replayed.deliberations.values() if r.uncertain]
    human_resolved = [
        r for r in replayed.deliberations.values() if r.provenance is Provenance.HUMAN
    ]

    report = {
        "run_id": ctx.run_id,
        "instances": len(instances),
        "tasks": task_rows,
        "verdicts": verdict_counts,
        "stratification": {
            "inspected": replayed.strat.inspected_count if replayed.strat else 0,
            "budget_limit": replayed.strat.budget_limit if replayed.strat else 0,
            "mode_ratio_batches": len(replayed.strat.mode_ratio_history)
            if replayed.strat
            else 0,
        },
        "taxonomy": {
            "version": taxonomy.version if taxonomy else None,
            "modes": sorted(taxonomy.mode_ids()) if taxonomy else [],
            "loop_iterations": replayed.loop_iterations,
        },
        "failure_modes": mode_rows,
        "deliberation": {
            "instances": len(replayed.deliberations),
            "uncertain": len(uncertain),
            "uncertain_rate": round(
                len(uncertain) / max(1, len(replayed.deliberations)), 4
            ),
            "human_resolved": len(human_resolved),
        },
    }

    text = _render_text_report(report)
    with open(ctx.paths.report_json, "w", encoding="utf-8") as handle:
        json.dump(report, handle, indent=2, sort_keys=True)
        handle.write("\n")
    with open(ctx.paths.report_text, "w", encoding="utf-8") as handle:
        handle.write(text)
    return text, report


def _mode_sort(mode_id: str) -> tuple[int, int]:
    major, minor = mode_id.split(".", 1)
    return int(major), int(minor)


def _render_text_report(report: dict) -> str:
    lines = [f"run {report['run_id']}  ({report['instances']} instances)", ""]
    lines.append("per-task scores")
    header = f"{'task':<28} {'stage':<17} {'metric':<7} {'n':>4} {'mean':>7}"
    lines.append(header)
    lines.append("-" * len(header))
    for row in report["tasks"]:
        lines.append(
            f"{row['task']:<28} {row['stage']:<17} {row['metric']:<7} "
            f"{row['instances']:>4} {row['mean_score']:>7.4f}"
        )
    lines.append("")
    verdicts = report["verdicts"]
    lines.append(
        "verdicts: "
        + ", ".join(f"{name}={verdicts[name]}" for name in sorted(verdicts))
    )
    strat = report["stratification"]
    lines.append(
        f"manual inspections: {strat['inspected']} (budget {strat['budget_limit']})"
    )
    tax = report["taxonomy"]
    lines.append(
        f"taxonomy: version {tax['version']}, {len(tax['modes'])} modes, "
        f"{tax['loop_iterations']} loop iterations"
    )
    lines.append("")
    lines.append("failure-mode ratios (over finalized failures)")
    for row in report["failure_modes"]:
        lines.append(
            f"  {row['mode_id']:<5} {row['name']:<28} {row['category']:<27} "
            f"{row['count']:>4}  {row['ratio']:.4f}"
        )
    delib = report["deliberation"]
    lines.append("")
    lines.append(
        f"deliberation: {delib['instances']} instances, {delib['uncertain']} uncertain "
        f"({delib['uncertain_rate']:.4f}), {delib['human_resolved']} human-resolved"
    )
    lines.append("")
    return "\n".join(lines)


def rebuild_queue(ctx: RunContext) -> AnnotationQueue:
    """Reconstruct the annotation queue (with task contexts) from the journal.

    The returned queue appends to the live journal, so resolutions submitted
    through the service land as TaskClosed events that the next stage rerun
    consumes.
    """
    queue = AnnotationQueue(ctx.journal)
    seq = 0
    for event in ctx.events():
        if event.kind is EventKind.TASK_OPENED:
            seq += 1
            queue.restore(
                AnnotationTask(
                    task_id=event.payload["task_id"],
                    kind=TaskKind(event.payload["kind"]),
                    instance_ref=event.payload["instance_id"],
                    context=event.payload.get("context", {}),
                    opened_seq=seq,
                )
            )
        elif event.kind is EventKind.TASK_CLOSED:
            task_id = event.payload["task_id"]
            try:
                task = queue.get(task_id)
            except Exception:
                continue
            task.resolution = event.payload["resolution"]
            task.status = TaskStatus.CLOSED
            queue.restore(task)
    return queue


def run_status(ctx: RunContext) -> dict:
    events = ctx.events()
    kinds: dict[str, int] = {}
    for event in events:
        kinds[event.kind.value] = kinds.get(event.kind.value, 0) + 1
    open_tasks = 0
    closed = set()
    opened = set()
    for event in events:
        if event.kind is EventKind.TASK_OPENED:
            opened.add(event.payload["task_id"])
        elif event.kind is EventKind.TASK_CLOSED:
            closed.add(event.payload["task_id"])
    open_tasks = len(opened - closed)
    return {
        "run_id": ctx.run_id,
        "events": len(events),
        "kinds": dict(sorted(kinds.items())),
        "open_tasks": open_tasks,
    }
