"""Autoregressive taxonomy refinement over the failure set.

Seed a taxonomy from human inspection, let an agent classify every failure
into the current vocabulary or OTHER, route the OTHER pile back to humans,
grow the taxonomy with their findings, and repeat until no new modes appear
and coverage clears the threshold. Classification may fan out; refinement and
state transitions are serialized by the single caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

from .agents import Agent, ClassificationRequest, OTHER_LABEL, TransportFailure, extract_mode_id
from .core import FailureMode, Taxonomy, ThreatInstance, seed_catalog

UNLABELED = "UNLABELED"

DEFAULT_RHO = 0.6

EventSink = Callable[[str, dict], None]


class TaxonomyLoopError(Exception):
    pass


@dataclass(frozen=True)
class LoopState:
    taxonomy: Taxonomy
    iteration: int = 0
    labels: Mapping[str, str] = field(default_factory=dict)
    other_set: frozenset[str] = frozenset()
    rho: float = DEFAULT_RHO
    # Declared by the refinement procedure's inputs but unused by its body;
    # kept as a config knob so configs round-trip, deliberately a no-op.
    stability_epsilon: Optional[float] = None

    @property
    def coverage(self) -> float:
        classified = [l for l in self.labels.values() if l != UNLABELED]
        if not classified:
            return 0.0
        return 1.0 - sum(1 for l in classified if l == OTHER_LABEL) / len(classified)


@dataclass(frozen=True)
class LoopResult:
    taxonomy: Taxonomy
    state: LoopState
    iterations: int
    converged: bool
    escalated: tuple[str, ...] = ()


def seed_taxonomy(
    seed_annotations: Sequence[tuple[str, FailureMode | str]],
    catalog: Optional[Taxonomy] = None,
) -> Taxonomy:
    """Version-0 taxonomy: the seed catalog merged with deduplicated human
    proposals from the initial inspection sample."""
    if not seed_annotations:
        raise TaxonomyLoopError("seed annotations must be non-empty")
    base = catalog if catalog is not None else seed_catalog()
    proposed: dict[str, FailureMode] = {}
    for _, proposal in seed_annotations:
        if isinstance(proposal, str):
            if base.get(proposal) is None and proposal not in proposed:
                raise TaxonomyLoopError(f"unknown mode id proposed by name: {proposal}")
            continue
        existing = base.get(proposal.mode_id) or proposed.get(proposal.mode_id)
        if existing is not None:
            if existing.name != proposal.name:
                raise TaxonomyLoopError(
                    f"mode id {proposal.mode_id} already names {existing.name!r}"
                )
            continue
        proposed[proposal.mode_id] = proposal
    if not proposed:
        return base
    merged = base.extended(tuple(proposed.values()))
    # Seeding happens before the loop starts; the merged catalog is still
    # version 0 of this run's taxonomy.
    return Taxonomy(version=0, modes=merged.modes, parent_version=None)


def classify_batch(
    agent: Agent,
    instances: Sequence[ThreatInstance],
    taxonomy: Taxonomy,
    evidence: Optional[Mapping[str, str]] = None,
    on_event: Optional[EventSink] = None,
) -> dict[str, str]:
    """Label every instance with a taxonomy mode id, OTHER, or UNLABELED.

    Out-of-vocabulary agent replies coerce to OTHER with a logged coercion
    event; transport failures mark the instance UNLABELED for requeue.
    """
    entries = tuple((m.mode_id, m.name, m.description) for m in taxonomy.modes)
    known = taxonomy.mode_ids()
    labels: dict[str, str] = {}
    for instance in instances:
        request = ClassificationRequest(
            instance_id=instance.id,
            task_name=instance.task.name,
            stage=instance.task.stage.value,
            evidence=(evidence or {}).get(instance.id, "\n".join(instance.input_payload.text_blocks)),
            taxonomy_entries=entries,
        )
        try:
            raw = agent.classify(request)
        except TransportFailure:
            labels[instance.id] = UNLABELED
            if on_event:
                on_event(
                    "LabelProposed",
                    {
                        "instance_id": instance.id,
                        "agent_id": agent.agent_id,
                        "label": UNLABELED,
                        "requeued": True,
                    },
                )
            continue
        label = coerce_label(raw, known)
        coerced = label == OTHER_LABEL and raw.strip().casefold() != "other" and raw.strip() not in known
        labels[instance.id] = label
        if on_event:
            payload = {
                "instance_id": instance.id,
                "agent_id": agent.agent_id,
                "label": label,
                "raw": raw,
            }
            if coerced:
                payload["coerced"] = True
            on_event("LabelProposed", payload)
    return labels


def coerce_label(raw: str, known_mode_ids: frozenset[str]) -> str:
    """Coerce raw agent text to the taxonomy vocabulary or OTHER."""
    text = raw.strip()
    if text in known_mode_ids:
        return text
    if text.casefold() == "other":
        return OTHER_LABEL
    extracted = extract_mode_id(text)
    if extracted is not None and extracted in known_mode_ids:
        return extracted
    return OTHER_LABEL


def refine(state: LoopState, human_findings: Sequence[FailureMode]) -> LoopState:
    """Fold human findings from the OTHER pile into the next taxonomy version.

    OTHER-labeled instances reset to unlabeled for re-classification; the
    iteration counter advances either way.
    """
    if human_findings:
        new_modes = tuple(m for m in human_findings if state.taxonomy.get(m.mode_id) is None)
        for mode in human_findings:
            existing = state.taxonomy.get(mode.mode_id)
            if existing is not None and existing.name != mode.name:
                raise TaxonomyLoopError(
                    f"mode id {mode.mode_id} already names {existing.name!r}"
                )
        taxonomy = state.taxonomy.extended(new_modes) if new_modes else state.taxonomy
    else:
        taxonomy = state.taxonomy

    labels = dict(state.labels)
    for instance_id in state.other_set:
        labels.pop(instance_id, None)
    return replace(
        state,
        taxonomy=taxonomy,
        iteration=state.iteration + 1,
        labels=labels,
        other_set=frozenset(),
    )


def run_until_stable(
    state: LoopState,
    agents: Sequence[Agent],
    instances: Sequence[ThreatInstance],
    refiner: Callable[[Sequence[ThreatInstance], Taxonomy, int], Sequence[FailureMode]],
    max_iterations: int = 10,
    evidence: Optional[Mapping[str, str]] = None,
    on_event: Optional[EventSink] = None,
    on_iteration: Optional[Callable[[dict, Taxonomy], None]] = None,
) -> LoopResult:
    """Iterate classify -> refine until no new modes appear and coverage >= rho.

    If a round adds no modes but coverage stays below rho, all remaining
    OTHER instances escalate to the human queue and the run ends
    non-convergent. ``refiner`` is the human side of the loop (annotation
    queue in production, a script in tests).
    """
    if not instances:
        raise TaxonomyLoopError("no failure instances to classify")
    by_id = {i.id: i for i in instances}
    classifier_for = _round_robin(agents, sorted(by_id))

    for _ in range(max_iterations):
        pending = [by_id[i] for i in sorted(by_id) if state.labels.get(i) in (None, UNLABELED)]
        labels = dict(state.labels)
        for agent, batch in _group_by_agent(classifier_for, pending):
            labels.update(
                classify_batch(agent, batch, state.taxonomy, evidence=evidence, on_event=on_event)
            )
        other = frozenset(i for i, l in labels.items() if l == OTHER_LABEL)
        state = replace(state, labels=labels, other_set=other)
        if on_iteration is not None:
            on_iteration(dict(labels), state.taxonomy)

        findings = tuple(refiner([by_id[i] for i in sorted(other)], state.taxonomy, state.iteration))
        new_modes = tuple(m for m in findings if state.taxonomy.get(m.mode_id) is None)
        grew = bool(new_modes)
        previous_other = state.other_set
        state = refine(state, findings)
        if on_event and grew:
            on_event(
                "TaxonomyVersioned",
                {
                    "version": state.taxonomy.version,
                    "mode_ids": sorted(state.taxonomy.mode_ids()),
                },
            )

        if not grew:
            # Re-apply the final labels for the former OTHER pile: with no new
            # modes they would classify identically, so restore rather than
            # re-query the agents.
            labels = dict(state.labels)
            for instance_id in previous_other:
                labels[instance_id] = OTHER_LABEL
            state = replace(state, labels=labels, other_set=previous_other)
            if state.coverage >= state.rho:
                return LoopResult(
                    taxonomy=state.taxonomy,
                    state=state,
                    iterations=state.iteration,
                    converged=True,
                )
            return LoopResult(
                taxonomy=state.taxonomy,
                state=state,
                iterations=state.iteration,
                converged=False,
                escalated=tuple(sorted(previous_other)),
            )

    return LoopResult(
        taxonomy=state.taxonomy,
        state=state,
        iterations=state.iteration,
        converged=False,
        escalated=tuple(sorted(state.other_set)),
    )


def _round_robin(agents: Sequence[Agent], instance_ids: Sequence[str]) -> dict[str, Agent]:
    if not agents:
        raise TaxonomyLoopError("at least one classification agent is required")
    return {
        instance_id: agents[i % len(agents)] for i, instance_id in enumerate(instance_ids)
    }


def _group_by_agent(
    classifier_for: Mapping[str, Agent], instances: Sequence[ThreatInstance]
) -> list[tuple[Agent, list[ThreatInstance]]]:
    groups: dict[str, tuple[Agent, list[ThreatInstance]]] = {}
    for instance in instances:
        agent = classifier_for[instance.id]
        groups.setdefault(agent.agent_id, (agent, []))[1].append(instance)
    return [groups[key] for key in sorted(groups)]
