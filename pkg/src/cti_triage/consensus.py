"""Two-round multi-agent deliberation with an uncertainty set and human finalization.

Round one: every agent labels the instance independently. Round two: every
agent sees all round-one labels at once and may revise. An instance is
uncertain when any two agents disagree in round two or any single agent
flipped between rounds; uncertain instances are finalized by humans, the
rest take their unanimous round-two label.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Optional, Sequence

from .agents import Agent, ClassificationRequest, DecodeSettings, TransportFailure
from .core import Taxonomy, ThreatInstance
from .taxonomy_loop import coerce_label

EventSink = Callable[[str, dict], None]

MIN_AGENTS = 2


class ConsensusError(Exception):
    pass


class InstanceEscalated(ConsensusError):
    """Too few surviving agents; the instance goes straight to humans."""


class Provenance(enum.Enum):
    CONSENSUS = "consensus"
    HUMAN = "human"


@dataclass(frozen=True)
class AgentLabel:
    agent_id: str
    round: int
    label: str


@dataclass(frozen=True)
class DeliberationRecord:
    instance_id: str
    round1: Mapping[str, str]
    round2: Mapping[str, str]
    uncertain: bool
    final_label: Optional[str] = None
    provenance: Optional[Provenance] = None


def round_one(
    instance: ThreatInstance,
    agents: Sequence[Agent],
    taxonomy: Taxonomy,
    evidence: Optional[str] = None,
    decode: DecodeSettings = DecodeSettings(),
    on_event: Optional[EventSink] = None,
) -> dict[str, str]:
    """Independent labels; no agent sees its peers."""
    if len(agents) < MIN_AGENTS:
        raise ConsensusError(f"need at least {MIN_AGENTS} agents")
    return _run_round(instance, agents, taxonomy, None, evidence, decode, on_event)


def round_two(
    instance: ThreatInstance,
    agents: Sequence[Agent],
    taxonomy: Taxonomy,
    round1: Mapping[str, str],
    evidence: Optional[str] = None,
    decode: DecodeSettings = DecodeSettings(),
    on_event: Optional[EventSink] = None,
) -> dict[str, str]:
    """Revised labels; every agent receives all round-one labels at once."""
    if not round1:
        raise ConsensusError("round one must be recorded first")
    return _run_round(instance, agents, taxonomy, dict(round1), evidence, decode, on_event)


def _run_round(
    instance: ThreatInstance,
    agents: Sequence[Agent],
    taxonomy: Taxonomy,
    peer_labels: Optional[Mapping[str, str]],
    evidence: Optional[str],
    decode: DecodeSettings,
    on_event: Optional[EventSink],
) -> dict[str, str]:
    entries = tuple((m.mode_id, m.name, m.description) for m in taxonomy.modes)
    known = taxonomy.mode_ids()
    labels: dict[str, str] = {}
    for agent in agents:
        request = ClassificationRequest(
            instance_id=instance.id,
            task_name=instance.task.name,
            stage=instance.task.stage.value,
            evidence=evidence or "\n".join(instance.input_payload.text_blocks),
            taxonomy_entries=entries,
            peer_labels=peer_labels,
            decode=decode,
        )
        try:
            raw = agent.classify(request)
        except TransportFailure:
            if on_event:
                on_event(
                    "LabelProposed",
                    {
                        "instance_id": instance.id,
                        "agent_id": agent.agent_id,
                        "label": "EXCLUDED",
                        "round": 1 if peer_labels is None else 2,
                    },
                )
            continue
        labels[agent.agent_id] = coerce_label(raw, known)
    return labels


def deliberate_instance(
    instance: ThreatInstance,
    agents: Sequence[Agent],
    taxonomy: Taxonomy,
    evidence: Optional[str] = None,
    decode: DecodeSettings = DecodeSettings(),
    on_event: Optional[EventSink] = None,
) -> DeliberationRecord:
    """Both rounds for one instance; raises InstanceEscalated when fewer than
    two agents survive a round."""
    r1 = round_one(instance, agents, taxonomy, evidence, decode, on_event)
    if len(r1) < MIN_AGENTS:
        raise InstanceEscalated(instance.id)
    r2 = round_two(instance, agents, taxonomy, r1, evidence, decode, on_event)
    if len(r2) < MIN_AGENTS:
        raise InstanceEscalated(instance.id)
    record = DeliberationRecord(
        instance_id=instance.id, round1=r1, round2=r2, uncertain=False
    )
    return replace(record, uncertain=is_uncertain(record))


def is_uncertain(record: DeliberationRecord) -> bool:
    """Disagreement or cross-round fluctuation.

    Disagreement is evaluated over round-two labels plus the round-one labels
    of agents that dropped out of round two (their vote still conflicts).
    The flip test applies only to agents present in both rounds.
    """
    votes = list(record.round2.values()) + [
        label for agent, label in record.round1.items() if agent not in record.round2
    ]
    if len(set(votes)) > 1:
        return True
    return any(
        record.round1[agent] != record.round2[agent]
        for agent in record.round2
        if agent in record.round1
    )


def uncertainty_set(records: Sequence[DeliberationRecord]) -> set[str]:
    return {record.instance_id for record in records if is_uncertain(record)}


def finalize(
    record: DeliberationRecord, human_label: Optional[str] = None
) -> DeliberationRecord:
    """Certain records take the unanimous round-two label (Consensus);
    uncertain records require the human label (Human)."""
    if record.uncertain:
        if human_label is None:
            raise ConsensusError(f"{record.instance_id}: uncertain, human label required")
        return replace(record, final_label=human_label, provenance=Provenance.HUMAN)
    if human_label is not None:
        raise ConsensusError(
            f"{record.instance_id}: certain instances take the consensus label"
        )
    labels = set(record.round2.values())
    if len(labels) != 1:
        raise ConsensusError(f"{record.instance_id}: record is not unanimous")
    return replace(
        record, final_label=next(iter(labels)), provenance=Provenance.CONSENSUS
    )
