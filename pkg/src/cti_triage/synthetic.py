"""Deterministic synthetic corpus plus scripted agents and annotator.

The generator plants a ground truth per instance (correct / failed, and for
failures a failure mode); the scripted evaluator renders contract outputs
whose quality matches that truth, scripted classifiers label failures with
the planted mode, and the scripted annotator resolves queue tasks from the
same plan. Everything derives from (seed, instance id) via stable hashing,
so two runs with the same config are byte-identical end to end.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from typing import Mapping, Optional

from .agents import ClassificationRequest, OTHER_LABEL, ScriptedAgent, stable_bucket
from .annotation import AnnotationQueue, AnnotationTask, TaskKind
from .core import (
    CtiStage,
    FailureMode,
    InputPayload,
    ReferenceMaterial,
    ThreatInstance,
    VulnerabilityCategory,
    task_registry,
)

SNAPSHOT = "2025-06-01"

# Modes scripted humans may "discover" during refinement; they are not part
# of the seed catalog.
SPECIAL_MODES = {
    "4.1": FailureMode(
        mode_id="4.1",
        name="Cross-feed alias drift",
        category=VulnerabilityCategory.EMERGENT,
        description="Labels drift when the same campaign is tracked under different feed aliases.",
        applicable_stages=frozenset(CtiStage),
    ),
    "4.2": FailureMode(
        mode_id="4.2",
        name="Cached risk reuse",
        category=VulnerabilityCategory.EMERGENT,
        description="Stale cached risk scores are reused after the landscape has moved on.",
        applicable_stages=frozenset(CtiStage),
    ),
}

# Task mix for the bundled corpus: all four stages, all five metric kinds.
CORPUS_TASKS = [
    "IOC Normalization",
    "Vulnerability Linking",
    "Threat Report Alignment",
    "Source Reliability Scoring",
    "TTP Extraction",
    "Campaign Attribution",
    "Relation Graph Building",
    "Exploit Likelihood",
    "Target Sector Prediction",
    "Impact Forecast",
    "Patch Recommendation",
    "Response Summarization",
    "Countermeasure Ranking",
    "Incident Ticket Generation",
]

# Natural failure modes planted when a task's answer is corrupted. Chosen to
# respect each mode's stage applicability.
TASK_FAILURE_MODES = {
    "IOC Normalization": ["1.2", "1.1"],
    "Vulnerability Linking": ["2.3", "3.1"],
    "Threat Report Alignment": ["2.2", "3.1"],
    "Source Reliability Scoring": ["1.4", "2.2"],
    "TTP Extraction": ["1.5", "2.4"],
    "Campaign Attribution": ["3.3", "2.6"],
    "Relation Graph Building": ["1.1", "1.3"],
    "Exploit Likelihood": ["2.5", "1.3", "3.2"],
    "Target Sector Prediction": ["3.4", "3.2"],
    "Impact Forecast": ["2.1", "3.2"],
    "Patch Recommendation": ["2.2", "2.6"],
    "Response Summarization": ["2.1", "2.6"],
    "Countermeasure Ranking": ["3.2", "2.2"],
    "Incident Ticket Generation": ["2.2", "2.6"],
}

# Bad instances of these tasks are planted with the discoverable modes, in
# order, until the quota runs out.
SPECIAL_PLANTS = [("Campaign Attribution", "4.1", 6), ("Incident Ticket Generation", "4.2", 5)]

_WORDS = (
    "actor beacon campaign credential domain endpoint exploit feed gateway "
    "host implant intrusion lateral loader malware payload persistence "
    "phishing proxy ransomware registry server subnet telemetry tunnel"
).split()

_SECTORS = ["healthcare", "finance", "energy", "retail", "education", "logistics"]


@dataclass(frozen=True)
class PlantedTruth:
    verdict: str  # "failed" | "correct"
    mode: Optional[str] = None  # planted failure mode for failed instances


def make_corpus(n: int = 200, seed: int = 11) -> tuple[list[ThreatInstance], dict[str, PlantedTruth]]:
    """Generate n instances with a planted truth table."""
    registry = task_registry()
    instances: list[ThreatInstance] = []
    plan: dict[str, PlantedTruth] = {}
    special_quota = {mode: quota for _, mode, quota in SPECIAL_PLANTS}
    special_task = {task: mode for task, mode, _ in SPECIAL_PLANTS}

    for i in range(n):
        task_name = CORPUS_TASKS[i % len(CORPUS_TASKS)]
        rng = random.Random(seed * 1_000_003 + i)
        instance_id = f"syn-{i:04d}"
        roll = rng.random()
        if roll < 0.46:
            truth = PlantedTruth("correct")
        elif roll < 0.50 and task_name in ("IOC Normalization", "Patch Recommendation"):
            # Partial-credit failures: mid-range scores that exercise the
            # boundary queue.
            truth = PlantedTruth("failed", _pick_mode(task_name, rng))
        else:
            mode = _pick_mode(task_name, rng)
            special = special_task.get(task_name)
            if special is not None and special_quota.get(special, 0) > 0:
                special_quota[special] -= 1
                mode = special
            truth = PlantedTruth("failed", mode)
        plan[instance_id] = truth
        instances.append(_build_instance(instance_id, task_name, registry[task_name], rng))
    return instances, plan


def _pick_mode(task_name: str, rng: random.Random) -> str:
    return rng.choice(TASK_FAILURE_MODES[task_name])


def _sentence(rng: random.Random, length: int) -> str:
    return " ".join(rng.choice(_WORDS) for _ in range(length))


def _build_instance(instance_id, task_name, task, rng) -> ThreatInstance:
    gold_label = None
    reference_texts: tuple = ()
    relations = None
    time_anchors = None
    scope = None
    tags = None
    extra: dict = {}

    if task_name == "IOC Normalization":
        values = [f"{rng.randint(10, 250)}.0.{rng.randint(1, 250)}.{rng.randint(1, 250)}" for _ in range(3)]
        reference_texts = tuple(f"ipv4:{v}" for v in values)
        legacy = f"198.51.100.{rng.randint(1, 250)}"
        relations = ((legacy, "ioc_status", "legacy"),) + tuple(
            (v, "ioc_status", "active") for v in values
        )
        extra = {"candidates": values, "legacy_ioc": legacy}
    elif task_name == "Vulnerability Linking":
        gold_label = f"CVE-2024-{1000 + rng.randint(0, 999)}"
        reference_texts = (gold_label,)
        tags = ("CVSS:3.1",)
        extra = {"decoy": f"CVE-2020-{1000 + rng.randint(0, 999)}"}
    elif task_name in ("Threat Report Alignment", "Response Summarization", "Impact Forecast"):
        reference_texts = (_sentence(rng, 10),)
        time_anchors = {"exploitation": f"2025-0{rng.randint(1, 5)}-10"}
    elif task_name in ("Source Reliability Scoring", "Exploit Likelihood"):
        prefix = "src" if task_name == "Source Reliability Scoring" else "CVE-2025-"
        items = [f"{prefix}{1000 + rng.randint(0, 8999) + k}" for k in range(6)]
        labels = [1, 1, 1, 0, 0, 0]
        rng.shuffle(labels)
        relations = tuple((item, "label", str(lab)) for item, lab in zip(items, labels))
        gold_label = "exploitation" if task_name == "Exploit Likelihood" else "reliability"
        tags = ("CVSS:3.1",)
        extra = {"candidates": items}
    elif task_name == "TTP Extraction":
        techniques = [f"T{1050 + rng.randint(0, 49)}.{rng.randint(1, 9):03d}" for _ in range(3)]
        reference_texts = tuple(techniques)
        extra = {"candidates": techniques}
    elif task_name == "Campaign Attribution":
        gold_label = f"campaign-{rng.randint(100, 999)}"
        reference_texts = (gold_label,)
    elif task_name == "Relation Graph Building":
        triples = [
            (f"domain-{rng.randint(1, 99)}.example", "hosts", f"203.0.113.{rng.randint(1, 250)}")
            for _ in range(3)
        ]
        relations = tuple(triples)
        reference_texts = tuple("|".join(t) for t in triples)
        extra = {"decoy_relation": [f"actor-{rng.randint(1, 50)}", "controls", triples[0][0]]}
    elif task_name == "Target Sector Prediction":
        sectors = rng.sample(_SECTORS, 3)
        gold_label = sectors[0]
        reference_texts = (gold_label,)
        scope = tuple(sectors)
    elif task_name == "Patch Recommendation":
        patches = [f"KB{500000 + rng.randint(0, 99999)}" for _ in range(3)]
        reference_texts = tuple(patches)
        extra = {"candidates": patches}
    elif task_name == "Countermeasure Ranking":
        items = [f"M{1000 + rng.randint(0, 8999) + k}" for k in range(4)]
        grades = [3, 2, 1, 0]
        rng.shuffle(grades)
        relations = tuple((item, "relevance", str(g)) for item, g in zip(items, grades))
        gold_label = "ranking"
        extra = {"candidates": items}
    elif task_name == "Incident Ticket Generation":
        gold_label = rng.choice(["malware", "phishing", "ransomware", "intrusion"])
        reference_texts = (gold_label,)
    else:
        raise ValueError(f"no generator for task {task_name}")

    return ThreatInstance(
        id=instance_id,
        task=task,
        input_payload=InputPayload(
            text_blocks=(_sentence(rng, 12),),
            iocs=tuple(extra.get("candidates", ())[:2]) if task_name == "IOC Normalization" else (),
            cve_ids=(gold_label,) if task_name == "Vulnerability Linking" else (),
            time_anchors=dict(time_anchors or {}),
            extra=extra,
        ),
        reference=ReferenceMaterial(
            gold_label=gold_label,
            reference_texts=reference_texts,
            relations=relations,
            time_anchors=time_anchors,
            scope=scope,
            taxonomy_version_tags=tags,
        ),
        source="synthetic",
        snapshot_date=SNAPSHOT,
    )


# ---------------------------------------------------------------------------
# Scripted evaluator.
# ---------------------------------------------------------------------------


def make_evaluator(plan: Mapping[str, PlantedTruth], seed: int = 11) -> ScriptedAgent:
    def respond(instance: ThreatInstance) -> str:
        return render_output(instance, plan[instance.id], seed)

    return ScriptedAgent("scripted-evaluator", response_fn=respond, seed=seed)


def render_output(instance: ThreatInstance, truth: PlantedTruth, seed: int) -> str:
    rng = random.Random(f"{seed}:{instance.id}:eval")
    failed = truth.verdict == "failed"
    answer = _render_answer(instance, truth, rng)
    doc = {
        "status": "OK",
        "task": instance.task.name,
        "case_id": instance.id,
        "snapshot_date": instance.snapshot_date,
        "answer": answer,
        "confidence": round(0.55 + 0.4 * rng.random(), 3) if not failed else round(0.5 + 0.2 * rng.random(), 3),
        "justification": "grounded in the listed documents and feeds",
        "evidence_refs": ["DOC-0"],
        "metadata": {
            "stage": instance.task.stage.value.upper(),
            "assumptions": [],
            "missing_fields": [],
        },
    }
    raw = json.dumps(doc, sort_keys=True)
    # A sliver of responses break the single-object rule, exercising the
    # contract-violation scoring path.
    if failed and stable_bucket(seed, instance.id + ":contract", 97) == 0:
        return raw + "\nLet me know if you need anything else!"
    return raw


def _render_answer(instance: ThreatInstance, truth: PlantedTruth, rng: random.Random) -> dict:
    task_name = instance.task.name
    reference = instance.reference
    extra = instance.input_payload.extra
    failed = truth.verdict == "failed"
    mode = truth.mode

    if task_name == "IOC Normalization":
        good = [t.split(":", 1)[1] for t in reference.reference_texts]
        if not failed:
            values = good
        elif stable_bucket(rng.randint(0, 10**6), instance.id, 2) == 0 and mode not in ("1.2",):
            # Partial credit: one hit, two misses.
            values = [good[0], "10.9.9.1", "10.9.9.2"]
        else:
            values = ["10.8.8.1", "10.8.8.2", str(extra.get("legacy_ioc", "10.8.8.3"))]
        return {
            "ioc_normalization": [
                {"raw": f"hxxp-{v}", "type": "ipv4", "value": v} for v in values
            ]
        }

    if task_name == "Vulnerability Linking":
        answer = {
            "vuln_linking": {
                "cve_candidates": [
                    {
                        "cve_id": reference.gold_label if not failed else str(extra.get("decoy")),
                        "score": 0.9,
                    }
                ],
                "vector_string": "CVSS:3.1/AV:N/AC:L" if not failed or mode != "2.5" else "CVSS:2.0/AV:N",
            }
        }
        return answer

    if task_name in ("Threat Report Alignment", "Response Summarization", "Impact Forecast"):
        gold_text = reference.reference_texts[0]
        # Failures emit nothing comparable, keeping the failed score cluster
        # tight at zero so the anchor hulls separate cleanly.
        text = gold_text if not failed else ""
        answer: dict = {"text_summary": {"text": text}}
        if failed and mode == "2.1":
            anchors = reference.time_anchors or {}
            answer["time_claims"] = {event: "2022" for event in anchors}
        return answer

    if task_name in ("Source Reliability Scoring", "Exploit Likelihood"):
        labels = {e: int(v) for e, r, v in (reference.relations or ()) if r == "label"}
        items = sorted(labels)
        probs = {}
        for item in items:
            base = 0.6 + 0.3 * rng.random() if labels[item] == 1 else 0.1 + 0.2 * rng.random()
            if failed:
                base = 1.0 - base
            probs[item] = round(base, 4)
        if task_name == "Source Reliability Scoring":
            return {"score_ranking": [{"item": i, "prob": probs[i]} for i in items]}
        drivers = ["poc"]
        if failed and mode == "2.5":
            drivers.append("CVSS:2.0 legacy scoring basis")
        return {
            "exploit_likelihood": [
                {"cve_id": i, "horizon_days": 30, "prob_exploit": probs[i], "drivers": drivers}
                for i in items
            ]
        }

    if task_name == "TTP Extraction":
        gold = list(reference.reference_texts)
        if not failed:
            entries = [{"technique_id": g.split(".")[0], "sub": g} for g in gold]
        elif mode in ("1.5", "2.4"):
            # Ancestors only: right family, wrong granularity.
            entries = [{"technique_id": g.split(".")[0]} for g in gold]
        else:
            entries = [{"technique_id": f"T{1200 + k}"} for k in range(3)]
        return {"ttp_extraction": entries}

    if task_name == "Campaign Attribution":
        name = reference.gold_label if not failed else f"campaign-{rng.randint(1, 99)}"
        return {"campaign_attribution": {"name": name, "score": 0.8}}

    if task_name == "Relation Graph Building":
        gold = [list(t) for t in (reference.relations or ())]
        if not failed:
            claimed = gold
        else:
            claimed = [
                list(extra.get("decoy_relation", ["a", "b", "c"])),
                ["host-9.internal", "beacons_to", "203.0.113.99"],
            ]
        return {"relation_graph": {"relations": claimed}}

    if task_name == "Target Sector Prediction":
        if not failed:
            top = reference.gold_label
        elif mode == "3.4":
            top = "all enterprise systems"
        else:
            choices = [s for s in _SECTORS if reference.scope is None or s not in reference.scope]
            top = choices[0] if choices else "aerospace"
        return {"target_sector": [{"name": top, "prob": 0.8}]}

    if task_name == "Patch Recommendation":
        gold = list(reference.reference_texts)
        if not failed:
            chosen = gold
        elif stable_bucket(rng.randint(0, 10**6), instance.id, 2) == 0:
            chosen = gold[:1] + ["KB000001", "KB000002"]
        else:
            chosen = ["KB000001", "KB000002", "KB000003"]
        return {
            "patch_recommendation": {
                "affected_assets": ["server-fleet"],
                "patches": [{"kb_or_id": p, "priority": "P1"} for p in chosen],
            }
        }

    if task_name == "Countermeasure Ranking":
        relevance = {
            e: int(v) for e, r, v in (reference.relations or ()) if r == "relevance"
        }
        ordered = sorted(relevance, key=lambda item: (-relevance[item], item))
        if failed:
            # An invented mitigation id: un-scoreable against the gold grades.
            ordered = [f"M-NEW-{rng.randint(1, 99)}"] + ordered[:-1]
        return {
            "countermeasure_ranking": [
                {"mitigation_id": m, "title": f"apply {m}"} for m in ordered
            ]
        }

    if task_name == "Incident Ticket Generation":
        categories = ["malware", "phishing", "ransomware", "intrusion"]
        if not failed:
            category = reference.gold_label
        else:
            others = [c for c in categories if c != reference.gold_label]
            category = others[rng.randint(0, len(others) - 1)]
        return {"incident_ticket": {"category": category, "priority": "P2"}}

    raise ValueError(f"no answer generator for {task_name}")


# ---------------------------------------------------------------------------
# Scripted classifiers for the taxonomy loop and deliberation.
# ---------------------------------------------------------------------------


def make_classifier(
    agent_id: str,
    plan: Mapping[str, PlantedTruth],
    seed: int = 11,
    disagree_bucket: Optional[int] = None,
    persist_bucket: Optional[int] = None,
    n_buckets: int = 20,
) -> ScriptedAgent:
    """A classifier that answers with the planted mode.

    ``disagree_bucket`` makes the agent mislabel matching instances in round
    one only (a cross-round flip); ``persist_bucket`` keeps the wrong label in
    round two as well (round-two disagreement).
    """

    def label(request: ClassificationRequest) -> str:
        truth = plan.get(request.instance_id)
        if truth is None or truth.mode is None:
            return OTHER_LABEL
        bucket = stable_bucket(seed, request.instance_id, n_buckets)
        wrong = "1.3" if truth.mode != "1.3" else "2.2"
        round_two = request.peer_labels is not None
        if persist_bucket is not None and bucket == persist_bucket:
            return wrong
        if disagree_bucket is not None and bucket == disagree_bucket and not round_two:
            return wrong
        return truth.mode

    return ScriptedAgent(agent_id, label_fn=label, seed=seed)


def make_deliberation_agents(plan: Mapping[str, PlantedTruth], seed: int = 11) -> list[ScriptedAgent]:
    """Four agents; two of them inject bounded instability."""
    return [
        make_classifier("clf-alpha", plan, seed=seed),
        make_classifier("clf-beta", plan, seed=seed, disagree_bucket=0),
        make_classifier("clf-gamma", plan, seed=seed, persist_bucket=1),
        make_classifier("clf-delta", plan, seed=seed),
    ]


class ScriptedAnnotator:
    """Resolves queue tasks from the planted truth, standing in for humans."""

    def __init__(self, plan: Mapping[str, PlantedTruth]):
        self.plan = plan

    def resolution_for(self, task: AnnotationTask) -> dict:
        truth = self.plan.get(task.instance_ref)
        if task.kind is TaskKind.BOUNDARY_VERDICT:
            return {"verdict": truth.verdict if truth else "correct"}
        mode_id = truth.mode if truth and truth.mode else "1.1"
        if mode_id in SPECIAL_MODES:
            mode = SPECIAL_MODES[mode_id]
            return {
                "mode_id": mode.mode_id,
                "name": mode.name,
                "category": mode.category.value,
                "description": mode.description,
                "stages": sorted(s.value for s in mode.applicable_stages),
            }
        return {"mode_id": mode_id}

    def drain(self, queue: AnnotationQueue, kind: Optional[TaskKind] = None) -> int:
        """Resolve every open task (optionally of one kind); returns count."""
        resolved = 0
        while True:
            open_tasks = queue.open_tasks(kind=kind)
            if not open_tasks:
                return resolved
            for task in open_tasks:
                queue.submit_resolution(task.task_id, self.resolution_for(task))
                resolved += 1
