"""Failure triage pipeline for LLM outputs on cyber threat intelligence tasks."""

from .core import (
    CtiStage,
    CtiTask,
    FailureMode,
    MetricKind,
    ReferenceMaterial,
    Taxonomy,
    ThreatInstance,
    Verdict,
    VulnerabilityCategory,
    seed_catalog,
    task_registry,
    validate_mode_id,
)

__all__ = [
    "CtiStage",
    "CtiTask",
    "FailureMode",
    "MetricKind",
    "ReferenceMaterial",
    "Taxonomy",
    "ThreatInstance",
    "Verdict",
    "VulnerabilityCategory",
    "seed_catalog",
    "task_registry",
    "validate_mode_id",
]
