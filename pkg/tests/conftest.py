from __future__ import annotations

import pytest

from cti_triage.core import (
    InputPayload,
    ReferenceMaterial,
    ThreatInstance,
    task_registry,
)
from cti_triage.metrics import SimilarityScore


@pytest.fixture(scope="session")
def registry():
    return task_registry()


def make_instance(
    instance_id: str,
    task_name: str = "Campaign Attribution",
    gold_label: str = "campaign-1",
    **kwargs,
) -> ThreatInstance:
    reference = kwargs.pop(
        "reference", ReferenceMaterial(gold_label=gold_label, reference_texts=(gold_label,))
    )
    return ThreatInstance(
        id=instance_id,
        task=task_registry()[task_name],
        input_payload=kwargs.pop("input_payload", InputPayload(text_blocks=("observed",))),
        reference=reference,
        source="test",
        snapshot_date=kwargs.pop("snapshot_date", "2025-06-01"),
    )


def make_scores(values, metric=None):
    from cti_triage.core import MetricKind

    metric = metric or MetricKind.BLEU
    return [
        SimilarityScore(value=v, metric_kind=metric, instance_id=f"i{k:05d}")
        for k, v in enumerate(values)
    ]
