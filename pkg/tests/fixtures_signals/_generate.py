"""Regenerate the signal fixture corpus.

Run from the repository root:  python3 tests/fixtures_signals/_generate.py
Each fixture is three files: <name>.instance.json (instance wire record),
<name>.output.txt (raw contract output), <name>.expected.json (strength per
registered rule, in rule order).
"""

from __future__ import annotations

import json
import os

HERE = os.path.dirname(os.path.abspath(__file__))

RULE_ORDER = ["1.1", "1.2", "1.5", "2.1", "2.4", "2.5", "3.4"]


def instance_record(task, **reference) -> dict:
    rec_reference = {
        "gold_label": None,
        "reference_texts": [],
        "relations": None,
        "time_anchors": None,
        "scope": None,
        "taxonomy_version_tags": None,
    }
    rec_reference.update(reference)
    return {
        "id": "fixture-1",
        "task": task,
        "source": "fixture",
        "snapshot_date": "2025-06-01",
        "input": {
            "text_blocks": ["observed incident activity"],
            "iocs": [],
            "cve_ids": [],
            "time_anchors": {},
            "extra": {},
        },
        "reference": rec_reference,
    }


def output_doc(task, stage, answer, evidence_refs=None) -> str:
    return json.dumps(
        {
            "status": "OK",
            "task": task,
            "case_id": "fixture-1",
            "snapshot_date": "2025-06-01",
            "answer": answer,
            "confidence": 0.8,
            "justification": "per the cited documents",
            "evidence_refs": evidence_refs or ["DOC-1"],
            "metadata": {"stage": stage, "assumptions": [], "missing_fields": []},
        },
        indent=1,
    )


def expected(**strengths) -> dict:
    return {
        "signals": [
            {"mode_hint": mode, "strength": strengths.get(mode.replace(".", "_"), "absent")}
            for mode in RULE_ORDER
        ]
    }


FIXTURES: dict[str, tuple[dict, str, dict]] = {}


def fixture(name, instance, output, expect):
    FIXTURES[name] = (instance, output, expect)


def build():
    # 1.1 unsupported relation -----------------------------------------------
    stated = [["domain-7.example", "hosts", "203.0.113.9"]]
    fixture(
        "rule_1_1_positive",
        instance_record(
            "Relation Graph Building",
            reference_texts=["domain-7.example|hosts|203.0.113.9"],
            relations=stated,
        ),
        output_doc(
            "Relation Graph Building",
            "ATTRIBUTION",
            {"relation_graph": {"relations": stated + [["actor-x", "controls", "domain-7.example"]]}},
        ),
        expected(**{"1_1": "strong"}),
    )
    fixture(
        "rule_1_1_negative",
        instance_record(
            "Relation Graph Building",
            reference_texts=["domain-7.example|hosts|203.0.113.9"],
            relations=stated,
        ),
        output_doc("Relation Graph Building", "ATTRIBUTION", {"relation_graph": {"relations": stated}}),
        expected(),
    )

    # 1.2 legacy indicators ---------------------------------------------------
    ioc_relations = [
        ["198.51.100.9", "ioc_status", "legacy"],
        ["203.0.113.40", "ioc_status", "active"],
    ]
    fixture(
        "rule_1_2_positive",
        instance_record(
            "IOC Normalization",
            reference_texts=["ipv4:203.0.113.40"],
            relations=ioc_relations,
        ),
        output_doc(
            "IOC Normalization",
            "CONTEXTUALIZATION",
            {
                "ioc_normalization": [
                    {"raw": "198.51.100[.]9", "type": "ipv4", "value": "198.51.100.9"},
                    {"raw": "203.0.113[.]40", "type": "ipv4", "value": "203.0.113.40"},
                ]
            },
        ),
        expected(**{"1_2": "strong"}),
    )
    fixture(
        "rule_1_2_negative",
        instance_record(
            "IOC Normalization",
            reference_texts=["ipv4:203.0.113.40"],
            relations=ioc_relations,
        ),
        output_doc(
            "IOC Normalization",
            "CONTEXTUALIZATION",
            {"ioc_normalization": [{"raw": "203.0.113[.]40", "type": "ipv4", "value": "203.0.113.40"}]},
        ),
        expected(),
    )

    # 1.5 / 2.4 granularity (shared comparator, separate fixtures) ------------
    fixture(
        "rule_1_5_positive",
        instance_record("TTP Extraction", reference_texts=["T1059.001"]),
        output_doc("TTP Extraction", "ATTRIBUTION", {"ttp_extraction": [{"technique_id": "T1059"}]}),
        expected(**{"1_5": "strong", "2_4": "strong"}),
    )
    fixture(
        "rule_1_5_negative",
        instance_record("TTP Extraction", reference_texts=["T1059.001"]),
        output_doc(
            "TTP Extraction",
            "ATTRIBUTION",
            {"ttp_extraction": [{"technique_id": "T1059", "sub": "T1059.001"}]},
        ),
        expected(),
    )
    fixture(
        "rule_2_4_positive",
        instance_record("TTP Extraction", reference_texts=["T1566.002", "T1021.001"]),
        output_doc(
            "TTP Extraction",
            "ATTRIBUTION",
            {"ttp_extraction": [{"technique_id": "T1566"}, {"technique_id": "T1021"}]},
        ),
        expected(**{"1_5": "strong", "2_4": "strong"}),
    )
    fixture(
        "rule_2_4_negative",
        instance_record("TTP Extraction", reference_texts=["T1566.002"]),
        output_doc(
            "TTP Extraction",
            "ATTRIBUTION",
            {"ttp_extraction": [{"technique_id": "T1566", "sub": "T1566.002"}]},
        ),
        expected(),
    )

    # 2.1 temporal contradiction ----------------------------------------------
    fixture(
        "rule_2_1_positive",
        instance_record(
            "Impact Forecast",
            reference_texts=["exploitation began mid 2024"],
            time_anchors={"exploitation": "2024-06"},
        ),
        output_doc(
            "Impact Forecast",
            "PREDICTION",
            {
                "text_summary": {"text": "exploitation began years earlier"},
                "time_claims": {"exploitation": "2022"},
            },
        ),
        expected(**{"2_1": "strong"}),
    )
    fixture(
        "rule_2_1_negative",
        instance_record(
            "Impact Forecast",
            reference_texts=["exploitation began mid 2024"],
            time_anchors={"exploitation": "2024-06"},
        ),
        output_doc(
            "Impact Forecast",
            "PREDICTION",
            {
                "text_summary": {"text": "exploitation began mid 2024"},
                "time_claims": {"exploitation": "2024-06-20"},
            },
        ),
        expected(),
    )
    fixture(
        "rule_2_1_weak_drift",
        instance_record(
            "Impact Forecast",
            reference_texts=["exploitation began mid 2024"],
            time_anchors={"exploitation": "2024-06-15"},
        ),
        output_doc(
            "Impact Forecast",
            "PREDICTION",
            {
                "text_summary": {"text": "exploitation began in late July 2024"},
                "time_claims": {"exploitation": "2024-07-30"},
            },
        ),
        expected(**{"2_1": "weak"}),
    )

    # 2.5 misaligned standards --------------------------------------------------
    fixture(
        "rule_2_5_positive",
        instance_record(
            "Vulnerability Linking",
            gold_label="CVE-2021-26855",
            reference_texts=["CVE-2021-26855"],
            taxonomy_version_tags=["CVSS:3.1"],
        ),
        output_doc(
            "Vulnerability Linking",
            "CONTEXTUALIZATION",
            {
                "vuln_linking": {
                    "cve_candidates": [{"cve_id": "CVE-2021-26855", "score": 0.9}],
                    "vector_string": "CVSS:2.0/AV:N",
                }
            },
        ),
        expected(**{"2_5": "strong"}),
    )
    fixture(
        "rule_2_5_negative",
        instance_record(
            "Vulnerability Linking",
            gold_label="CVE-2021-26855",
            reference_texts=["CVE-2021-26855"],
            taxonomy_version_tags=["CVSS:3.1"],
        ),
        output_doc(
            "Vulnerability Linking",
            "CONTEXTUALIZATION",
            {
                "vuln_linking": {
                    "cve_candidates": [{"cve_id": "CVE-2021-26855", "score": 0.9}],
                    "vector_string": "CVSS:3.1/AV:N/AC:L",
                }
            },
        ),
        expected(),
    )

    # 3.4 environmental scope ----------------------------------------------------
    fixture(
        "rule_3_4_positive",
        instance_record(
            "Target Sector Prediction",
            gold_label="Linux servers",
            reference_texts=["Linux servers"],
            scope=["Linux servers"],
        ),
        output_doc(
            "Target Sector Prediction",
            "PREDICTION",
            {"target_sector": [{"name": "all enterprise systems", "prob": 0.9}]},
        ),
        expected(**{"3_4": "strong"}),
    )
    fixture(
        "rule_3_4_negative",
        instance_record(
            "Target Sector Prediction",
            gold_label="Linux servers",
            reference_texts=["Linux servers"],
            scope=["Linux servers"],
        ),
        output_doc(
            "Target Sector Prediction",
            "PREDICTION",
            {"target_sector": [{"name": "Linux servers", "prob": 0.9}]},
        ),
        expected(),
    )


def main():
    build()
    for name, (instance, output, expect) in FIXTURES.items():
        with open(os.path.join(HERE, f"{name}.instance.json"), "w", encoding="utf-8") as f:
            json.dump(instance, f, indent=1, sort_keys=True)
            f.write("\n")
        with open(os.path.join(HERE, f"{name}.output.txt"), "w", encoding="utf-8") as f:
            f.write(output)
        with open(os.path.join(HERE, f"{name}.expected.json"), "w", encoding="utf-8") as f:
            json.dump(expect, f, indent=1, sort_keys=True)
            f.write("\n")
    print(f"wrote {len(FIXTURES)} fixtures")


if __name__ == "__main__":
    main()
