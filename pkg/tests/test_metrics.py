from __future__ import annotations

import itertools
import math
import random
from collections import Counter

import pytest

from cti_triage.contract import parse_output
from cti_triage.core import (
    CtiTask,
    CtiStage,
    InputPayload,
    MetricKind,
    ReferenceMaterial,
    ThreatInstance,
)
from cti_triage.metrics import (
    accuracy,
    bleu,
    canonical_label,
    micro_f1,
    ndcg,
    roc_auc,
    score_instance,
)

# ---------------------------------------------------------------------------
# Independent oracles. Deliberately written as direct transcriptions of the
# definitions (loops, enumeration, pairwise counting) so they share no code
# with the implementations they check.
# ---------------------------------------------------------------------------


def oracle_bleu(candidate, references, max_order=4):
    if not candidate:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_order + 1):
        cand_ngrams = Counter(
            tuple(candidate[i : i + n]) for i in range(len(candidate) - n + 1)
        )
        clipped = 0
        total = sum(cand_ngrams.values())
        for ngram, count in cand_ngrams.items():
            best = max(
                sum(
                    1
                    for i in range(len(ref) - n + 1)
                    if tuple(ref[i : i + n]) == ngram
                )
                for ref in references
            )
            clipped += min(count, best)
        if clipped == 0:
            clipped += 1
            total += 1
        log_sum += math.log(clipped / total) / max_order
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    brevity = 1.0 if c > r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_sum)


def oracle_auc(scores, labels):
    positives = [s for s, l in zip(scores, labels) if l == 1]
    negatives = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in positives:
        for n in negatives:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(positives) * len(negatives))


def oracle_ndcg(ranking, relevance, k):
    def dcg(items):
        return sum(
            (2 ** relevance[item] - 1) / math.log2(pos + 2)
            for pos, item in enumerate(items[:k])
        )

    ideal = max(dcg(list(p)) for p in itertools.permutations(ranking))
    if ideal == 0:
        return 1.0
    return dcg(ranking) / ideal


def oracle_f1(predictions, gold):
    tp = len(predictions & gold)
    fp = len(predictions - gold)
    fn = len(gold - predictions)
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def test_bleu_identity():
    tokens = "attacker used stolen credentials to pivot".split()
    assert bleu(tokens, [tokens]) == pytest.approx(1.0, abs=1e-12)


def test_bleu_empty_candidate():
    assert bleu([], [["any", "reference"]]) == 0.0


def test_bleu_empty_references_error():
    with pytest.raises(ValueError):
        bleu(["a"], [])


def test_bleu_frozen_example():
    # Oracle value for "the cat sat" vs "the cat sat down": all orders match
    # fully (the 4-gram order is smoothed 1/1), leaving only the brevity
    # penalty exp(1 - 4/3).
    value = bleu("the cat sat".split(), ["the cat sat down".split()])
    assert value == pytest.approx(0.7165313105737893, abs=1e-12)
    assert value == pytest.approx(math.exp(-1.0 / 3.0), abs=1e-12)


def test_bleu_matches_oracle_on_random_cases():
    rng = random.Random(20250601)
    vocab = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
    for _ in range(300):
        candidate = [rng.choice(vocab) for _ in range(rng.randint(1, 12))]
        references = [
            [rng.choice(vocab) for _ in range(rng.randint(1, 12))]
            for _ in range(rng.randint(1, 3))
        ]
        got = bleu(candidate, references)
        want = oracle_bleu(candidate, references)
        assert got == pytest.approx(want, abs=1e-9)
        assert 0.0 <= got <= 1.0


# ---------------------------------------------------------------------------
# micro F1 / accuracy
# ---------------------------------------------------------------------------


def test_micro_f1_identity_and_disjoint():
    assert micro_f1({("a", 1), ("b", 0)}, {("a", 1), ("b", 0)}) == 1.0
    assert micro_f1({("a", 1)}, {("b", 1)}) == 0.0
    assert micro_f1(set(), set()) == 1.0


def test_micro_f1_frozen_example():
    # TP=2, FP=1, FN=1 -> 2*2 / (2*2 + 1 + 1) = 2/3.
    predictions = {"tp1", "tp2", "fp1"}
    gold = {"tp1", "tp2", "fn1"}
    assert micro_f1(predictions, gold) == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_micro_f1_matches_closed_form_on_random_sets():
    rng = random.Random(7)
    universe = [f"item-{i}" for i in range(12)]
    for _ in range(500):
        predictions = {u for u in universe if rng.random() < 0.4}
        gold = {u for u in universe if rng.random() < 0.4}
        assert micro_f1(predictions, gold) == pytest.approx(
            oracle_f1(predictions, gold), abs=1e-12
        )


def test_accuracy_basics():
    assert accuracy(["a", "b"], ["a", "b"]) == 1.0
    assert accuracy(["a", "b"], ["c", "d"]) == 0.0
    assert accuracy(["a", "b", "c", "x"], ["a", "b", "c", "d"]) == 0.75


def test_accuracy_canonicalizes_labels():
    assert accuracy(["  Windows   Server "], ["windows server"]) == 1.0
    assert canonical_label("  A   B ") == "a b"


def test_accuracy_length_mismatch():
    with pytest.raises(ValueError):
        accuracy(["a"], ["a", "b"])


# ---------------------------------------------------------------------------
# ROC AUC
# ---------------------------------------------------------------------------


def test_roc_auc_perfect_and_inverted():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0


def test_roc_auc_frozen_tie_example():
    # Pairs: (0.9>0.5)=1, (0.9>0.1)=1, (0.5==0.5)=0.5, (0.5>0.1)=1 -> 3.5/4.
    assert roc_auc([0.9, 0.5, 0.5, 0.1], [1, 1, 0, 0]) == pytest.approx(0.875, abs=1e-12)


def test_roc_auc_single_class_error():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


def test_roc_auc_matches_pairwise_oracle():
    rng = random.Random(99)
    for _ in range(400):
        n = rng.randint(2, 20)
        labels = [rng.randint(0, 1) for _ in range(n)]
        if len(set(labels)) < 2:
            labels[0], labels[1] = 0, 1
        # Coarse score grid to force plenty of ties.
        scores = [rng.choice([0.0, 0.25, 0.5, 0.75, 1.0]) for _ in range(n)]
        assert roc_auc(scores, labels) == pytest.approx(
            oracle_auc(scores, labels), abs=1e-9
        )


def test_roc_auc_complement_for_tie_free_inputs():
    rng = random.Random(3)
    for _ in range(100):
        n = rng.randint(2, 15)
        scores = rng.sample(range(1000), n)
        scores = [s / 1000.0 for s in scores]
        labels = [rng.randint(0, 1) for _ in range(n)]
        if len(set(labels)) < 2:
            labels[0], labels[1] = 0, 1
        flipped = [1 - l for l in labels]
        assert roc_auc(scores, labels) + roc_auc(scores, flipped) == pytest.approx(
            1.0, abs=1e-9
        )


# ---------------------------------------------------------------------------
# NDCG
# ---------------------------------------------------------------------------


def test_ndcg_ideal_ranking_is_one():
    relevance = {"a": 3.0, "b": 2.0, "c": 0.0}
    assert ndcg(["a", "b", "c"], relevance, k=3) == pytest.approx(1.0, abs=1e-12)


def test_ndcg_single_item_is_one():
    assert ndcg(["only"], {"only": 2.0}, k=1) == 1.0
    assert ndcg(["only"], {"only": 0.0}, k=1) == 1.0


def test_ndcg_all_permutations_match_oracle():
    relevance = {"a": 3.0, "b": 1.0, "c": 0.0}
    frozen = {
        ("a", "b", "c"): 1.0,
        ("a", "c", "b"): 0.9828422279067397,
        ("b", "a", "c"): 0.7098097413968655,
        ("b", "c", "a"): 0.5897053367440438,
        ("c", "a", "b"): 0.6442869262030828,
        ("c", "b", "a"): 0.5413402936435214,
    }
    for perm in itertools.permutations(["a", "b", "c"]):
        got = ndcg(list(perm), relevance, k=3)
        assert got == pytest.approx(oracle_ndcg(list(perm), relevance, 3), abs=1e-12)
        assert got == pytest.approx(frozen[perm], abs=1e-12)


def test_ndcg_matches_oracle_on_random_cases():
    rng = random.Random(11)
    for _ in range(200):
        n = rng.randint(1, 6)
        items = [f"m{i}" for i in range(n)]
        relevance = {item: float(rng.randint(0, 4)) for item in items}
        rng.shuffle(items)
        k = rng.randint(1, n)
        assert ndcg(items, relevance, k) == pytest.approx(
            oracle_ndcg(items, relevance, k), abs=1e-9
        )


def test_metric_ranges_on_random_inputs():
    rng = random.Random(42)
    vocab = ["a", "b", "c", "d"]
    for _ in range(200):
        cand = [rng.choice(vocab) for _ in range(rng.randint(0, 8))]
        refs = [[rng.choice(vocab) for _ in range(rng.randint(1, 8))]]
        assert 0.0 <= bleu(cand, refs) <= 1.0

        preds = {rng.choice(vocab) for _ in range(rng.randint(0, 4))}
        gold = {rng.choice(vocab) for _ in range(rng.randint(0, 4))}
        assert 0.0 <= micro_f1(preds, gold) <= 1.0

        n = rng.randint(2, 10)
        labels = [rng.randint(0, 1) for _ in range(n)]
        if len(set(labels)) < 2:
            labels[0], labels[1] = 0, 1
        scores = [rng.random() for _ in range(n)]
        assert 0.0 <= roc_auc(scores, labels) <= 1.0


# ---------------------------------------------------------------------------
# score_instance dispatch
# ---------------------------------------------------------------------------


def make_instance(task_name, stage, metric, reference, extra=None):
    return ThreatInstance(
        id="inst-1",
        task=CtiTask(name=task_name, stage=stage, metric_kind=metric),
        input_payload=InputPayload(text_blocks=("observed activity",), extra=extra or {}),
        reference=reference,
        source="unit-test",
        snapshot_date="2025-06-01",
    )


def output_with_answer(answer, stage="PREDICTION"):
    import json

    doc = {
        "status": "OK",
        "task": "t",
        "case_id": "inst-1",
        "snapshot_date": "2025-06-01",
        "answer": answer,
        "confidence": 0.9,
        "justification": "short",
        "evidence_refs": [],
        "metadata": {"stage": stage, "assumptions": [], "missing_fields": []},
    }
    return parse_output(json.dumps(doc))


def test_score_instance_bleu_identity():
    reference = ReferenceMaterial(reference_texts=("isolate the host and rotate keys",))
    instance = make_instance(
        "Response Summarization", CtiStage.MITIGATION, MetricKind.BLEU, reference
    )
    out = output_with_answer(
        {"text_summary": {"text": "isolate the host and rotate keys"}}, stage="MITIGATION"
    )
    score = score_instance(instance, out)
    assert score.value == pytest.approx(1.0, abs=1e-12)
    assert score.note is None


def test_score_instance_f1_equal_sets():
    reference = ReferenceMaterial(reference_texts=("exchange-2019", "sharepoint-2016"))
    instance = make_instance(
        "Affected Systems", CtiStage.CONTEXTUALIZATION, MetricKind.F1, reference
    )
    out = output_with_answer(
        {
            "decision_set": [
                {"item": "Exchange-2019", "decision": True},
                {"item": "SharePoint-2016", "decision": True},
                {"item": "Teams", "decision": False},
            ]
        },
        stage="CONTEXTUALIZATION",
    )
    assert score_instance(instance, out).value == 1.0


def test_score_instance_auc_delegates_to_metric():
    reference = ReferenceMaterial(
        gold_label="exploitation",
        relations=(
            ("CVE-1", "label", "1"),
            ("CVE-2", "label", "1"),
            ("CVE-3", "label", "0"),
            ("CVE-4", "label", "0"),
        ),
    )
    instance = make_instance(
        "Exploit Likelihood", CtiStage.PREDICTION, MetricKind.AUC, reference
    )
    out = output_with_answer(
        {
            "exploit_likelihood": [
                {"cve_id": "CVE-1", "horizon_days": 30, "prob_exploit": 0.9},
                {"cve_id": "CVE-2", "horizon_days": 30, "prob_exploit": 0.5},
                {"cve_id": "CVE-3", "horizon_days": 30, "prob_exploit": 0.5},
                {"cve_id": "CVE-4", "horizon_days": 30, "prob_exploit": 0.1},
            ]
        }
    )
    score = score_instance(instance, out)
    assert score.value == pytest.approx(
        oracle_auc([0.9, 0.5, 0.5, 0.1], [1, 1, 0, 0]), abs=1e-12
    )


def test_score_instance_accuracy_gold_label():
    reference = ReferenceMaterial(gold_label="CVE-2021-34473")
    instance = make_instance(
        "Vulnerability Linking", CtiStage.CONTEXTUALIZATION, MetricKind.ACCURACY, reference
    )
    out = output_with_answer(
        {
            "vuln_linking": {
                "cve_candidates": [
                    {"cve_id": "CVE-2021-34473", "score": 0.8},
                    {"cve_id": "CVE-2020-0001", "score": 0.2},
                ]
            }
        },
        stage="CONTEXTUALIZATION",
    )
    assert score_instance(instance, out).value == 1.0


def test_score_instance_ndcg_ideal_order():
    reference = ReferenceMaterial(
        gold_label="ranking",
        relations=(("M1", "relevance", "3"), ("M2", "relevance", "1"), ("M3", "relevance", "0")),
    )
    instance = make_instance(
        "Countermeasure Ranking", CtiStage.MITIGATION, MetricKind.NDCG, reference
    )
    out = output_with_answer(
        {
            "countermeasure_ranking": [
                {"mitigation_id": "M1", "title": "patch"},
                {"mitigation_id": "M2", "title": "block"},
                {"mitigation_id": "M3", "title": "watch"},
            ]
        },
        stage="MITIGATION",
    )
    assert score_instance(instance, out).value == pytest.approx(1.0, abs=1e-12)


def test_score_instance_missing_fields_scores_zero_with_note():
    reference = ReferenceMaterial(reference_texts=("isolate the host",))
    instance = make_instance(
        "Response Summarization", CtiStage.MITIGATION, MetricKind.BLEU, reference
    )
    out = output_with_answer({"escalation": {"prob": 0.5}}, stage="MITIGATION")
    score = score_instance(instance, out)
    assert score.value == 0.0
    assert score.note is not None and "extraction-failure" in score.note
