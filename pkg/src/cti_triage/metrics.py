"""Reference-similarity metric suite and per-task scoring dispatch.

Five metric kinds compare a parsed model output with the instance's reference
material; every metric returns a value in [0, 1]. ``score_instance`` picks the
metric from the task and extracts the comparable fields from the answer
profile; a missing comparable field scores 0 with a note rather than raising,
since an un-scoreable answer is itself failure evidence.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .contract import ContractOutput
from .core import MetricKind, ThreatInstance


@dataclass(frozen=True)
class SimilarityScore:
    value: float
    metric_kind: MetricKind
    instance_id: str
    # Set when the comparable fields could not be extracted; the zero score
    # then counts as failure evidence, not as a crash.
    note: Optional[str] = None


def bleu(candidate: Sequence[str], references: Sequence[Sequence[str]], max_order: int = 4) -> float:
    """Sentence-level BLEU with modified n-gram precision and brevity penalty.

    Smoothing: any order with zero clipped matches gets one added to both the
    numerator and the denominator.
    """
    if not references:
        raise ValueError("references must be non-empty")
    if not candidate:
        return 0.0

    log_precision_sum = 0.0
    ref_ngram_counts = [_ngram_counts(ref, max_order) for ref in references]
    for n in range(1, max_order + 1):
        counts = Counter(_ngrams(candidate, n))
        clipped = 0
        total = sum(counts.values())
        for ngram, count in counts.items():
            best = max(rc[n].get(ngram, 0) for rc in ref_ngram_counts)
            clipped += min(count, best)
        if clipped == 0:
            clipped += 1
            total += 1
        log_precision_sum += math.log(clipped / total)

    c = len(candidate)
    # Closest reference length; ties broken toward the shorter reference.
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    brevity = 1.0 if c > r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_precision_sum / max_order)


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def _ngram_counts(tokens: Sequence[str], max_order: int) -> dict[int, Counter]:
    return {n: Counter(_ngrams(tokens, n)) for n in range(1, max_order + 1)}


def micro_f1(predictions: set, gold: set) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both sets are empty."""
    if not predictions and not gold:
        return 1.0
    tp = len(predictions & gold)
    fp = len(predictions - gold)
    fn = len(gold - predictions)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def canonical_label(label: str) -> str:
    """Case-fold, trim, and collapse internal whitespace."""
    return re.sub(r"\s+", " ", label.strip()).casefold()


def accuracy(predicted: Sequence[str], gold: Sequence[str]) -> float:
    if len(predicted) != len(gold):
        raise ValueError(f"length mismatch: {len(predicted)} vs {len(gold)}")
    if not gold:
        return 1.0
    hits = sum(
        canonical_label(p) == canonical_label(g) for p, g in zip(predicted, gold)
    )
    return hits / len(gold)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney statistic with ties counted as 0.5 per pair.

    Computed via tie-averaged ranks, which is identical to the pairwise
    definition but O(n log n).
    """
    if len(scores) != len(labels):
        raise ValueError("scores and labels must have equal length")
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=float)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined for single-class labels")
    ranks = _average_ranks(s)
    pos_rank_sum = float(np.sum(ranks[y == 1]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def ndcg(ranking: Sequence[str], relevance: Mapping[str, float], k: int) -> float:
    """DCG@k with gain 2^rel - 1 and log2(position + 1) discount, normalized
    by the ideal ordering's DCG@k. 1.0 when the ideal DCG is 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    missing = [item for item in ranking if item not in relevance]
    if missing:
        raise ValueError(f"relevance undefined for {missing}")
    actual = _dcg([relevance[item] for item in ranking[:k]])
    ideal = _dcg(sorted((relevance[item] for item in ranking), reverse=True)[:k])
    if ideal == 0.0:
        return 1.0
    return actual / ideal


def _dcg(gains: Sequence[float]) -> float:
    return sum((2.0**g - 1.0) / math.log2(pos + 2) for pos, g in enumerate(gains))


# ---------------------------------------------------------------------------
# Per-instance scoring dispatch.
# ---------------------------------------------------------------------------


class ExtractionFailure(Exception):
    """Comparable fields absent from the answer or the reference."""


def tokenize(text: str) -> list[str]:
    return text.casefold().split()


def score_instance(instance: ThreatInstance, out: ContractOutput) -> SimilarityScore:
    kind = instance.task.metric_kind
    try:
        value = _SCORERS[kind](instance, out)
        note = None
    except ExtractionFailure as exc:
        value = 0.0
        note = f"extraction-failure: {exc}"
    return SimilarityScore(value=value, metric_kind=kind, instance_id=instance.id, note=note)


def _score_bleu(instance: ThreatInstance, out: ContractOutput) -> float:
    candidate = _answer_text(out.answer)
    refs = [tokenize(t) for t in instance.reference.reference_texts]
    if not refs:
        raise ExtractionFailure("reference has no texts to compare against")
    return bleu(tokenize(candidate), refs)


def _score_f1(instance: ThreatInstance, out: ContractOutput) -> float:
    predicted = _answer_item_set(out.answer)
    gold = {canonical_label(t) for t in instance.reference.reference_texts}
    return micro_f1(predicted, gold)


def _score_accuracy(instance: ThreatInstance, out: ContractOutput) -> float:
    label = _answer_label(out.answer)
    gold = instance.reference.gold_label
    if gold is None:
        raise ExtractionFailure("reference has no gold label")
    return accuracy([label], [gold])


def _score_auc(instance: ThreatInstance, out: ContractOutput) -> float:
    predicted = _answer_probabilities(out.answer)
    gold = _gold_binary_labels(instance)
    items = sorted(set(predicted) & set(gold))
    if not items:
        raise ExtractionFailure("no overlap between scored items and gold labels")
    scores = [predicted[item] for item in items]
    labels = [gold[item] for item in items]
    if len(set(labels)) < 2:
        raise ExtractionFailure("gold labels cover a single class")
    return roc_auc(scores, labels)


def _score_ndcg(instance: ThreatInstance, out: ContractOutput) -> float:
    ranking = _answer_ranking(out.answer)
    relevance = _gold_relevance(instance)
    if not ranking:
        raise ExtractionFailure("answer ranks no items")
    if any(item not in relevance for item in ranking):
        raise ExtractionFailure("ranked item without gold relevance")
    return ndcg(ranking, relevance, k=len(ranking))


_SCORERS = {
    MetricKind.BLEU: _score_bleu,
    MetricKind.F1: _score_f1,
    MetricKind.ACCURACY: _score_accuracy,
    MetricKind.AUC: _score_auc,
    MetricKind.NDCG: _score_ndcg,
}


def _answer_text(answer: dict) -> str:
    if isinstance(answer.get("text_summary"), dict):
        text = answer["text_summary"].get("text")
        if isinstance(text, str):
            return text
    if isinstance(answer.get("rule_generation"), dict):
        body = answer["rule_generation"].get("rule_body")
        if isinstance(body, str):
            return body
    timeline = answer.get("event_timeline")
    if isinstance(timeline, list):
        parts = []
        for entry in timeline:
            if isinstance(entry, dict) and "t" in entry and "type" in entry:
                parts.append(f"{entry['t']} {entry['type']}")
        if parts:
            return " ".join(parts)
    raise ExtractionFailure("no comparable text field in answer")


def _answer_item_set(answer: dict) -> set[str]:
    decisions = answer.get("decision_set")
    if isinstance(decisions, list):
        return {
            canonical_label(d["item"])
            for d in decisions
            if isinstance(d, dict) and d.get("decision") is True and isinstance(d.get("item"), str)
        }
    ttps = answer.get("ttp_extraction")
    if isinstance(ttps, list):
        items = set()
        for entry in ttps:
            if isinstance(entry, dict) and isinstance(entry.get("technique_id"), str):
                items.add(canonical_label(entry.get("sub") or entry["technique_id"]))
        return items
    iocs = answer.get("ioc_normalization")
    if isinstance(iocs, list):
        return {
            canonical_label(f"{e['type']}:{e['value']}")
            for e in iocs
            if isinstance(e, dict) and isinstance(e.get("type"), str) and isinstance(e.get("value"), str)
        }
    patches = answer.get("patch_recommendation")
    if isinstance(patches, dict) and isinstance(patches.get("patches"), list):
        return {
            canonical_label(p["kb_or_id"])
            for p in patches["patches"]
            if isinstance(p, dict) and isinstance(p.get("kb_or_id"), str)
        }
    families = answer.get("malware_mapping")
    if isinstance(families, dict) and isinstance(families.get("family_candidates"), list):
        return {
            canonical_label(c["name"])
            for c in families["family_candidates"]
            if isinstance(c, dict) and isinstance(c.get("name"), str) and c.get("score", 0) >= 0.5
        }
    relations = answer.get("relation_graph")
    if isinstance(relations, dict) and isinstance(relations.get("relations"), list):
        return {
            canonical_label("|".join(triple))
            for triple in relations["relations"]
            if isinstance(triple, list) and len(triple) == 3
        }
    raise ExtractionFailure("no comparable item set in answer")


def _answer_label(answer: dict) -> str:
    choice = answer.get("label_choice")
    if isinstance(choice, dict) and isinstance(choice.get("label"), str):
        return choice["label"]
    vuln = answer.get("vuln_linking")
    if isinstance(vuln, dict) and isinstance(vuln.get("cve_candidates"), list):
        best = _top_candidate(vuln["cve_candidates"], "cve_id", "score")
        if best is not None:
            return best
    actors = answer.get("actor_linking")
    if isinstance(actors, dict) and isinstance(actors.get("actor_candidates"), list):
        best = _top_candidate(actors["actor_candidates"], "name", "score")
        if best is not None:
            return best
    campaign = answer.get("campaign_attribution")
    if isinstance(campaign, dict) and isinstance(campaign.get("name"), str):
        return campaign["name"]
    sectors = answer.get("target_sector")
    if isinstance(sectors, list):
        best = _top_candidate(sectors, "name", "prob")
        if best is not None:
            return best
    ticket = answer.get("incident_ticket")
    if isinstance(ticket, dict) and isinstance(ticket.get("category"), str):
        return ticket["category"]
    raise ExtractionFailure("no comparable label in answer")


def _top_candidate(candidates: list, name_key: str, score_key: str) -> Optional[str]:
    best_name, best_score = None, -1.0
    for entry in candidates:
        if not isinstance(entry, dict):
            continue
        name, score = entry.get(name_key), entry.get(score_key)
        if isinstance(name, str) and isinstance(score, (int, float)) and score > best_score:
            best_name, best_score = name, float(score)
    return best_name


def _answer_probabilities(answer: dict) -> dict[str, float]:
    ranking = answer.get("score_ranking")
    if isinstance(ranking, list):
        return {
            e["item"]: float(e["prob"])
            for e in ranking
            if isinstance(e, dict) and isinstance(e.get("item"), str) and isinstance(e.get("prob"), (int, float))
        }
    exploit = answer.get("exploit_likelihood")
    if isinstance(exploit, dict):
        exploit = [exploit]
    if isinstance(exploit, list):
        return {
            e["cve_id"]: float(e["prob_exploit"])
            for e in exploit
            if isinstance(e, dict) and isinstance(e.get("cve_id"), str) and isinstance(e.get("prob_exploit"), (int, float))
        }
    raise ExtractionFailure("no comparable probability list in answer")


def _answer_ranking(answer: dict) -> list[str]:
    ranking = answer.get("countermeasure_ranking")
    if isinstance(ranking, list):
        return [
            e["mitigation_id"]
            for e in ranking
            if isinstance(e, dict) and isinstance(e.get("mitigation_id"), str)
        ]
    raise ExtractionFailure("no comparable ranking in answer")


# Gold structured data conventions: binary labels and graded relevance travel
# as reference relation triples (item, "label", "0"/"1") and
# (item, "relevance", "<float>").


def _gold_binary_labels(instance: ThreatInstance) -> dict[str, int]:
    labels = {}
    for entity, relation, value in instance.reference.relations or ():
        if relation == "label" and value in ("0", "1"):
            labels[entity] = int(value)
    if not labels:
        raise ExtractionFailure("reference carries no binary labels")
    return labels


def _gold_relevance(instance: ThreatInstance) -> dict[str, float]:
    relevance = {}
    for entity, relation, value in instance.reference.relations or ():
        if relation == "relevance":
            try:
                relevance[entity] = float(value)
            except ValueError:
                continue
    if not relevance:
        raise ExtractionFailure("reference carries no relevance grades")
    return relevance
