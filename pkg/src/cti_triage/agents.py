"""Pluggable agent clients: deterministic scripted agents and remote HTTP ones.

An agent does two jobs: ``evaluate`` an instance with the evaluation prompt
(returning raw text for contract parsing) and ``classify`` an instance into a
taxonomy (returning a raw label the caller coerces to the vocabulary).
Remote transports are retried per policy and rate limited; scripted agents
are pure functions of (script, seed) so whole runs replay byte-identically.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import string
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

from .core import ThreatInstance

OTHER_LABEL = "OTHER"

_MODE_ID_PATTERN = re.compile(r"\d+\.\d+")


class AgentError(Exception):
    pass


class TransportError(AgentError):
    """A single transport attempt failed; retryable."""


class RateLimited(TransportError):
    """Provider pushed back; retryable."""


class TransportFailure(AgentError):
    """All transport attempts exhausted."""


class MalformedResponse(AgentError):
    """Transport succeeded but the response body is unusable."""


class AgentConfigError(AgentError):
    pass


class PromptError(AgentError):
    """A template placeholder was left unbound before dispatch."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: tuple[float, ...] = (0.0, 0.5, 1.0)

    def __post_init__(self):
        if self.max_attempts < 1:
            raise AgentConfigError("max_attempts must be >= 1")
        if any(b < 0 for b in self.backoff):
            raise AgentConfigError("backoff delays must be non-negative")
        if list(self.backoff) != sorted(self.backoff):
            raise AgentConfigError("backoff delays must be non-decreasing")

    def delay_before(self, attempt: int) -> float:
        """Delay before retry ``attempt`` (attempt 2 uses backoff[0])."""
        if not self.backoff:
            return 0.0
        return self.backoff[min(attempt - 2, len(self.backoff) - 1)]


@dataclass(frozen=True)
class RateLimit:
    max_requests: int
    per_seconds: float


@dataclass(frozen=True)
class DecodeSettings:
    # Evaluation prompt constrains decoding to near-deterministic ranges.
    temperature: float = 0.0
    top_p: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 0.3:
            raise AgentConfigError(
                f"temperature must be within [0.0, 0.3], got {self.temperature}"
            )
        if not 0.8 <= self.top_p <= 1.0:
            raise AgentConfigError(f"top_p must be within [0.8, 1.0], got {self.top_p}")


@dataclass(frozen=True)
class ClassificationRequest:
    instance_id: str
    task_name: str
    stage: str
    evidence: str
    taxonomy_entries: tuple[tuple[str, str, str], ...]
    peer_labels: Optional[Mapping[str, str]] = None
    decode: DecodeSettings = DecodeSettings()


def extract_mode_id(text: str) -> Optional[str]:
    """First mode-id-shaped substring in a free-text agent reply, if any."""
    match = _MODE_ID_PATTERN.search(text)
    return match.group(0) if match else None


def stable_bucket(seed: int, key: str, n_buckets: int) -> int:
    """Deterministic bucket assignment independent of interpreter hashing."""
    digest = hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % n_buckets


class Agent:
    """Base agent: retry/rate-limit plumbing around a concrete transport."""

    kind = "abstract"

    def __init__(
        self,
        agent_id: str,
        retry_policy: RetryPolicy = RetryPolicy(),
        rate_limit: Optional[RateLimit] = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.agent_id = agent_id
        self.retry_policy = retry_policy
        self.rate_limit = rate_limit
        self._sleep = sleep
        self._clock = clock
        self._request_times: list[float] = []

    def classify(self, request: ClassificationRequest) -> str:
        """Raw label text for one instance; the caller coerces to vocabulary."""
        return self._with_retries(lambda: self._classify_once(request))

    def evaluate(self, instance: ThreatInstance, decode: DecodeSettings = DecodeSettings()) -> str:
        """Raw response text for the evaluation prompt on ``instance``."""
        return self._with_retries(lambda: self._evaluate_once(instance, decode))

    def _with_retries(self, attempt_fn: Callable[[], str]) -> str:
        last: Optional[Exception] = None
        for attempt in range(1, self.retry_policy.max_attempts + 1):
            if attempt > 1:
                self._sleep(self.retry_policy.delay_before(attempt))
            self._respect_rate_limit()
            try:
                return attempt_fn()
            except TransportError as exc:
                last = exc
        raise TransportFailure(
            f"agent {self.agent_id}: {self.retry_policy.max_attempts} attempts failed"
        ) from last

    def _respect_rate_limit(self):
        if self.rate_limit is None:
            return
        now = self._clock()
        window_start = now - self.rate_limit.per_seconds
        self._request_times = [t for t in self._request_times if t > window_start]
        if len(self._request_times) >= self.rate_limit.max_requests:
            wait = self._request_times[0] + self.rate_limit.per_seconds - now
            if wait > 0:
                self._sleep(wait)
        self._request_times.append(self._clock())

    def _classify_once(self, request: ClassificationRequest) -> str:
        raise NotImplementedError

    def _evaluate_once(self, instance: ThreatInstance, decode: DecodeSettings) -> str:
        raise NotImplementedError


class ScriptedAgent(Agent):
    """Fully deterministic agent driven by lookup tables or pure callables.

    ``labels`` maps instance ids to classification labels; ``label_buckets``
    covers ids missing from the table by seeded hash bucket. ``responses``
    supplies evaluation output per instance id ("*" as a wildcard) or via a
    callable taking the instance.
    """

    kind = "scripted"

    def __init__(
        self,
        agent_id: str,
        labels: Optional[Mapping[str, str]] = None,
        label_fn: Optional[Callable[[ClassificationRequest], str]] = None,
        label_buckets: Optional[Sequence[str]] = None,
        responses: Optional[Mapping[str, str]] = None,
        response_fn: Optional[Callable[[ThreatInstance], str]] = None,
        seed: int = 0,
        fail_ids: Optional[set[str]] = None,
        **kwargs,
    ):
        super().__init__(agent_id, **kwargs)
        self.labels = dict(labels or {})
        self.label_fn = label_fn
        self.label_buckets = list(label_buckets or [])
        self.responses = dict(responses or {})
        self.response_fn = response_fn
        self.seed = seed
        # Ids for which the scripted transport simulates hard failures.
        self.fail_ids = set(fail_ids or ())

    @classmethod
    def from_file(cls, agent_id: str, path: str, **kwargs) -> "ScriptedAgent":
        with open(path, encoding="utf-8") as handle:
            script = json.load(handle)
        return cls(
            agent_id,
            labels=script.get("labels"),
            label_buckets=script.get("label_buckets"),
            responses=script.get("responses"),
            seed=script.get("seed", 0),
            **kwargs,
        )

    def _classify_once(self, request: ClassificationRequest) -> str:
        if request.instance_id in self.fail_ids:
            raise TransportError(f"scripted failure for {request.instance_id}")
        if request.instance_id in self.labels:
            return self.labels[request.instance_id]
        if "*" in self.labels:
            return self.labels["*"]
        if self.label_fn is not None:
            return self.label_fn(request)
        if self.label_buckets:
            bucket = stable_bucket(self.seed, request.instance_id, len(self.label_buckets))
            return self.label_buckets[bucket]
        return OTHER_LABEL

    def _evaluate_once(self, instance: ThreatInstance, decode: DecodeSettings) -> str:
        if instance.id in self.fail_ids:
            raise TransportError(f"scripted failure for {instance.id}")
        # Template discipline applies to scripted agents too: the prompt is
        # rendered (and validated) even though the script ignores it.
        build_evaluation_prompt(instance, decode)
        if instance.id in self.responses:
            return self.responses[instance.id]
        if "*" in self.responses:
            return self.responses["*"]
        if self.response_fn is not None:
            return self.response_fn(instance)
        raise MalformedResponse(f"script has no response for {instance.id}")


class RemoteAgent(Agent):
    """Chat-completion-style HTTP agent.

    Credentials resolve from the named environment variable at call time and
    never enter transcripts; ``on_transcript`` receives redacted request and
    response bodies for journaling.
    """

    kind = "remote"

    def __init__(
        self,
        agent_id: str,
        endpoint: str,
        model: str,
        token_env: str = "CTI_TRIAGE_AGENT_TOKEN",
        transport: Optional[Callable[[str, dict, dict, float], str]] = None,
        timeout: float = 60.0,
        on_transcript: Optional[Callable[[dict], None]] = None,
        **kwargs,
    ):
        super().__init__(agent_id, **kwargs)
        self.endpoint = endpoint
        self.model = model
        self.token_env = token_env
        self.timeout = timeout
        self.on_transcript = on_transcript
        self._transport = transport or _http_transport

    def _headers(self) -> dict:
        token = os.environ.get(self.token_env)
        if not token:
            raise AgentConfigError(
                f"agent {self.agent_id}: credential env {self.token_env} is unset"
            )
        return {"Authorization": f"Bearer {token}", "Content-Type": "application/json"}

    def _send(self, prompt: str, decode: DecodeSettings) -> str:
        body = {
            "model": self.model,
            "temperature": decode.temperature,
            "top_p": decode.top_p,
            "messages": [{"role": "user", "content": prompt}],
        }
        raw = self._transport(self.endpoint, self._headers(), body, self.timeout)
        try:
            doc = json.loads(raw)
            content = doc["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError):
            raise MalformedResponse(f"agent {self.agent_id}: unusable completion body")
        if not isinstance(content, str) or not content.strip():
            raise MalformedResponse(f"agent {self.agent_id}: empty completion")
        if self.on_transcript is not None:
            self.on_transcript(
                {
                    "agent_id": self.agent_id,
                    "request": {k: v for k, v in body.items() if k != "messages"}
                    | {"prompt": prompt},
                    "response": content,
                }
            )
        return content

    def _classify_once(self, request: ClassificationRequest) -> str:
        return self._send(build_classification_prompt(request), request.decode)

    def _evaluate_once(self, instance: ThreatInstance, decode: DecodeSettings) -> str:
        return self._send(build_evaluation_prompt(instance, decode), decode)


def _http_transport(url: str, headers: dict, body: dict, timeout: float) -> str:
    import httpx

    try:
        response = httpx.post(url, headers=headers, json=body, timeout=timeout)
    except httpx.HTTPError as exc:
        raise TransportError(str(exc))
    if response.status_code == 429:
        raise RateLimited("provider rate limit")
    if response.status_code >= 500:
        raise TransportError(f"server error {response.status_code}")
    if response.status_code != 200:
        raise MalformedResponse(f"unexpected status {response.status_code}")
    return response.text


# ---------------------------------------------------------------------------
# Prompt assembly.
# ---------------------------------------------------------------------------

EVALUATION_TEMPLATE = string.Template(
    """You are a threat-intelligence analysis assistant and strict schema enforcer.
Work only from the inputs below. Never invent CVE, technique, actor, or
indicator identifiers. Treat ${SNAPSHOT_DATE} as a hard knowledge cutoff.
If critical evidence is missing, set status to NEED_MORE_CONTEXT and list the
gaps in metadata.missing_fields. Defensive guidance only. Reply with exactly
one JSON object and nothing else.

Task: ${TASK_NAME}
Stage: ${CTI_STAGE}
Case id: ${CASE_ID}
Snapshot date: ${SNAPSHOT_DATE}
Documents:
${DOC_LIST}
Structured feeds: ${STRUCT_FEEDS}
Guidance: ${TASK_GUIDANCE}
Decoding: temperature=${TEMP}, top_p=${TOPP}

Populate only the ${OUTPUT_PROFILE} answer profile inside this envelope:
{
  "status": "OK | NEED_MORE_CONTEXT | UNSUPPORTED",
  "task": "${TASK_NAME}",
  "case_id": "${CASE_ID}",
  "snapshot_date": "YYYY-MM-DD",
  "answer": {"${OUTPUT_PROFILE}": "..."},
  "confidence": 0.0,
  "justification": "at most 40 words, terse, evidence-based",
  "evidence_refs": ["..."],
  "metadata": {"stage": "${CTI_STAGE}", "assumptions": [], "missing_fields": []}
}
"""
)

CLASSIFICATION_TEMPLATE = string.Template(
    """You are labeling why a model output failed on a threat-intelligence task.
Pick exactly one failure-mode id from the catalog below, or reply "other" if
none fits. Reply with the id only.

Instance: ${INSTANCE_ID}
Task: ${TASK_NAME} (${STAGE})
Evidence:
${EVIDENCE}
${PEER_BLOCK}
Catalog:
${CATALOG}
"""
)

_UNBOUND = re.compile(r"\$\{[A-Z_]+\}|\$[A-Z_]+")


def render_template(template: string.Template, bindings: Mapping[str, str]) -> str:
    """Render and verify that no placeholder survives into the payload."""
    text = template.safe_substitute(bindings)
    leftover = _UNBOUND.findall(text)
    if leftover:
        raise PromptError(f"unbound placeholders: {sorted(set(leftover))}")
    return text


def build_evaluation_prompt(instance: ThreatInstance, decode: DecodeSettings) -> str:
    from .contract import profile_for_task

    doc_lines = [
        f"  [DOC-{i}] {block}" for i, block in enumerate(instance.input_payload.text_blocks)
    ]
    feeds = {
        "iocs": list(instance.input_payload.iocs),
        "cve_ids": list(instance.input_payload.cve_ids),
        "time_anchors": dict(instance.input_payload.time_anchors),
    }
    guidance = str(instance.input_payload.extra.get("guidance", "answer precisely"))
    bindings = {
        "TASK_NAME": instance.task.name,
        "CTI_STAGE": instance.task.stage.value.upper(),
        "CASE_ID": instance.id,
        "SNAPSHOT_DATE": instance.snapshot_date,
        "DOC_LIST": "\n".join(doc_lines) or "  (none)",
        "STRUCT_FEEDS": json.dumps(feeds, sort_keys=True),
        "TASK_GUIDANCE": guidance,
        "OUTPUT_PROFILE": profile_for_task(instance.task),
        "TEMP": repr(decode.temperature),
        "TOPP": repr(decode.top_p),
    }
    return render_template(EVALUATION_TEMPLATE, bindings)


def build_classification_prompt(request: ClassificationRequest) -> str:
    catalog = "\n".join(
        f"  {mode_id}: {name} - {description}"
        for mode_id, name, description in request.taxonomy_entries
    )
    if request.peer_labels is not None:
        peers = "\n".join(
            f"  {agent}: {label}" for agent, label in sorted(request.peer_labels.items())
        )
        peer_block = f"Peer labels from the previous round:\n{peers}\n"
    else:
        peer_block = ""
    bindings = {
        "INSTANCE_ID": request.instance_id,
        "TASK_NAME": request.task_name,
        "STAGE": request.stage,
        "EVIDENCE": request.evidence,
        "PEER_BLOCK": peer_block,
        "CATALOG": catalog,
    }
    return render_template(CLASSIFICATION_TEMPLATE, bindings)
