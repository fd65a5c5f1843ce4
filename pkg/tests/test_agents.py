from __future__ import annotations

import json

import pytest

from cti_triage.agents import (
    AgentConfigError,
    ClassificationRequest,
    DecodeSettings,
    EVALUATION_TEMPLATE,
    MalformedResponse,
    PromptError,
    RateLimit,
    RateLimited,
    RemoteAgent,
    RetryPolicy,
    ScriptedAgent,
    TransportError,
    TransportFailure,
    build_classification_prompt,
    build_evaluation_prompt,
    extract_mode_id,
    render_template,
    stable_bucket,
)

from conftest import make_instance


def request_for(instance_id="inst-7", peer_labels=None):
    return ClassificationRequest(
        instance_id=instance_id,
        task_name="Campaign Attribution",
        stage="attribution",
        evidence="signal 2.1: strong",
        taxonomy_entries=(("1.1", "Co-mention bias", "desc"),),
        peer_labels=peer_labels,
    )


def test_scripted_table_lookup():
    agent = ScriptedAgent("s", labels={"inst-7": "1.3"})
    assert agent.classify(request_for()) == "1.3"


def test_scripted_determinism_across_streams():
    def build():
        return ScriptedAgent("s", label_buckets=["1.1", "2.2", "3.4"], seed=9)

    stream = [request_for(f"i-{k}") for k in range(50)]
    first = [build().classify(r) for r in stream]
    second = [build().classify(r) for r in stream]
    assert first == second


def test_stable_bucket_is_interpreter_independent():
    assert stable_bucket(9, "i-0", 3) == stable_bucket(9, "i-0", 3)
    assert 0 <= stable_bucket(1, "x", 20) < 20


def test_retry_boundedness_and_backoff_order():
    attempts = []
    sleeps = []

    class Flaky(ScriptedAgent):
        def _classify_once(self, request):
            attempts.append(1)
            raise TransportError("down")

    agent = Flaky(
        "flaky",
        retry_policy=RetryPolicy(max_attempts=4, backoff=(0.1, 0.2, 0.4)),
        sleep=sleeps.append,
    )
    with pytest.raises(TransportFailure):
        agent.classify(request_for())
    assert len(attempts) == 4
    assert sleeps == sorted(sleeps)
    assert sleeps == [0.1, 0.2, 0.4]


def test_rate_limited_is_retried():
    calls = []

    class Limited(ScriptedAgent):
        def _classify_once(self, request):
            calls.append(1)
            if len(calls) < 2:
                raise RateLimited("429")
            return "1.1"

    agent = Limited("lim", retry_policy=RetryPolicy(max_attempts=3, backoff=(0.0,)), sleep=lambda _: None)
    assert agent.classify(request_for()) == "1.1"
    assert len(calls) == 2


def test_malformed_response_is_not_retried():
    calls = []

    class Broken(ScriptedAgent):
        def _classify_once(self, request):
            calls.append(1)
            raise MalformedResponse("garbage")

    agent = Broken("b", retry_policy=RetryPolicy(max_attempts=3, backoff=(0.0,)), sleep=lambda _: None)
    with pytest.raises(MalformedResponse):
        agent.classify(request_for())
    assert len(calls) == 1


def test_retry_policy_validation():
    with pytest.raises(AgentConfigError):
        RetryPolicy(max_attempts=0)
    with pytest.raises(AgentConfigError):
        RetryPolicy(backoff=(1.0, 0.5))


def test_decode_settings_bounds():
    DecodeSettings(temperature=0.3, top_p=0.8)
    with pytest.raises(AgentConfigError):
        DecodeSettings(temperature=0.4)
    with pytest.raises(AgentConfigError):
        DecodeSettings(top_p=0.5)


def test_extract_mode_id():
    assert extract_mode_id("this looks like co-mention bias (1.1)") == "1.1"
    assert extract_mode_id("label: 2.6 because of alignment") == "2.6"
    assert extract_mode_id("no identifier here") is None


def test_evaluation_prompt_binds_every_placeholder():
    prompt = build_evaluation_prompt(make_instance("inst-1"), DecodeSettings())
    assert "${" not in prompt
    assert "inst-1" in prompt
    assert "Campaign Attribution" in prompt
    assert "ATTRIBUTION" in prompt


def test_unfilled_placeholder_is_a_pre_send_error():
    with pytest.raises(PromptError) as err:
        render_template(EVALUATION_TEMPLATE, {"TASK_NAME": "x"})
    assert "SNAPSHOT_DATE" in str(err.value)


def test_classification_prompt_includes_peers_only_in_round_two():
    solo = build_classification_prompt(request_for())
    assert "Peer labels" not in solo
    peered = build_classification_prompt(request_for(peer_labels={"a0": "1.1"}))
    assert "Peer labels" in peered and "a0: 1.1" in peered


def test_scripted_rate_limit_waits():
    clock = {"t": 0.0}
    sleeps = []

    def fake_clock():
        return clock["t"]

    def fake_sleep(duration):
        sleeps.append(duration)
        clock["t"] += duration

    agent = ScriptedAgent(
        "s",
        labels={"*": "1.1"},
        rate_limit=RateLimit(max_requests=2, per_seconds=10.0),
        sleep=fake_sleep,
        clock=fake_clock,
    )
    for _ in range(3):
        agent.classify(request_for())
    assert sleeps and sleeps[0] == pytest.approx(10.0)


# ---------------------------------------------------------------------------
# remote agent over a stub transport
# ---------------------------------------------------------------------------


def completion(content: str) -> str:
    return json.dumps({"choices": [{"message": {"content": content}}]})


def test_remote_agent_happy_path(monkeypatch):
    monkeypatch.setenv("TEST_AGENT_TOKEN", "sekret")
    seen = {}

    def transport(url, headers, body, timeout):
        seen.update({"url": url, "auth": headers.get("Authorization"), "body": body})
        return completion("1.1")

    agent = RemoteAgent(
        "remote-a",
        endpoint="https://example.test/v1/chat",
        model="judge-1",
        token_env="TEST_AGENT_TOKEN",
        transport=transport,
    )
    assert agent.classify(request_for()) == "1.1"
    assert seen["auth"] == "Bearer sekret"
    assert seen["body"]["model"] == "judge-1"


def test_remote_agent_timeout_exhausts_to_transport_failure(monkeypatch):
    monkeypatch.setenv("TEST_AGENT_TOKEN", "sekret")
    attempts = []

    def transport(url, headers, body, timeout):
        attempts.append(1)
        raise TransportError("timed out")

    agent = RemoteAgent(
        "remote-b",
        endpoint="https://example.test/v1/chat",
        model="judge-1",
        token_env="TEST_AGENT_TOKEN",
        transport=transport,
        retry_policy=RetryPolicy(max_attempts=3, backoff=(0.0, 0.0)),
        sleep=lambda _: None,
    )
    with pytest.raises(TransportFailure):
        agent.classify(request_for())
    assert len(attempts) == 3


def test_remote_agent_garbage_body_is_malformed(monkeypatch):
    monkeypatch.setenv("TEST_AGENT_TOKEN", "sekret")
    agent = RemoteAgent(
        "remote-c",
        endpoint="https://example.test/v1/chat",
        model="judge-1",
        token_env="TEST_AGENT_TOKEN",
        transport=lambda *a: "not json at all",
    )
    with pytest.raises(MalformedResponse):
        agent.classify(request_for())


def test_remote_agent_missing_credential(monkeypatch):
    monkeypatch.delenv("MISSING_TOKEN", raising=False)
    agent = RemoteAgent(
        "remote-d",
        endpoint="https://example.test/v1/chat",
        model="judge-1",
        token_env="MISSING_TOKEN",
        transport=lambda *a: completion("1.1"),
    )
    with pytest.raises(AgentConfigError):
        agent.classify(request_for())


def test_remote_transcripts_never_carry_credentials(monkeypatch):
    monkeypatch.setenv("TEST_AGENT_TOKEN", "sekret")
    transcripts = []
    agent = RemoteAgent(
        "remote-e",
        endpoint="https://example.test/v1/chat",
        model="judge-1",
        token_env="TEST_AGENT_TOKEN",
        transport=lambda *a: completion("1.1"),
        on_transcript=transcripts.append,
    )
    agent.classify(request_for())
    assert transcripts
    assert "sekret" not in json.dumps(transcripts)


def test_scripted_evaluate_renders_template_and_returns_response():
    instance = make_instance("inst-1")
    agent = ScriptedAgent("s", responses={"inst-1": '{"status": "OK"}'})
    assert agent.evaluate(instance) == '{"status": "OK"}'


def test_scripted_evaluate_without_response_is_malformed():
    agent = ScriptedAgent("s")
    with pytest.raises(MalformedResponse):
        agent.evaluate(make_instance("inst-1"))
