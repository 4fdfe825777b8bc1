from __future__ import annotations

import json

import pytest

from csvqa.errors import FixtureError, ProtocolError, TransportError
from csvqa.lvlm import HttpLvlmClient, LvlmEndpoint, ReplayLvlmClient, query_many
from csvqa.prompts import PromptBundle


def bundle(body="What is shown?", image_ref=""):
    return PromptBundle(
        system_preamble="You are an assistant.", body=body, confidence=None, image_ref=image_ref
    )


def ok_response(text="Answer: B"):
    return 200, {"choices": [{"message": {"content": text}}]}


class ScriptedPost:
    def __init__(self, script):
        self.script = list(script)
        self.bodies = []
        self.headers = []

    def __call__(self, url, body, headers, timeout):
        self.bodies.append(body)
        self.headers.append(headers)
        step = self.script.pop(0)
        if isinstance(step, Exception):
            raise step
        return step


def make_client(script, **endpoint_kwargs):
    endpoint_kwargs.setdefault("url", "http://lvlm.test/chat")
    endpoint_kwargs.setdefault("model", "test-model")
    post = ScriptedPost(script)
    client = HttpLvlmClient(LvlmEndpoint(**endpoint_kwargs), post=post, sleep=lambda _: None)
    return client, post


def test_simple_query():
    client, post = make_client([ok_response("Answer: C")])
    assert client.query("s1", bundle()) == "Answer: C"
    assert post.bodies[0]["model"] == "test-model"
    assert post.bodies[0]["messages"][0]["role"] == "system"


def test_429_then_success_logs_one_retry():
    client, _ = make_client([(429, None), ok_response()])
    assert client.query("s1", bundle()) == "Answer: B"
    assert client.retry_count == 1
    assert client.request_count == 2


def test_timeout_fails_after_exactly_configured_attempts():
    attempts = 3
    script = [TransportError("timed out")] * (attempts + 1)
    client, post = make_client(script, retries=attempts)
    with pytest.raises(TransportError, match=f"after {attempts + 1} attempts"):
        client.query("s1", bundle())
    assert len(post.bodies) == attempts + 1


def test_non_retryable_status_fails_fast():
    client, post = make_client([(401, None)])
    with pytest.raises(TransportError):
        client.query("s1", bundle())
    assert len(post.bodies) == 1


def test_malformed_payload_is_protocol_error():
    client, _ = make_client([(200, {"nonsense": True})])
    with pytest.raises(ProtocolError):
        client.query("s1", bundle())


def test_image_file_attached_as_base64(tmp_path):
    image = tmp_path / "img.png"
    image.write_bytes(b"\x89PNG fake bytes")
    client, post = make_client([ok_response()])
    client.query("s1", bundle(image_ref=str(image)))
    content = post.bodies[0]["messages"][1]["content"]
    assert isinstance(content, list)
    kinds = [part["type"] for part in content]
    assert kinds == ["text", "image_url"]
    assert content[1]["image_url"]["url"].startswith("data:image;base64,")


def test_missing_image_key_sends_text_only():
    client, post = make_client([ok_response()])
    client.query("s1", bundle(image_ref="img-key-not-a-file"))
    assert isinstance(post.bodies[0]["messages"][1]["content"], str)


def test_auth_token_read_from_named_env(monkeypatch):
    monkeypatch.setenv("MY_LVLM_TOKEN", "secret-token")
    client, post = make_client([ok_response()], auth_env="MY_LVLM_TOKEN")
    client.query("s1", bundle())
    assert post.headers[0]["Authorization"] == "Bearer secret-token"

    monkeypatch.delenv("MY_LVLM_TOKEN")
    client, post = make_client([ok_response()], auth_env="MY_LVLM_TOKEN")
    client.query("s1", bundle())
    assert "Authorization" not in post.headers[0]


def test_replay_returns_fixture_response(tmp_path):
    fixture = tmp_path / "replay.ndjson"
    fixture.write_text(json.dumps({"id": "s1", "response": "Answer: B"}) + "\n", encoding="utf-8")
    client = ReplayLvlmClient(fixture)
    assert client.query("s1", bundle()) == "Answer: B"


def test_replay_miss_names_sample_id(tmp_path):
    fixture = tmp_path / "replay.ndjson"
    fixture.write_text(json.dumps({"id": "s1", "response": "Answer: B"}) + "\n", encoding="utf-8")
    client = ReplayLvlmClient(fixture)
    with pytest.raises(FixtureError, match="s2"):
        client.query("s2", bundle())


def test_query_many_preserves_order(tmp_path):
    fixture = tmp_path / "replay.ndjson"
    lines = [json.dumps({"id": f"s{i}", "response": f"Answer {i}"}) for i in range(10)]
    fixture.write_text("\n".join(lines) + "\n", encoding="utf-8")
    client = ReplayLvlmClient(fixture)
    items = [(f"s{i}", bundle()) for i in range(10)]
    assert query_many(client, items, max_in_flight=4) == [f"Answer {i}" for i in range(10)]
