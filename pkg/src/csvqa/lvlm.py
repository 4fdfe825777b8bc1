"""Clients for the external vision-language model.

The HTTP client speaks a minimal chat-completion protocol; the replay
client serves canned responses from an NDJSON fixture keyed by sample id,
so end-to-end runs can execute with zero network traffic.
"""

from __future__ import annotations

import base64
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import requests

from .errors import FixtureError, ProtocolError, TransportError
from .prompts import PromptBundle

RETRYABLE_STATUS = {429, 500, 502, 503, 504}

PostFn = Callable[[str, dict, dict, float], tuple[int, object]]


@dataclass
class LvlmEndpoint:
    url: str
    model: str
    auth_env: str = "LVLM_API_KEY"  # token read from the environment, never logged
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 0.5
    max_in_flight: int = 4


def _requests_post(url: str, body: dict, headers: dict, timeout: float) -> tuple[int, object]:
    try:
        response = requests.post(url, json=body, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"chat request to {url} failed: {exc}") from exc
    try:
        payload = response.json()
    except ValueError:
        payload = None
    return response.status_code, payload


class HttpLvlmClient:
    def __init__(
        self,
        endpoint: LvlmEndpoint,
        *,
        post: PostFn | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self._post = post or _requests_post
        self._sleep = sleep
        self.request_count = 0
        self.retry_count = 0

    def query(self, sample_id: str, bundle: PromptBundle) -> str:
        body = {
            "model": self.endpoint.model,
            "messages": [
                {"role": "system", "content": bundle.system_preamble},
                {"role": "user", "content": self._user_content(bundle)},
            ],
        }
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.endpoint.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"

        last_error = "no attempt made"
        for attempt in range(self.endpoint.retries + 1):
            if attempt > 0:
                self._sleep(self.endpoint.backoff * 2 ** (attempt - 1))
                self.retry_count += 1
            self.request_count += 1
            try:
                status, payload = self._post(
                    self.endpoint.url, body, headers, self.endpoint.timeout
                )
            except TransportError as exc:
                last_error = str(exc)
                continue
            if 200 <= status < 300:
                return self._extract_text(payload, sample_id)
            last_error = f"HTTP {status}"
            if status not in RETRYABLE_STATUS:
                raise TransportError(
                    f"chat service rejected request for sample {sample_id}: {last_error}"
                )
        raise TransportError(
            f"chat service failed for sample {sample_id} after "
            f"{self.endpoint.retries + 1} attempts: {last_error}"
        )

    @staticmethod
    def _user_content(bundle: PromptBundle):
        path = Path(bundle.image_ref)
        if bundle.image_ref and path.is_file():
            encoded = base64.b64encode(path.read_bytes()).decode("ascii")
            return [
                {"type": "text", "text": bundle.body},
                {"type": "image_url", "image_url": {"url": f"data:image;base64,{encoded}"}},
            ]
        return bundle.body

    @staticmethod
    def _extract_text(payload: object, sample_id: str) -> str:
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProtocolError(
                f"chat response for sample {sample_id} has no choices[0].message.content"
            ) from None


class ReplayLvlmClient:
    """Offline client reading ``{"id": ..., "response": ...}`` NDJSON fixtures."""

    def __init__(self, fixture_path: str | Path):
        self.responses: dict[str, str] = {}
        with open(fixture_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                self.responses[record["id"]] = record["response"]

    def query(self, sample_id: str, bundle: PromptBundle) -> str:
        try:
            return self.responses[sample_id]
        except KeyError:
            raise FixtureError(f"replay fixture has no response for sample {sample_id!r}") from None


def query_many(
    client, items: Sequence[tuple[str, PromptBundle]], max_in_flight: int = 4
) -> list[str]:
    """Query every (sample_id, bundle) pair; results keep input order."""
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda pair: client.query(*pair), items))
