"""HTTP client for the remote embedding service.

Wire protocol: POST ``{endpoint}/embed`` with ``{"items": [{"kind": "text",
"payload": "..."}, {"kind": "image", "payload": "<base64>"}]}``; the
response is ``{"dim": int, "vectors": [[...], ...]}``.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import requests

from .errors import ProtocolError, TransportError

BATCH_SIZE = 64
RETRYABLE_STATUS = {429, 500, 502, 503, 504}

# (url, json_body, timeout) -> (status_code, parsed_json_or_None)
PostFn = Callable[[str, dict, float], tuple[int, object]]


@dataclass(frozen=True)
class EmbedItem:
    kind: str  # "text" or "image"
    payload: str  # raw text, or base64-encoded bytes for images


def _requests_post(url: str, body: dict, timeout: float) -> tuple[int, object]:
    try:
        response = requests.post(url, json=body, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"embedding request to {url} failed: {exc}") from exc
    try:
        payload = response.json()
    except ValueError:
        payload = None
    return response.status_code, payload


class EmbeddingClient:
    """Batching, retrying client; responses are restored to input order."""

    def __init__(
        self,
        endpoint: str,
        *,
        batch_size: int = BATCH_SIZE,
        max_in_flight: int = 4,
        retries: int = 3,
        backoff: float = 0.25,
        timeout: float = 30.0,
        post: PostFn | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.batch_size = batch_size
        self.max_in_flight = max_in_flight
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._post = post or _requests_post
        self._sleep = sleep
        self._lock = threading.Lock()
        self.request_count = 0
        self.retry_count = 0

    def fetch(self, items: Sequence[EmbedItem]) -> list[np.ndarray]:
        """Embed all items, batching at most `batch_size` per HTTP call."""
        if not items:
            return []
        batches = [items[i : i + self.batch_size] for i in range(0, len(items), self.batch_size)]
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            results = list(pool.map(self._fetch_batch, batches))
        dim = results[0][0]
        for batch_dim, _ in results[1:]:
            if batch_dim != dim:
                raise ProtocolError(f"service changed dimension mid-run: {dim} vs {batch_dim}")
        return [vec for _, vectors in results for vec in vectors]

    def _fetch_batch(self, batch: Sequence[EmbedItem]) -> tuple[int, list[np.ndarray]]:
        body = {"items": [{"kind": item.kind, "payload": item.payload} for item in batch]}
        url = f"{self.endpoint}/embed"
        payload = self._post_with_retries(url, body)
        return self._decode(payload, expected=len(batch))

    def _post_with_retries(self, url: str, body: dict) -> object:
        last_error: str = "no attempt made"
        for attempt in range(self.retries + 1):
            if attempt > 0:
                self._sleep(self.backoff * 2 ** (attempt - 1))
                with self._lock:
                    self.retry_count += 1
            with self._lock:
                self.request_count += 1
            try:
                status, payload = self._post(url, body, self.timeout)
            except TransportError as exc:
                last_error = str(exc)
                continue
            if 200 <= status < 300:
                return payload
            last_error = f"HTTP {status}"
            if status not in RETRYABLE_STATUS:
                raise TransportError(f"embedding service rejected request: {last_error}")
        raise TransportError(
            f"embedding service failed after {self.retries + 1} attempts: {last_error}"
        )

    def _decode(self, payload: object, expected: int) -> tuple[int, list[np.ndarray]]:
        if not isinstance(payload, dict) or "dim" not in payload or "vectors" not in payload:
            raise ProtocolError("embedding response missing 'dim' or 'vectors'")
        dim = int(payload["dim"])
        vectors = payload["vectors"]
        if len(vectors) != expected:
            raise ProtocolError(f"expected {expected} vectors, got {len(vectors)}")
        decoded = []
        for i, values in enumerate(vectors):
            vec = np.asarray(values, dtype=np.float64)
            if vec.shape != (dim,):
                raise ProtocolError(f"vector {i} has shape {vec.shape}, declared dim {dim}")
            decoded.append(vec)
        return dim, decoded


def fetch_embeddings(endpoint: str, items: Sequence[EmbedItem], **kwargs) -> list[np.ndarray]:
    return EmbeddingClient(endpoint, **kwargs).fetch(items)
