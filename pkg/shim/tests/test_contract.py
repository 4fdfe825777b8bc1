"""Contract test: the consuming package's client against a live shim process.

This is the acceptance gate for the service: constant dimension, unit-norm
vectors, determinism on repeated input, batching order, and the /health
schema, all observed through real HTTP.
"""

from __future__ import annotations

import base64
import io
import socket
import subprocess
import sys
import time

import numpy as np
import pytest
import requests
from PIL import Image

from csvqa.embed_client import EmbedItem, EmbeddingClient


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture(scope="module")
def live_shim():
    port = free_port()
    process = subprocess.Popen(
        [sys.executable, "-m", "embedshim", "--port", str(port), "--dim", "48"],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )
    base_url = f"http://127.0.0.1:{port}"
    try:
        for _ in range(100):
            try:
                if requests.get(f"{base_url}/health", timeout=1).status_code == 200:
                    break
            except requests.RequestException:
                time.sleep(0.1)
        else:
            raise RuntimeError("shim did not come up")
        yield base_url
    finally:
        process.terminate()
        process.wait(timeout=10)


def png_item() -> EmbedItem:
    buffer = io.BytesIO()
    Image.new("RGB", (10, 10), (5, 5, 250)).save(buffer, format="PNG")
    return EmbedItem(kind="image", payload=base64.b64encode(buffer.getvalue()).decode("ascii"))


def test_shim_satisfies_client_contract(live_shim):
    client = EmbeddingClient(live_shim, batch_size=16, max_in_flight=2)

    health = requests.get(f"{live_shim}/health", timeout=5).json()
    assert set(health) == {"dim", "model"}
    assert isinstance(health["dim"], int) and isinstance(health["model"], str)
    assert health["dim"] == 48

    texts = [f"probe sentence number {i}" for i in range(40)]
    items = [EmbedItem(kind="text", payload=t) for t in texts] + [png_item()]
    vectors = client.fetch(items)

    # constant dimension, matching /health
    assert all(v.shape == (48,) for v in vectors)
    # unit norm within 1e-5
    for vec in vectors:
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-5
    # determinism on repeated input
    again = client.fetch(items)
    assert all(np.array_equal(a, b) for a, b in zip(vectors, again))
    # batching order: batched results equal per-item results, in request order
    singles = [client.fetch([item])[0] for item in items[:3]]
    for batched, single in zip(vectors[:3], singles):
        assert np.array_equal(batched, single)

    print("PASS: live shim satisfies the embedding client contract")


def test_index_build_through_live_shim(live_shim, tmp_path):
    """The consuming pipeline can materialize an index with shim-served vectors."""
    from csvqa.embeddings import read_embedding_store
    from csvqa.pipeline import cmd_build_index

    kg_path = tmp_path / "kg.tsv"
    kg_path.write_text(
        "kite\tObjectUse\tflying on windy days\n"
        "rain\tCauses\twet streets\n"
        "PersonX wins\txReact\tproud\n",
        encoding="utf-8",
    )
    manifest = cmd_build_index(kg_path, tmp_path / "index", service_url=live_shim)
    assert manifest["triplets"] == 3
    assert manifest["dim"] == 48
    with open(tmp_path / "index" / "embeddings.bin", "rb") as fh:
        store = read_embedding_store(fh)
    assert "kite" in store and "wet streets" in store
    # flattened sentences are embedded too, for downstream graph building
    assert "rain causes wet streets" in store
