from __future__ import annotations

import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from embedshim.app import ShimConfig, create_app


@pytest.fixture(scope="module")
def client() -> TestClient:
    return TestClient(create_app(ShimConfig(dim=32, max_batch=8)))


def png_bytes(color=(200, 30, 30), size=(12, 9)) -> bytes:
    buffer = io.BytesIO()
    Image.new("RGB", size, color).save(buffer, format="PNG")
    return buffer.getvalue()


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def embed(client, items):
    return client.post("/embed", json={"items": items})


def test_health_schema(client):
    response = client.get("/health")
    assert response.status_code == 200
    payload = response.json()
    assert isinstance(payload["dim"], int)
    assert payload["dim"] == 32
    assert payload["model"] == "hashed-projection-v1"


def test_same_text_twice_is_identical(client):
    first = embed(client, [{"kind": "text", "payload": "a red kite"}]).json()
    second = embed(client, [{"kind": "text", "payload": "a red kite"}]).json()
    assert first == second


def test_vectors_are_unit_norm(client):
    response = embed(
        client,
        [
            {"kind": "text", "payload": "short"},
            {"kind": "text", "payload": "a much longer piece of text about the world"},
            {"kind": "image", "payload": b64(png_bytes())},
        ],
    )
    payload = response.json()
    for vec in payload["vectors"]:
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-5


def test_batch_preserves_request_order(client):
    texts = ["first marker", "second marker", "third marker"]
    batched = embed(client, [{"kind": "text", "payload": t} for t in texts]).json()["vectors"]
    singles = [
        embed(client, [{"kind": "text", "payload": t}]).json()["vectors"][0] for t in texts
    ]
    assert batched == singles


def test_distinct_inputs_distinct_vectors(client):
    vectors = embed(
        client,
        [{"kind": "text", "payload": "alpha"}, {"kind": "text", "payload": "omega"}],
    ).json()["vectors"]
    assert vectors[0] != vectors[1]


def test_corrupt_base64_names_item_index(client):
    response = embed(
        client,
        [
            {"kind": "text", "payload": "fine"},
            {"kind": "image", "payload": "@@not-base64@@"},
        ],
    )
    assert response.status_code == 400
    assert "item 1" in response.json()["detail"]


def test_undecodable_image_names_item_index(client):
    response = embed(client, [{"kind": "image", "payload": b64(b"not an image")}])
    assert response.status_code == 400
    assert "item 0" in response.json()["detail"]


def test_batch_limit_enforced(client):
    items = [{"kind": "text", "payload": f"t{i}"} for i in range(9)]
    response = embed(client, items)
    assert response.status_code == 400
    assert "max batch" in response.json()["detail"]


def test_unknown_model_yields_503():
    broken = TestClient(create_app(ShimConfig(model="bogus:model")))
    response = broken.post("/embed", json={"items": [{"kind": "text", "payload": "x"}]})
    assert response.status_code == 503
    assert broken.get("/health").status_code == 503


def test_caption_non_empty_and_deterministic(client):
    image = b64(png_bytes(color=(10, 200, 40), size=(20, 15)))
    first = client.post("/caption", json={"payload": image})
    second = client.post("/caption", json={"payload": image})
    assert first.status_code == 200
    caption = first.json()["caption"]
    assert caption and caption == second.json()["caption"]
    assert "20 by 15" in caption
    assert "green" in caption


def test_caption_corrupt_base64_is_400(client):
    response = client.post("/caption", json={"payload": "!!!"})
    assert response.status_code == 400


def test_embed_dim_constant_across_requests(client):
    dims = set()
    for text in ("one", "two", "three"):
        payload = embed(client, [{"kind": "text", "payload": text}]).json()
        dims.add(payload["dim"])
        assert all(len(v) == payload["dim"] for v in payload["vectors"])
    assert dims == {32}
