"""Shared fixture builders: deterministic embeddings and an end-to-end workspace."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from csvqa.embeddings import EmbeddingStore, write_embedding_store
from csvqa.gcn import GcnModel, save_checkpoint
from csvqa.kg import CsCategory, KnowledgeTriplet, RelationKind, flatten_triplet
from csvqa.prompts import option_letter

FIXTURE_DIM = 8

# Two scripted-wrong responses and one unparseable one: 17/20 correct.
WRONG_IDS = ("s18", "s19")
UNPARSED_ID = "s20"


def key_vector(key: str, dim: int = FIXTURE_DIM, bump: int | None = None, strength: float = 0.0) -> np.ndarray:
    """Deterministic pseudo-embedding derived from the key text alone."""
    seed = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
    vec = np.random.default_rng(seed).normal(0.0, 1.0, dim)
    if bump is not None:
        vec = vec * 0.3
        vec[bump] += strength
    return vec


def fixture_triplets(count: int = 40) -> list[KnowledgeTriplet]:
    relations = list(RelationKind)
    return [
        KnowledgeTriplet(
            id=i,
            head=f"entity {i} head",
            relation=relations[i % len(relations)],
            tail=f"entity {i} tail",
        )
        for i in range(count)
    ]


def write_kg_tsv(path: Path, triplets: list[KnowledgeTriplet]) -> None:
    lines = ["# fixture knowledge graph"]
    lines += [f"{t.head}\t{t.relation.value}\t{t.tail}" for t in triplets]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def fixture_samples(count: int = 20) -> list[dict]:
    samples = []
    for i in range(1, count + 1):
        option_count = 3 if i % 2 else 4
        samples.append(
            {
                "id": f"s{i:02d}",
                "question": f"what does sample {i} show?",
                "caption": f"a scene from sample {i}",
                "image": f"img-{i:02d}",
                "options": [f"choice {j} of sample {i}" for j in range(option_count)],
                "answer": i % option_count,
                "subcategory": "natural" if i % 2 else "social",
            }
        )
    return samples


def build_store(keys: list[str], path: Path, dim: int = FIXTURE_DIM, planted: dict | None = None) -> None:
    store = EmbeddingStore(dim=dim)
    for key in keys:
        if planted and key in planted:
            bump, strength = planted[key]
            store.add(key, key_vector(key, dim, bump=bump, strength=strength))
        else:
            store.add(key, key_vector(key, dim))
    with open(path, "wb") as fh:
        write_embedding_store(store, fh)


def all_store_keys(samples: list[dict], triplets: list[KnowledgeTriplet]) -> list[str]:
    keys: list[str] = []
    for sample in samples:
        keys += [sample["image"], sample["question"], sample["caption"]]
    keys += [t.head for t in triplets] + [t.tail for t in triplets]
    keys += [flatten_triplet(t) for t in triplets]
    return list(dict.fromkeys(keys))


def write_replay_fixture(path: Path, samples: list[dict]) -> None:
    records = []
    for sample in samples:
        sid = sample["id"]
        gold = sample["answer"]
        if sid == UNPARSED_ID:
            response = "I cannot tell."
        elif sid in WRONG_IDS:
            wrong = (gold + 1) % len(sample["options"])
            response = f"Answer: {option_letter(wrong)}"
        else:
            response = f"The rationale is brief.\nAnswer: {option_letter(gold)}"
        records.append({"id": sid, "response": response})
    path.write_text(
        "".join(json.dumps(r) + "\n" for r in records), encoding="utf-8"
    )


def build_e2e_workspace(root: Path, *, sample_count: int = 20, with_checkpoint: bool = True) -> dict:
    """Materialize dataset, KG, store, replay fixture, checkpoint, and config."""
    root.mkdir(parents=True, exist_ok=True)
    triplets = fixture_triplets()
    samples = fixture_samples(sample_count)

    kg_path = root / "kg.tsv"
    write_kg_tsv(kg_path, triplets)

    dataset_path = root / "dataset.ndjson"
    dataset_path.write_text(
        "".join(json.dumps(s) + "\n" for s in samples), encoding="utf-8"
    )

    store_path = root / "embeddings.bin"
    build_store(all_store_keys(samples, triplets), store_path)

    replay_path = root / "replay.ndjson"
    write_replay_fixture(replay_path, samples)

    checkpoint_path = None
    if with_checkpoint:
        max_options = max(len(s["options"]) for s in samples)
        model = GcnModel.init(FIXTURE_DIM, max_options, seed=7)
        checkpoint_path = root / "gcn_checkpoint.bin"
        checkpoint_path.write_bytes(save_checkpoint(model))

    config = {
        "dataset": str(dataset_path),
        "kg": str(kg_path),
        "embeddings": {"store": str(store_path)},
        "metric": "cosine",
        "big_k": 30,
        "k": 6,
        "tau": 0.1,
        "ratios": "scienceqa",
        "combine": "max",
        "ablation": {"explicit_cs": True, "relevance": True, "confidence": with_checkpoint},
        "checkpoint": str(checkpoint_path) if checkpoint_path else None,
        "lvlm": {"replay": str(replay_path)},
        "seed": 0,
        "out_dir": str(root / "out"),
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return {
        "root": root,
        "kg": kg_path,
        "dataset": dataset_path,
        "store": store_path,
        "replay": replay_path,
        "checkpoint": checkpoint_path,
        "config": config_path,
        "config_dict": config,
        "samples": samples,
        "triplets": triplets,
    }


@pytest.fixture
def e2e_workspace(tmp_path: Path) -> dict:
    return build_e2e_workspace(tmp_path / "workspace")


@pytest.fixture
def no_network(monkeypatch: pytest.MonkeyPatch) -> dict:
    """Fail (and count) any attempt to touch the real HTTP transports."""
    calls = {"count": 0}

    def tripwire(*args, **kwargs):
        calls["count"] += 1
        raise AssertionError("network transport invoked during an offline test")

    monkeypatch.setattr("csvqa.embed_client._requests_post", tripwire)
    monkeypatch.setattr("csvqa.lvlm._requests_post", tripwire)
    return calls
