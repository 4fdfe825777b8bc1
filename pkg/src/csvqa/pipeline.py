"""End-to-end orchestration: staged artifacts, content-addressed caching, manifests."""

from __future__ import annotations

import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import answers as answers_mod
from . import gcn as gcn_mod
from .embed_client import EmbedItem, EmbeddingClient
from .embeddings import (
    EmbeddingStore,
    SimilarityMetric,
    read_embedding_store,
    write_embedding_store,
)
from .errors import ContractError, CsvqaError
from .graph import build_graph
from .kg import KnowledgeTriplet, flatten_triplet, parse_knowledge_file, read_kg_store, write_kg_store
from .lvlm import HttpLvlmClient, LvlmEndpoint, ReplayLvlmClient, query_many
from .prompts import PromptBundle, Sample, assemble_prompt
from .retrieval import (
    RATIO_PRESETS,
    Combine,
    RelevanceLevel,
    ScoredTriplet,
    SourceKind,
    TripletIndex,
    TypeRatios,
    assign_relevance,
    compute_source_stats,
    filter_by_type,
    retrieve_top_k,
)

SOURCES = (SourceKind.IMAGE, SourceKind.QUESTION, SourceKind.CAPTION)

ARTIFACT_NAMES = {
    "retrieve": "retrieve.ndjson",
    "filter": "filtered.ndjson",
    "score": "confidence.ndjson",
    "prompt": "prompts.ndjson",
    "infer": "predictions.ndjson",
    "eval": "eval.json",
}


@dataclass
class RunConfig:
    dataset: Path
    kg: Path
    out_dir: Path
    embedding_store: Path | None = None
    embedding_service: str | None = None
    metric: SimilarityMetric = SimilarityMetric.COSINE
    big_k: int = 30
    k: int = 6
    tau: float = 0.1
    ratios: TypeRatios = field(default_factory=lambda: RATIO_PRESETS["scienceqa"])
    combine: Combine = Combine.MAX
    stats_scope: str = "dataset"  # "sample" mode is non-canonical, for single-sample runs
    explicit_cs: bool = True
    relevance: bool = True
    confidence: bool = True
    checkpoint: Path | None = None
    replay: Path | None = None
    lvlm_url: str | None = None
    lvlm_model: str | None = None
    lvlm_auth_env: str = "LVLM_API_KEY"
    lvlm_timeout: float = 60.0
    max_in_flight: int = 4
    seed: int = 0

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        raw.update({k: v for k, v in overrides.items() if v is not None})
        embeddings = raw.get("embeddings", {})
        ablation = raw.get("ablation", {})
        lvlm = raw.get("lvlm", {})
        ratios = raw.get("ratios", "scienceqa")
        if isinstance(ratios, str):
            if ratios not in RATIO_PRESETS:
                raise ContractError(
                    f"unknown ratio preset {ratios!r}; expected one of {sorted(RATIO_PRESETS)}"
                )
            ratios = RATIO_PRESETS[ratios]
        else:
            ratios = TypeRatios(*ratios)
        return cls(
            dataset=Path(raw["dataset"]),
            kg=Path(raw["kg"]),
            out_dir=Path(raw["out_dir"]),
            embedding_store=Path(embeddings["store"]) if embeddings.get("store") else None,
            embedding_service=embeddings.get("service"),
            metric=SimilarityMetric(raw.get("metric", "cosine")),
            big_k=int(raw.get("big_k", 30)),
            k=int(raw.get("k", 6)),
            tau=float(raw.get("tau", 0.1)),
            ratios=ratios,
            combine=Combine(raw.get("combine", "max")),
            stats_scope=raw.get("stats_scope", "dataset"),
            explicit_cs=bool(ablation.get("explicit_cs", True)),
            relevance=bool(ablation.get("relevance", True)),
            confidence=bool(ablation.get("confidence", True)),
            checkpoint=Path(raw["checkpoint"]) if raw.get("checkpoint") else None,
            replay=Path(lvlm["replay"]) if lvlm.get("replay") else None,
            lvlm_url=lvlm.get("endpoint"),
            lvlm_model=lvlm.get("model"),
            lvlm_auth_env=lvlm.get("auth_env", "LVLM_API_KEY"),
            lvlm_timeout=float(lvlm.get("timeout", 60.0)),
            max_in_flight=int(raw.get("max_in_flight", 4)),
            seed=int(raw.get("seed", 0)),
        )

    def validate(self) -> None:
        for name in ("dataset", "kg", "embedding_store", "checkpoint", "replay"):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ContractError(f"{name} path does not exist: {value}")
        if self.embedding_store is None and self.embedding_service is None:
            raise ContractError("config needs an embedding store path or a service URL")
        if self.stats_scope not in ("dataset", "sample"):
            raise ContractError(f"stats_scope must be 'dataset' or 'sample', got {self.stats_scope!r}")
        if self.big_k < 1 or self.k < 1:
            raise ContractError("big_k and k must be >= 1")

    def semantic_dict(self) -> dict:
        """Every field that affects outputs; the output directory is excluded."""
        return {
            "dataset": str(self.dataset),
            "kg": str(self.kg),
            "embedding_store": str(self.embedding_store) if self.embedding_store else None,
            "embedding_service": self.embedding_service,
            "metric": self.metric.value,
            "big_k": self.big_k,
            "k": self.k,
            "tau": self.tau,
            "ratios": [self.ratios.pe, self.ratios.ec, self.ratios.si],
            "combine": self.combine.value,
            "stats_scope": self.stats_scope,
            "explicit_cs": self.explicit_cs,
            "relevance": self.relevance,
            "confidence": self.confidence,
            "checkpoint": str(self.checkpoint) if self.checkpoint else None,
            "replay": str(self.replay) if self.replay else None,
            "lvlm_url": self.lvlm_url,
            "lvlm_model": self.lvlm_model,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.semantic_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def scoring_enabled(self) -> bool:
        return self.confidence and self.checkpoint is not None


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def load_dataset(path: Path) -> list[Sample]:
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            sample = Sample(
                id=record["id"],
                question=record["question"],
                caption=record.get("caption", ""),
                image_ref=record.get("image", ""),
                options=list(record["options"]),
                gold_index=record.get("answer"),
                subcategory=record.get("subcategory"),
            )
            if sample.id in seen:
                raise ContractError(f"duplicate sample id {sample.id!r} in dataset")
            seen.add(sample.id)
            samples.append(sample)
    if not samples:
        raise ContractError(f"dataset {path} is empty")
    return samples


def load_triplets(path: Path) -> list[KnowledgeTriplet]:
    if path.suffix in (".ndjson", ".jsonl"):
        with open(path, encoding="utf-8") as fh:
            return read_kg_store(fh)
    with open(path, encoding="utf-8") as fh:
        triplets, _ = parse_knowledge_file(fh)
    return triplets


def _embed_item(key: str) -> EmbedItem:
    path = Path(key)
    if key and path.is_file():
        import base64

        return EmbedItem(kind="image", payload=base64.b64encode(path.read_bytes()).decode("ascii"))
    return EmbedItem(kind="text", payload=key)


def resolve_store(cfg: RunConfig, keys: Sequence[str]) -> EmbeddingStore:
    """Look up or fetch embeddings for the given keys.

    Store mode requires every key to be present and reports the first ten
    missing ones; service mode fetches the missing keys over HTTP.
    """
    unique = list(dict.fromkeys(keys))
    if cfg.embedding_store is not None:
        with open(cfg.embedding_store, "rb") as fh:
            store = read_embedding_store(fh)
        missing = store.missing(unique)
        if missing:
            shown = ", ".join(repr(k) for k in missing[:10])
            raise ContractError(
                f"embedding store lacks {len(missing)} keys (first 10: {shown})"
            )
        return store
    client = EmbeddingClient(cfg.embedding_service, max_in_flight=cfg.max_in_flight)
    vectors = client.fetch([_embed_item(key) for key in unique])
    store = EmbeddingStore(dim=vectors[0].shape[0])
    for key, vec in zip(unique, vectors):
        store.add(key, vec)
    return store


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class StageResult:
    name: str
    artifact: Path
    cached: bool
    seconds: float
    counts: dict


def _stage_key(name: str, input_files: Iterable[Path], config_subset: dict) -> str:
    payload = {
        "stage": name,
        "inputs": [_sha256_file(Path(p)) for p in input_files],
        "config": config_subset,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


@contextmanager
def _sample_context(sample_id: str):
    """Re-raise stage failures with the sample id attached."""
    try:
        yield
    except CsvqaError as exc:
        raise type(exc)(f"sample {sample_id}: {exc}") from exc


def _run_stage(
    out_dir: Path,
    name: str,
    input_files: Sequence[Path],
    config_subset: dict,
    build: Callable[[Path], dict],
) -> StageResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    artifact = out_dir / ARTIFACT_NAMES[name]
    meta_path = out_dir / (ARTIFACT_NAMES[name] + ".meta.json")
    key = _stage_key(name, input_files, config_subset)
    if artifact.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("key") == key:
            return StageResult(name, artifact, cached=True, seconds=0.0, counts=meta.get("counts", {}))
    start = time.perf_counter()
    try:
        counts = build(artifact)
    except CsvqaError as exc:
        raise type(exc)(f"stage {name}: {exc}") from exc
    atomic_write_text(meta_path, json.dumps({"key": key, "counts": counts}, sort_keys=True))
    return StageResult(name, artifact, cached=False, seconds=time.perf_counter() - start, counts=counts)


def _read_ndjson(path: Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def _write_ndjson(path: Path, records: Iterable[dict]) -> None:
    text = "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records)
    atomic_write_text(path, text)


def _source_key(sample: Sample, source: SourceKind) -> str:
    if source == SourceKind.IMAGE:
        return sample.image_ref
    if source == SourceKind.QUESTION:
        return sample.question
    return sample.caption


def stage_retrieve(cfg: RunConfig) -> StageResult:
    """Top-K scan of the triplet index for every (sample, source) pair."""

    def build(artifact: Path) -> dict:
        samples = load_dataset(cfg.dataset)
        triplets = load_triplets(cfg.kg)
        keys = [_source_key(s, src) for s in samples for src in SOURCES]
        keys += [t.head for t in triplets] + [t.tail for t in triplets]
        store = resolve_store(cfg, keys)
        index = TripletIndex(triplets, store)
        records = []
        retrieved = 0
        for sample in samples:
            with _sample_context(sample.id):
                for source in SOURCES:
                    query = store.vector(_source_key(sample, source))
                    top = retrieve_top_k(
                        query, index, cfg.big_k, cfg.metric, source=source, combine=cfg.combine
                    )
                    retrieved += len(top)
                    records.append(
                        {
                            "sample_id": sample.id,
                            "source": source.value,
                            "triplets": [
                                {"id": t.triplet_id, "score": t.score, "category": t.category.value}
                                for t in top
                            ],
                        }
                    )
        _write_ndjson(artifact, records)
        return {"samples": len(samples), "retrieved": retrieved}

    subset = {
        "metric": cfg.metric.value,
        "big_k": cfg.big_k,
        "combine": cfg.combine.value,
        "embedding_service": cfg.embedding_service,
    }
    inputs = [cfg.dataset, cfg.kg]
    if cfg.embedding_store:
        inputs.append(cfg.embedding_store)
    return _run_stage(cfg.out_dir, "retrieve", inputs, subset, build)


def stage_filter(cfg: RunConfig) -> StageResult:
    """By-type quota filtering plus relevance grading over the retrieve artifact."""

    def build(artifact: Path) -> dict:
        triplet_by_id = {t.id: t for t in load_triplets(cfg.kg)}
        retrieve_records = _read_ndjson(cfg.out_dir / ARTIFACT_NAMES["retrieve"])

        selected: list[tuple[dict, list[ScoredTriplet]]] = []
        for record in retrieve_records:
            source = SourceKind(record["source"])
            candidates = [
                ScoredTriplet(
                    triplet_id=t["id"],
                    source=source,
                    score=t["score"],
                    category=triplet_by_id[t["id"]].category,
                )
                for t in record["triplets"]
            ]
            kept = filter_by_type(candidates, cfg.ratios, cfg.k, cfg.tau)
            selected.append((record, kept))

        # pass 1 collected the kept scores; pass 2 grades them against the
        # per-source statistics (dataset scope by default)
        stats_by_source = {}
        if cfg.stats_scope == "dataset":
            for source in SOURCES:
                scores = [
                    t.score for record, kept in selected for t in kept
                    if SourceKind(record["source"]) == source
                ]
                if scores:
                    stats_by_source[source] = compute_source_stats(scores, source)

        records_out = []
        total_kept = 0
        for record, kept in selected:
            source = SourceKind(record["source"])
            if cfg.stats_scope == "sample":
                stats = (
                    compute_source_stats([t.score for t in kept], source) if kept else None
                )
            else:
                stats = stats_by_source.get(source)
            triplet_records = []
            for t in kept:
                level = assign_relevance(t.score, stats) if stats else RelevanceLevel.MEDIUM
                triplet_records.append(
                    {
                        "id": t.triplet_id,
                        "score": t.score,
                        "category": t.category.value,
                        "level": level.label,
                        "sentence": flatten_triplet(triplet_by_id[t.triplet_id]),
                    }
                )
            total_kept += len(triplet_records)
            records_out.append(
                {
                    "sample_id": record["sample_id"],
                    "source": record["source"],
                    "triplets": triplet_records,
                }
            )
        _write_ndjson(artifact, records_out)
        return {"filtered": total_kept}

    subset = {
        "k": cfg.k,
        "tau": cfg.tau,
        "ratios": [cfg.ratios.pe, cfg.ratios.ec, cfg.ratios.si],
        "stats_scope": cfg.stats_scope,
    }
    inputs = [cfg.dataset, cfg.kg, cfg.out_dir / ARTIFACT_NAMES["retrieve"]]
    return _run_stage(cfg.out_dir, "filter", inputs, subset, build)


def _collect_sentences(filtered_records: list[dict], sample_id: str) -> list[tuple[int, str]]:
    """Commonsense sentences for one sample, deduplicated by triplet id.

    Source order image, question, caption; artifact order within a source.
    """
    sentences: list[tuple[int, str]] = []
    seen: set[int] = set()
    for source in SOURCES:
        for record in filtered_records:
            if record["sample_id"] != sample_id or record["source"] != source.value:
                continue
            for t in record["triplets"]:
                if t["id"] not in seen:
                    seen.add(t["id"])
                    sentences.append((t["id"], t["sentence"]))
    return sentences


def stage_score(cfg: RunConfig) -> StageResult:
    """Per-option confidence from the trained network, one record per sample."""

    def build(artifact: Path) -> dict:
        samples = load_dataset(cfg.dataset)
        filtered_records = _read_ndjson(cfg.out_dir / ARTIFACT_NAMES["filter"])
        model = gcn_mod.load_checkpoint(Path(cfg.checkpoint).read_bytes())

        sentence_lists = {
            s.id: _collect_sentences(filtered_records, s.id) for s in samples
        }
        keys = [_source_key(s, src) for s in samples for src in SOURCES]
        keys += [sentence for pairs in sentence_lists.values() for _, sentence in pairs]
        store = resolve_store(cfg, keys)

        records = []
        for sample in samples:
            with _sample_context(sample.id):
                if len(sample.options) > model.num_options:
                    raise ContractError(
                        f"{len(sample.options)} options, checkpoint supports "
                        f"at most {model.num_options}"
                    )
                graph = build_graph(
                    store.vector(sample.image_ref),
                    store.vector(sample.question),
                    store.vector(sample.caption),
                    [
                        (sentence, store.vector(sentence))
                        for _, sentence in sentence_lists[sample.id]
                    ],
                )
                confidence = gcn_mod.score_sample(model, graph, len(sample.options))
                records.append({"sample_id": sample.id, "confidence": confidence.valid_probs()})
        _write_ndjson(artifact, records)
        return {"scored": len(records)}

    subset = {"embedding_service": cfg.embedding_service}
    inputs = [cfg.dataset, cfg.out_dir / ARTIFACT_NAMES["filter"], cfg.checkpoint]
    if cfg.embedding_store:
        inputs.append(cfg.embedding_store)
    return _run_stage(cfg.out_dir, "score", inputs, subset, build)


def stage_prompt(cfg: RunConfig) -> StageResult:
    """Assemble one prompt per sample, honoring the ablation switches."""

    def build(artifact: Path) -> dict:
        samples = load_dataset(cfg.dataset)
        filtered_records = _read_ndjson(cfg.out_dir / ARTIFACT_NAMES["filter"])
        confidence_by_id: dict[str, list[float]] = {}
        if cfg.scoring_enabled:
            for record in _read_ndjson(cfg.out_dir / ARTIFACT_NAMES["score"]):
                confidence_by_id[record["sample_id"]] = record["confidence"]

        records = []
        for sample in samples:
            with _sample_context(sample.id):
                explicit = None
                if cfg.explicit_cs:
                    explicit = {}
                    for record in filtered_records:
                        if record["sample_id"] != sample.id:
                            continue
                        source = SourceKind(record["source"])
                        explicit[source] = [
                            (
                                t["sentence"],
                                RelevanceLevel.from_label(t["level"]) if cfg.relevance else None,
                            )
                            for t in record["triplets"]
                        ]
                confidence = None
                if sample.id in confidence_by_id:
                    values = confidence_by_id[sample.id]
                    confidence = gcn_mod.ConfidenceVector(
                        probs=np.asarray(values, dtype=np.float64), valid_options=len(values)
                    )
                bundle = assemble_prompt(sample, explicit, confidence)
                records.append(
                    {
                        "id": sample.id,
                        "system_preamble": bundle.system_preamble,
                        "body": bundle.body,
                        "image": sample.image_ref,
                    }
                )
        _write_ndjson(artifact, records)
        return {"prompts": len(records)}

    subset = {
        "explicit_cs": cfg.explicit_cs,
        "relevance": cfg.relevance,
        "confidence": cfg.scoring_enabled,
    }
    inputs = [cfg.dataset, cfg.out_dir / ARTIFACT_NAMES["filter"]]
    if cfg.scoring_enabled:
        inputs.append(cfg.out_dir / ARTIFACT_NAMES["score"])
    return _run_stage(cfg.out_dir, "prompt", inputs, subset, build)


def stage_infer(cfg: RunConfig) -> StageResult:
    """Query the answering model (live or replay) and parse the responses."""

    def build(artifact: Path) -> dict:
        samples = {s.id: s for s in load_dataset(cfg.dataset)}
        prompt_records = _read_ndjson(cfg.out_dir / ARTIFACT_NAMES["prompt"])
        if cfg.replay is not None:
            client = ReplayLvlmClient(cfg.replay)
        else:
            if not cfg.lvlm_url or not cfg.lvlm_model:
                raise ContractError("config needs either a replay fixture or an LVLM endpoint")
            client = HttpLvlmClient(
                LvlmEndpoint(
                    url=cfg.lvlm_url,
                    model=cfg.lvlm_model,
                    auth_env=cfg.lvlm_auth_env,
                    timeout=cfg.lvlm_timeout,
                    max_in_flight=cfg.max_in_flight,
                )
            )
        queries = [
            (
                record["id"],
                PromptBundle(
                    system_preamble=record["system_preamble"],
                    body=record["body"],
                    confidence=None,
                    image_ref=record["image"],
                ),
            )
            for record in prompt_records
        ]
        responses = query_many(client, queries, cfg.max_in_flight)

        records = []
        unparsed = 0
        for record, raw in zip(prompt_records, responses):
            sample = samples[record["id"]]
            try:
                parsed = answers_mod.parse_answer(raw, sample.options)
                records.append(
                    {
                        "id": record["id"],
                        "raw": raw,
                        "index": parsed.option_index,
                        "extraction": parsed.extraction.value,
                    }
                )
            except answers_mod.UnparsedAnswerError:
                unparsed += 1
                records.append(
                    {"id": record["id"], "raw": raw, "index": None, "extraction": "unparsed"}
                )
        _write_ndjson(artifact, records)
        return {"responses": len(records), "unparsed": unparsed}

    subset = {
        "replay": str(cfg.replay) if cfg.replay else None,
        "lvlm_url": cfg.lvlm_url,
        "lvlm_model": cfg.lvlm_model,
    }
    inputs = [cfg.dataset, cfg.out_dir / ARTIFACT_NAMES["prompt"]]
    if cfg.replay is not None:
        inputs.append(cfg.replay)
    return _run_stage(cfg.out_dir, "infer", inputs, subset, build)


def stage_eval(cfg: RunConfig) -> StageResult:
    """Score the parsed predictions against the dataset gold answers."""

    def build(artifact: Path) -> dict:
        samples = {s.id: s for s in load_dataset(cfg.dataset)}
        preds = []
        for record in _read_ndjson(cfg.out_dir / ARTIFACT_NAMES["infer"]):
            parsed = None
            if record["index"] is not None:
                parsed = answers_mod.ParsedAnswer(
                    option_index=record["index"],
                    extraction=answers_mod.Extraction(record["extraction"]),
                    raw=record["raw"],
                )
            preds.append((record["id"], parsed))
        report = answers_mod.evaluate(preds, samples)
        atomic_write_text(
            artifact,
            json.dumps(
                {
                    "overall_accuracy": report.overall_accuracy,
                    "correct": report.correct,
                    "total": report.total,
                    "unparsed_count": report.unparsed_count,
                    "per_subcategory": {
                        tag: list(pair) for tag, pair in report.per_subcategory.items()
                    },
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
        )
        return {
            "accuracy": report.overall_accuracy,
            "unparsed": report.unparsed_count,
            "total": report.total,
        }

    inputs = [cfg.dataset, cfg.out_dir / ARTIFACT_NAMES["infer"]]
    return _run_stage(cfg.out_dir, "eval", inputs, {}, build)


class _OutputLock:
    """One run owns its output directory exclusively."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ContractError(
                f"output directory {self.path.parent} is locked by another run"
            ) from None
        os.close(fd)
        return self

    def __exit__(self, *exc_info):
        self.path.unlink(missing_ok=True)


def cmd_run(cfg: RunConfig) -> dict:
    """Execute every stage in order and write the run manifest."""
    cfg.validate()
    with _OutputLock(cfg.out_dir):
        results = [stage_retrieve(cfg), stage_filter(cfg)]
        if cfg.scoring_enabled:
            results.append(stage_score(cfg))
        results += [stage_prompt(cfg), stage_infer(cfg), stage_eval(cfg)]

        counts: dict = {}
        for result in results:
            counts.update(result.counts)
        manifest = {
            "config_hash": cfg.config_hash(),
            "stages": {
                r.name: {
                    "artifact": str(r.artifact),
                    "cached": r.cached,
                    "seconds": round(r.seconds, 6),
                }
                for r in results
            },
            "counts": {
                "samples": counts.get("samples"),
                "retrieved": counts.get("retrieved"),
                "filtered": counts.get("filtered"),
                "unparsed": counts.get("unparsed"),
            },
            "accuracy": counts.get("accuracy"),
        }
        atomic_write_text(
            cfg.out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
    return manifest


def cmd_build_index(
    kg_path: Path,
    out_dir: Path,
    *,
    store_path: Path | None = None,
    service_url: str | None = None,
    max_in_flight: int = 4,
) -> dict:
    """Parse a raw KG file and materialize the index plus its embeddings."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(kg_path, encoding="utf-8") as fh:
        triplets, report = parse_knowledge_file(fh)

    entity_keys = list(dict.fromkeys([t.head for t in triplets] + [t.tail for t in triplets]))
    sentence_keys = list(dict.fromkeys(flatten_triplet(t) for t in triplets))
    if store_path is not None:
        with open(store_path, "rb") as fh:
            source_store = read_embedding_store(fh)
        missing = source_store.missing(entity_keys)
        if missing:
            shown = ", ".join(repr(k) for k in missing[:10])
            raise ContractError(f"embedding store lacks {len(missing)} keys (first 10: {shown})")
        store = EmbeddingStore(dim=source_store.dim)
        for key in entity_keys:
            store.add(key, source_store.vector(key))
        for key in sentence_keys:
            if key in source_store and key not in store:
                store.add(key, source_store.vector(key))
    elif service_url is not None:
        client = EmbeddingClient(service_url, max_in_flight=max_in_flight)
        keys = list(dict.fromkeys(entity_keys + sentence_keys))
        vectors = client.fetch([_embed_item(key) for key in keys])
        store = EmbeddingStore(dim=vectors[0].shape[0])
        for key, vec in zip(keys, vectors):
            store.add(key, vec)
    else:
        raise ContractError("build-index needs an embedding store path or a service URL")

    kg_out = out_dir / "kg.ndjson"
    tmp = kg_out.with_name(kg_out.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        write_kg_store(triplets, fh)
    os.replace(tmp, kg_out)

    store_out = out_dir / "embeddings.bin"
    tmp = store_out.with_name(store_out.name + ".tmp")
    with open(tmp, "wb") as fh:
        write_embedding_store(store, fh)
    os.replace(tmp, store_out)

    manifest = {
        "triplets": len(triplets),
        "embeddings": len(store),
        "dim": store.dim,
        "parse_report": {
            "lines": report.lines,
            "parsed": report.parsed,
            "malformed": report.malformed,
            "unknown_relation": report.unknown_relation,
            "none_tail": report.none_tail,
        },
        "kg": str(kg_out),
        "embeddings_file": str(store_out),
    }
    atomic_write_text(out_dir / "index.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def cmd_train_gcn(
    cfg: RunConfig,
    train_cfg: gcn_mod.TrainConfig | None = None,
    *,
    hidden: tuple[int, int] = gcn_mod.DEFAULT_HIDDEN,
    dropout_rate: float = 0.4,
) -> Path:
    """Build one graph per sample and train the confidence network."""
    cfg.validate()
    train_cfg = train_cfg or gcn_mod.TrainConfig(seed=cfg.seed)
    samples = load_dataset(cfg.dataset)
    for sample in samples:
        if sample.gold_index is None:
            raise ContractError(f"sample {sample.id!r} has no gold answer; cannot train")

    filtered_path = cfg.out_dir / ARTIFACT_NAMES["filter"]
    if not filtered_path.exists():
        stage_retrieve(cfg)
        stage_filter(cfg)
    filtered_records = _read_ndjson(filtered_path)

    sentence_lists = {s.id: _collect_sentences(filtered_records, s.id) for s in samples}
    keys = [_source_key(s, src) for s in samples for src in SOURCES]
    keys += [sentence for pairs in sentence_lists.values() for _, sentence in pairs]
    store = resolve_store(cfg, keys)

    dataset = []
    for sample in samples:
        graph = build_graph(
            store.vector(sample.image_ref),
            store.vector(sample.question),
            store.vector(sample.caption),
            [(sentence, store.vector(sentence)) for _, sentence in sentence_lists[sample.id]],
        )
        dataset.append((graph, sample.gold_index, len(sample.options)))

    model, history = gcn_mod.train(dataset, train_cfg, hidden=hidden, dropout_rate=dropout_rate)

    checkpoint_path = cfg.out_dir / "gcn_checkpoint.bin"
    tmp = checkpoint_path.with_name(checkpoint_path.name + ".tmp")
    tmp.write_bytes(gcn_mod.save_checkpoint(model))
    os.replace(tmp, checkpoint_path)

    history_path = cfg.out_dir / "train_history.csv"
    tmp = history_path.with_name(history_path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        gcn_mod.write_history_csv(history, fh)
    os.replace(tmp, history_path)
    return checkpoint_path
