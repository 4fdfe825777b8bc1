"""Triplet scoring, exact top-K retrieval, by-type filtering, relevance grades."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, Sequence

import numpy as np

from .embeddings import EmbeddingStore, SimilarityMetric, similarity, similarity_many
from .errors import ContractError, EmptyStoreError
from .kg import CsCategory, KnowledgeTriplet


class SourceKind(str, Enum):
    IMAGE = "image"
    QUESTION = "question"
    CAPTION = "caption"


class Combine(str, Enum):
    MAX = "max"
    MEAN = "mean"


class RelevanceLevel(IntEnum):
    """Grades are totally ordered: HIGH > MEDIUM > LOW."""

    LOW = 0
    MEDIUM = 1
    HIGH = 2

    @property
    def label(self) -> str:
        return {0: "Low", 1: "Medium", 2: "High"}[int(self)]

    @classmethod
    def from_label(cls, label: str) -> "RelevanceLevel":
        try:
            return {"Low": cls.LOW, "Medium": cls.MEDIUM, "High": cls.HIGH}[label]
        except KeyError:
            raise ContractError(f"unknown relevance label {label!r}") from None


@dataclass(frozen=True)
class ScoredTriplet:
    triplet_id: int
    source: SourceKind
    score: float
    category: CsCategory


@dataclass(frozen=True)
class TypeRatios:
    """Target proportions for the PE/EC/SI quota split; must sum to 1."""

    pe: float
    ec: float
    si: float

    def __post_init__(self):
        for name, value in (("pe", self.pe), ("ec", self.ec), ("si", self.si)):
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"ratio {name}={value} outside [0, 1]")
        total = self.pe + self.ec + self.si
        if abs(total - 1.0) > 1e-9:
            raise ContractError(f"ratios sum to {total}, expected 1")

    def proportion(self, category: CsCategory) -> float:
        return {CsCategory.PE: self.pe, CsCategory.EC: self.ec, CsCategory.SI: self.si}[category]


RATIO_PRESETS: dict[str, TypeRatios] = {
    "scienceqa": TypeRatios(0.7, 0.15, 0.15),
    "textvqa": TypeRatios(0.2, 0.6, 0.2),
    "mmmu": TypeRatios(1 / 3, 1 / 3, 1 / 3),
}


@dataclass(frozen=True)
class SourceStats:
    """Population mean and standard deviation of one source's scores."""

    source: SourceKind
    mean: float
    stddev: float
    count: int


class TripletIndex:
    """Immutable scan index: triplets plus stacked head/tail embeddings."""

    def __init__(self, triplets: Sequence[KnowledgeTriplet], store: EmbeddingStore):
        if not triplets:
            raise EmptyStoreError("cannot build an index over zero triplets")
        self.triplets = list(triplets)
        self.dim = store.dim
        self.ids = np.array([t.id for t in self.triplets], dtype=np.int64)
        self.categories = [t.category for t in self.triplets]
        self.head_matrix = np.stack([store.vector(t.head) for t in self.triplets])
        self.tail_matrix = np.stack([store.vector(t.tail) for t in self.triplets])
        self.by_id = {t.id: t for t in self.triplets}

    def __len__(self) -> int:
        return len(self.triplets)


def triplet_score(
    f: np.ndarray,
    head_emb: np.ndarray,
    tail_emb: np.ndarray,
    metric: SimilarityMetric = SimilarityMetric.COSINE,
    combine: Combine = Combine.MAX,
) -> float:
    """Combine the head and tail similarities into one triplet score."""
    head_sim = similarity(f, head_emb, metric)
    tail_sim = similarity(f, tail_emb, metric)
    if combine == Combine.MAX:
        return max(head_sim, tail_sim)
    return (head_sim + tail_sim) / 2.0


def retrieve_top_k(
    f: np.ndarray,
    index: TripletIndex,
    k: int,
    metric: SimilarityMetric = SimilarityMetric.COSINE,
    *,
    source: SourceKind = SourceKind.QUESTION,
    combine: Combine = Combine.MAX,
) -> list[ScoredTriplet]:
    """Exhaustive exact scan: top `k` by score descending, ties by ascending id."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise EmptyStoreError("index is empty")
    head_scores = similarity_many(index.head_matrix, np.asarray(f, dtype=np.float64), metric)
    tail_scores = similarity_many(index.tail_matrix, np.asarray(f, dtype=np.float64), metric)
    if combine == Combine.MAX:
        scores = np.maximum(head_scores, tail_scores)
    else:
        scores = (head_scores + tail_scores) / 2.0
    # lexsort: primary key is the last one (score descending), then id ascending
    order = np.lexsort((index.ids, -scores))[: min(k, len(index))]
    return [
        ScoredTriplet(
            triplet_id=int(index.ids[i]),
            source=source,
            score=float(scores[i]),
            category=index.categories[i],
        )
        for i in order
    ]


_CATEGORY_ORDER = (CsCategory.PE, CsCategory.EC, CsCategory.SI)


def _quotas(ratios: TypeRatios, k: int, survivors: Sequence[ScoredTriplet]) -> dict[CsCategory, int]:
    """Largest-remainder allocation of k slots across the three categories.

    Fractional-remainder ties are broken in favor of the category holding
    the single highest-scoring surviving candidate.
    """
    best_score = {c: -math.inf for c in _CATEGORY_ORDER}
    for cand in survivors:
        if cand.score > best_score[cand.category]:
            best_score[cand.category] = cand.score
    quotas: dict[CsCategory, int] = {}
    fractions: dict[CsCategory, float] = {}
    for category in _CATEGORY_ORDER:
        target = ratios.proportion(category) * k
        quotas[category] = int(math.floor(target))
        fractions[category] = target - quotas[category]
    remainder = k - sum(quotas.values())
    ranked = sorted(
        _CATEGORY_ORDER,
        key=lambda c: (-fractions[c], -best_score[c], _CATEGORY_ORDER.index(c)),
    )
    i = 0
    while remainder > 0:
        quotas[ranked[i % len(ranked)]] += 1
        i += 1
        remainder -= 1
    return quotas


def filter_by_type(
    candidates: Sequence[ScoredTriplet],
    ratios: TypeRatios,
    k: int = 6,
    tau: float = 0.1,
) -> list[ScoredTriplet]:
    """Threshold then select a per-category quota of the best candidates.

    Candidates scoring below `tau` are dropped. Each category receives a
    largest-remainder quota of the `k` slots and contributes its top
    survivors; quota slots a starved category cannot fill spill to the
    globally highest-scoring unselected survivors. May return fewer than
    `k` when survivors are scarce.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    survivors = [c for c in candidates if c.score >= tau]
    if not survivors:
        return []
    quotas = _quotas(ratios, k, survivors)

    by_score = sorted(survivors, key=lambda c: (-c.score, c.triplet_id))
    selected: list[ScoredTriplet] = []
    chosen: set[ScoredTriplet] = set()
    for category in _CATEGORY_ORDER:
        pool = [c for c in by_score if c.category == category]
        for cand in pool[: quotas[category]]:
            selected.append(cand)
            chosen.add(cand)
    target = min(k, len(survivors))
    for cand in by_score:
        if len(selected) >= target:
            break
        if cand not in chosen:
            selected.append(cand)
            chosen.add(cand)
    return sorted(selected, key=lambda c: (-c.score, c.triplet_id))


def compute_source_stats(scores: Iterable[float], source: SourceKind) -> SourceStats:
    """Population mean and stddev (divisor N) of one source's selected scores."""
    values = np.asarray(list(scores), dtype=np.float64)
    if values.size == 0:
        raise ContractError(f"no scores collected for source {source.value}")
    if np.ptp(values) == 0.0:
        # constant sets get an exactly-zero deviation, not rounding noise
        return SourceStats(source=source, mean=float(values[0]), stddev=0.0, count=int(values.size))
    return SourceStats(
        source=source,
        mean=float(np.mean(values)),
        stddev=float(np.std(values)),
        count=int(values.size),
    )


def assign_relevance(score: float, stats: SourceStats) -> RelevanceLevel:
    """Grade one score against its source statistics.

    High for scores at or above mean + stddev/2, Low strictly below
    mean - stddev/2, Medium in between (both boundaries included).
    """
    if score >= stats.mean + stats.stddev / 2.0:
        return RelevanceLevel.HIGH
    if score < stats.mean - stats.stddev / 2.0:
        return RelevanceLevel.LOW
    return RelevanceLevel.MEDIUM
