"""ATOMIC2020-style knowledge store: parsing, categories, verbalization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import IO, Iterable

from .errors import ContractError, EmptyStoreError


class CsCategory(str, Enum):
    """Three-way commonsense grouping of relation kinds."""

    PE = "PE"  # physical entity
    EC = "EC"  # event centered
    SI = "SI"  # social interaction


class RelationKind(str, Enum):
    """The 23 relation types, named exactly as they appear in the KG files."""

    # physical entity
    ObjectUse = "ObjectUse"
    AtLocation = "AtLocation"
    MadeUpOf = "MadeUpOf"
    HasProperty = "HasProperty"
    CapableOf = "CapableOf"
    Desires = "Desires"
    NotDesires = "NotDesires"
    # event centered
    IsAfter = "IsAfter"
    HasSubEvent = "HasSubEvent"
    IsBefore = "IsBefore"
    HinderedBy = "HinderedBy"
    Causes = "Causes"
    xReason = "xReason"
    isFilledBy = "isFilledBy"
    # social interaction
    xNeed = "xNeed"
    xAttr = "xAttr"
    xEffect = "xEffect"
    xReact = "xReact"
    xWant = "xWant"
    xIntent = "xIntent"
    oEffect = "oEffect"
    oReact = "oReact"
    oWant = "oWant"


RELATION_CATEGORY: dict[RelationKind, CsCategory] = {
    RelationKind.ObjectUse: CsCategory.PE,
    RelationKind.AtLocation: CsCategory.PE,
    RelationKind.MadeUpOf: CsCategory.PE,
    RelationKind.HasProperty: CsCategory.PE,
    RelationKind.CapableOf: CsCategory.PE,
    RelationKind.Desires: CsCategory.PE,
    RelationKind.NotDesires: CsCategory.PE,
    RelationKind.IsAfter: CsCategory.EC,
    RelationKind.HasSubEvent: CsCategory.EC,
    RelationKind.IsBefore: CsCategory.EC,
    RelationKind.HinderedBy: CsCategory.EC,
    RelationKind.Causes: CsCategory.EC,
    RelationKind.xReason: CsCategory.EC,
    RelationKind.isFilledBy: CsCategory.EC,
    RelationKind.xNeed: CsCategory.SI,
    RelationKind.xAttr: CsCategory.SI,
    RelationKind.xEffect: CsCategory.SI,
    RelationKind.xReact: CsCategory.SI,
    RelationKind.xWant: CsCategory.SI,
    RelationKind.xIntent: CsCategory.SI,
    RelationKind.oEffect: CsCategory.SI,
    RelationKind.oReact: CsCategory.SI,
    RelationKind.oWant: CsCategory.SI,
}

RELATION_PHRASE: dict[RelationKind, str] = {
    RelationKind.ObjectUse: "is used for",
    RelationKind.AtLocation: "is at",
    RelationKind.MadeUpOf: "is made up of",
    RelationKind.HasProperty: "can be",
    RelationKind.CapableOf: "is capable of",
    RelationKind.Desires: "desires",
    RelationKind.NotDesires: "does not desire",
    RelationKind.IsAfter: "occurs after",
    RelationKind.HasSubEvent: "has sub-event",
    RelationKind.IsBefore: "occurs before",
    RelationKind.HinderedBy: "is hindered by",
    RelationKind.Causes: "causes",
    RelationKind.xReason: "is because someone",
    RelationKind.isFilledBy: "is filled by",
    RelationKind.xNeed: "then someone needs",
    RelationKind.xAttr: "then someone has attributes",
    RelationKind.xEffect: "then someone has the effect",
    RelationKind.xReact: "then someone reacts with",
    RelationKind.xWant: "then someone wants",
    RelationKind.xIntent: "then someone intends",
    RelationKind.oEffect: "then the effect on another is",
    RelationKind.oReact: "then another reacts with",
    RelationKind.oWant: "then another one wants",
}

# Longest match first, so possessives are rewritten before the bare names.
_SUBSTITUTIONS: tuple[tuple[str, str], ...] = (
    ("PersonX's", "Someone's"),
    ("PersonX", "Someone"),
    ("PersonY's", "Another one's"),
    ("PersonY", "Another"),
    ("___", "something"),
)


def relation_category(relation: RelationKind) -> CsCategory:
    """Category of a relation kind; total over all 23 members."""
    return RELATION_CATEGORY[relation]


@dataclass(frozen=True)
class KnowledgeTriplet:
    id: int
    head: str
    relation: RelationKind
    tail: str

    @property
    def category(self) -> CsCategory:
        return RELATION_CATEGORY[self.relation]


@dataclass
class ParseReport:
    lines: int = 0
    parsed: int = 0
    malformed: int = 0
    unknown_relation: int = 0
    none_tail: int = 0
    comments: int = 0


def substitute_placeholders(text: str) -> str:
    """Rewrite PersonX/PersonY placeholders and blanks into plain English."""
    for old, new in _SUBSTITUTIONS:
        text = text.replace(old, new)
    return text


def flatten_triplet(triplet: KnowledgeTriplet) -> str:
    """Verbalize a triplet into one natural-language sentence.

    Deterministic: the relation's fixed phrase is inserted between the
    placeholder-substituted head and tail, and whitespace is collapsed to
    single spaces. No punctuation is added.
    """
    head = substitute_placeholders(triplet.head)
    tail = substitute_placeholders(triplet.tail)
    phrase = RELATION_PHRASE[triplet.relation]
    return " ".join(f"{head} {phrase} {tail}".split())


def parse_knowledge_file(stream: Iterable[str]) -> tuple[list[KnowledgeTriplet], ParseReport]:
    """Parse tab-separated ``head\\trelation\\ttail`` lines into triplets.

    Malformed lines, unknown relations, and ``none`` tails are counted in
    the report and skipped rather than aborting ingestion. Ids are assigned
    sequentially in file order.
    """
    triplets: list[KnowledgeTriplet] = []
    report = ParseReport()
    for raw_line in stream:
        line = raw_line.rstrip("\n").rstrip("\r")
        report.lines += 1
        if not line.strip():
            continue
        if line.lstrip().startswith("#"):
            report.comments += 1
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            report.malformed += 1
            continue
        head, relation_name, tail = (f.strip() for f in fields)
        if not head or not tail or not relation_name:
            report.malformed += 1
            continue
        if tail == "none":
            report.none_tail += 1
            continue
        try:
            relation = RelationKind(relation_name)
        except ValueError:
            report.unknown_relation += 1
            continue
        triplets.append(KnowledgeTriplet(id=len(triplets), head=head, relation=relation, tail=tail))
        report.parsed += 1
    if not triplets:
        raise EmptyStoreError("knowledge file contains no valid triplets")
    return triplets, report


def write_kg_store(triplets: Iterable[KnowledgeTriplet], sink: IO[str]) -> None:
    """Serialize triplets as newline-delimited JSON records."""
    for t in triplets:
        record = {
            "id": t.id,
            "head": t.head,
            "relation": t.relation.value,
            "tail": t.tail,
            "category": t.category.value,
        }
        sink.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_kg_store(source: IO[str]) -> list[KnowledgeTriplet]:
    """Load triplets from the NDJSON store format, checking id uniqueness."""
    triplets: list[KnowledgeTriplet] = []
    seen: set[int] = set()
    for line_no, line in enumerate(source, start=1):
        if not line.strip():
            continue
        record = json.loads(line)
        triplet = KnowledgeTriplet(
            id=int(record["id"]),
            head=record["head"],
            relation=RelationKind(record["relation"]),
            tail=record["tail"],
        )
        if triplet.id in seen:
            raise ContractError(f"duplicate triplet id {triplet.id} at line {line_no}")
        seen.add(triplet.id)
        triplets.append(triplet)
    if not triplets:
        raise EmptyStoreError("knowledge store is empty")
    return triplets
