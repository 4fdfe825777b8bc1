"""Multiple-choice answer extraction and accuracy evaluation."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from .errors import ContractError, UnparsedAnswerError
from .prompts import LETTERS, Sample

FUZZY_THRESHOLD = 0.8


class Extraction(str, Enum):
    LETTER = "letter"
    EXACT_TEXT = "exact_text"
    FUZZY_TEXT = "fuzzy_text"


@dataclass(frozen=True)
class ParsedAnswer:
    option_index: int
    extraction: Extraction
    raw: str


# "Answer: B", "(c)", and a standalone "B." — matched case-insensitively.
_ANSWER_RE = re.compile(r"answer\s*:\s*\(?([a-z])(?![a-z0-9])", re.IGNORECASE)
_PAREN_RE = re.compile(r"\(([a-z])\)", re.IGNORECASE)
_DOT_RE = re.compile(r"(?<![\w])([a-z])\.(?!\w)", re.IGNORECASE)


def _letter_index(letter: str) -> int:
    return LETTERS.index(letter.upper())


def _last_letter_match(raw: str, option_count: int) -> int | None:
    best: tuple[int, int, int] | None = None  # (position, priority, index)
    for priority, pattern in enumerate((_ANSWER_RE, _PAREN_RE, _DOT_RE)):
        for match in pattern.finditer(raw):
            index = _letter_index(match.group(1))
            if index >= option_count:
                continue
            key = (match.start(1), -priority, index)
            if best is None or key > (best[0], -best[1], best[2]):
                best = (match.start(1), priority, index)
    return best[2] if best else None


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def _lcs_length(a: str, b: str) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for char_a in a:
        current = [0] * (len(b) + 1)
        for j, char_b in enumerate(b, start=1):
            if char_a == char_b:
                current[j] = previous[j - 1] + 1
            else:
                current[j] = max(previous[j], current[j - 1])
        previous = current
    return previous[len(b)]


def _lcs_ratio(a: str, b: str) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return 2.0 * _lcs_length(a, b) / (len(a) + len(b))


def parse_answer(raw: str, options: Sequence[str]) -> ParsedAnswer:
    """Map a raw model response onto an option index.

    Tries, in priority order: the last in-range option letter (via
    "Answer: X", "(X)", or a standalone "X."), exact option-text
    containment, then a fuzzy match of the final line accepted only above
    a longest-common-subsequence ratio of 0.8. Ties go to the lowest index.
    """
    if not options:
        raise ContractError("cannot parse an answer against zero options")

    letter = _last_letter_match(raw, len(options))
    if letter is not None:
        return ParsedAnswer(option_index=letter, extraction=Extraction.LETTER, raw=raw)

    normalized_raw = _normalize(raw)
    for index, option in enumerate(options):
        text = _normalize(option)
        if text and text in normalized_raw:
            return ParsedAnswer(option_index=index, extraction=Extraction.EXACT_TEXT, raw=raw)

    lines = [line for line in raw.splitlines() if line.strip()]
    final_line = _normalize(lines[-1]) if lines else ""
    best_ratio, best_index = 0.0, None
    for index, option in enumerate(options):
        ratio = _lcs_ratio(_normalize(option), final_line)
        if ratio > best_ratio:
            best_ratio, best_index = ratio, index
    if best_index is not None and best_ratio > FUZZY_THRESHOLD:
        return ParsedAnswer(option_index=best_index, extraction=Extraction.FUZZY_TEXT, raw=raw)

    raise UnparsedAnswerError(f"no option could be extracted from response {raw!r}")


@dataclass
class EvalReport:
    overall_accuracy: float
    correct: int
    total: int
    unparsed_count: int
    per_subcategory: dict[str, tuple[int, int]] = field(default_factory=dict)


def evaluate(
    preds: Sequence[tuple[str, ParsedAnswer | None]],
    dataset: Mapping[str, Sample],
) -> EvalReport:
    """Score predictions against gold answers; unparsed counts as incorrect."""
    correct = 0
    unparsed = 0
    per_subcategory: dict[str, list[int]] = {}
    for sample_id, parsed in preds:
        if sample_id not in dataset:
            raise ContractError(f"prediction references unknown sample id {sample_id!r}")
        sample = dataset[sample_id]
        if sample.gold_index is None:
            raise ContractError(f"sample {sample_id!r} has no gold answer")
        if parsed is None:
            unparsed += 1
            is_correct = False
        else:
            is_correct = parsed.option_index == sample.gold_index
        correct += int(is_correct)
        if sample.subcategory:
            tally = per_subcategory.setdefault(sample.subcategory, [0, 0])
            tally[0] += int(is_correct)
            tally[1] += 1
    total = len(preds)
    return EvalReport(
        overall_accuracy=correct / total if total else 0.0,
        correct=correct,
        total=total,
        unparsed_count=unparsed,
        per_subcategory={tag: (c, t) for tag, (c, t) in sorted(per_subcategory.items())},
    )
