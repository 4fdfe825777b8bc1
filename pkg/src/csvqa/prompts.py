"""Prompt assembly for the answering model and the category classifier."""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import ContractError
from .gcn import ConfidenceVector
from .retrieval import RelevanceLevel, SourceKind

LETTERS = string.ascii_uppercase

SYSTEM_PREAMBLE = (
    "You are an advanced Vision-Language Model assistant designed to answer "
    "multiple-choice questions based on a given image."
)

RELEVANCE_WORDING = {
    RelevanceLevel.HIGH: "Highly Relevant",
    RelevanceLevel.MEDIUM: "Relevant",
    RelevanceLevel.LOW: "Less Relevant",
}

_SOURCE_HEADINGS = (
    (SourceKind.IMAGE, "Image-Related Commonsense:"),
    (SourceKind.QUESTION, "Question-Related Commonsense:"),
    (SourceKind.CAPTION, "Caption-Related Commonsense:"),
)


@dataclass
class Sample:
    id: str
    question: str
    caption: str
    image_ref: str
    options: list[str]
    gold_index: int | None = None
    subcategory: str | None = None

    def __post_init__(self):
        if not self.options:
            raise ContractError(f"sample {self.id!r} has no options")
        if self.gold_index is not None and not 0 <= self.gold_index < len(self.options):
            raise ContractError(
                f"sample {self.id!r} gold index {self.gold_index} outside its {len(self.options)} options"
            )


@dataclass
class PromptBundle:
    system_preamble: str
    body: str
    confidence: ConfidenceVector | None
    image_ref: str


def option_letter(index: int) -> str:
    if not 0 <= index < len(LETTERS):
        raise ContractError(f"option index {index} cannot be lettered A-Z")
    return LETTERS[index]


ExplicitKnowledge = Mapping[SourceKind, Sequence[tuple[str, RelevanceLevel | None]]]


def _background(has_explicit: bool, has_relevance: bool, has_confidence: bool) -> str:
    has_implicit = has_relevance or has_confidence
    given = (
        "You are given an input image, a question related to the image, "
        "the image caption"
    )
    if has_explicit and has_implicit:
        given += ", multiple-choice answer options, and both explicit and implicit commonsense knowledge."
    elif has_explicit:
        given += ", multiple-choice answer options, and explicit commonsense knowledge."
    elif has_implicit:
        given += ", multiple-choice answer options, and implicit commonsense knowledge."
    else:
        given += ", and multiple-choice answer options."
    first = (
        "You are an advanced Vision-Language Model assistant designed to answer "
        "multiple-choice questions based on a given image. Your task is to select "
        "the most appropriate option from the provided answer choices. " + given
    )

    middle_parts = []
    if has_explicit:
        middle_parts.append(
            "Explicit commonsense knowledge consists of statements related to the "
            "input, categorized as image-related commonsense, question-related "
            "commonsense, and caption-related commonsense."
        )
    if has_relevance and has_confidence:
        middle_parts.append(
            "Implicit commonsense knowledge includes the relevance level (e.g., "
            "highly relevant, relevant, less relevant) assigned to each explicit "
            "commonsense statement and the confidence of each candidate option, "
            "where higher values indicate a greater likelihood of being correct."
        )
    elif has_relevance:
        middle_parts.append(
            "Implicit commonsense knowledge includes the relevance level (e.g., "
            "highly relevant, relevant, less relevant) assigned to each explicit "
            "commonsense statement."
        )
    elif has_confidence:
        middle_parts.append(
            "Implicit commonsense knowledge includes the confidence of each "
            "candidate option, where higher values indicate a greater likelihood "
            "of being correct."
        )

    if has_explicit and has_implicit:
        integrate = "integrate the explicit and implicit commonsense knowledge with the provided information"
    elif has_explicit:
        integrate = "integrate the explicit commonsense knowledge with the provided information"
    elif has_implicit:
        integrate = "integrate the implicit commonsense knowledge with the provided information"
    else:
        integrate = "use the provided information"
    last = (
        f"Your objective is to {integrate} to generate a step-by-step reasoning. "
        "Based on this rationale, you will select the most appropriate answer "
        "from the given options."
    )

    paragraphs = [first]
    if middle_parts:
        paragraphs.append(" ".join(middle_parts))
    paragraphs.append(last)
    return "\n\n".join(paragraphs)


def assemble_prompt(
    sample: Sample,
    explicit: ExplicitKnowledge | None = None,
    confidence: ConfidenceVector | None = None,
) -> PromptBundle:
    """Build the deterministic prompt body.

    Section order: Background, Input Information, Explicit Commonsense
    Knowledge, Implicit Commonsense Knowledge (Confidence for Each Option),
    Rationale:, Answer:. Sections whose content is absent are omitted
    entirely rather than left as empty headers.
    """
    explicit = explicit or {}
    source_blocks: list[str] = []
    has_relevance = False
    for source, heading in _SOURCE_HEADINGS:
        entries = explicit.get(source, ())
        if not entries:
            continue
        lines = [heading]
        for sentence, level in entries:
            if level is None:
                lines.append(f"  - {sentence}")
            else:
                has_relevance = True
                lines.append(f"  - {sentence} ({RELEVANCE_WORDING[level]})")
        source_blocks.append("\n".join(lines))

    sections = [
        "Background\n" + _background(bool(source_blocks), has_relevance, confidence is not None)
    ]

    option_lines = [f"  {option_letter(i)}. {text}" for i, text in enumerate(sample.options)]
    sections.append(
        "\n".join(
            [
                "Input Information",
                f"Image: {sample.image_ref}",
                f"Question: {sample.question}",
                f"Caption: {sample.caption}",
                "Options:",
                *option_lines,
            ]
        )
    )

    if source_blocks:
        sections.append("Explicit Commonsense Knowledge\n" + "\n\n".join(source_blocks))

    if confidence is not None:
        if confidence.valid_options != len(sample.options):
            raise ContractError(
                f"confidence covers {confidence.valid_options} options, sample has {len(sample.options)}"
            )
        lines = ["Implicit Commonsense Knowledge (Confidence for Each Option)"]
        for i, prob in enumerate(confidence.valid_probs()):
            lines.append(f"  {option_letter(i)}: {prob:.2f}")
        sections.append("\n".join(lines))

    sections.append("Rationale:")
    sections.append("Answer:")
    return PromptBundle(
        system_preamble=SYSTEM_PREAMBLE,
        body="\n\n".join(sections),
        confidence=confidence,
        image_ref=sample.image_ref,
    )


_CATEGORY_DEFINITIONS = """1. Physical-Entity Commonsense (CS-PE): Knowledge about physical objects, their properties, uses, locations, and physical attributes. This includes understanding what things are made of, typical or atypical uses, and physical characteristics.

2. Event-Centered Commonsense (CS-EC): Knowledge about events, including their causes, effects, prerequisites, sequences, and hindrances. This encompasses understanding how events are related in time and causality.

3. Social-Interaction Commonsense (CS-SI): Knowledge about social behaviors, mental states, interactions, and interpersonal dynamics. This involves understanding intentions, emotional reactions, and attributes in social contexts."""


def assemble_classification_prompt(sample: Sample) -> str:
    """Prompt asking an expert model to tag a sample as CS-PE, CS-EC, or CS-SI."""
    if not sample.options:
        raise ContractError("classification prompt requires answer options")
    choices = "; ".join(
        f"{option_letter(i)}. {text}" for i, text in enumerate(sample.options)
    )
    answer = ""
    if sample.gold_index is not None:
        answer = f"{option_letter(sample.gold_index)}. {sample.options[sample.gold_index]}"
    return (
        "Instructions:\n"
        "You are an expert in commonsense reasoning and knowledge representation. "
        "Your task is to classify each sample into one of three commonsense categories:\n\n"
        f"{_CATEGORY_DEFINITIONS}\n\n"
        "Sample:\n"
        f"- Image: {sample.caption}\n"
        f"- Question: {sample.question}\n"
        f"- Choices: {choices}\n"
        f"- Answer: {answer}\n\n"
        "Reasoning Steps:\n"
        "Please first examine the question and answer choices, along with the image "
        "caption, to identify the main focus of the sample. Then provide a step-by-step "
        "reasoning on how specific elements of the sample align with the potential "
        "commonsense category. Then assign the appropriate commonsense category "
        "(CS-PE, CS-EC, or CS-SI) based on the provided rationale.\n\n"
        "Classification:"
    )
