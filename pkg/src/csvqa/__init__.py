"""Commonsense-grounded VQA engine.

Retrieves knowledge triplets from an ATOMIC2020-style graph by embedding
similarity, filters them by commonsense type with relevance grading, scores
answer options with a small graph convolutional network, and assembles
prompts for an external vision-language model.
"""

__version__ = "0.1.0"
