"""Per-sample heterogeneous graph construction and adjacency normalization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError

SYMMETRY_TOL = 1e-9


@dataclass
class MultimodalGraph:
    """Node features plus raw and normalized adjacency.

    Row 0 is the image node, row 1 the question, row 2 the caption, and
    rows 3..n-1 the selected commonsense sentences.
    """

    node_features: np.ndarray  # n x D
    adjacency: np.ndarray  # n x n, symmetric, zero diagonal
    normalized: np.ndarray  # n x n, symmetric

    @property
    def n(self) -> int:
        return self.node_features.shape[0]

    @property
    def dim(self) -> int:
        return self.node_features.shape[1]


def normalize_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Symmetric degree normalization with self-loops.

    Computes D^(-1/2) (A + I) D^(-1/2) where D is the diagonal degree of
    A + I; the self-loop keeps every degree strictly positive.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"adjacency must be square, got shape {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL:
        raise ContractError("adjacency is not symmetric")
    if np.any(a < 0):
        raise ContractError("adjacency has negative entries")
    if np.any(np.diag(a) != 0):
        raise ContractError("adjacency diagonal must be zero")
    with_loops = a + np.eye(a.shape[0])
    inv_sqrt_degree = 1.0 / np.sqrt(with_loops.sum(axis=1))
    normalized = with_loops * inv_sqrt_degree[:, None] * inv_sqrt_degree[None, :]
    # enforce exact symmetry against rounding in the two scalings
    return (normalized + normalized.T) / 2.0


def _cosine_weight(a: np.ndarray, b: np.ndarray) -> float:
    # zero-norm nodes get weight 0; the self-loop keeps them connected
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norm == 0.0:
        return 0.0
    return max(0.0, float(np.dot(a, b) / norm))


def build_graph(
    image_emb: np.ndarray,
    question_emb: np.ndarray,
    caption_emb: np.ndarray,
    commonsense: Sequence[tuple[str, np.ndarray]] = (),
    *,
    topology: str = "input-linked",
) -> MultimodalGraph:
    """Assemble the sample graph and its normalized adjacency.

    Default topology: the three input nodes form a triangle and every
    commonsense node connects to each input node; commonsense nodes are
    not connected to each other. `topology="full"` connects every pair.
    Edge weights are cosine similarities of the endpoint embeddings,
    clamped at zero.
    """
    inputs = [np.asarray(v, dtype=np.float64) for v in (image_emb, question_emb, caption_emb)]
    cs_embs = [np.asarray(vec, dtype=np.float64) for _, vec in commonsense]
    dim = inputs[0].shape[0]
    for vec in inputs + cs_embs:
        if vec.ndim != 1 or vec.shape[0] != dim:
            raise ContractError(f"all node embeddings must share dim {dim}, got shape {vec.shape}")
    features = np.stack(inputs + cs_embs) if cs_embs else np.stack(inputs)

    n = features.shape[0]
    adjacency = np.zeros((n, n), dtype=np.float64)
    if topology == "full":
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    elif topology == "input-linked":
        pairs = [(0, 1), (0, 2), (1, 2)]
        pairs += [(i, j) for i in range(3) for j in range(3, n)]
    else:
        raise ContractError(f"unknown topology {topology!r}")
    for i, j in pairs:
        weight = _cosine_weight(features[i], features[j])
        adjacency[i, j] = weight
        adjacency[j, i] = weight
    return MultimodalGraph(
        node_features=features,
        adjacency=adjacency,
        normalized=normalize_adjacency(adjacency),
    )
