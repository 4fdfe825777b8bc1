"""Encoders behind the shim.

The default encoder is a deterministic hashed-feature projector: it needs no
model download, produces identical vectors for identical inputs across
processes, and L2-normalizes its output. Real model backends plug in behind
the same two-method interface; ids with an ``st:`` prefix load a
sentence-transformers checkpoint.
"""

from __future__ import annotations

import hashlib
import io

import numpy as np
from PIL import Image


class PayloadError(ValueError):
    """The payload could not be decoded (HTTP 400)."""


class ModelLoadError(RuntimeError):
    """The configured model failed to load (HTTP 503)."""


def _stable_hash(token: str) -> int:
    return int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # all-zero features (e.g. empty text) still need a valid unit vector
        vec = np.zeros_like(vec)
        vec[0] = 1.0
        return vec
    return vec / norm


class HashedProjectionEncoder:
    """Dependency-free deterministic featurizer for text and images."""

    def __init__(self, dim: int = 384):
        if dim < 2:
            raise ValueError("dim must be at least 2")
        self.dim = dim
        # fixed projection for image patch features; seeded by the dimension
        rng = np.random.default_rng(dim)
        self._image_projection = rng.normal(0.0, 1.0, size=(192, dim))

    def encode_text(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        padded = f"\x02{text.lower()}\x03"
        for i in range(len(padded) - 2):
            trigram = padded[i : i + 3]
            h = _stable_hash(trigram)
            sign = 1.0 if h & 1 else -1.0
            vec[(h >> 1) % self.dim] += sign
        return _normalize(vec)

    def encode_image(self, data: bytes) -> np.ndarray:
        try:
            with Image.open(io.BytesIO(data)) as img:
                rgb = img.convert("RGB").resize((8, 8), Image.BILINEAR)
        except Exception as exc:
            raise PayloadError(f"cannot decode image: {exc}") from exc
        patch = np.asarray(rgb, dtype=np.float64).reshape(-1) / 255.0  # 192 values
        return _normalize(patch @ self._image_projection)


class SentenceTransformerEncoder:
    """Adapter over a sentence-transformers checkpoint (text and CLIP-style images)."""

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            from sentence_transformers import SentenceTransformer

            self._model = SentenceTransformer(model_id, device=device)
        except Exception as exc:
            raise ModelLoadError(f"cannot load model {model_id!r}: {exc}") from exc
        self.dim = int(self._model.get_sentence_embedding_dimension())

    def encode_text(self, text: str) -> np.ndarray:
        vec = self._model.encode([text], normalize_embeddings=True, show_progress_bar=False)[0]
        return np.asarray(vec, dtype=np.float64)

    def encode_image(self, data: bytes) -> np.ndarray:
        try:
            image = Image.open(io.BytesIO(data)).convert("RGB")
        except Exception as exc:
            raise PayloadError(f"cannot decode image: {exc}") from exc
        vec = self._model.encode([image], normalize_embeddings=True, show_progress_bar=False)[0]
        return np.asarray(vec, dtype=np.float64)


class StubCaptioner:
    """Deterministic caption from decoded image properties."""

    _CHANNELS = ("red", "green", "blue")

    def caption(self, data: bytes) -> str:
        try:
            with Image.open(io.BytesIO(data)) as img:
                width, height = img.size
                rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
        except Exception as exc:
            raise PayloadError(f"cannot decode image: {exc}") from exc
        dominant = self._CHANNELS[int(np.argmax(rgb.mean(axis=(0, 1))))]
        return f"an image of {width} by {height} pixels, dominated by {dominant} tones"


def load_encoder(model_id: str, dim: int, device: str):
    if model_id.startswith("st:"):
        return SentenceTransformerEncoder(model_id[3:], device=device)
    if model_id == "hashed-projection-v1":
        return HashedProjectionEncoder(dim=dim)
    raise ModelLoadError(f"unknown model identifier {model_id!r}")
