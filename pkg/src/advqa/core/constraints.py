"""Constraint arithmetic: L-infinity distance, budget clipping, sentence similarity."""

from __future__ import annotations

from typing import Protocol

import numpy as np

from .errors import EmbeddingError, ShapeMismatchError
from .types import TokenizedText


class SentenceEncoder(Protocol):
    """Maps a sentence to a fixed-dimension real vector."""

    def encode(self, text: str) -> np.ndarray: ...


def linf_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Maximum elementwise absolute difference between two same-shape tensors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape, what="linf operands")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


def clip_to_budget(adv: np.ndarray, clean: np.ndarray, budget: float) -> np.ndarray:
    """Clamp ``adv`` into the L-infinity ball of radius ``budget`` around ``clean``.

    Elements are clamped to [clean - budget, clean + budget] first and to the
    valid pixel range [0, 1] second, so the result always satisfies both
    constraints exactly.
    """
    adv = np.asarray(adv, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if adv.shape != clean.shape:
        raise ShapeMismatchError(adv.shape, clean.shape, what="clip operands")
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    out = np.clip(adv, clean - budget, clean + budget)
    return np.clip(out, 0.0, 1.0)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors; raises on a zero-norm operand."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape, what="embedding vectors")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise EmbeddingError("cosine is undefined for a zero-norm embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def semantic_similarity(adv: TokenizedText, clean: TokenizedText, encoder: SentenceEncoder) -> float:
    """Cosine similarity between the sentence embeddings of two texts.

    Identical surface forms short-circuit to exactly 1.0 so the no-edit case
    is not at the mercy of floating-point rounding.
    """
    ea = np.asarray(encoder.encode(adv.surface()), dtype=np.float64)
    eb = np.asarray(encoder.encode(clean.surface()), dtype=np.float64)
    if np.array_equal(ea, eb):
        if float(np.linalg.norm(ea)) == 0.0:
            raise EmbeddingError("encoder produced a zero-norm sentence embedding")
        return 1.0
    return cosine(ea, eb)
