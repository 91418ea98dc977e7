"""Deterministic sentence encoder used for the semantic-similarity constraint.

Stands in for a heavyweight sentence-embedding model at desk scale: each
word gets a fixed unit vector built from a hash of its synonym cluster plus
a smaller word-specific component, and a sentence embeds as the sum of its
word vectors. Swapping a word for a cluster-mate barely moves the sentence
embedding; swapping across clusters moves it a lot, so the cosine threshold
has real discriminative power.

Everything is derived from BLAKE2 digests, so embeddings are identical
across processes and platforms (no dependence on Python's salted hash()).
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

# Synonym clusters over the toy vocabulary. Words absent from every cluster
# embed as singletons, which in practice never pass a tight similarity
# threshold when swapped in.
WORD_CLUSTERS: dict[str, tuple[str, ...]] = {
    "color": ("red", "blue", "green", "yellow", "black", "white", "brown", "orange", "purple", "pink", "gray"),
    "room": ("kitchen", "bedroom", "bathroom", "garage", "office", "hallway"),
    "animal": ("dog", "cat", "horse", "cow", "sheep", "bird", "elephant", "zebra", "giraffe"),
    "vehicle": ("bus", "car", "truck", "train", "bike", "boat", "plane", "motorcycle"),
    "person": ("man", "woman", "boy", "girl", "child", "player", "rider"),
    "number": ("one", "two", "three", "four", "five", "six", "seven", "eight"),
    "size": ("big", "small", "large", "tiny", "huge", "little"),
    "food": ("pizza", "apple", "banana", "sandwich", "cake", "soup", "salad"),
    "material": ("wood", "metal", "glass", "plastic", "brick", "stone"),
    "sport": ("tennis", "baseball", "soccer", "frisbee", "skiing", "surfing"),
    "weather": ("sunny", "rainy", "cloudy", "snowy", "foggy"),
    "time": ("day", "night", "morning", "evening", "afternoon"),
    "action": ("standing", "sitting", "walking", "running", "eating", "playing", "sleeping", "holding", "riding", "waiting"),
    "object": ("table", "chair", "window", "door", "umbrella", "phone", "laptop", "clock", "sign", "bench"),
    "place": ("street", "beach", "park", "field", "mountain", "city"),
}

CLUSTER_OF: dict[str, str] = {
    word: name for name, words in WORD_CLUSTERS.items() for word in words
}

_WORD_RE = re.compile(r"[a-z]+(?:'[a-z]+)?")


def _hash_unit(tag: str, token: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2s(f"{tag}\x1f{token}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


class ClusteredBagEncoder:
    """Bag-of-words sentence encoder with synonym-cluster structure.

    ``word_weight`` controls how far cluster-mates sit from each other:
    pairwise in-cluster cosine is about 1 / (1 + word_weight**2).
    """

    def __init__(self, dim: int = 32, word_weight: float = 0.15):
        self.dim = dim
        self.word_weight = word_weight
        self._cache: dict[str, np.ndarray] = {}

    def _word_vector(self, word: str) -> np.ndarray:
        vec = self._cache.get(word)
        if vec is None:
            cluster = CLUSTER_OF.get(word, word)
            vec = _hash_unit("cluster", cluster, self.dim) + self.word_weight * _hash_unit(
                "word", word, self.dim
            )
            vec = vec / np.linalg.norm(vec)
            self._cache[word] = vec
        return vec

    def encode(self, text: str) -> np.ndarray:
        """Sum of word vectors; non-alphabetic tokens are ignored.

        A sentence with no alphabetic words embeds as the zero vector, which
        downstream cosine computations reject as undefined.
        """
        words = _WORD_RE.findall(text.lower())
        total = np.zeros(self.dim, dtype=np.float64)
        for word in words:
            total += self._word_vector(word)
        return total


def default_encoder() -> ClusteredBagEncoder:
    return ClusteredBagEncoder()
