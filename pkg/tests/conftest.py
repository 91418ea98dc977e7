from __future__ import annotations

import numpy as np
import pytest
import torch

from advqa.adapters import ToyAdapter, ToyVictim
from advqa.adapters.base import (
    AdapterCapabilities,
    LayerFeatures,
    MlmDistribution,
    ModelAdapter,
)
from advqa.core.types import TokenizedText
from advqa.semantics import default_encoder

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_adapter():
    return ToyAdapter()


@pytest.fixture(scope="session")
def toy_victim():
    return ToyVictim()


@pytest.fixture(scope="session")
def encoder():
    return default_encoder()


def make_image(seed: int, hw: tuple[int, int] = (16, 16)) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.floor(rng.uniform(0.0, 1.0, (hw[0], hw[1], 3)) * 255 + 0.5) / 255


class StubAdapter(ModelAdapter):
    """Minimal word-level adapter with a uniform MLM head and zero gradients.

    vocab is [unk], [mask] plus ``n_words`` lowercase letters; the MLM head is
    uniform over the whole vocabulary, gradients are identically zero
    (constant head), and features are a fixed function of the image mean so
    forward_features stays deterministic.
    """

    name = "stub"

    def __init__(self, n_words: int = 8, mlm_head: bool = True, dim: int = 4):
        self.dim = dim
        self._words = ("[unk]", "[mask]") + tuple("abcdefghijklmnopqrstuvwxyz"[:n_words])
        self._word_to_id = {w: i for i, w in enumerate(self._words)}
        self._mlm = mlm_head

    def capabilities(self) -> AdapterCapabilities:
        return AdapterCapabilities(
            differentiable=True,
            mlm_head=self._mlm,
            contextual_embeddings=self._mlm,
            concurrent_safe=True,
        )

    @property
    def mask_token_id(self) -> int:
        return 1

    @property
    def unk_token_id(self) -> int:
        return 0

    def vocab_words(self):
        return self._words

    def token_id(self, word):
        return self._word_to_id.get(word.lower())

    def tokenize(self, text: str) -> TokenizedText:
        words = tuple(text.lower().split())
        ids = tuple(self._word_to_id.get(w, 0) for w in words)
        informative = frozenset(i for i, w in enumerate(words) if ids[i] != 0)
        return TokenizedText(words, ids, informative)

    def detokenize(self, text: TokenizedText) -> str:
        return " ".join(text.words)

    def forward_features(self, image, text) -> LayerFeatures:
        mean = float(np.asarray(image).mean())
        base = np.linspace(0.1, 1.0, self.dim)
        text_feats = np.tile(base, (max(len(text), 1), 1))[None, :, :]
        return LayerFeatures(
            {
                "image": (base * (1 + mean))[None, None, :],
                "text": text_feats,
                "multimodal": np.stack([base * 2.0, base * (1 + mean)])[None, :, :],
            }
        )

    def mlm_probabilities(self, masked_text, image) -> MlmDistribution:
        n = len(self._words)
        return MlmDistribution({pos: np.full(n, 1.0 / n) for pos in masked_text.mask_indices})

    def mlm_candidate_probabilities(self, token_ids, position):
        n = len(self._words)
        return np.full(n, 1.0 / n)

    def word_embedding(self, text, position):
        rng = np.random.default_rng(text.token_ids[position])
        return rng.standard_normal(self.dim)

    def contextual_embedding(self, text, position):
        rng = np.random.default_rng(hash((text.words[position], position)) % (2**32))
        return rng.standard_normal(self.dim)

    def loss_and_gradient_wrt_image(self, loss, image, text):
        return 0.0, np.zeros_like(np.asarray(image, dtype=np.float64))

    def loss_and_gradients_wrt_words(self, loss, image, text):
        return 0.0, {i: np.zeros(self.dim) for i in range(len(text))}


class UniformMlmAdapter(StubAdapter):
    """Stub whose vocabulary has exactly ``n`` entries (for log(1/n) oracles)."""

    def __init__(self, n: int = 10):
        super().__init__(n_words=n - 2)
        assert len(self._words) == n
