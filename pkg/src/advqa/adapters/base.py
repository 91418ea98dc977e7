"""Adapter interface over a differentiable source model, plus victim contract.

An adapter owns its vocabulary and preprocessing. The attack only ever sees
numpy arrays and the small value objects below, so alternative backends can
be dropped in without touching the optimization code.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..core.errors import CapabilityError
from ..core.types import TokenizedText
from ..llm_bridge import MaskedTemplate

ENCODER_IMAGE = "image"
ENCODER_TEXT = "text"
ENCODER_MULTIMODAL = "multimodal"

LOSS_KIND_FEATURE = "feature"
LOSS_KIND_ANTI_RECOVERY = "anti_recovery"


@dataclass(frozen=True)
class AdapterCapabilities:
    """What an adapter can do; checked once at setup, not per call."""

    differentiable: bool = True
    mlm_head: bool = True
    contextual_embeddings: bool = True
    concurrent_safe: bool = True


@dataclass
class LayerFeatures:
    """Per-encoder stacks of token features, one [layers, tokens, dim] array each."""

    encoders: dict[str, np.ndarray]

    def __post_init__(self):
        for name, arr in self.encoders.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 3:
                raise ValueError(f"encoder {name!r} features must be [layers, tokens, dim], got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"encoder {name!r} features contain non-finite entries")
            self.encoders[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.encoders[name]

    def __contains__(self, name: str) -> bool:
        return name in self.encoders

    def names(self) -> tuple[str, ...]:
        return tuple(self.encoders)


@dataclass
class MlmDistribution:
    """One probability vector over the vocabulary per masked position."""

    probabilities: dict[int, np.ndarray]

    def __post_init__(self):
        for pos, vec in self.probabilities.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.ndim != 1:
                raise ValueError(f"distribution at position {pos} must be a vector")
            if (vec < 0).any():
                raise ValueError(f"distribution at position {pos} has negative entries")
            total = float(vec.sum())
            if abs(total - 1.0) > 1e-6:
                raise ValueError(f"distribution at position {pos} sums to {total}, not 1")
            self.probabilities[pos] = vec

    def __getitem__(self, pos: int) -> np.ndarray:
        return self.probabilities[pos]


@dataclass(frozen=True, eq=False)
class LossSpec:
    """Names one implemented loss so gradient ops know what to differentiate.

    kind="feature": sum of cosine similarities between ``reference`` features
    and the features of the perturbed input, over ``encoders``.
    kind="anti_recovery": summed log-probability of the correct tokens at the
    masked positions of ``templates``.
    ``scale`` multiplies the loss (used by linearity checks).
    """

    kind: str
    encoders: tuple[str, ...] = ()
    reference: Optional[LayerFeatures] = None
    templates: tuple[MaskedTemplate, ...] = ()
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in (LOSS_KIND_FEATURE, LOSS_KIND_ANTI_RECOVERY):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == LOSS_KIND_FEATURE:
            if not self.encoders or self.reference is None:
                raise ValueError("feature loss needs encoders and reference features")
        else:
            if not self.templates:
                raise ValueError("anti-recovery loss needs at least one masked template")


class ModelAdapter(abc.ABC):
    """Contract every source model must satisfy to be attacked."""

    name: str = "adapter"

    @abc.abstractmethod
    def capabilities(self) -> AdapterCapabilities: ...

    # --- vocabulary / surface ---------------------------------------------

    @abc.abstractmethod
    def tokenize(self, text: str) -> TokenizedText: ...

    @abc.abstractmethod
    def detokenize(self, text: TokenizedText) -> str: ...

    @property
    @abc.abstractmethod
    def mask_token_id(self) -> int: ...

    @property
    @abc.abstractmethod
    def unk_token_id(self) -> int: ...

    @abc.abstractmethod
    def vocab_words(self) -> tuple[str, ...]:
        """Surface word per token id, indexable by id."""

    @abc.abstractmethod
    def token_id(self, word: str) -> Optional[int]: ...

    # --- forward passes ----------------------------------------------------

    @abc.abstractmethod
    def forward_features(self, image: np.ndarray, text: TokenizedText) -> LayerFeatures: ...

    @abc.abstractmethod
    def mlm_probabilities(self, masked_text: MaskedTemplate, image: np.ndarray) -> MlmDistribution: ...

    @abc.abstractmethod
    def mlm_candidate_probabilities(self, token_ids: Sequence[int], position: int) -> np.ndarray:
        """Vocabulary distribution at ``position`` of a masked word sequence.

        Used for candidate generation, which is a language-model query: the
        adapter conditions on a fixed neutral image so candidates depend only
        on the sentence.
        """

    # --- embeddings ----------------------------------------------------------

    @abc.abstractmethod
    def word_embedding(self, text: TokenizedText, position: int) -> np.ndarray:
        """Static embedding of the word currently at ``position``."""

    @abc.abstractmethod
    def contextual_embedding(self, text: TokenizedText, position: int) -> np.ndarray:
        """First text-encoder layer output at ``position`` for the given sentence."""

    def contextual_embeddings_batch(
        self, texts: Sequence[TokenizedText], positions: Sequence[int]
    ) -> list[np.ndarray]:
        """Batched variant of contextual_embedding; default just loops."""
        return [self.contextual_embedding(t, p) for t, p in zip(texts, positions)]

    # --- losses and gradients ------------------------------------------------

    @abc.abstractmethod
    def loss_and_gradient_wrt_image(
        self, loss: LossSpec, image: np.ndarray, text: TokenizedText
    ) -> tuple[float, np.ndarray]: ...

    @abc.abstractmethod
    def loss_and_gradients_wrt_words(
        self, loss: LossSpec, image: np.ndarray, text: TokenizedText
    ) -> tuple[float, dict[int, np.ndarray]]: ...

    def gradient_wrt_image(self, loss: LossSpec, image: np.ndarray, text: TokenizedText) -> np.ndarray:
        """d(loss)/d(pixels), same shape as the image, finite everywhere."""
        return self.loss_and_gradient_wrt_image(loss, image, text)[1]

    def gradient_wrt_word_embeddings(
        self, loss: LossSpec, image: np.ndarray, text: TokenizedText
    ) -> dict[int, np.ndarray]:
        """d(loss)/d(word embedding) per word position; callers filter to W."""
        return self.loss_and_gradients_wrt_words(loss, image, text)[1]

    # --- helpers --------------------------------------------------------------

    def require(self, *capability_names: str) -> None:
        caps = self.capabilities()
        missing = [name for name in capability_names if not getattr(caps, name)]
        if missing:
            raise CapabilityError(f"adapter {self.name!r} lacks required capabilities: {missing}")


class VictimModel(abc.ABC):
    """Black-box victim: a single answer string per (image, question) query."""

    name: str = "victim"

    @abc.abstractmethod
    def predict(self, image: np.ndarray, question: str) -> str: ...
