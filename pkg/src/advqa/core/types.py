"""Domain value objects: images, tokenized text, answers, config, results.

All types here are immutable (or treated as such) so they can be shared
freely across worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, ShapeMismatchError

# Loss-term flags. feature_text additionally enables the cross-modal joint
# attack (image step on the combined loss plus synonym substitution).
LOSS_FEATURE_IMAGE = "feature_image"
LOSS_FEATURE_MULTIMODAL = "feature_multimodal"
LOSS_FEATURE_TEXT = "feature_text"
LOSS_ANTI_RECOVERY = "anti_recovery"

ALL_LOSS_FLAGS = frozenset(
    {LOSS_FEATURE_IMAGE, LOSS_FEATURE_MULTIMODAL, LOSS_FEATURE_TEXT, LOSS_ANTI_RECOVERY}
)

# Named ablation presets: image-encoder only, latent-representation
# perturbation (image + multimodal encoders), LRP plus the masked-answer
# anti-recovery loss, and the full joint attack.
ABLATION_PRESETS = {
    "IE": frozenset({LOSS_FEATURE_IMAGE}),
    "LRP": frozenset({LOSS_FEATURE_IMAGE, LOSS_FEATURE_MULTIMODAL}),
    "LLM-E": frozenset({LOSS_FEATURE_IMAGE, LOSS_FEATURE_MULTIMODAL, LOSS_ANTI_RECOVERY}),
    "full": ALL_LOSS_FLAGS,
}


def validate_image(pixels) -> np.ndarray:
    """Coerce to a float64 H x W x C array and enforce the [0, 1] range."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeMismatchError(arr.shape, ("H", "W", "C"), what="image")
    if arr.size == 0:
        raise ShapeMismatchError(arr.shape, ("H>0", "W>0", "C>0"), what="image")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"image pixels must lie in [0, 1], found range [{lo}, {hi}]")
    return arr


@dataclass(frozen=True)
class TokenizedText:
    """A tokenized sentence plus the word positions eligible for substitution.

    ``informative_indices`` never points at a stop word; what counts as a
    stop word (and how surface strings map to ids) is owned by the adapter
    that produced the instance.
    """

    words: tuple[str, ...]
    token_ids: tuple[int, ...]
    informative_indices: frozenset[int] = frozenset()

    def __post_init__(self):
        if len(self.words) != len(self.token_ids):
            raise ValueError(
                f"words ({len(self.words)}) and token_ids ({len(self.token_ids)}) differ in length"
            )
        bad = [i for i in self.informative_indices if not (0 <= i < len(self.words))]
        if bad:
            raise ValueError(f"informative indices {bad} out of range for {len(self.words)} words")

    def __len__(self) -> int:
        return len(self.words)

    def replaced(self, position: int, word: str, token_id: int) -> "TokenizedText":
        """Return a copy with one word swapped out; all other tokens are preserved."""
        if not 0 <= position < len(self.words):
            raise IndexError(f"position {position} out of range for {len(self.words)} words")
        words = self.words[:position] + (word,) + self.words[position + 1 :]
        ids = self.token_ids[:position] + (token_id,) + self.token_ids[position + 1 :]
        return TokenizedText(words, ids, self.informative_indices)

    def surface(self) -> str:
        """Space-joined surface form (used by sentence encoders)."""
        return " ".join(self.words)


@dataclass(frozen=True)
class AnswerSet:
    """Non-empty collection of correct answers for one question."""

    answers: tuple[str, ...]

    def __post_init__(self):
        if not self.answers:
            raise ValueError("answer set must be non-empty")
        normalized = [" ".join(a.lower().split()) for a in self.answers]
        if len(set(normalized)) != len(normalized):
            raise ValueError(f"answers are not distinct after normalization: {self.answers}")

    @classmethod
    def of(cls, answers: Iterable[str]) -> "AnswerSet":
        return cls(tuple(answers))

    def __iter__(self):
        return iter(self.answers)

    def __len__(self) -> int:
        return len(self.answers)


@dataclass(frozen=True)
class AttackConfig:
    """Knobs of one attack run.

    ``step_size`` and ``image_budget`` are in pixel units (pixels live in
    [0, 1], so 16/255 is the usual 8-bit budget of 16 levels).
    """

    max_iters: int = 20
    step_size: float = 2.0 / 255.0
    image_budget: float = 16.0 / 255.0
    text_sim_threshold: float = 0.95
    top_k: int = 8
    seed: int = 0
    loss_flags: frozenset[str] = ALL_LOSS_FLAGS
    diversity_prob: float = 0.0
    # "budget_uniform" draws the start offset from U(-budget, budget);
    # "literal_uniform" draws from U(0, 1) for fidelity experiments.
    init_mode: str = "budget_uniform"
    # "minimize" steps against the gradient; "maximize" flips the sign.
    gradient_direction: str = "minimize"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if not 0.0 < self.image_budget <= 1.0:
            raise ConfigError(f"image_budget must lie in (0, 1], got {self.image_budget}")
        if not 0.0 < self.step_size <= self.image_budget:
            raise ConfigError(
                f"step_size must lie in (0, image_budget={self.image_budget}], got {self.step_size}"
            )
        if not 0.0 < self.text_sim_threshold < 1.0:
            raise ConfigError(
                f"text_sim_threshold must lie in (0, 1), got {self.text_sim_threshold}"
            )
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 <= self.diversity_prob <= 1.0:
            raise ConfigError(f"diversity_prob must lie in [0, 1], got {self.diversity_prob}")
        unknown = set(self.loss_flags) - ALL_LOSS_FLAGS
        if unknown:
            raise ConfigError(f"unknown loss flags {sorted(unknown)}; known: {sorted(ALL_LOSS_FLAGS)}")
        if self.init_mode not in ("budget_uniform", "literal_uniform"):
            raise ConfigError(f"init_mode must be budget_uniform or literal_uniform, got {self.init_mode!r}")
        if self.gradient_direction not in ("minimize", "maximize"):
            raise ConfigError(
                f"gradient_direction must be minimize or maximize, got {self.gradient_direction!r}"
            )
        object.__setattr__(self, "loss_flags", frozenset(self.loss_flags))

    @property
    def joint_attack_enabled(self) -> bool:
        return LOSS_FEATURE_TEXT in self.loss_flags


@dataclass(frozen=True)
class IterationRecord:
    """One audited iteration: loss values as used for the gradient steps.

    A loss of ``None`` means that step was skipped (flag disabled, capability
    missing, or the joint attack did not trigger).
    """

    iteration: int
    loss_feature: Optional[float]
    loss_anti_recovery: Optional[float]
    loss_cross: Optional[float]
    joint_triggered: bool
    substitutions: tuple[tuple[int, str, str], ...] = ()


@dataclass
class AttackTrace:
    """Per-iteration audit trail plus any degradation warnings."""

    records: list[IterationRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class AttackResult:
    """Final adversarial pair with its constraint report."""

    adv_image: np.ndarray
    adv_text: TokenizedText
    trace: AttackTrace
    linf: float
    semantic_sim: float
    n_substitutions: int
