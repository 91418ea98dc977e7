from .constraints import SentenceEncoder, clip_to_budget, cosine, linf_distance, semantic_similarity
from .errors import (
    AdvqaError,
    CapabilityError,
    ConfigError,
    DatasetError,
    EmbeddingError,
    LlmUnavailableError,
    NonFiniteError,
    ShapeMismatchError,
    TemplateError,
)
from .types import (
    ABLATION_PRESETS,
    ALL_LOSS_FLAGS,
    LOSS_ANTI_RECOVERY,
    LOSS_FEATURE_IMAGE,
    LOSS_FEATURE_MULTIMODAL,
    LOSS_FEATURE_TEXT,
    AnswerSet,
    AttackConfig,
    AttackResult,
    AttackTrace,
    IterationRecord,
    TokenizedText,
    validate_image,
)

__all__ = [
    "ABLATION_PRESETS",
    "ALL_LOSS_FLAGS",
    "AdvqaError",
    "AnswerSet",
    "AttackConfig",
    "AttackResult",
    "AttackTrace",
    "CapabilityError",
    "ConfigError",
    "DatasetError",
    "EmbeddingError",
    "IterationRecord",
    "LOSS_ANTI_RECOVERY",
    "LOSS_FEATURE_IMAGE",
    "LOSS_FEATURE_MULTIMODAL",
    "LOSS_FEATURE_TEXT",
    "LlmUnavailableError",
    "NonFiniteError",
    "SentenceEncoder",
    "ShapeMismatchError",
    "TemplateError",
    "TokenizedText",
    "clip_to_budget",
    "cosine",
    "linf_distance",
    "semantic_similarity",
    "validate_image",
]
