"""advqa: transferable image-text adversarial attacks for VQA models."""

from .core import (
    ABLATION_PRESETS,
    AnswerSet,
    AttackConfig,
    AttackResult,
    AttackTrace,
    TokenizedText,
    clip_to_budget,
    linf_distance,
    semantic_similarity,
)
from .orchestrator import initialize, run_attack, should_trigger_joint
from .semantics import ClusteredBagEncoder, default_encoder

__version__ = "0.1.0"

__all__ = [
    "ABLATION_PRESETS",
    "AnswerSet",
    "AttackConfig",
    "AttackResult",
    "AttackTrace",
    "ClusteredBagEncoder",
    "TokenizedText",
    "clip_to_budget",
    "default_encoder",
    "initialize",
    "linf_distance",
    "run_attack",
    "semantic_similarity",
    "should_trigger_joint",
    "__version__",
]
