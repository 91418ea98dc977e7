"""End-to-end attack loop: initialization, per-iteration image steps, and the
conditionally triggered cross-modal joint attack.

Each iteration runs up to three budget-clipped sign-gradient image updates
(feature loss, anti-recovery loss, cross-modal loss) and, on trigger
iterations, one round of constrained synonym substitution on the question.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .adapters.base import (
    ENCODER_TEXT,
    LOSS_KIND_ANTI_RECOVERY,
    LOSS_KIND_FEATURE,
    AdapterCapabilities,
    LossSpec,
    ModelAdapter,
)
from .core.constraints import linf_distance, clip_to_budget, semantic_similarity
from .core.errors import CapabilityError, NonFiniteError
from .core.types import (
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
from .image_attack import diversity_transform, image_step
from .llm_bridge import DEFAULT_PROMPT_TEMPLATE, LlmClient, OfflineClient, TemplateFactory
from .semantics import default_encoder
from .text_attack import (
    CandidateSet,
    build_candidates,
    embed_candidates,
    estimate_target_embedding,
    rank_synonyms,
    substitute_with_constraint,
)

# monitor(stage, iteration, image) fires after every image update; stages are
# "init", "feature", "anti_recovery", "cross".
Monitor = Callable[[str, int, np.ndarray], None]

_FLAG_TO_ENCODER = (
    (LOSS_FEATURE_IMAGE, "image"),
    (LOSS_FEATURE_MULTIMODAL, "multimodal"),
)


def should_trigger_joint(iteration: int, max_iters: int, w_count: int) -> bool:
    """Joint-attack schedule: iterations that are multiples of floor(M / (|W|+1)).

    A stride of zero (more informative words than iterations) degenerates to
    triggering on every iteration so long questions still get text edits.
    """
    if not 1 <= iteration <= max_iters:
        raise ValueError(f"iteration {iteration} outside [1, {max_iters}]")
    if w_count < 0:
        raise ValueError(f"w_count must be >= 0, got {w_count}")
    stride = max_iters // (w_count + 1)
    if stride == 0:
        return True
    return iteration % stride == 0


def initialize(
    clean: tuple[np.ndarray, TokenizedText],
    config: AttackConfig,
    rng: np.random.Generator,
    adapter: Optional[ModelAdapter] = None,
) -> tuple[np.ndarray, TokenizedText, CandidateSet]:
    """Random start inside the budget ball, untouched text, candidates built once.

    The start offset is uniform in [-budget, budget] per pixel (clipped back
    into range); init_mode="literal_uniform" instead adds U(0, 1) noise for
    fidelity experiments. Candidate generation only happens when the config
    enables the joint attack and the adapter has an MLM to propose words.
    """
    clean_image, clean_text = clean
    clean_image = validate_image(clean_image)
    if config.init_mode == "literal_uniform":
        delta = rng.uniform(0.0, 1.0, size=clean_image.shape)
    else:
        delta = rng.uniform(-config.image_budget, config.image_budget, size=clean_image.shape)
    adv_image = clip_to_budget(clean_image + delta, clean_image, config.image_budget)
    candidates = CandidateSet({})
    if (
        adapter is not None
        and config.joint_attack_enabled
        and clean_text.informative_indices
        and adapter.capabilities().mlm_head
    ):
        candidates = build_candidates(clean_text, config.top_k, adapter)
    return adv_image, clean_text, candidates


def resolve_loss_flags(
    flags: frozenset[str], capabilities: AdapterCapabilities, warnings: list[str]
) -> frozenset[str]:
    """Drop flags the adapter cannot serve, recording each degradation."""
    resolved = set(flags)
    if resolved and not capabilities.differentiable:
        raise CapabilityError("adapter is not differentiable; no gradient loss can be enabled")
    if LOSS_ANTI_RECOVERY in resolved and not capabilities.mlm_head:
        resolved.discard(LOSS_ANTI_RECOVERY)
        warnings.append("adapter has no MLM head: anti-recovery loss disabled")
    if LOSS_FEATURE_TEXT in resolved and not (
        capabilities.mlm_head and capabilities.contextual_embeddings
    ):
        resolved.discard(LOSS_FEATURE_TEXT)
        warnings.append("adapter cannot serve the joint attack: text loss disabled")
    return frozenset(resolved)


def _require_capabilities(flags: frozenset[str], capabilities: AdapterCapabilities) -> None:
    if flags and not capabilities.differentiable:
        raise CapabilityError("enabled losses require a differentiable adapter")
    if LOSS_ANTI_RECOVERY in flags and not capabilities.mlm_head:
        raise CapabilityError("anti_recovery loss requires an MLM head")
    if LOSS_FEATURE_TEXT in flags and not (
        capabilities.mlm_head and capabilities.contextual_embeddings
    ):
        raise CapabilityError("feature_text (joint attack) requires MLM + contextual embeddings")


def _check_finite(value: float, grad: np.ndarray, what: str, trace: AttackTrace) -> None:
    if not np.isfinite(value) or not np.isfinite(grad).all():
        raise NonFiniteError(f"non-finite {what} loss or gradient mid-run", trace=trace)


def run_attack(
    clean_image: np.ndarray,
    clean_text: TokenizedText,
    answers: AnswerSet,
    adapter: ModelAdapter,
    config: AttackConfig,
    client: Optional[LlmClient] = None,
    encoder=None,
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE,
    monitor: Optional[Monitor] = None,
    degrade_missing: bool = False,
) -> AttackResult:
    """Run the full iterative attack and return the adversarial pair with trace.

    Exactly ``config.max_iters`` iterations are performed; every intermediate
    image satisfies the budget and range constraints because each update goes
    through ``image_step``'s clipping. ``degrade_missing=True`` drops loss
    flags the adapter cannot serve (recorded in the trace) instead of raising.
    """
    clean_image = validate_image(clean_image)
    encoder = encoder if encoder is not None else default_encoder()
    client = client if client is not None else OfflineClient()
    trace = AttackTrace()

    flags = config.loss_flags
    if degrade_missing:
        flags = resolve_loss_flags(flags, adapter.capabilities(), trace.warnings)
    else:
        _require_capabilities(flags, adapter.capabilities())

    rng = np.random.default_rng(config.seed)
    joint_enabled = LOSS_FEATURE_TEXT in flags
    feature_encoders = tuple(enc for flag, enc in _FLAG_TO_ENCODER if flag in flags)
    cross_encoders = feature_encoders + (ENCODER_TEXT,)

    adv_image, adv_text, candidates = initialize(
        (clean_image, clean_text),
        config,
        rng,
        adapter if joint_enabled else None,
    )
    if monitor:
        monitor("init", 0, adv_image)

    w_count = len(clean_text.informative_indices)
    needs_reference = bool(feature_encoders) or joint_enabled
    reference = adapter.forward_features(clean_image, clean_text) if needs_reference else None
    factory = TemplateFactory(adapter, client, prompt_template)

    def probe(image: np.ndarray) -> np.ndarray:
        if config.diversity_prob > 0.0:
            return diversity_transform(image, config.diversity_prob, rng)
        return image

    def step(image: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return image_step(
            image, grad, config.step_size, clean_image, config.image_budget,
            direction=config.gradient_direction,
        )

    for m in range(1, config.max_iters + 1):
        loss_feature = loss_anti = loss_cross = None
        substitutions: tuple[tuple[int, str, str], ...] = ()
        triggered = should_trigger_joint(m, config.max_iters, w_count)

        if feature_encoders:
            spec = LossSpec(LOSS_KIND_FEATURE, encoders=feature_encoders, reference=reference)
            loss_feature, grad = adapter.loss_and_gradient_wrt_image(spec, probe(adv_image), adv_text)
            _check_finite(loss_feature, grad, "feature", trace)
            adv_image = step(adv_image, grad)
            if monitor:
                monitor("feature", m, adv_image)

        if LOSS_ANTI_RECOVERY in flags:
            templates = factory.templates_for(adv_text, answers, warnings=trace.warnings)
            spec = LossSpec(LOSS_KIND_ANTI_RECOVERY, templates=tuple(templates))
            loss_anti, grad = adapter.loss_and_gradient_wrt_image(spec, probe(adv_image), adv_text)
            _check_finite(loss_anti, grad, "anti-recovery", trace)
            adv_image = step(adv_image, grad)
            if monitor:
                monitor("anti_recovery", m, adv_image)

        if joint_enabled and triggered:
            spec = LossSpec(LOSS_KIND_FEATURE, encoders=cross_encoders, reference=reference)
            cross_point = probe(adv_image)
            loss_cross, grad = adapter.loss_and_gradient_wrt_image(spec, cross_point, adv_text)
            _check_finite(loss_cross, grad, "cross-modal", trace)
            word_grads = None
            if w_count:
                _, word_grads = adapter.loss_and_gradients_wrt_words(spec, cross_point, adv_text)
            adv_image = step(adv_image, grad)
            if monitor:
                monitor("cross", m, adv_image)
            if w_count:
                targets = {
                    i: estimate_target_embedding(adapter.word_embedding(adv_text, i), word_grads[i])
                    for i in sorted(clean_text.informative_indices)
                }
                embedded = embed_candidates(candidates, adv_text, adapter)
                ranking = rank_synonyms(targets, embedded, warnings=trace.warnings)
                adv_text, subs = substitute_with_constraint(
                    adv_text, clean_text, ranking, config.text_sim_threshold, encoder
                )
                substitutions = tuple(subs)

        trace.records.append(
            IterationRecord(
                iteration=m,
                loss_feature=loss_feature,
                loss_anti_recovery=loss_anti,
                loss_cross=loss_cross,
                joint_triggered=triggered,
                substitutions=substitutions,
            )
        )

    n_substitutions = sum(
        1 for i in clean_text.informative_indices if adv_text.words[i] != clean_text.words[i]
    )
    return AttackResult(
        adv_image=adv_image,
        adv_text=adv_text,
        trace=trace,
        linf=linf_distance(adv_image, clean_image),
        semantic_sim=semantic_similarity(adv_text, clean_text, encoder),
        n_substitutions=n_substitutions,
    )
