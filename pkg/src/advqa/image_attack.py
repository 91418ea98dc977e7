"""Feature-similarity and anti-recovery losses plus the sign-gradient image step.

The losses here are the reference (numpy) evaluations used for traces and
tests; adapters compute the same quantities inside their autograd graphs
when gradients are needed. Both routes must agree numerically.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .adapters.base import LayerFeatures
from .core.constraints import clip_to_budget
from .core.errors import ShapeMismatchError
from .llm_bridge import MaskedTemplate


def feature_loss(
    clean_feats: LayerFeatures,
    adv_feats: LayerFeatures,
    encoders: Sequence[str],
    warnings: Optional[list[str]] = None,
) -> float:
    """Sum over encoders, layers, and tokens of cos(clean token, adv token).

    A zero-norm token vector on either side makes that term contribute 0
    (padded toy tokens can be all-zero); the event is traced as a warning.
    """
    total = 0.0
    for name in encoders:
        ref = np.asarray(clean_feats[name], dtype=np.float64)
        adv = np.asarray(adv_feats[name], dtype=np.float64)
        if ref.shape != adv.shape:
            raise ShapeMismatchError(ref.shape, adv.shape, what=f"{name} features")
        dot = (ref * adv).sum(axis=-1)
        denom = np.linalg.norm(ref, axis=-1) * np.linalg.norm(adv, axis=-1)
        valid = denom > 0
        if not valid.all() and warnings is not None:
            warnings.append(
                f"{int((~valid).sum())} zero-norm token vector(s) in {name} features contribute 0"
            )
        cos = np.where(valid, dot / np.where(valid, denom, 1.0), 0.0)
        total += float(cos.sum())
    return total


def anti_recovery_loss(
    templates: Sequence[MaskedTemplate],
    image: np.ndarray,
    adapter,
    warnings: Optional[list[str]] = None,
) -> float:
    """Summed log-probability of the correct tokens at every masked position.

    Additive over templates: one term per answer, summed over that answer's
    masked positions. Minimizing drives the MLM head away from recovering
    the answers.
    """
    if not templates:
        raise ValueError("anti-recovery loss needs at least one masked template")
    total = 0.0
    for template in templates:
        dist = adapter.mlm_probabilities(template, image)
        for pos, target in template.targets:
            p = float(dist[pos][target])
            if p <= 0.0:
                # true softmax output is never exactly 0; guard imported heads
                if warnings is not None:
                    warnings.append(f"zero probability for target token at position {pos}")
                p = np.finfo(np.float64).tiny
            total += float(np.log(p))
    return total


def image_step(
    adv: np.ndarray,
    grad: np.ndarray,
    step_size: float,
    clean: np.ndarray,
    budget: float,
    direction: str = "minimize",
) -> np.ndarray:
    """One sign-gradient update followed by budget clipping.

    minimize: adv - step * sign(grad); maximize flips the sign. sign(0) is 0,
    so zero-gradient pixels only move if clipping moves them.
    """
    adv = np.asarray(adv, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if adv.shape != grad.shape:
        raise ShapeMismatchError(adv.shape, grad.shape, what="image and gradient")
    if direction not in ("minimize", "maximize"):
        raise ValueError(f"direction must be minimize or maximize, got {direction!r}")
    sign = np.sign(grad)
    stepped = adv - step_size * sign if direction == "minimize" else adv + step_size * sign
    return clip_to_budget(stepped, clean, budget)


def _resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resample onto an out_h x out_w grid (align-corners style)."""
    h, w, c = image.shape
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def diversity_transform(image: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Input-diversity augmentation: random shrink to 90-100% per axis, zero-pad back.

    Applied to the adversarial buffer before forward passes only; the
    transformed image is never persisted. Identity with probability 1-prob.
    Output shape always equals input shape.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must lie in [0, 1], got {prob}")
    image = np.asarray(image, dtype=np.float64)
    if prob == 0.0 or rng.random() >= prob:
        return image
    h, w, c = image.shape
    new_h = max(1, int(round(h * rng.uniform(0.9, 1.0))))
    new_w = max(1, int(round(w * rng.uniform(0.9, 1.0))))
    resized = _resize_bilinear(image, new_h, new_w) if (new_h, new_w) != (h, w) else image
    out = np.zeros_like(image)
    top = int(rng.integers(0, h - new_h + 1))
    left = int(rng.integers(0, w - new_w + 1))
    out[top : top + new_h, left : left + new_w] = resized
    return out
