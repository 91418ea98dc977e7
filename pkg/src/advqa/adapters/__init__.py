"""Adapter registry: named source models and victims."""

from __future__ import annotations

from typing import Callable

from ..core.errors import ConfigError
from .base import (
    ENCODER_IMAGE,
    ENCODER_MULTIMODAL,
    ENCODER_TEXT,
    LOSS_KIND_ANTI_RECOVERY,
    LOSS_KIND_FEATURE,
    AdapterCapabilities,
    LayerFeatures,
    LossSpec,
    MlmDistribution,
    ModelAdapter,
    VictimModel,
)
from .toy import DEFAULT_SEED, ToyAdapter, ToyVictim

_ADAPTERS: dict[str, Callable[..., ModelAdapter]] = {
    "toy": lambda seed=DEFAULT_SEED: ToyAdapter(seed=seed),
}

_VICTIMS: dict[str, Callable[..., VictimModel]] = {
    "toy": lambda seed=DEFAULT_SEED: ToyVictim(source_seed=seed),
}


def available_adapters() -> tuple[str, ...]:
    return tuple(sorted(_ADAPTERS))


def available_victims() -> tuple[str, ...]:
    return tuple(sorted(_VICTIMS))


def create_adapter(name: str, seed: int = DEFAULT_SEED) -> ModelAdapter:
    if name not in _ADAPTERS:
        raise ConfigError(f"unknown model {name!r}; registered: {', '.join(available_adapters())}")
    return _ADAPTERS[name](seed=seed)


def create_victim(name: str, seed: int = DEFAULT_SEED) -> VictimModel:
    if name not in _VICTIMS:
        raise ConfigError(f"unknown victim {name!r}; registered: {', '.join(available_victims())}")
    return _VICTIMS[name](seed=seed)


def register_adapter(name: str, factory: Callable[..., ModelAdapter]) -> None:
    """Hook for plugging in real pretrained backends (or baselines in a harness)."""
    _ADAPTERS[name] = factory


def register_victim(name: str, factory: Callable[..., VictimModel]) -> None:
    _VICTIMS[name] = factory


__all__ = [
    "AdapterCapabilities",
    "DEFAULT_SEED",
    "ENCODER_IMAGE",
    "ENCODER_MULTIMODAL",
    "ENCODER_TEXT",
    "LOSS_KIND_ANTI_RECOVERY",
    "LOSS_KIND_FEATURE",
    "LayerFeatures",
    "LossSpec",
    "MlmDistribution",
    "ModelAdapter",
    "ToyAdapter",
    "ToyVictim",
    "VictimModel",
    "available_adapters",
    "available_victims",
    "create_adapter",
    "create_victim",
    "register_adapter",
    "register_victim",
]
