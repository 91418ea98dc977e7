"""Flat key/value config files and the flags > env > file > defaults precedence."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

from .errors import ConfigError
from .types import ABLATION_PRESETS, AttackConfig

ENV_PREFIX = "ADVQA_"

# Keys accepted in a config file. Attack keys feed AttackConfig, llm keys
# feed LlmSettings.
ATTACK_KEYS = {
    "max_iters",
    "step_size",
    "image_budget",
    "text_sim_threshold",
    "top_k",
    "seed",
    "loss_flags",
    "diversity_prob",
    "init_mode",
    "gradient_direction",
}
LLM_KEYS = {"llm_endpoint", "llm_model", "llm_api_key_env", "prompt_template_path"}
KNOWN_KEYS = ATTACK_KEYS | LLM_KEYS


@dataclass(frozen=True)
class LlmSettings:
    """Where and how to reach the sentence-composition LLM ("offline" never calls out)."""

    mode: str = "offline"
    endpoint: Optional[str] = None
    model: str = "gpt-4"
    api_key_env: str = "ADVQA_LLM_API_KEY"
    prompt_template_path: Optional[str] = None
    timeout: float = 10.0
    retries: int = 2


def parse_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment; unknown keys are errors."""
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}; known: {sorted(KNOWN_KEYS)}")
        values[key] = value
    return values


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    """Pick up ADVQA_<KEY> environment variables for every known key."""
    environ = os.environ if environ is None else environ
    found = {}
    for key in KNOWN_KEYS:
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            found[key] = environ[env_key]
    return found


def merge_values(
    file_values: Mapping[str, str] | None = None,
    env_values: Mapping[str, str] | None = None,
    flag_values: Mapping[str, str] | None = None,
) -> dict[str, str]:
    """Apply precedence: flags > env > file (defaults are baked into the dataclasses)."""
    merged: dict[str, str] = {}
    for layer in (file_values, env_values, flag_values):
        if layer:
            merged.update({k: v for k, v in layer.items() if v is not None})
    unknown = set(merged) - KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return merged


def _parse_loss_flags(value: str) -> frozenset[str]:
    names = [part.strip() for part in value.split(",") if part.strip()]
    return frozenset(names)


def build_attack_config(values: Mapping[str, str]) -> AttackConfig:
    """Materialize an AttackConfig from string key/values (file or CLI layer)."""
    kwargs = {}
    converters = {
        "max_iters": int,
        "step_size": float,
        "image_budget": float,
        "text_sim_threshold": float,
        "top_k": int,
        "seed": int,
        "loss_flags": _parse_loss_flags,
        "diversity_prob": float,
        "init_mode": str,
        "gradient_direction": str,
    }
    for key, convert in converters.items():
        if key in values:
            try:
                kwargs[key] = convert(values[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {values[key]!r} ({exc})") from exc
    return AttackConfig(**kwargs)


def build_llm_settings(values: Mapping[str, str]) -> LlmSettings:
    kwargs = {}
    if values.get("llm_endpoint"):
        kwargs["endpoint"] = values["llm_endpoint"]
        kwargs["mode"] = "endpoint"
    if "llm_model" in values:
        kwargs["model"] = values["llm_model"]
    if "llm_api_key_env" in values:
        kwargs["api_key_env"] = values["llm_api_key_env"]
    if "prompt_template_path" in values:
        kwargs["prompt_template_path"] = values["prompt_template_path"] or None
    return LlmSettings(**kwargs)


def apply_ablation(config: AttackConfig, preset: str) -> AttackConfig:
    """Force the loss flags of a named ablation preset onto a config."""
    if preset not in ABLATION_PRESETS:
        raise ConfigError(f"unknown ablation {preset!r}; known: {sorted(ABLATION_PRESETS)}")
    from dataclasses import replace

    return replace(config, loss_flags=ABLATION_PRESETS[preset])


def config_hash(config: AttackConfig, extra: Mapping[str, str] | None = None) -> str:
    """Stable short hash of everything that shapes a run's numeric output."""
    parts = {
        "max_iters": config.max_iters,
        "step_size": repr(config.step_size),
        "image_budget": repr(config.image_budget),
        "text_sim_threshold": repr(config.text_sim_threshold),
        "top_k": config.top_k,
        "seed": config.seed,
        "loss_flags": ",".join(sorted(config.loss_flags)),
        "diversity_prob": repr(config.diversity_prob),
        "init_mode": config.init_mode,
        "gradient_direction": config.gradient_direction,
    }
    if extra:
        parts.update(extra)
    canonical = "\n".join(f"{k}={parts[k]}" for k in sorted(parts))
    return hashlib.blake2s(canonical.encode("utf-8"), digest_size=6).hexdigest()
