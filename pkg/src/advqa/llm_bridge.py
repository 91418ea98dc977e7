"""Declarative-sentence composition and masked-template construction.

A question plus one correct answer is folded into a single declarative
sentence (by an external LLM when configured, by a deterministic template
otherwise), then the answer tokens are masked out so the adapter's MLM head
can be asked to recover them.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import httpx

from .core.config import LlmSettings
from .core.errors import LlmUnavailableError, TemplateError
from .core.types import AnswerSet, TokenizedText

DEFAULT_PROMPT_TEMPLATE = (
    "Combine the question \"{question}\" and the answer \"{answer}\" into one "
    "declarative sentence. The term \"{answer}\" must appear in the output. "
    "Please only output the declarative sentence."
)

# Replies opening with these are boilerplate the prompt explicitly forbids;
# they would leak into the masked sentence, so they force the fallback.
_CHATTER_PREFIXES = (
    "sure",
    "here is",
    "here's",
    "certainly",
    "of course",
    "okay",
    "ok,",
    "as an ai",
    "i think",
    "the declarative sentence is",
)


@dataclass(frozen=True)
class MaskedTemplate:
    """A composed sentence with its answer tokens masked out.

    ``token_ids`` carry the adapter's mask id at every position in
    ``mask_indices``; ``targets`` maps each masked position back to the
    correct token id. Restoring targets over masks reproduces the composed
    sentence.
    """

    token_ids: tuple[int, ...]
    mask_indices: tuple[int, ...]
    targets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.mask_indices:
            raise ValueError("a masked template needs at least one masked position")
        n = len(self.token_ids)
        if any(not 0 <= i < n for i in self.mask_indices):
            raise ValueError(f"mask indices {self.mask_indices} out of range for {n} tokens")
        if sorted(self.mask_indices) != sorted(pos for pos, _ in self.targets):
            raise ValueError("targets must cover exactly the masked positions")
        object.__setattr__(self, "mask_indices", tuple(sorted(self.mask_indices)))
        object.__setattr__(self, "targets", tuple(sorted(self.targets)))

    @property
    def target_map(self) -> dict[int, int]:
        return dict(self.targets)

    def restored_token_ids(self) -> tuple[int, ...]:
        """Token ids with the correct answer tokens put back in place."""
        ids = list(self.token_ids)
        for pos, token_id in self.targets:
            ids[pos] = token_id
        return tuple(ids)


class LlmClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class OfflineClient:
    """Never calls out; composition always takes the deterministic fallback."""

    def complete(self, prompt: str) -> str:
        raise LlmUnavailableError("offline client performs no requests")


class HttpLlmClient:
    """POSTs {model, prompt} as JSON and expects {text} back.

    Bearer token is read from the configured environment variable at call
    time. Transport failures are retried, then surfaced as
    LlmUnavailableError so the caller can fall back.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "ADVQA_LLM_API_KEY",
        timeout: float = 10.0,
        retries: int = 2,
        max_concurrency: int = 4,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.retries = retries
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._gate = threading.Semaphore(max_concurrency)

    def complete(self, prompt: str) -> str:
        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                with self._gate:
                    response = self._client.post(
                        self.endpoint,
                        json={"model": self.model, "prompt": prompt},
                        headers=headers,
                    )
                response.raise_for_status()
                return str(response.json()["text"])
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last_error = exc
        raise LlmUnavailableError(f"LLM endpoint failed after {self.retries + 1} attempts: {last_error}")


def client_from_settings(settings: LlmSettings) -> LlmClient:
    if settings.mode == "offline" or not settings.endpoint:
        return OfflineClient()
    return HttpLlmClient(
        endpoint=settings.endpoint,
        model=settings.model,
        api_key_env=settings.api_key_env,
        timeout=settings.timeout,
        retries=settings.retries,
    )


def load_prompt_template(path: Optional[str]) -> str:
    if path is None:
        return DEFAULT_PROMPT_TEMPLATE
    template = Path(path).read_text(encoding="utf-8").strip()
    if "{question}" not in template or "{answer}" not in template:
        raise TemplateError(f"prompt template {path} must contain {{question}} and {{answer}}")
    return template


def fallback_sentence(question: str, answer: str) -> str:
    """Deterministic composition satisfying both prompt constraints by construction."""
    return f"the answer to the question '{question.strip().lower()}' is {answer.strip().lower()}"


def validate_reply(reply: str, answer: str) -> Optional[str]:
    """Return the cleaned reply if it is a usable declarative sentence, else None."""
    cleaned = reply.strip().strip('"').strip()
    if not cleaned or "\n" in cleaned:
        return None
    lowered = cleaned.lower()
    if any(lowered.startswith(prefix) for prefix in _CHATTER_PREFIXES):
        return None
    if answer.strip().lower() not in lowered:
        return None
    return cleaned


def compose_declarative(
    question: str,
    answer: str,
    prompt_template: str,
    client: LlmClient,
    warnings: Optional[list[str]] = None,
) -> str:
    """Compose question+answer into one sentence guaranteed to contain the answer."""
    if not question.strip() or not answer.strip():
        raise TemplateError("question and answer must be non-empty")
    sentence = None
    try:
        reply = client.complete(prompt_template.format(question=question, answer=answer))
        sentence = validate_reply(reply, answer)
        if sentence is None and warnings is not None:
            warnings.append(f"llm reply rejected for answer {answer!r}; using fallback template")
    except LlmUnavailableError as exc:
        if warnings is not None and not isinstance(client, OfflineClient):
            warnings.append(f"llm unavailable ({exc}); using fallback template")
    if sentence is None:
        sentence = fallback_sentence(question, answer)
    if answer.strip().lower() not in sentence.lower():
        raise TemplateError(f"composed sentence does not contain the answer {answer!r}")
    return sentence


def _find_subsequence(haystack: Sequence[int], needle: Sequence[int]) -> Optional[int]:
    n, m = len(haystack), len(needle)
    if m == 0 or m > n:
        return None
    for start in range(n - m + 1):
        if tuple(haystack[start : start + m]) == tuple(needle):
            return start
    return None


def build_masked_templates(
    question_adv: TokenizedText,
    answers: AnswerSet,
    adapter,
    client: LlmClient,
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE,
    warnings: Optional[list[str]] = None,
) -> list[MaskedTemplate]:
    """One template per answer whose token span could be located and masked.

    Answers that do not tokenize into in-vocabulary tokens, or whose span
    cannot be found in the composed sentence, are skipped with a warning;
    if that leaves nothing, the attack cannot use the anti-recovery loss and
    a TemplateError is raised.
    """
    question = adapter.detokenize(question_adv)
    templates: list[MaskedTemplate] = []
    for answer in answers:
        sentence = compose_declarative(question, answer, prompt_template, client, warnings)
        sentence_tok = adapter.tokenize(sentence)
        answer_tok = adapter.tokenize(answer)
        if not answer_tok.token_ids:
            if warnings is not None:
                warnings.append(f"answer {answer!r} produced no tokens; skipped")
            continue
        if adapter.unk_token_id in answer_tok.token_ids:
            if warnings is not None:
                warnings.append(f"answer {answer!r} contains out-of-vocabulary tokens; skipped")
            continue
        start = _find_subsequence(sentence_tok.token_ids, answer_tok.token_ids)
        if start is None:
            if warnings is not None:
                warnings.append(f"answer span for {answer!r} not found after tokenization; skipped")
            continue
        span = range(start, start + len(answer_tok.token_ids))
        ids = list(sentence_tok.token_ids)
        targets = []
        for pos in span:
            targets.append((pos, ids[pos]))
            ids[pos] = adapter.mask_token_id
        templates.append(
            MaskedTemplate(token_ids=tuple(ids), mask_indices=tuple(span), targets=tuple(targets))
        )
    if not templates:
        raise TemplateError(f"no usable masked template for any of {list(answers)}")
    return templates


class TemplateFactory:
    """Caches masked templates per (question surface, answers) pair.

    The adversarial question only changes on joint-attack iterations, so
    between text edits the same templates are reused without further LLM
    calls. Safe for concurrent readers; writes are serialized.
    """

    def __init__(self, adapter, client: LlmClient, prompt_template: str = DEFAULT_PROMPT_TEMPLATE):
        self._adapter = adapter
        self._client = client
        self._prompt_template = prompt_template
        self._cache: dict[tuple, list[MaskedTemplate]] = {}
        self._lock = threading.Lock()
        self.calls = 0  # composition invocations, observable for cache tests

    def templates_for(
        self,
        question: TokenizedText,
        answers: AnswerSet,
        warnings: Optional[list[str]] = None,
    ) -> list[MaskedTemplate]:
        key = (question.words, answers.answers)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        self.calls += 1
        templates = build_masked_templates(
            question, answers, self._adapter, self._client, self._prompt_template, warnings
        )
        with self._lock:
            self._cache[key] = templates
        return templates
