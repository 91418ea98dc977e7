import json

import httpx
import pytest

from advqa.core.config import LlmSettings
from advqa.core.errors import LlmUnavailableError, TemplateError
from advqa.core.types import AnswerSet, TokenizedText
from advqa.llm_bridge import (
    DEFAULT_PROMPT_TEMPLATE,
    HttpLlmClient,
    MaskedTemplate,
    OfflineClient,
    TemplateFactory,
    build_masked_templates,
    client_from_settings,
    compose_declarative,
    fallback_sentence,
    load_prompt_template,
    validate_reply,
)


class StaticClient:
    def __init__(self, reply):
        self.reply = reply
        self.calls = 0

    def complete(self, prompt):
        self.calls += 1
        if isinstance(self.reply, Exception):
            raise self.reply
        return self.reply


class TestComposeDeclarative:
    def test_offline_fallback_contains_answer(self):
        sentence = compose_declarative(
            "What room is this?", "kitchen", DEFAULT_PROMPT_TEMPLATE, OfflineClient()
        )
        assert sentence == "the answer to the question 'what room is this?' is kitchen"
        assert "kitchen" in sentence

    def test_valid_llm_reply_is_used(self):
        client = StaticClient("this room is a kitchen.")
        sentence = compose_declarative("What room is this?", "kitchen", DEFAULT_PROMPT_TEMPLATE, client)
        assert sentence == "this room is a kitchen."

    def test_reply_missing_answer_falls_back_with_warning(self):
        warnings = []
        client = StaticClient("this is a lovely room.")
        sentence = compose_declarative(
            "What room is this?", "kitchen", DEFAULT_PROMPT_TEMPLATE, client, warnings
        )
        assert sentence == fallback_sentence("What room is this?", "kitchen")
        assert warnings and "fallback" in warnings[0]

    def test_prefix_chatter_rejected(self):
        client = StaticClient("Sure, here is the sentence: this room is a kitchen.")
        sentence = compose_declarative("What room is this?", "kitchen", DEFAULT_PROMPT_TEMPLATE, client)
        assert sentence == fallback_sentence("What room is this?", "kitchen")

    def test_empty_inputs_rejected(self):
        with pytest.raises(TemplateError):
            compose_declarative("", "kitchen", DEFAULT_PROMPT_TEMPLATE, OfflineClient())
        with pytest.raises(TemplateError):
            compose_declarative("What room is this?", " ", DEFAULT_PROMPT_TEMPLATE, OfflineClient())

    def test_transport_error_falls_back(self):
        client = StaticClient(LlmUnavailableError("boom"))
        sentence = compose_declarative("What room is this?", "kitchen", DEFAULT_PROMPT_TEMPLATE, client)
        assert "kitchen" in sentence


class TestValidateReply:
    @pytest.mark.parametrize(
        "reply",
        [
            "",
            "   ",
            "two lines\nof output",
            "Sure, the kitchen it is.",
            "Here is the answer: kitchen.",
            "certainly! the kitchen.",
            "the room is a bathroom.",  # lacks the answer
        ],
    )
    def test_rejects(self, reply):
        assert validate_reply(reply, "kitchen") is None

    def test_accepts_and_cleans(self):
        assert validate_reply('  "the room is a kitchen."  ', "kitchen") == "the room is a kitchen."
        assert validate_reply("The Kitchen is bright.", "kitchen") is not None  # case-insensitive


class TestHttpClient:
    def _client(self, handler, retries=2):
        transport = httpx.MockTransport(handler)
        return HttpLlmClient(
            "http://llm.test/v1", "test-model", api_key_env="TEST_LLM_KEY",
            retries=retries, transport=transport,
        )

    def test_posts_model_prompt_json_with_bearer_token(self, monkeypatch):
        monkeypatch.setenv("TEST_LLM_KEY", "sekrit")
        seen = {}

        def handler(request):
            seen["json"] = json.loads(request.content)
            seen["auth"] = request.headers.get("authorization")
            return httpx.Response(200, json={"text": "the bus is red."})

        client = self._client(handler)
        assert client.complete("PROMPT") == "the bus is red."
        assert seen["json"] == {"model": "test-model", "prompt": "PROMPT"}
        assert seen["auth"] == "Bearer sekrit"

    def test_retries_then_succeeds(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] < 3:
                return httpx.Response(500)
            return httpx.Response(200, json={"text": "ok sentence with kitchen"})

        client = self._client(handler, retries=2)
        assert "kitchen" in client.complete("p")
        assert calls["n"] == 3

    def test_exhausted_retries_raise_unavailable(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            raise httpx.ConnectTimeout("no route")

        client = self._client(handler, retries=2)
        with pytest.raises(LlmUnavailableError):
            client.complete("p")
        assert calls["n"] == 3  # initial try + 2 retries

    def test_malformed_reply_body_raises_unavailable(self):
        client = self._client(lambda request: httpx.Response(200, json={"nope": 1}), retries=0)
        with pytest.raises(LlmUnavailableError):
            client.complete("p")

    def test_compose_falls_back_after_unavailable(self):
        client = self._client(lambda request: httpx.Response(502), retries=1)
        warnings = []
        sentence = compose_declarative(
            "What color is the bus?", "red", DEFAULT_PROMPT_TEMPLATE, client, warnings
        )
        assert sentence == fallback_sentence("What color is the bus?", "red")
        assert warnings


def test_client_from_settings_modes():
    assert isinstance(client_from_settings(LlmSettings()), OfflineClient)
    http = client_from_settings(LlmSettings(mode="endpoint", endpoint="http://x/y"))
    assert isinstance(http, HttpLlmClient)
    # contract defaults: 10 s timeout, 2 retries
    assert http._client.timeout.read == pytest.approx(10.0)
    assert http.retries == 2


def test_load_prompt_template(tmp_path):
    assert load_prompt_template(None) == DEFAULT_PROMPT_TEMPLATE
    good = tmp_path / "p.txt"
    good.write_text("combine {question} with {answer}")
    assert load_prompt_template(str(good)) == "combine {question} with {answer}"
    bad = tmp_path / "bad.txt"
    bad.write_text("no placeholders here")
    with pytest.raises(TemplateError):
        load_prompt_template(str(bad))


class TestMaskedTemplates:
    def test_single_token_answer(self, toy_adapter):
        question = toy_adapter.tokenize("what color is the bus?")
        templates = build_masked_templates(
            question, AnswerSet.of(["red"]), toy_adapter, OfflineClient()
        )
        assert len(templates) == 1
        tpl = templates[0]
        assert len(tpl.mask_indices) == 1
        pos, target = tpl.targets[0]
        assert toy_adapter.vocab_words()[target] == "red"
        assert tpl.token_ids[pos] == toy_adapter.mask_token_id

    def test_multi_token_answer_masks_every_token(self, toy_adapter):
        question = toy_adapter.tokenize("what is in the picture?")
        templates = build_masked_templates(
            question, AnswerSet.of(["red bus"]), toy_adapter, OfflineClient()
        )
        tpl = templates[0]
        assert len(tpl.mask_indices) == 2
        words = [toy_adapter.vocab_words()[t] for _, t in tpl.targets]
        assert words == ["red", "bus"]

    def test_one_template_per_answer_in_order(self, toy_adapter):
        question = toy_adapter.tokenize("what color is the bus?")
        templates = build_masked_templates(
            question, AnswerSet.of(["red", "blue", "green"]), toy_adapter, OfflineClient()
        )
        assert len(templates) == 3
        answer_words = [toy_adapter.vocab_words()[tpl.targets[0][1]] for tpl in templates]
        assert answer_words == ["red", "blue", "green"]

    def test_out_of_vocabulary_answer_skipped_with_warning(self, toy_adapter):
        question = toy_adapter.tokenize("what is this?")
        warnings = []
        templates = build_masked_templates(
            question, AnswerSet.of(["zeppelin", "red"]), toy_adapter, OfflineClient(), warnings=warnings
        )
        assert len(templates) == 1
        assert any("zeppelin" in w for w in warnings)

    def test_all_answers_skipped_is_an_error(self, toy_adapter):
        question = toy_adapter.tokenize("what is this?")
        with pytest.raises(TemplateError):
            build_masked_templates(
                question, AnswerSet.of(["zeppelin"]), toy_adapter, OfflineClient()
            )

    def test_restoring_targets_reproduces_composed_sentence(self, toy_adapter):
        question = toy_adapter.tokenize("what color is the bus?")
        composed = compose_declarative(
            toy_adapter.detokenize(question), "red", DEFAULT_PROMPT_TEMPLATE, OfflineClient()
        )
        tpl = build_masked_templates(
            question, AnswerSet.of(["red"]), toy_adapter, OfflineClient()
        )[0]
        restored = tpl.restored_token_ids()
        words = tuple(toy_adapter.vocab_words()[i] for i in restored)
        rebuilt = toy_adapter.detokenize(TokenizedText(words, restored))
        # equality is at token level: spacing around quotes is tokenizer-normalized
        assert toy_adapter.tokenize(rebuilt).token_ids == toy_adapter.tokenize(composed).token_ids

    def test_validation_of_template_invariants(self):
        with pytest.raises(ValueError):
            MaskedTemplate(token_ids=(1, 2, 3), mask_indices=(), targets=())
        with pytest.raises(ValueError):
            MaskedTemplate(token_ids=(1, 2, 3), mask_indices=(5,), targets=((5, 1),))
        with pytest.raises(ValueError):
            MaskedTemplate(token_ids=(1, 2, 3), mask_indices=(1,), targets=((2, 1),))


class TestTemplateFactory:
    def test_cache_hits_between_text_changes(self, toy_adapter):
        factory = TemplateFactory(toy_adapter, OfflineClient())
        question = toy_adapter.tokenize("what color is the bus?")
        answers = AnswerSet.of(["red"])
        first = factory.templates_for(question, answers)
        second = factory.templates_for(question, answers)
        assert factory.calls == 1
        assert first is second

    def test_cache_refreshes_when_text_changes(self, toy_adapter):
        factory = TemplateFactory(toy_adapter, OfflineClient())
        answers = AnswerSet.of(["red"])
        q1 = toy_adapter.tokenize("what color is the bus?")
        q2 = q1.replaced(4, "car", toy_adapter.token_id("car"))
        factory.templates_for(q1, answers)
        factory.templates_for(q2, answers)
        assert factory.calls == 2

    def test_offline_module_is_deterministic(self, toy_adapter):
        answers = AnswerSet.of(["red", "blue"])
        question = toy_adapter.tokenize("what color is the bus?")
        a = TemplateFactory(toy_adapter, OfflineClient()).templates_for(question, answers)
        b = TemplateFactory(toy_adapter, OfflineClient()).templates_for(question, answers)
        assert a == b
