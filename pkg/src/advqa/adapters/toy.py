"""Deterministic toy vision-language model used for desk-scale verification.

A miniature three-encoder transformer in float64: a 2-layer image encoder
over 4x4 patches, a 1-layer text encoder, a 2-layer multimodal encoder with
single-head attention, and an MLM head tied to the word-embedding table.
All weights derive from a single seed, so two adapters built with the same
seed are bitwise identical. Double precision keeps analytic gradients and
central finite differences in close agreement.

The word-embedding table is seeded with the same synonym-cluster structure
the sentence encoder uses (different hash tags, so the vectors are
independent): a stand-in for the semantic structure a pre-trained model
would have learned, and what makes MLM candidates better than noise.
"""

from __future__ import annotations

import math
import re
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..core.types import TokenizedText
from ..llm_bridge import MaskedTemplate
from ..semantics import CLUSTER_OF, WORD_CLUSTERS, _hash_unit
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
from .stopwords import STOP_WORDS
from . import weights_io

DEFAULT_SEED = 7

# Calibrated so pixel-budget perturbations genuinely move predictions:
# sharp attention routes instead of averaging, and the block output scale
# keeps the transform branch from being contractive. Without these a
# random-weight transformer collapses every input to one dominant feature
# direction and no 16/255 attack can flip anything.
ATTENTION_GAIN = 16.0
OUTPUT_SCALE = 2.0

UNK = "[unk]"
MASK = "[mask]"

_PUNCT = ("?", ".", ",", "!", "'")

_STOP_VOCAB = (
    "what which who where when why how is are was were am be been being the a an "
    "this that these those there here it its of in on at to from with by for and "
    "or not no do does did doing can could will would should has have had he she "
    "they them his her their i you we my your our me us"
).split()

_EXTRA_CONTENT = (
    "yes", "picture", "photo", "image", "room", "color", "water", "grass", "sky",
    "answer", "question",  # the offline composition template uses these
)


def _build_vocab() -> tuple[str, ...]:
    words: list[str] = [UNK, MASK]
    words.extend(_PUNCT)
    words.extend(_STOP_VOCAB)
    for cluster_words in WORD_CLUSTERS.values():
        words.extend(cluster_words)
    words.extend(_EXTRA_CONTENT)
    seen = set()
    unique = []
    for w in words:
        if w not in seen:
            seen.add(w)
            unique.append(w)
    return tuple(unique)


VOCAB = _build_vocab()

_TOKEN_RE = re.compile(r"[a-z]+(?:'[a-z]+)?|[0-9]+|[^\sa-z0-9]")


def _sinusoid(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(dim // 2, dtype=torch.float64).unsqueeze(0)
    angles = pos / torch.pow(torch.tensor(10000.0, dtype=torch.float64), 2.0 * idx / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles)
    return pe


def _init_linear(layer: nn.Linear, g: torch.Generator, scale: float = 1.0) -> None:
    bound = scale / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=g)
        layer.bias.zero_()


class _Block(nn.Module):
    """Single-head attention block, feed-through (no residual), [..., T, d].

    Residual-free on purpose: with residuals a shallow random-weight net is
    output ~= input and adversarial sensitivity all but vanishes.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.ln2 = nn.LayerNorm(dim)
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)
        self.fc1 = nn.Linear(dim, 2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)
        self.scale = ATTENTION_GAIN / math.sqrt(dim)

    def init_weights(self, g: torch.Generator) -> None:
        for layer in (self.wq, self.wk, self.wv):
            _init_linear(layer, g)
        for layer in (self.wo, self.fc1, self.fc2):
            _init_linear(layer, g, scale=OUTPUT_SCALE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        att = torch.softmax(
            self.wq(h) @ self.wk(h).transpose(-2, -1) * self.scale, dim=-1
        )
        x = self.ln2(self.wo(att @ self.wv(h)))
        return self.fc2(F.gelu(self.fc1(x)))


def _embedding_matrix(words: Sequence[str], dim: int, seed: int) -> np.ndarray:
    rows = np.zeros((len(words), dim), dtype=np.float64)
    for i, word in enumerate(words):
        cluster = CLUSTER_OF.get(word, word)
        vec = _hash_unit(f"toy{seed}-cluster", cluster, dim) + 0.6 * _hash_unit(
            f"toy{seed}-word", word, dim
        )
        rows[i] = vec / np.linalg.norm(vec)
    return rows


class ToyVlModel(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        embedding: np.ndarray,
        dim: int = 16,
        patch: int = 4,
        img_layers: int = 2,
        txt_layers: int = 1,
        mm_layers: int = 2,
        seed: int = DEFAULT_SEED,
    ):
        super().__init__()
        self.dim = dim
        self.patch = patch
        g = torch.Generator().manual_seed(seed)
        self.patch_proj = nn.Linear(patch * patch * 3, dim)
        self.img_blocks = nn.ModuleList(_Block(dim) for _ in range(img_layers))
        self.tok_emb = nn.Embedding(vocab_size, dim)
        self.txt_blocks = nn.ModuleList(_Block(dim) for _ in range(txt_layers))
        self.mm_blocks = nn.ModuleList(_Block(dim) for _ in range(mm_layers))
        self.cls_tok = nn.Parameter(torch.empty(dim))
        self.type_emb = nn.Parameter(torch.empty(3, dim))
        self.mlm_bias = nn.Parameter(torch.zeros(vocab_size))
        self.double()

        _init_linear(self.patch_proj, g)
        for block in (*self.img_blocks, *self.txt_blocks, *self.mm_blocks):
            block.init_weights(g)
        with torch.no_grad():
            self.tok_emb.weight.copy_(torch.from_numpy(embedding))
            self.cls_tok.normal_(0.0, 0.1, generator=g)
            self.type_emb.normal_(0.0, 0.1, generator=g)
        for p in self.parameters():
            p.requires_grad_(False)

    def image_tokens(self, image: torch.Tensor) -> torch.Tensor:
        h, w, c = image.shape
        p = self.patch
        if c != 3 or h % p or w % p:
            raise ValueError(f"image must be HxWx3 with H, W multiples of {p}, got {tuple(image.shape)}")
        x = image.reshape(h // p, p, w // p, p, c).permute(0, 2, 1, 3, 4).reshape(-1, p * p * c)
        tokens = self.patch_proj(x)
        return tokens + _sinusoid(tokens.shape[0], self.dim)

    def encode_image(self, image: torch.Tensor) -> list[torch.Tensor]:
        x = self.image_tokens(image)
        outs = []
        for block in self.img_blocks:
            x = block(x)
            outs.append(x)
        return outs

    def encode_text(self, emb: torch.Tensor) -> list[torch.Tensor]:
        # emb: [..., T, d] raw word embeddings (no positions yet)
        x = emb + _sinusoid(emb.shape[-2], self.dim)
        outs = []
        for block in self.txt_blocks:
            x = block(x)
            outs.append(x)
        return outs

    def encode_multimodal(self, img_last: torch.Tensor, txt_last: torch.Tensor) -> list[torch.Tensor]:
        seq = torch.cat(
            [
                (self.cls_tok + self.type_emb[0]).unsqueeze(0),
                img_last + self.type_emb[1],
                txt_last + self.type_emb[2],
            ],
            dim=0,
        )
        x = seq + _sinusoid(seq.shape[0], self.dim)
        outs = []
        for block in self.mm_blocks:
            x = block(x)
            outs.append(x)
        return outs

    def features(self, image: torch.Tensor, emb: torch.Tensor) -> dict[str, list[torch.Tensor]]:
        img_outs = self.encode_image(image)
        txt_outs = self.encode_text(emb)
        mm_outs = self.encode_multimodal(img_outs[-1], txt_outs[-1])
        return {ENCODER_IMAGE: img_outs, ENCODER_TEXT: txt_outs, ENCODER_MULTIMODAL: mm_outs}

    def mlm_log_probs(self, image: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        """Log-probabilities over the vocabulary at every text position."""
        emb = self.tok_emb(token_ids)
        feats = self.features(image, emb)
        mm_last = feats[ENCODER_MULTIMODAL][-1]
        n_img = feats[ENCODER_IMAGE][-1].shape[0]
        text_feats = mm_last[1 + n_img :]
        logits = text_feats @ self.tok_emb.weight.T + self.mlm_bias
        return F.log_softmax(logits, dim=-1)


class ToyAdapter(ModelAdapter):
    """ModelAdapter over the seeded toy model. Read-only and thread-safe.

    Tokenization is uncased and word-level (punctuation split off), so
    detokenize(tokenize(s)) reproduces s up to case and whitespace.
    """

    def __init__(self, seed: int = DEFAULT_SEED, dim: int = 16, patch: int = 4, max_text_len: int = 32):
        self.name = "toy"
        self.seed = seed
        self.max_text_len = max_text_len
        self._words = VOCAB
        self._word_to_id = {w: i for i, w in enumerate(self._words)}
        self._unk_id = self._word_to_id[UNK]
        self._mask_id = self._word_to_id[MASK]
        embedding = _embedding_matrix(self._words, dim, seed)
        self.model = ToyVlModel(len(self._words), embedding, dim=dim, patch=patch, seed=seed)
        self.model.eval()
        self._neutral_image = torch.full((2 * patch, 2 * patch, 3), 0.5, dtype=torch.float64)

    # --- capabilities / vocabulary -----------------------------------------

    def capabilities(self) -> AdapterCapabilities:
        return AdapterCapabilities(
            differentiable=True, mlm_head=True, contextual_embeddings=True, concurrent_safe=True
        )

    @property
    def mask_token_id(self) -> int:
        return self._mask_id

    @property
    def unk_token_id(self) -> int:
        return self._unk_id

    def vocab_words(self) -> tuple[str, ...]:
        return self._words

    def token_id(self, word: str) -> Optional[int]:
        return self._word_to_id.get(word.lower())

    def tokenize(self, text: str) -> TokenizedText:
        words = tuple(_TOKEN_RE.findall(text.lower()))
        ids = tuple(self._word_to_id.get(w, self._unk_id) for w in words)
        informative = frozenset(
            i
            for i, w in enumerate(words)
            if w.isalpha() and w not in STOP_WORDS and ids[i] != self._unk_id
        )
        return TokenizedText(words, ids, informative)

    def detokenize(self, text: TokenizedText) -> str:
        parts: list[str] = []
        for word in text.words:
            if parts and word in (".", ",", "?", "!", ";", ":", "'"):
                parts[-1] += word
            else:
                parts.append(word)
        return " ".join(parts)

    # --- torch plumbing ------------------------------------------------------

    def _check_text(self, ids: Sequence[int]) -> torch.Tensor:
        if len(ids) == 0:
            raise ValueError("text must contain at least one token")
        if len(ids) > self.max_text_len:
            raise ValueError(f"text has {len(ids)} tokens, adapter maximum is {self.max_text_len}")
        return torch.tensor(ids, dtype=torch.long)

    def _image_tensor(self, image: np.ndarray, requires_grad: bool = False) -> torch.Tensor:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"image must be HxWxC, got shape {arr.shape}")
        t = torch.from_numpy(arr.copy())
        if requires_grad:
            t.requires_grad_(True)
        return t

    def _loss_tensor(
        self,
        loss: LossSpec,
        image_t: torch.Tensor,
        text: Optional[TokenizedText],
        word_emb: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        if loss.kind == LOSS_KIND_FEATURE:
            if text is None:
                raise ValueError("feature loss requires the text input")
            ids = self._check_text(text.token_ids)
            emb = self.model.tok_emb(ids) if word_emb is None else word_emb
            feats = self.model.features(image_t, emb)
            total = image_t.new_zeros(())
            for name in loss.encoders:
                ref = torch.from_numpy(loss.reference[name])
                adv = torch.stack(feats[name])
                total = total + _cosine_sum(ref, adv)
        elif loss.kind == LOSS_KIND_ANTI_RECOVERY:
            total = image_t.new_zeros(())
            for template in loss.templates:
                ids = self._check_text(template.token_ids)
                log_probs = self.model.mlm_log_probs(image_t, ids)
                for pos, target in template.targets:
                    total = total + log_probs[pos, target]
        else:  # unreachable, LossSpec validates kind
            raise ValueError(f"unknown loss kind {loss.kind!r}")
        return total * loss.scale

    # --- forward passes --------------------------------------------------------

    def forward_features(self, image: np.ndarray, text: TokenizedText) -> LayerFeatures:
        ids = self._check_text(text.token_ids)
        with torch.no_grad():
            feats = self.model.features(self._image_tensor(image), self.model.tok_emb(ids))
        return LayerFeatures(
            {name: torch.stack(layers).numpy() for name, layers in feats.items()}
        )

    def mlm_probabilities(self, masked_text: MaskedTemplate, image: np.ndarray) -> MlmDistribution:
        ids = self._check_text(masked_text.token_ids)
        if max(masked_text.mask_indices) >= len(ids):
            raise ValueError(f"mask index out of range for {len(ids)} tokens")
        with torch.no_grad():
            log_probs = self.model.mlm_log_probs(self._image_tensor(image), ids)
        return MlmDistribution(
            {pos: torch.exp(log_probs[pos]).numpy() for pos in masked_text.mask_indices}
        )

    def mlm_candidate_probabilities(self, token_ids: Sequence[int], position: int) -> np.ndarray:
        ids = self._check_text(token_ids)
        if not 0 <= position < len(ids):
            raise ValueError(f"position {position} out of range for {len(ids)} tokens")
        with torch.no_grad():
            log_probs = self.model.mlm_log_probs(self._neutral_image, ids)
        return torch.exp(log_probs[position]).numpy()

    # --- embeddings ---------------------------------------------------------------

    def word_embedding(self, text: TokenizedText, position: int) -> np.ndarray:
        return self.model.tok_emb.weight[text.token_ids[position]].numpy().copy()

    def contextual_embedding(self, text: TokenizedText, position: int) -> np.ndarray:
        ids = self._check_text(text.token_ids)
        with torch.no_grad():
            out = self.model.encode_text(self.model.tok_emb(ids))[0]
        return out[position].numpy().copy()

    def contextual_embeddings_batch(
        self, texts: Sequence[TokenizedText], positions: Sequence[int]
    ) -> list[np.ndarray]:
        if not texts:
            return []
        lengths = {len(t.token_ids) for t in texts}
        if len(lengths) != 1:
            return super().contextual_embeddings_batch(texts, positions)
        ids = torch.tensor([t.token_ids for t in texts], dtype=torch.long)
        with torch.no_grad():
            out = self.model.encode_text(self.model.tok_emb(ids))[0]
        return [out[row, pos].numpy().copy() for row, pos in enumerate(positions)]

    # --- losses / gradients ----------------------------------------------------

    def loss_and_gradient_wrt_image(
        self, loss: LossSpec, image: np.ndarray, text: TokenizedText
    ) -> tuple[float, np.ndarray]:
        image_t = self._image_tensor(image, requires_grad=True)
        value = self._loss_tensor(loss, image_t, text)
        # a text-only feature loss has no path to the pixels: gradient is zero
        if not value.requires_grad:
            return float(value.detach()), np.zeros_like(np.asarray(image, dtype=np.float64))
        (grad,) = torch.autograd.grad(value, image_t, allow_unused=True)
        grad_np = np.zeros_like(np.asarray(image, dtype=np.float64)) if grad is None else grad.numpy()
        return float(value.detach()), grad_np

    def loss_and_gradients_wrt_words(
        self, loss: LossSpec, image: np.ndarray, text: TokenizedText
    ) -> tuple[float, dict[int, np.ndarray]]:
        if loss.kind != LOSS_KIND_FEATURE:
            raise ValueError("word-embedding gradients are defined for feature losses only")
        ids = self._check_text(text.token_ids)
        emb = self.model.tok_emb(ids).detach().clone().requires_grad_(True)
        value = self._loss_tensor(loss, self._image_tensor(image), text, word_emb=emb)
        if value.requires_grad:
            (grad,) = torch.autograd.grad(value, emb, allow_unused=True)
        else:
            grad = None
        if grad is None:
            grad = torch.zeros_like(emb)
        grads = {i: grad[i].numpy().copy() for i in range(len(ids))}
        return float(value.detach()), grads

    # --- weight archive -----------------------------------------------------------

    def save_weights(self, prefix) -> None:
        tensors = {name: p.detach().numpy() for name, p in self.model.state_dict().items()}
        weights_io.save_tensors(prefix, tensors)

    def load_weights(self, prefix) -> None:
        tensors = weights_io.load_tensors(prefix)
        state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
        self.model.load_state_dict(state)
        for p in self.model.parameters():
            p.requires_grad_(False)


def _cosine_sum(ref: torch.Tensor, adv: torch.Tensor) -> torch.Tensor:
    """Sum of per-token cosines; zero-norm pairs contribute exactly zero."""
    dot = (ref * adv).sum(-1)
    denom = ref.norm(dim=-1) * adv.norm(dim=-1)
    valid = denom > 0
    safe = torch.where(valid, denom, torch.ones_like(denom))
    return torch.where(valid, dot / safe, torch.zeros_like(dot)).sum()


def content_words() -> tuple[str, ...]:
    """Vocabulary words eligible as VQA answers (alphabetic, non-stop, non-special)."""
    return tuple(
        w for w in VOCAB if w.isalpha() and w not in STOP_WORDS and w not in (UNK, MASK)
    )


class ToyVictim(VictimModel):
    """The toy model doubling as a black-box victim via an argmax answer head.

    Shares the pre-trained trunk with the source adapter (optionally with
    seeded weight noise to emulate fine-tuning drift) and answers by pooling
    the multimodal text-token features and scoring every answer word through
    the tied vocabulary projection. Only ``predict`` is exposed: no gradients,
    no features, no vocabulary.
    """

    def __init__(
        self,
        source_seed: int = DEFAULT_SEED,
        noise: float = 0.0,
        seed: int = 901,
        answer_words: Optional[Sequence[str]] = None,
    ):
        self.name = "toy"
        self._adapter = ToyAdapter(seed=source_seed)
        if noise > 0.0:
            g = torch.Generator().manual_seed(seed)
            with torch.no_grad():
                for p in self._adapter.model.parameters():
                    scale = max(float(p.std()) if p.numel() > 1 else 0.0, 0.02)
                    p.add_(noise * scale * torch.randn(p.shape, generator=g, dtype=torch.float64))
        words = tuple(answer_words) if answer_words is not None else content_words()
        ids = [self._adapter.token_id(w) for w in words]
        if any(i is None for i in ids):
            missing = [w for w, i in zip(words, ids) if i is None]
            raise ValueError(f"answer words not in vocabulary: {missing}")
        self._answer_words = words
        self._answer_ids = torch.tensor(ids, dtype=torch.long)

    @property
    def answer_words(self) -> tuple[str, ...]:
        return self._answer_words

    def predict(self, image: np.ndarray, question: str) -> str:
        adapter = self._adapter
        text = adapter.tokenize(question)
        ids = adapter._check_text(text.token_ids)
        with torch.no_grad():
            feats = adapter.model.features(adapter._image_tensor(image), adapter.model.tok_emb(ids))
            n_img = feats[ENCODER_IMAGE][-1].shape[0]
            pooled = feats[ENCODER_MULTIMODAL][-1][1 + n_img :].mean(dim=0)
            logits = (
                adapter.model.tok_emb.weight[self._answer_ids] @ pooled
                + adapter.model.mlm_bias[self._answer_ids]
            )
            best = int(torch.argmax(logits))
        return self._answer_words[best]
