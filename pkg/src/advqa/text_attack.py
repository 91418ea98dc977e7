"""Candidate generation, target-embedding estimation, synonym ranking, substitution.

The discrete half of the attack: informative words of the question are
replaced by MLM-proposed candidates whose context embeddings best match the
gradient-shifted word embedding, subject to the sentence-level similarity
constraint against the original question.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core.constraints import SentenceEncoder, semantic_similarity
from .core.errors import EmbeddingError, ShapeMismatchError
from .core.types import TokenizedText


@dataclass(frozen=True)
class Candidate:
    """One substitution option for an informative position."""

    word: str
    token_id: int
    embedding: Optional[np.ndarray] = None  # context-aware, filled per trigger


@dataclass
class CandidateSet:
    """Ordered top-K candidates per informative position.

    The candidate words are fixed at initialization for the whole run; only
    their context-aware embeddings are refreshed (via ``with_embeddings``)
    when the surrounding sentence changes.
    """

    by_position: dict[int, tuple[Candidate, ...]]

    def positions(self) -> tuple[int, ...]:
        return tuple(sorted(self.by_position))

    def __len__(self) -> int:
        return len(self.by_position)

    def __getitem__(self, position: int) -> tuple[Candidate, ...]:
        return self.by_position[position]


@dataclass(frozen=True)
class RankedCandidate:
    position: int
    candidate_index: int
    candidate: Candidate
    score: float


def build_candidates(clean_text: TokenizedText, top_k: int, adapter) -> CandidateSet:
    """Top-K in-vocabulary replacement words per informative position.

    Each position is masked in turn and the adapter's MLM proposes words by
    probability; punctuation, specials, stop-symbol junk, and the original
    word are filtered out. Proposals come from a fixed neutral visual
    context, so the set depends only on the sentence.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if not clean_text.informative_indices:
        return CandidateSet({})
    adapter.require("mlm_head")
    vocab = adapter.vocab_words()
    by_position: dict[int, tuple[Candidate, ...]] = {}
    for position in sorted(clean_text.informative_indices):
        masked_ids = list(clean_text.token_ids)
        original_word = clean_text.words[position]
        masked_ids[position] = adapter.mask_token_id
        probs = np.asarray(adapter.mlm_candidate_probabilities(masked_ids, position))
        order = np.argsort(-probs, kind="stable")
        chosen: list[Candidate] = []
        for token_id in order:
            word = vocab[int(token_id)]
            if not word.isalpha() or word == original_word:
                continue
            if int(token_id) in (adapter.mask_token_id, adapter.unk_token_id):
                continue
            chosen.append(Candidate(word=word, token_id=int(token_id)))
            if len(chosen) == top_k:
                break
        by_position[position] = tuple(chosen)
    return CandidateSet(by_position)


def embed_candidates(
    candidates: CandidateSet, current_text: TokenizedText, adapter
) -> CandidateSet:
    """Fill context-aware embeddings by substituting each candidate into the
    current sentence and reading the text encoder's first-layer output at
    that position."""
    texts: list[TokenizedText] = []
    positions: list[int] = []
    slots: list[tuple[int, int]] = []
    for position in candidates.positions():
        for j, cand in enumerate(candidates[position]):
            texts.append(current_text.replaced(position, cand.word, cand.token_id))
            positions.append(position)
            slots.append((position, j))
    vectors = adapter.contextual_embeddings_batch(texts, positions)
    by_position = {pos: list(candidates[pos]) for pos in candidates.positions()}
    for (position, j), vec in zip(slots, vectors):
        old = by_position[position][j]
        by_position[position][j] = Candidate(old.word, old.token_id, np.asarray(vec, dtype=np.float64))
    return CandidateSet({pos: tuple(cands) for pos, cands in by_position.items()})


def estimate_target_embedding(embedding: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Post-attack word representation: the embedding shifted by its loss gradient."""
    embedding = np.asarray(embedding, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if embedding.shape != gradient.shape:
        raise ShapeMismatchError(embedding.shape, gradient.shape, what="embedding and gradient")
    return embedding + gradient


def rank_synonyms(
    targets: Mapping[int, np.ndarray],
    candidates: CandidateSet,
    warnings: Optional[list[str]] = None,
) -> list[RankedCandidate]:
    """Global descending order of all (position, candidate) pairs by cosine
    similarity to the position's target embedding.

    Ties break toward the lower position, then the lower candidate index.
    Pairs with a zero-norm embedding on either side are dropped with a
    warning rather than given an arbitrary score.
    """
    scored: list[RankedCandidate] = []
    for position in candidates.positions():
        target = targets.get(position)
        if target is None:
            continue
        target = np.asarray(target, dtype=np.float64)
        t_norm = float(np.linalg.norm(target))
        if t_norm == 0.0:
            if warnings is not None:
                warnings.append(f"zero-norm target embedding at position {position}; dropped")
            continue
        for j, cand in enumerate(candidates[position]):
            if cand.embedding is None:
                raise EmbeddingError(f"candidate {cand.word!r} at position {position} has no embedding")
            c_norm = float(np.linalg.norm(cand.embedding))
            if c_norm == 0.0:
                if warnings is not None:
                    warnings.append(
                        f"zero-norm embedding for candidate {cand.word!r} at position {position}; dropped"
                    )
                continue
            score = float(np.dot(target, cand.embedding) / (t_norm * c_norm))
            scored.append(RankedCandidate(position, j, cand, score))
    scored.sort(key=lambda rc: (-rc.score, rc.position, rc.candidate_index))
    return scored


def substitute_with_constraint(
    current_text: TokenizedText,
    clean_text: TokenizedText,
    ranking: Sequence[RankedCandidate],
    sim_threshold: float,
    encoder: SentenceEncoder,
) -> tuple[TokenizedText, list[tuple[int, str, str]]]:
    """Greedy walk down the ranked list with the semantic constraint.

    Takes candidates in rank order; a candidate for a position that is not
    yet settled this trigger is substituted tentatively and kept only if the
    resulting sentence stays above ``sim_threshold`` similarity to the
    original clean question. Accepting a candidate settles its position (the
    position's lower-ranked candidates are skipped); rejecting moves on down
    the list. Ends when every ranked position is settled or the list is
    exhausted, so each position changes at most once per trigger.
    """
    text = current_text
    substitutions: list[tuple[int, str, str]] = []
    settled: set[int] = set()
    open_positions = {rc.position for rc in ranking}
    for rc in ranking:
        if rc.position in settled:
            continue
        old_word = text.words[rc.position]
        if rc.candidate.word == old_word:
            # already holding this word (from an earlier trigger): nothing to do
            settled.add(rc.position)
            continue
        tentative = text.replaced(rc.position, rc.candidate.word, rc.candidate.token_id)
        if semantic_similarity(tentative, clean_text, encoder) > sim_threshold:
            text = tentative
            substitutions.append((rc.position, old_word, rc.candidate.word))
            settled.add(rc.position)
        if settled == open_positions:
            break
    return text, substitutions
