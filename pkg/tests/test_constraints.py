import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from advqa.core.constraints import clip_to_budget, cosine, linf_distance, semantic_similarity
from advqa.core.errors import EmbeddingError, ShapeMismatchError
from advqa.core.types import TokenizedText

BUDGET = 16.0 / 255.0


def text(*words):
    return TokenizedText(tuple(words), tuple(range(len(words))))


class VectorEncoder:
    """Maps each distinct sentence string to a fixed vector."""

    def __init__(self, table):
        self.table = table

    def encode(self, s):
        return np.asarray(self.table[s], dtype=np.float64)


class TestLinfDistance:
    def test_identical_tensors(self):
        a = np.full((4, 4, 3), 0.25)
        assert linf_distance(a, a.copy()) == 0.0

    def test_uniform_offset(self):
        a = np.zeros((2, 2, 3))
        b = np.full((2, 2, 3), BUDGET)
        assert linf_distance(a, b) == pytest.approx(BUDGET, abs=0)

    def test_direct_arithmetic(self):
        a = np.array([[[0.1, 0.5]]])
        b = np.array([[[0.15, 0.3]]])
        assert linf_distance(a, b) == pytest.approx(0.2)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError) as err:
            linf_distance(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
        assert "(2, 2, 3)" in str(err.value) and "(2, 3, 3)" in str(err.value)

    @given(
        hnp.arrays(np.float64, (3, 3, 3), elements=st.floats(0, 1)),
        hnp.arrays(np.float64, (3, 3, 3), elements=st.floats(0, 1)),
        hnp.arrays(np.float64, (3, 3, 3), elements=st.floats(0, 1)),
    )
    @settings(max_examples=50, deadline=None)
    def test_symmetry_and_triangle_inequality(self, a, b, c):
        assert linf_distance(a, b) == linf_distance(b, a)
        assert linf_distance(a, c) <= linf_distance(a, b) + linf_distance(b, c) + 1e-15


class TestClipToBudget:
    def test_noop_when_within_budget(self):
        clean = np.full((2, 2, 3), 0.5)
        adv = clean + 0.01
        assert np.array_equal(clip_to_budget(adv, clean, BUDGET), adv)

    def test_clamp_to_upper_edge(self):
        out = clip_to_budget(np.array([[[0.8]]]), np.array([[[0.5]]]), BUDGET)
        assert out[0, 0, 0] == pytest.approx(0.5 + BUDGET)

    def test_range_clamp_dominates(self):
        out = clip_to_budget(np.array([[[-0.2]]]), np.array([[[0.01]]]), BUDGET)
        assert out[0, 0, 0] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            clip_to_budget(np.zeros((1, 1, 3)), np.zeros((1, 2, 3)), BUDGET)

    @given(
        hnp.arrays(np.float64, (4, 4, 3), elements=st.floats(-2, 3)),
        hnp.arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)),
        st.floats(1e-6, 1.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_idempotent_and_satisfies_both_constraints(self, adv, clean, budget):
        out = clip_to_budget(adv, clean, budget)
        assert np.array_equal(clip_to_budget(out, clean, budget), out)
        assert out.min() >= 0.0 and out.max() <= 1.0
        # one-ulp-per-element tolerance: the boundary value clean+budget is
        # rounded once, so the recovered difference can be off by spacing
        tol = np.spacing(np.maximum(np.abs(out), np.abs(clean)))
        assert (np.abs(out - clean) <= budget + tol).all()


class TestSemanticSimilarity:
    def test_identical_sentences_exactly_one(self, encoder):
        t = text("what", "color", "is", "the", "bus", "?")
        assert semantic_similarity(t, t, encoder) == 1.0

    def test_orthogonal_embeddings(self):
        enc = VectorEncoder({"a": [1.0, 0.0], "b": [0.0, 1.0]})
        assert semantic_similarity(text("a"), text("b"), enc) == pytest.approx(0.0)

    def test_known_cosine(self):
        enc = VectorEncoder({"a": [1.0, 1.0], "b": [1.0, 0.0]})
        assert semantic_similarity(text("a"), text("b"), enc) == pytest.approx(1 / np.sqrt(2))

    def test_zero_norm_embedding_is_an_error(self, encoder):
        with pytest.raises(EmbeddingError):
            semantic_similarity(text("?"), text("?"), encoder)

    def test_identity_holds_for_any_nonzero_encoder(self, encoder):
        for sentence in ("what room is this ?", "the dog is in the park"):
            t = text(*sentence.split())
            assert semantic_similarity(t, t, encoder) == 1.0


class TestCosine:
    def test_zero_norm_rejected(self):
        with pytest.raises(EmbeddingError):
            cosine(np.zeros(3), np.ones(3))

    def test_clipped_into_unit_interval(self):
        v = np.array([1e-200, 1.0])
        assert -1.0 <= cosine(v, v) <= 1.0
