import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vlncache.errors import AttentionNormalizationError
from vlncache.semantics import default_focus_k, focus_shift, relevance_from_attention, top_k_set

index_sets = st.frozensets(st.integers(0, 30), max_size=15)


def rows(n_rows, m):
    return arrays(np.float64, (n_rows, m), elements=st.floats(0.01, 1)).map(lambda a: a / a.sum(axis=1, keepdims=True))


class TestRelevance:
    def test_uniform(self):
        s = relevance_from_attention(np.full((3, 5), 0.2))
        assert np.allclose(s, 1.0 / (1.0 + 1e-6 * 5), atol=1e-6)

    def test_one_hot(self):
        a = np.zeros((4, 10))
        a[:, 7] = 1.0
        s = relevance_from_attention(a)
        assert s[7] == pytest.approx(1.0, abs=1e-5)
        assert np.all(np.delete(s, 7) == 0)

    def test_hand_example(self):
        s = relevance_from_attention([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]])
        assert np.allclose(s, (0.3 / 0.45, 1.0, 0.25 / 0.45), atol=1e-5)

    def test_rejects_unnormalized(self):
        with pytest.raises(AttentionNormalizationError):
            relevance_from_attention([[0.5, 0.6]])

    @given(st.integers(1, 5).flatmap(lambda n: rows(n, 6)))
    def test_duplicating_rows_keeps_mean(self, a):
        assert np.allclose(relevance_from_attention(np.vstack([a, a])), relevance_from_attention(a), atol=1e-12)

    @given(st.integers(1, 5).flatmap(lambda n: rows(n, 6)))
    def test_range(self, a):
        s = relevance_from_attention(a)
        assert np.all((s >= 0) & (s <= 1))


class TestTopK:
    def test_examples(self):
        assert top_k_set([0.1, 0.9, 0.5], 2) == {1, 2}
        assert top_k_set([0.3] * 5, 2) == {0, 1}
        assert top_k_set([0.2, 0.1], 2) == {0, 1}

    def test_k_clipped(self):
        assert top_k_set([0.1, 0.2], 10) == {0, 1}

    def test_k_zero(self):
        with pytest.raises(ValueError):
            top_k_set([0.1], 0)

    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1)), st.integers(1, 50))
    def test_ordering_invariant(self, s, k):
        top = top_k_set(s, k)
        assert len(top) == min(k, len(s))
        rest = [i for i in range(len(s)) if i not in top]
        if rest:
            assert min(s[list(top)]) >= max(s[rest])

    @given(st.integers(0, 2**32 - 1), st.integers(1, 10))
    def test_permutation_consistent(self, seed, k):
        r = np.random.default_rng(seed)
        s = r.permutation(20) / 20.0  # distinct values avoid the tie caveat
        perm = r.permutation(20)
        moved = top_k_set(s[perm], k)
        assert {int(perm[i]) for i in moved} == set(top_k_set(s, k))


class TestFocusShift:
    def test_examples(self):
        assert focus_shift({1, 2}, {1, 2}) == 0.0
        assert focus_shift({1}, {2}) == 1.0
        assert focus_shift(set(), set()) == 0.0
        a = set(range(10))
        b = set(range(5)) | set(range(10, 15))
        assert focus_shift(a, b) == pytest.approx(2 / 3)

    @given(index_sets, index_sets)
    def test_properties(self, a, b):
        d = focus_shift(a, b)
        assert 0.0 <= d <= 1.0
        assert d == focus_shift(b, a)
        assert focus_shift(a, a) == 0.0
        if a | b:
            assert (d == 1.0) == (not (a & b))


def test_default_focus_k():
    assert default_focus_k(196) == 20
    assert default_focus_k(64) == 7
    assert default_focus_k(1) == 1
