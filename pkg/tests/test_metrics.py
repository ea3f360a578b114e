import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from n400kit import metrics
from n400kit.errors import InputError
from n400kit.ingest import LMSentenceRecord


def make_record(logprobs, spans, embeddings):
    n = len(logprobs)
    return LMSentenceRecord("m", "f1", "best", tuple(f"t{i}" for i in range(n)), tuple(logprobs),
                            tuple(tuple(s) for s in spans), np.asarray(embeddings, dtype=float))


vectors = arrays(np.float64, 5, elements=st.floats(-100, 100))


class TestSurprisal:
    def test_examples(self):
        assert metrics.surprisal(0.0) == 0.0
        assert metrics.surprisal(-2.0) == 2.0
        assert metrics.surprisal(-math.log(2), base=2) == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("bad", [0.1, math.inf, -math.inf, math.nan, None])
    def test_invalid(self, bad):
        with pytest.raises(InputError):
            metrics.surprisal(bad)

    def test_invalid_base(self):
        with pytest.raises(InputError):
            metrics.surprisal(-1.0, base=1.0)

    @given(st.floats(-700, 0))
    def test_nonnegative_and_base_conversion(self, lp):
        s = metrics.surprisal(lp)
        assert s >= 0
        assert metrics.surprisal(lp, base=2) == pytest.approx(s / math.log(2), rel=1e-12, abs=1e-300)


class TestWordSurprisal:
    def test_span_sum(self):
        rec = make_record([None, -1.0, -0.5], [(0, 1), (1, 3)], np.eye(3))
        assert metrics.word_surprisal(rec, 1) == 1.5

    def test_single_token(self):
        rec = make_record([None, -3.2], [(0, 1), (1, 2)], np.eye(2))
        assert metrics.word_surprisal(rec, 1) == pytest.approx(3.2)

    def test_null_in_span(self):
        rec = make_record([None, -3.2], [(0, 2)], np.eye(2))
        with pytest.raises(InputError):
            metrics.word_surprisal(rec, 0)

    def test_index_out_of_range(self):
        rec = make_record([None, -3.2], [(0, 1), (1, 2)], np.eye(2))
        with pytest.raises(InputError):
            metrics.word_surprisal(rec, 2)

    @given(st.lists(st.floats(-30, 0), min_size=1, max_size=6))
    def test_chain_rule(self, lps):
        rec = make_record(lps, [(0, len(lps))], np.ones((len(lps), 2)))
        assert metrics.word_surprisal(rec, 0) == pytest.approx(-sum(lps), abs=1e-12)


class TestContextMean:
    def test_one_context_word(self):
        rec = make_record([None, -1.0], [(0, 1), (1, 2)], [[1, 0, 2, 3], [5, 5, 5, 5]])
        assert np.array_equal(metrics.context_mean_embedding(rec, 1), [1, 0, 2, 3])

    def test_midpoint(self):
        rec = make_record([None, -1, -1], [(0, 1), (1, 2), (2, 3)], [[1, 0], [0, 1], [3, 3]])
        assert np.allclose(metrics.context_mean_embedding(rec, 2), [0.5, 0.5])

    def test_two_level_mean(self):
        # word 0 has subtokens (2,0),(0,2); word 1 is (1,1); target is word 2
        rec = make_record([None, -1, -1, -1], [(0, 2), (2, 3), (3, 4)],
                          [[2, 0], [0, 2], [1, 1], [9, 9]])
        assert np.allclose(metrics.context_mean_embedding(rec, 2), [1, 1])

    def test_words_weighted_equally(self):
        # flat subtoken mean would be (4/3, 2/3); word-level mean is (1.5, 0.5)
        rec = make_record([None, -1, -1, -1], [(0, 2), (2, 3), (3, 4)],
                          [[2, 0], [0, 2], [2, 0], [1, 1]])
        assert np.allclose(metrics.context_mean_embedding(rec, 2), [1.5, 0.5])

    def test_no_context(self):
        rec = make_record([None, -1.0], [(0, 1), (1, 2)], np.eye(2))
        with pytest.raises(InputError):
            metrics.context_mean_embedding(rec, 0)

    @given(st.permutations([0, 1, 2]))
    def test_subtoken_order_invariance(self, perm):
        sub = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
        emb = np.vstack([sub[list(perm)], [[1.0, 0.0], [4.0, 4.0]]])
        rec = make_record([None, -1, -1, -1, -1], [(0, 3), (3, 4), (4, 5)], emb)
        assert np.allclose(metrics.context_mean_embedding(rec, 2), [(1.5 + 1.0) / 2, (0.5 + 0.0) / 2])


class TestCosine:
    def test_examples(self):
        s = metrics.cosine([1, 2, 3], [2, 4, 6])
        assert s.similarity == pytest.approx(1.0) and s.distance == pytest.approx(0.0)
        s = metrics.cosine([1, 0], [0, 1])
        assert s.similarity == 0.0 and s.distance == 1.0
        assert metrics.cosine([1, 1], [1, 0]).similarity == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_errors(self):
        with pytest.raises(InputError):
            metrics.cosine([0, 0], [1, 0])
        with pytest.raises(InputError):
            metrics.cosine([1, 0, 0], [1, 0])

    @given(vectors, vectors, st.floats(1e-3, 1e3))
    def test_scale_invariance(self, a, b, c):
        assume(np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3)
        s = metrics.cosine(a, b)
        assert metrics.cosine(c * a, b).similarity == pytest.approx(s.similarity, abs=1e-12)
        assert metrics.cosine(a, c * b).similarity == pytest.approx(s.similarity, abs=1e-12)

    @given(vectors, vectors)
    def test_antisymmetry_and_distance(self, a, b):
        assume(np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3)
        s = metrics.cosine(a, b)
        assert metrics.cosine(-a, b).similarity == pytest.approx(-s.similarity, abs=1e-12)
        assert s.distance == 1.0 - s.similarity
        assert abs(s.similarity) <= 1.0 + 1e-12


class TestPearson:
    def test_examples(self):
        xs = np.array([1.0, 2.0, 5.0, 7.0])
        assert metrics.pearson_r(xs, 2 * xs + 1) == pytest.approx(1.0)
        assert metrics.pearson_r(xs, -xs) == pytest.approx(-1.0)
        assert metrics.pearson_r([1, 2, 3], [2, 1, 3]) == pytest.approx(0.5)

    def test_errors(self):
        with pytest.raises(InputError):
            metrics.pearson_r([1, 2], [1, 2])
        with pytest.raises(InputError):
            metrics.pearson_r([1, 1, 1], [1, 2, 3])
        with pytest.raises(InputError):
            metrics.pearson_r([1, 2, 3], [1, 2])

    def test_matches_numpy(self):
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=(2, 50))
        assert metrics.pearson_r(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-14)

    @given(arrays(np.float64, 8, elements=st.floats(-10, 10)),
           arrays(np.float64, 8, elements=st.floats(-10, 10)),
           st.floats(0.1, 10), st.floats(-100, 100))
    def test_affine_invariance(self, x, y, a, b):
        assume(np.std(x) > 1e-2 and np.std(y) > 1e-2)
        r = metrics.pearson_r(x, y)
        assert metrics.pearson_r(a * x + b, y) == pytest.approx(r, abs=1e-9)
        assert metrics.pearson_r(-a * x + b, y) == pytest.approx(-r, abs=1e-9)
