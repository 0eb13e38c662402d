import itertools

import numpy as np
import pytest

from vgnsl.errors import DataError, DegenerateInputError
from vgnsl.parser import (
    ModelParams,
    combine,
    compose_vectors,
    embed_tokens,
    init_params,
    log_softmax,
    parse,
    score_pairs,
    select_pair,
)
from vgnsl.trees import Leaf, all_spans, format_binary

CHI2_CRIT_DF2_P001 = 13.816  # chi-square critical value, df=2, p=0.001


def tiny_params(dtype=np.float64, seed=0, vocab=6, d=4, h=3, feat=5):
    return init_params(vocab, d, h, feat, rng=np.random.default_rng(seed), dtype=dtype)


def zero_theta(params):
    params.w1[:] = 0
    params.b1[:] = 0
    params.w2[:] = 0
    params.b2[:] = 0
    return params


class TestEmbed:
    def test_normalized_lookup(self):
        p = tiny_params()
        p.embeddings[2] = [3.0, 4.0, 0.0, 0.0]
        out = embed_tokens([2], p)
        assert np.allclose(out[0], [0.6, 0.8, 0.0, 0.0])

    def test_unknown_uses_unk_row(self):
        p = tiny_params()
        out = embed_tokens([p.unk_id], p)
        expected = p.embeddings[p.unk_id] / np.linalg.norm(p.embeddings[p.unk_id])
        assert np.allclose(out[0], expected)

    def test_zero_row_error(self):
        p = tiny_params()
        p.embeddings[1] = 0.0
        with pytest.raises(DegenerateInputError):
            embed_tokens([1], p)

    def test_raw_lookup_flag(self):
        p = tiny_params()
        p.normalize_embeddings = False
        out = embed_tokens([3], p)
        assert np.array_equal(out[0], p.embeddings[3])


class TestScorePairs:
    def test_zero_theta_zero_scores(self):
        p = zero_theta(tiny_params())
        x = np.random.default_rng(0).normal(size=(5, 4))
        assert np.array_equal(score_pairs(x, p), np.zeros(4))

    def test_two_constituents_one_score(self):
        p = tiny_params()
        x = np.random.default_rng(0).normal(size=(2, 4))
        assert score_pairs(x, p).shape == (1,)

    def test_single_constituent_error(self):
        p = tiny_params()
        with pytest.raises(DataError):
            score_pairs(np.ones((1, 4)), p)

    def test_hand_built_network_closed_form(self):
        # 1 hidden unit on 2-d inputs; the oracle is plain arithmetic
        p = ModelParams(
            embeddings=np.eye(2),
            w1=np.array([[1.0], [-1.0], [2.0], [0.5]]),
            b1=np.array([0.3]),
            w2=np.array([2.0]),
            b2=np.array([-0.1]),
            phi=np.eye(2),
        )
        a, b = [0.6, 0.8], [1.0, 0.0]
        pre = 0.6 * 1.0 + 0.8 * (-1.0) + 1.0 * 2.0 + 0.0 * 0.5 + 0.3
        expected = max(pre, 0.0) * 2.0 - 0.1
        got = score_pairs(np.array([a, b]), p)
        assert got.shape == (1,)
        assert np.isclose(got[0], expected, rtol=0, atol=1e-12)


class TestSelectPair:
    def test_greedy_argmax(self):
        assert select_pair(np.array([1.0, 5.0, 1.0]), "greedy")[0] == 1

    def test_greedy_tie_leftmost(self):
        assert select_pair(np.array([2.0, 2.0]), "greedy")[0] == 0

    def test_nonfinite_rejected(self):
        with pytest.raises(DegenerateInputError):
            select_pair(np.array([np.inf, 0.0]), "greedy")

    @pytest.mark.parametrize("scores", [[0.0, 0.0, 0.0], [0.3, -0.2, 0.8]])
    def test_sampling_matches_softmax(self, scores):
        scores = np.array(scores)
        rng = np.random.default_rng(99)
        n = 100_000
        counts = np.zeros(3)
        for _ in range(n):
            j, logp = select_pair(scores, "sample", rng)
            counts[j] += 1
        probs = np.exp(log_softmax(scores))
        expected = probs * n
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        assert chi2 < CHI2_CRIT_DF2_P001

    def test_logp_is_log_softmax(self):
        scores = np.array([0.5, 1.5])
        j, logp = select_pair(scores, "greedy")
        assert np.isclose(logp, log_softmax(scores)[1])


class TestCombine:
    def test_orthogonal_units(self):
        out = combine(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert np.allclose(out, [0.70710678, 0.70710678])

    def test_three_four_five(self):
        assert np.allclose(combine(np.array([3.0, 0.0]), np.array([0.0, 4.0])), [0.6, 0.8])

    def test_cancellation_error(self):
        x = np.array([0.3, -0.2])
        with pytest.raises(DegenerateInputError):
            combine(x, -x)


class TestParse:
    def test_single_token(self):
        p = tiny_params()
        res = parse([3], p)
        assert res.tree == Leaf(0)
        assert res.steps == []
        assert res.vectors.shape == (1, 4)

    def test_zero_theta_greedy_left_branching(self):
        p = zero_theta(tiny_params())
        res = parse([0, 1, 2, 3], p, mode="greedy")
        assert format_binary(res.tree, list("abcd")) == "( ( ( a b ) c ) d )"

    def test_crafted_weights_merge_second_pair(self):
        # score = relu(u . [0,1,1,0]) picks the pair whose left vector has a
        # second coordinate and whose right vector has a first coordinate
        p = ModelParams(
            embeddings=np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]),
            w1=np.array([[0.0], [1.0], [1.0], [0.0]]),
            b1=np.array([0.0]),
            w2=np.array([1.0]),
            b2=np.array([0.0]),
            phi=np.eye(2),
        )
        res = parse([0, 1, 2], p, mode="greedy")
        assert format_binary(res.tree, list("abc")) == "( a ( b c ) )"

    def test_greedy_deterministic(self):
        p = tiny_params(seed=5)
        a = parse([1, 2, 3, 4, 5], p, mode="greedy")
        b = parse([1, 2, 3, 4, 5], p, mode="greedy")
        assert a.tree == b.tree
        assert np.array_equal(a.vectors, b.vectors)

    def test_constituent_count_and_unit_norms(self):
        p = tiny_params(seed=3)
        rng = np.random.default_rng(0)
        for n in range(1, 12):
            ids = list(rng.integers(0, 6, size=n))
            res = parse(ids, p, mode="sample", rng=rng)
            assert res.vectors.shape == (2 * n - 1, 4)
            assert len(all_spans(res.tree)) == 2 * n - 1
            norms = np.linalg.norm(res.vectors[n:], axis=1)
            assert np.all(np.abs(norms - 1.0) < 1e-6)

    def test_trace_spans_match_created_nodes(self):
        p = tiny_params(seed=4)
        res = parse([0, 1, 2, 3], p, mode="greedy")
        assert len(res.steps) == 3
        assert res.steps[-1].span == (0, 4)

    def test_compose_vectors_matches_parse(self):
        p = tiny_params(seed=9)
        rng = np.random.default_rng(2)
        res = parse([1, 2, 3, 4], p, mode="sample", rng=rng)
        rebuilt = compose_vectors([1, 2, 3, 4], res.children, p)
        assert np.allclose(rebuilt, res.vectors)

    def test_empty_caption_error(self):
        with pytest.raises(DataError):
            parse([], tiny_params())


class TestSequenceProbabilities:
    @pytest.mark.parametrize("n", [3, 4])
    def test_trace_logp_sums_and_total_probability(self, n):
        p = tiny_params(seed=11)
        ids = list(range(1, n + 1))
        total = 0.0
        for choices in itertools.product(*(range(k) for k in range(n - 1, 0, -1))):
            res = parse(ids, p, forced=list(choices))
            logp_sum = sum(step.log_prob for step in res.steps)
            # independent recomputation from the recorded scores
            expected = 0.0
            for step, j in zip(res.steps, choices):
                s = step.scores.astype(np.float64)
                probs = np.exp(s - s.max())
                probs /= probs.sum()
                expected += np.log(probs[j])
            assert np.isclose(logp_sum, expected, atol=1e-12)
            total += np.exp(logp_sum)
        assert np.isclose(total, 1.0, atol=1e-10)
