import math

import numpy as np
import pytest

from vgnsl.baselines import (
    ConcretenessTable,
    concreteness_parse,
    distance_parse,
    export_word_concreteness,
    format_distance_dump,
    load_word_scores,
    most_frequent_words,
    normalize_scores,
    parse_from_table,
    pmi_distances,
    pmi_statistics,
    save_word_scores,
    trivial_tree,
)
from vgnsl.corpus import encode_captions, pair_examples, vocab_from_counts
from vgnsl.errors import DataError
from vgnsl.parser import ModelParams
from vgnsl.trees import Leaf, all_spans, format_binary, spans_of
from vgnsl.vse import VseHyper, concreteness


class TestTrivialTrees:
    def test_left_spans(self):
        assert spans_of(trivial_tree(4, "left")) == {(0, 2), (0, 3)}

    def test_right_spans(self):
        assert spans_of(trivial_tree(4, "right")) == {(1, 4), (2, 4)}

    def test_two_tokens_unique(self):
        trees = {format_binary(trivial_tree(2, k, np.random.default_rng(0)), ["a", "b"])
                 for k in ("left", "right", "random")}
        assert trees == {"( a b )"}

    def test_single_token(self):
        assert trivial_tree(1, "left") == Leaf(0)

    def test_random_tree_well_formed(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            n = int(rng.integers(1, 15))
            tree = trivial_tree(n, "random", rng)
            assert len(all_spans(tree)) == 2 * n - 1

    def test_unknown_kind(self):
        with pytest.raises(DataError):
            trivial_tree(3, "middle")


class TestPmi:
    def test_worked_example_minus_log4(self):
        stats = pmi_statistics([["a", "b"], ["a", "b"], ["a", "c"]])
        d = pmi_distances(stats, ["a", "b"])
        assert d[0] == pytest.approx(-math.log(4.0), abs=1e-12)

    def test_unseen_bigram_finite(self):
        stats = pmi_statistics([["a", "b"], ["c", "d"]], k=1.0)
        d = pmi_distances(stats, ["b", "c"])
        assert math.isfinite(d[0])

    def test_symmetric_counts_symmetric_pmi(self):
        stats = pmi_statistics([["a", "b"], ["b", "a"]])
        assert pmi_distances(stats, ["a", "b"])[0] == pytest.approx(
            pmi_distances(stats, ["b", "a"])[0]
        )

    def test_single_token_caption_empty(self):
        stats = pmi_statistics([["a", "b"]])
        assert pmi_distances(stats, ["a"]) == []

    def test_unseen_unigram_floored(self):
        stats = pmi_statistics([["a", "b"]])
        d = pmi_distances(stats, ["zz", "qq"])
        assert len(d) == 1 and math.isfinite(d[0])


class TestDistanceParse:
    def test_hand_traced_fixture(self):
        tree = distance_parse([3.0, 1.0, 2.0], 4)
        assert format_binary(tree, list("abcd")) == "( a ( ( b c ) d ) )"
        assert spans_of(tree) == {(1, 4), (1, 3)}

    def test_decreasing_right_branching(self):
        tree = distance_parse([5.0, 4.0, 3.0, 2.0], 5)
        assert format_binary(tree, list("abcde")) == "( a ( b ( c ( d e ) ) ) )"

    def test_increasing_left_branching(self):
        tree = distance_parse([1.0, 2.0, 3.0], 4)
        assert format_binary(tree, list("abcd")) == "( ( ( a b ) c ) d )"

    def test_single_token(self):
        assert distance_parse([], 1) == Leaf(0)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            distance_parse([1.0], 3)

    def test_monotone_relabel_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            m = int(rng.integers(2, 9))
            d = list(rng.normal(size=m - 1))
            base = all_spans(distance_parse(d, m))
            for transform in (lambda x: 3.0 * x + 1.0, math.exp):
                assert all_spans(distance_parse([transform(x) for x in d], m)) == base

    def test_matches_bruteforce_oracle(self):
        def oracle_spans(d, lo, hi, out):
            # independent: maximize, split, recurse over closed ranges
            if hi - lo == 1:
                return
            best, where = -math.inf, lo
            for j in range(lo, hi - 1):
                if d[j] > best:
                    best, where = d[j], j
            out.add((lo, hi))
            oracle_spans(d, lo, where + 1, out)
            oracle_spans(d, where + 1, hi, out)

        rng = np.random.default_rng(12)
        for _ in range(200):
            m = int(rng.integers(2, 9))
            d = list(rng.integers(0, 4, size=m - 1).astype(float))  # force ties
            expected = set()
            oracle_spans(d, 0, m, expected)
            got = {s for s in all_spans(distance_parse(d, m)) if s[1] - s[0] >= 2}
            assert got == expected


class TestNormalizeScores:
    def test_affine_map(self):
        assert normalize_scores([2.0, 4.0, 6.0]) == [-1.0, 0.0, 1.0]

    def test_constant_scores(self):
        assert normalize_scores([5.0, 5.0]) == [0.0, 0.0]

    def test_unseen_pinned(self):
        assert normalize_scores([2.0, None, 6.0]) == [-1.0, -1.0, 1.0]

    def test_log_preprocessing(self):
        vals = normalize_scores([1.0, math.e**2, math.e**4], log_scores=True)
        assert vals == pytest.approx([-1.0, 0.0, 1.0])

    def test_log_rejects_nonpositive(self):
        with pytest.raises(DataError):
            normalize_scores([0.0, 1.0], log_scores=True)

    def test_all_unseen(self):
        assert normalize_scores([None, None]) == [-1.0, -1.0]


class TestConcretenessParse:
    def test_hand_traced_fixture(self):
        tree = concreteness_parse([1.0, 0.5, -1.0], tau=20.0)
        assert format_binary(tree, list("abc")) == "( ( a b ) c )"

    def test_equal_scores_left_branching(self):
        tree = concreteness_parse([0.3, 0.3, 0.3, 0.3], tau=1.0)
        assert format_binary(tree, list("abcd")) == "( ( ( a b ) c ) d )"

    def test_two_tokens(self):
        assert format_binary(concreteness_parse([0.1, 0.9], tau=20.0), ["a", "b"]) == "( a b )"

    def test_tau_below_one_rejected(self):
        with pytest.raises(DataError):
            concreteness_parse([0.1, 0.2], tau=0.5)

    def test_positive_scaling_invariance(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            m = int(rng.integers(2, 9))
            scores = list(rng.normal(size=m))
            base = all_spans(concreteness_parse(scores, tau=20.0))
            scaled = all_spans(concreteness_parse([4.5 * s for s in scores], tau=20.0))
            assert base == scaled

    def test_matches_bruteforce_oracle(self):
        def oracle(scores, tau):
            spans = [(i, i + 1) for i in range(len(scores))]
            a = list(scores)
            out = set()
            while len(a) > 1:
                best, p = -math.inf, 0
                for j in range(len(a) - 1):
                    v = a[j] + tau * a[j + 1]
                    if v > best:
                        best, p = v, j
                out.add((spans[p][0], spans[p + 1][1]))
                spans[p : p + 2] = [(spans[p][0], spans[p + 1][1])]
                a[p : p + 2] = [(a[p] + a[p + 1]) / 2.0]
            return out

        rng = np.random.default_rng(14)
        for _ in range(200):
            m = int(rng.integers(2, 9))
            scores = list(np.round(rng.normal(size=m), 1))
            expected = oracle(scores, 20.0)
            got = {s for s in all_spans(concreteness_parse(scores, 20.0)) if s[1] - s[0] >= 2}
            assert got == expected


class TestWordScoreTables:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "scores.tsv"
        save_word_scores(path, [("cat", 4.25), ("of", -1.5)])
        table = load_word_scores(path)
        assert table.scores == {"cat": 4.25, "of": -1.5}

    def test_bad_line(self, tmp_path):
        path = tmp_path / "scores.tsv"
        path.write_text("cat\n", encoding="utf-8")
        with pytest.raises(DataError):
            load_word_scores(path)

    def test_parse_from_table_with_oov(self):
        table = ConcretenessTable({"cat": 5.0, "mat": 4.0, "on": 1.0})
        tree = parse_from_table(["zzz", "cat", "on", "mat"], table, tau=20.0)
        assert len(all_spans(tree)) == 7

    def test_distance_dump_format(self):
        assert format_distance_dump(3, [1.5, -2.0]) == "3\t1.5,-2.0"

    def test_most_frequent_tie_rule(self):
        words = most_frequent_words([["b", "a", "b"], ["a", "c"]], 2)
        assert words == ["a", "b"]  # both have 2, lexicographic


class TestExportConcreteness:
    def id_params(self):
        # embeddings chosen so leaf vectors are axis units; phi = identity
        emb = np.eye(4)
        return ModelParams(
            embeddings=emb.astype(np.float64),
            w1=np.zeros((8, 2)),
            b1=np.zeros(2),
            w2=np.zeros(2),
            b2=np.zeros(1),
            phi=np.eye(4).astype(np.float64),
        )

    def test_batch_of_one_zero(self):
        vocab = vocab_from_counts({"w1": 1})
        captions = encode_captions([["w1"]], vocab)
        feats = np.array([[1.0, 0, 0, 0]], dtype=np.float32)
        examples = pair_examples(captions, feats, captions_per_image=1)
        table = export_word_concreteness(self.id_params(), vocab, examples, VseHyper(), batch_size=1)
        assert table == {"w1": 0.0}

    def test_two_occurrences_arithmetic_mean(self):
        params = self.id_params()
        vocab = vocab_from_counts({"w1": 2, "w2": 1, "w3": 1})
        # two batches of two captions each; "w1" occurs once per batch
        captions = encode_captions([["w1"], ["w2"], ["w1"], ["w3"]], vocab)
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(4, 4)).astype(np.float32)
        examples = pair_examples(captions, feats, captions_per_image=1)
        hyper = VseHyper()
        table = export_word_concreteness(params, vocab, examples, hyper, batch_size=2)

        def occurrence(word_id, own, neg_cap_id, neg_feat):
            z = params.embeddings[word_id]
            return concreteness(
                z, own.astype(np.float64), neg_feat[None, :].astype(np.float64),
                params.embeddings[neg_cap_id][None, :], params.phi, hyper,
            )

        w1 = vocab.lookup("w1")
        expected = (
            occurrence(w1, feats[0], vocab.lookup("w2"), feats[1])
            + occurrence(w1, feats[2], vocab.lookup("w3"), feats[3])
        ) / 2.0
        assert table["w1"] == pytest.approx(expected, rel=1e-6)

    def test_oov_tokens_skipped(self):
        vocab = vocab_from_counts({"w1": 1})
        captions = encode_captions([["w1", "zzz"], ["w1"]], vocab)
        feats = np.zeros((2, 4), dtype=np.float32)
        feats[:, 0] = 1.0
        examples = pair_examples(captions, feats, captions_per_image=1)
        table = export_word_concreteness(self.id_params(), vocab, examples, VseHyper(), batch_size=2)
        assert "zzz" not in table
        assert set(table) == {"w1"}
