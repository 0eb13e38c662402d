"""Non-neural comparison parsers.

Trivial left/right/random branching, syntactic-distance parsing driven by
negative PMI of adjacent words, and greedy parsing from per-word
concreteness scores (with the same head-initial weighting trick as the
trained model).
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import UNK_TOKEN, PairedExample, Vocabulary, batches
from .errors import DataError
from .parser import ModelParams, parse
from .trees import BinaryTree, Leaf, Node
from .vse import VseHyper, match_matrix


def trivial_tree(n: int, kind: str, rng: Optional[np.random.Generator] = None) -> BinaryTree:
    """Left-branching, right-branching, or uniformly random binary tree."""
    if n < 1:
        raise DataError("need at least one token")
    if kind == "left":
        tree: BinaryTree = Leaf(0)
        for i in range(1, n):
            tree = Node(tree, Leaf(i))
        return tree
    if kind == "right":
        tree = Leaf(n - 1)
        for i in range(n - 2, -1, -1):
            tree = Node(Leaf(i), tree)
        return tree
    if kind == "random":
        if rng is None:
            raise DataError("random trees need an rng")
        stack: List[BinaryTree] = [Leaf(i) for i in range(n)]
        while len(stack) > 1:
            j = int(rng.integers(len(stack) - 1))
            stack[j : j + 2] = [Node(stack[j], stack[j + 1])]
        return stack[0]
    raise DataError(f"unknown trivial tree kind {kind!r}")


@dataclass
class PmiStats:
    """Corpus counts for adjacent-word PMI.

    Unigrams are token counts; bigrams are adjacent pairs within a caption,
    never across captions.  Zero counts are floored at the smoothing
    constant k so distances stay finite for unseen pairs.
    """

    unigram: Counter = field(default_factory=Counter)
    bigram: Counter = field(default_factory=Counter)
    total_tokens: int = 0
    total_gaps: int = 0
    k: float = 1.0


def pmi_statistics(token_lists: Iterable[Sequence[str]], k: float = 1.0) -> PmiStats:
    stats = PmiStats(k=k)
    for tokens in token_lists:
        stats.unigram.update(tokens)
        stats.total_tokens += len(tokens)
        for a, b in zip(tokens, tokens[1:]):
            stats.bigram[(a, b)] += 1
        stats.total_gaps += max(len(tokens) - 1, 0)
    return stats


def pmi_distances(stats: PmiStats, tokens: Sequence[str]) -> List[float]:
    """Negative PMI of each adjacent pair; the syntactic distance list.

    A one-token caption yields an empty list and parses to a bare leaf.
    """
    if len(tokens) < 2:
        return []
    if stats.total_tokens == 0 or stats.total_gaps == 0:
        raise DataError("PMI statistics are empty")

    def p_unigram(w: str) -> float:
        c = stats.unigram.get(w, 0)
        return (c if c > 0 else stats.k) / stats.total_tokens

    out = []
    for a, b in zip(tokens, tokens[1:]):
        c = stats.bigram.get((a, b), 0)
        p_big = (c if c > 0 else stats.k) / stats.total_gaps
        pmi = math.log(p_big) - math.log(p_unigram(a)) - math.log(p_unigram(b))
        out.append(-pmi)
    return out


def distance_parse(distances: Sequence[float], m: int) -> BinaryTree:
    """Recursive argmax-distance splitting, ties broken leftmost.

    distances[j] sits in the gap between tokens j and j+1.
    """
    if len(distances) != m - 1:
        raise DataError(f"{len(distances)} distances cannot split {m} tokens")
    if m < 1:
        raise DataError("need at least one token")
    for d in distances:
        if not math.isfinite(d):
            raise DataError("non-finite syntactic distance")

    def build(left: int, right: int) -> BinaryTree:
        if right - left == 1:
            return Leaf(left)
        # max() keeps the first of equal keys, giving the leftmost split
        split = max(range(left, right - 1), key=lambda j: distances[j])
        return Node(build(left, split + 1), build(split + 1, right))

    return build(0, m)


def normalize_scores(
    raw: Sequence[Optional[float]], log_scores: bool = False
) -> List[float]:
    """Affine-map seen scores onto [-1, 1]; unseen words pin to -1.

    With log_scores, scores are log-transformed first (for sources on a
    multiplicative scale).  A degenerate range maps every seen score to 0.
    """
    seen = [x for x in raw if x is not None]
    if log_scores:
        if any(x <= 0 for x in seen):
            raise DataError("log preprocessing needs strictly positive scores")
        seen = [math.log(x) for x in seen]
    if seen:
        lo, hi = min(seen), max(seen)
    out: List[float] = []
    it = iter(seen)
    for x in raw:
        if x is None:
            out.append(-1.0)
        else:
            val = next(it)
            out.append(0.0 if hi == lo else 2.0 * (val - (hi + lo) / 2.0) / (hi - lo))
    return out


def concreteness_parse(scores: Sequence[float], tau: float = 20.0) -> BinaryTree:
    """Merge the adjacent pair maximizing a_j + tau * a_{j+1}, repeatedly.

    The merged constituent's score is the mean of its children; tau = 1
    recovers the plain highest-average-concreteness parser, tau > 1 weights
    the right constituent (the head-initial variant).
    """
    m = len(scores)
    if m < 1:
        raise DataError("need at least one score")
    if tau < 1:
        raise DataError("tau must be >= 1")
    stack: List[BinaryTree] = [Leaf(i) for i in range(m)]
    a = [float(x) for x in scores]
    while len(stack) > 1:
        vals = [a[j] + tau * a[j + 1] for j in range(len(a) - 1)]
        p = vals.index(max(vals))
        stack[p : p + 2] = [Node(stack[p], stack[p + 1])]
        a[p : p + 2] = [(a[p] + a[p + 1]) / 2.0]
    return stack[0]


@dataclass
class ConcretenessTable:
    scores: Dict[str, float]
    unknown_value: float = -1.0  # applied after normalization, not before

    def raw_scores(self, tokens: Sequence[str]) -> List[Optional[float]]:
        return [self.scores.get(t) for t in tokens]


def load_word_scores(path) -> ConcretenessTable:
    """word<TAB>score lines."""
    scores: Dict[str, float] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"word-score line {lineno}: expected word<TAB>score")
            try:
                scores[parts[0]] = float(parts[1])
            except ValueError:
                raise DataError(f"word-score line {lineno}: bad score {parts[1]!r}")
    if not scores:
        raise DataError(f"no scores in {path}")
    return ConcretenessTable(scores)


def save_word_scores(path, items: Iterable[Tuple[str, float]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for word, score in items:
            f.write(f"{word}\t{score!r}\n")


def parse_from_table(
    tokens: Sequence[str], table: ConcretenessTable, tau: float = 20.0, log_scores: bool = False
) -> BinaryTree:
    return concreteness_parse(normalize_scores(table.raw_scores(tokens), log_scores), tau)


def format_distance_dump(caption_index: int, distances: Sequence[float]) -> str:
    return f"{caption_index}\t" + ",".join(repr(d) for d in distances)


def export_word_concreteness(
    params: ModelParams,
    vocab: Vocabulary,
    examples: Sequence[PairedExample],
    hyper: VseHyper,
    batch_size: int = 128,
) -> Dict[str, float]:
    """Mean concreteness of each vocabulary word over its paired images.

    Captions are parsed greedily; negatives are scoped to the evaluation
    batch, mirroring training.  A word occurring twice in one caption counts
    once for that image.  Out-of-vocabulary tokens are skipped.
    """
    sums: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for batch in batches(examples, batch_size, shuffle=False):
        results = [parse(ex.caption.ids, params, mode="greedy") for ex in batch]
        all_vectors = np.concatenate([r.vectors for r in results], axis=0)
        owners = np.concatenate(
            [np.full(len(r.vectors), i, dtype=np.intp) for i, r in enumerate(results)]
        )
        offsets = np.cumsum([0] + [len(r.vectors) for r in results])
        images = np.stack([ex.feature for ex in batch]).astype(params.dtype)
        s = match_matrix(images, all_vectors, params.phi)
        n_images = s.shape[0]
        for i, ex in enumerate(batch):
            foreign_cols = owners != i
            foreign_rows = np.arange(n_images) != i
            done = set()
            for pos, (tok, tid) in enumerate(zip(ex.caption.tokens, ex.caption.ids)):
                if tid == vocab.unk_id and tok != UNK_TOKEN:
                    continue
                if tok in done:
                    continue
                done.add(tok)
                col = offsets[i] + pos
                m_own = s[i, col]
                gaps = m_own - s[i, foreign_cols] - hyper.margin_c
                conc = float(gaps[gaps > 0].sum())
                gaps = m_own - s[foreign_rows, col] - hyper.margin_c
                conc += float(gaps[gaps > 0].sum())
                sums[tok] = sums.get(tok, 0.0) + conc
                counts[tok] = counts.get(tok, 0) + 1
    return {w: sums[w] / counts[w] for w in sums}


def most_frequent_words(token_lists: Iterable[Sequence[str]], n: int) -> List[str]:
    """Top-n corpus words by frequency, ties broken lexicographically."""
    counts: Counter = Counter()
    for tokens in token_lists:
        counts.update(tokens)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [w for w, _ in ranked[:n]]
