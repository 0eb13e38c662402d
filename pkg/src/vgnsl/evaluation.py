"""Bracket evaluation: corpus F1, label recall, self-F1, model selection.

All scores are micro-averaged: bracket counts are summed over the corpus
before any ratio is taken, never averaged per sentence.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, DegenerateInputError
from .trees import LabeledTree, SpanPolicy, labeled_spans, spans_of, token_count


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    matched: int
    n_predicted: int
    n_gold: int
    n_sentences: int
    per_label: Dict[str, Optional[float]] = field(default_factory=dict)


def _check_alignment(pred_trees: Sequence, gold_trees: Sequence) -> None:
    if len(pred_trees) != len(gold_trees):
        raise DataError(
            f"{len(pred_trees)} predicted trees vs {len(gold_trees)} gold trees"
        )
    for lineno, (p, g) in enumerate(zip(pred_trees, gold_trees), 1):
        np_, ng = token_count(p), token_count(g)
        if np_ != ng:
            raise DataError(
                f"line {lineno}: token count mismatch (predicted {np_}, gold {ng})"
            )


def _ratio(matched: int, total: int, other_total: int) -> float:
    if total > 0:
        return matched / total
    return 1.0 if other_total == 0 else 0.0


def corpus_f1(
    pred_trees: Sequence,
    gold_trees: Sequence,
    policy: SpanPolicy = SpanPolicy.EXCLUDE_TRIVIAL,
) -> EvalReport:
    """Micro-averaged bracket precision/recall/F1 across the corpus."""
    _check_alignment(pred_trees, gold_trees)
    matched = n_pred = n_gold = 0
    for p, g in zip(pred_trees, gold_trees):
        ps = spans_of(p, policy)
        gs = spans_of(g, policy)
        matched += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    precision = _ratio(matched, n_pred, n_gold)
    recall = _ratio(matched, n_gold, n_pred)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return EvalReport(precision, recall, f1, matched, n_pred, n_gold, len(pred_trees))


def label_recall(
    pred_trees: Sequence, gold_trees: Sequence[LabeledTree], label: str
) -> Optional[float]:
    """Fraction of gold `label` spans found in the predicted trees.

    Predicted spans include single tokens and the root, so length-1 gold
    phrases always match.  Returns None when the label never occurs.
    """
    _check_alignment(pred_trees, gold_trees)
    matched = total = 0
    for p, g in zip(pred_trees, gold_trees):
        gold = labeled_spans(g, label)
        if not gold:
            continue
        pred = spans_of(p, SpanPolicy.ALL)
        matched += len(gold & pred)
        total += len(gold)
    return matched / total if total else None


def evaluate(
    pred_trees: Sequence,
    gold_trees: Sequence[LabeledTree],
    labels: Sequence[str] = ("NP", "VP", "PP", "ADJP"),
    policy: SpanPolicy = SpanPolicy.EXCLUDE_TRIVIAL,
) -> EvalReport:
    report = corpus_f1(pred_trees, gold_trees, policy)
    report.per_label = {lab: label_recall(pred_trees, gold_trees, lab) for lab in labels}
    return report


def self_f1(
    runs: Sequence[Sequence],
    policy: SpanPolicy = SpanPolicy.EXCLUDE_TRIVIAL,
) -> float:
    """Mean corpus F1 over all unordered pairs of runs."""
    if len(runs) < 2:
        raise DataError("self-F1 needs at least 2 runs")
    values = [
        corpus_f1(a, b, policy).f1 for a, b in itertools.combinations(runs, 2)
    ]
    return float(np.mean(values))


Grid = Sequence[Sequence[Sequence]]  # runs x checkpoints x sentences


def _pairwise_f1(grid: Grid, policy: SpanPolicy) -> Dict[Tuple[int, int, int, int], float]:
    """F1 between checkpoint j of run i and checkpoint l of run k, i < k."""
    table: Dict[Tuple[int, int, int, int], float] = {}
    for i, k in itertools.combinations(range(len(grid)), 2):
        for j, trees_i in enumerate(grid[i]):
            for l, trees_k in enumerate(grid[k]):
                table[(i, j, k, l)] = corpus_f1(trees_i, trees_k, policy).f1
    return table


def tune_objective(
    grid: Grid,
    window: int = 2,
    policy: SpanPolicy = SpanPolicy.EXCLUDE_TRIVIAL,
) -> float:
    """Sum over run pairs of the best F1 among nearby checkpoints.

    Nearby means |j_i - j_k| < window; each pair maximizes independently.
    """
    if len(grid) < 2 or any(len(run) == 0 for run in grid):
        raise DataError("the checkpoint grid needs >= 2 runs, each non-empty")
    table = _pairwise_f1(grid, policy)
    total = 0.0
    for i, k in itertools.combinations(range(len(grid)), 2):
        candidates = [
            table[(i, j, k, l)]
            for j in range(len(grid[i]))
            for l in range(len(grid[k]))
            if abs(j - l) < window
        ]
        if not candidates:
            raise DataError(f"no checkpoint pairs within window {window} for runs {i},{k}")
        total += max(candidates)
    return total


def _tuple_score(table, indices: Sequence[int]) -> float:
    return sum(
        table[(i, indices[i], k, indices[k])]
        for i, k in itertools.combinations(range(len(indices)), 2)
    )


def select_checkpoints(
    grid: Grid,
    policy: SpanPolicy = SpanPolicy.EXCLUDE_TRIVIAL,
    exhaustive_limit: int = 100_000,
    restarts: int = 10,
    seed: int = 0,
) -> Tuple[List[int], float]:
    """Joint argmax of summed pairwise F1 over one checkpoint per run.

    Exhaustive below exhaustive_limit tuples; otherwise coordinate ascent
    from a per-pair-best start plus seeded random restarts.  Ties resolve to
    the lexicographically first tuple.
    """
    if len(grid) < 2 or any(len(run) == 0 for run in grid):
        raise DataError("the checkpoint grid needs >= 2 runs, each non-empty")
    table = _pairwise_f1(grid, policy)
    sizes = [len(run) for run in grid]
    n_tuples = math.prod(sizes)
    if n_tuples <= exhaustive_limit:
        best_idx, best_val = None, -math.inf
        for combo in itertools.product(*(range(s) for s in sizes)):
            val = _tuple_score(table, combo)
            if val > best_val:
                best_idx, best_val = list(combo), val
        return best_idx, best_val

    def ascend(start: List[int]) -> Tuple[List[int], float]:
        current = list(start)
        value = _tuple_score(table, current)
        improved = True
        while improved:
            improved = False
            for i in range(len(sizes)):
                best_j, best_v = current[i], value
                for j in range(sizes[i]):
                    trial = current[:i] + [j] + current[i + 1 :]
                    v = _tuple_score(table, trial)
                    if v > best_v:
                        best_j, best_v = j, v
                if best_j != current[i]:
                    current[i] = best_j
                    value = best_v
                    improved = True
        return current, value

    # start where each run's checkpoint is individually most agreeable
    start = []
    for i in range(len(sizes)):
        def row_score(j):
            total = 0.0
            for k in range(len(sizes)):
                if k == i:
                    continue
                lo, hi = (i, k) if i < k else (k, i)
                total += max(
                    table[(lo, j if lo == i else l, hi, l if hi == k else j)]
                    for l in range(sizes[k])
                )
            return total
        start.append(max(range(sizes[i]), key=row_score))
    best_idx, best_val = ascend(start)
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        cand, val = ascend([int(rng.integers(s)) for s in sizes])
        if val > best_val or (val == best_val and cand < best_idx):
            best_idx, best_val = cand, val
    return best_idx, best_val


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    if len(x) != len(y):
        raise DataError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise DataError("need at least 2 points")
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sx = np.sqrt(np.sum(dx * dx))
    sy = np.sqrt(np.sum(dy * dy))
    if sx == 0 or sy == 0:
        raise DegenerateInputError("zero variance in correlation input")
    return float(np.sum(dx * dy) / (sx * sy))
