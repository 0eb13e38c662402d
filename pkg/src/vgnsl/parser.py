"""Easy-first bottom-up parser.

A caption of n tokens is parsed in n-1 steps.  Each step scores every
adjacent pair of constituents with a two-layer feed-forward net, picks one
pair (softmax sample during training, argmax at test time), and replaces it
by the L2-normalized sum of the two vectors.  The full derivation covers
2n-1 constituents counting the words themselves.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, DegenerateInputError
from .trees import BinaryTree, Leaf, Node


@dataclass
class ModelParams:
    embeddings: np.ndarray  # (V, d)
    w1: np.ndarray  # (2d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h,)
    b2: np.ndarray  # (1,)
    phi: np.ndarray  # (D, d), image features map in as v @ phi
    unk_id: int = 0
    pretrained_dim: int = 0  # leading frozen embedding columns (0 = none)
    normalize_embeddings: bool = True

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.b1.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.phi.shape[0]

    @property
    def dtype(self):
        return self.embeddings.dtype


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(
    vocab_size: int,
    embed_dim: int = 512,
    hidden_dim: int = 128,
    feature_dim: int = 2048,
    rng: Optional[np.random.Generator] = None,
    dtype=np.float32,
    normalize_embeddings: bool = True,
    word_vectors: Optional[dict] = None,
    vocab_words: Optional[Sequence[str]] = None,
    unk_id: int = 0,
) -> ModelParams:
    """Seed-controlled initialization.

    Embeddings start uniform in [-0.1, 0.1]; the score net and the visual
    map use Glorot-style uniform ranges.  When `word_vectors` is given, the
    leading columns are overwritten with the pretrained values for words
    present in the table and that slice is frozen for every row except the
    unknown word's.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    emb = rng.uniform(-0.1, 0.1, size=(vocab_size, embed_dim)).astype(dtype)
    params = ModelParams(
        embeddings=emb,
        w1=_glorot(rng, 2 * embed_dim, hidden_dim, (2 * embed_dim, hidden_dim), dtype),
        b1=np.zeros(hidden_dim, dtype=dtype),
        w2=_glorot(rng, hidden_dim, 1, (hidden_dim,), dtype),
        b2=np.zeros(1, dtype=dtype),
        phi=_glorot(rng, feature_dim, embed_dim, (feature_dim, embed_dim), dtype),
        unk_id=unk_id,
        normalize_embeddings=normalize_embeddings,
    )
    if word_vectors is not None:
        if vocab_words is None:
            raise DataError("word_vectors requires the vocabulary word list")
        pdim = len(next(iter(word_vectors.values())))
        if pdim >= embed_dim:
            raise DataError(
                f"pretrained dimension {pdim} must be < embed_dim {embed_dim}"
            )
        for i, word in enumerate(vocab_words):
            vec = word_vectors.get(word)
            if vec is not None and i != unk_id:
                params.embeddings[i, :pdim] = np.asarray(vec, dtype=dtype)
        params.pretrained_dim = pdim
    return params


def embed_tokens(token_ids: Sequence[int], params: ModelParams) -> np.ndarray:
    """One row per token; rows are L2-normalized at lookup unless disabled."""
    rows = params.embeddings[np.asarray(token_ids, dtype=np.intp)].copy()
    if not params.normalize_embeddings:
        return rows
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0):
        bad = int(np.argmin(norms))
        raise DegenerateInputError(
            f"token id {token_ids[bad]} has a zero embedding row"
        )
    return rows / norms[:, None]


def score_pairs(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Scores for the k-1 adjacent pairs of the k constituents in x."""
    if x.shape[0] < 2:
        raise DataError("need at least 2 constituents to score pairs")
    u = np.concatenate([x[:-1], x[1:]], axis=1)
    hidden = np.maximum(u @ params.w1 + params.b1, 0)
    return hidden @ params.w2 + params.b2[0]


def log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores)
    return shifted - np.log(np.sum(np.exp(shifted)))


def select_pair(
    scores: np.ndarray,
    mode: str = "greedy",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[int, float]:
    """Pick a pair index and return it with its log-probability.

    Sample mode draws from the softmax over scores; greedy takes the argmax,
    ties broken leftmost.
    """
    scores = np.asarray(scores)
    if scores.size == 0:
        raise DataError("no pair scores to select from")
    if not np.all(np.isfinite(scores)):
        raise DegenerateInputError("non-finite pair scores")
    logp = log_softmax(scores.astype(np.float64))
    if mode == "greedy":
        j = int(np.argmax(scores))
    elif mode == "sample":
        if rng is None:
            raise DataError("sample mode needs an rng")
        probs = np.exp(logp)
        probs /= probs.sum()
        j = int(rng.choice(scores.size, p=probs))
    else:
        raise DataError(f"unknown selection mode {mode!r}")
    return j, float(logp[j])


def combine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """L2-normalized sum of two constituent vectors."""
    s = a + b
    norm = np.linalg.norm(s)
    if norm == 0:
        raise DegenerateInputError("constituent sum cancels to the zero vector")
    return s / norm


@dataclass
class TraceStep:
    index: int  # chosen pair position on the stack at this step
    log_prob: float
    vector: np.ndarray  # composed constituent, unit norm
    span: Tuple[int, int]
    inputs: np.ndarray  # (k, d) stack before the merge; REINFORCE needs it
    scores: np.ndarray  # (k-1,) pair scores at this step


@dataclass
class ParseResult:
    tree: BinaryTree
    steps: List[TraceStep] = field(default_factory=list)
    vectors: np.ndarray = None  # (2n-1, d): leaves first, then creation order
    children: List[Tuple[int, int]] = field(default_factory=list)
    # children[t] gives the vector-row indices merged at step t; row n+t is
    # the result.


def parse(
    token_ids: Sequence[int],
    params: ModelParams,
    mode: str = "greedy",
    rng: Optional[np.random.Generator] = None,
    forced: Optional[Sequence[int]] = None,
) -> ParseResult:
    """Run the full score-select-combine derivation for one caption.

    `forced` overrides selection with a fixed choice per step (log-probs are
    still reported for the policy); used to enumerate merge sequences.
    """
    n = len(token_ids)
    if n < 1:
        raise DataError("cannot parse an empty caption")
    leaf_vecs = embed_tokens(token_ids, params)
    all_vectors = [leaf_vecs[i] for i in range(n)]
    stack_trees: List[BinaryTree] = [Leaf(i) for i in range(n)]
    stack_spans = [(i, i + 1) for i in range(n)]
    stack_rows = list(range(n))
    stack_vecs = [leaf_vecs[i] for i in range(n)]
    steps: List[TraceStep] = []
    children: List[Tuple[int, int]] = []
    for t in range(n - 1):
        x = np.stack(stack_vecs)
        scores = score_pairs(x, params)
        if forced is not None:
            j = forced[t]
            logp = float(log_softmax(scores.astype(np.float64))[j])
        else:
            j, logp = select_pair(scores, mode, rng)
        vec = combine(stack_vecs[j], stack_vecs[j + 1])
        span = (stack_spans[j][0], stack_spans[j + 1][1])
        steps.append(TraceStep(j, logp, vec, span, x, scores))
        children.append((stack_rows[j], stack_rows[j + 1]))
        all_vectors.append(vec)
        stack_trees[j : j + 2] = [Node(stack_trees[j], stack_trees[j + 1])]
        stack_spans[j : j + 2] = [span]
        stack_vecs[j : j + 2] = [vec]
        stack_rows[j : j + 2] = [n + t]
    return ParseResult(
        tree=stack_trees[0],
        steps=steps,
        vectors=np.stack(all_vectors),
        children=children,
    )


def compose_vectors(
    token_ids: Sequence[int],
    children: Sequence[Tuple[int, int]],
    params: ModelParams,
) -> np.ndarray:
    """Rebuild all 2n-1 constituent vectors of a fixed tree structure.

    Used wherever representations must be re-derived under different
    parameters than the ones that sampled the tree.
    """
    n = len(token_ids)
    vecs = np.zeros((2 * n - 1, params.embed_dim), dtype=params.dtype)
    vecs[:n] = embed_tokens(token_ids, params)
    for t, (a, b) in enumerate(children):
        vecs[n + t] = combine(vecs[a], vecs[b])
    return vecs
