"""Shared test utilities: controlled geometry and tiny corpora."""
import numpy as np

from vgnsl import corpus as cp


def unit_with_cos(anchor: np.ndarray, target_cos: float, tilt=None) -> np.ndarray:
    """Unit vector whose cosine with `anchor` is target_cos."""
    a = anchor / np.linalg.norm(anchor)
    t = np.asarray(tilt if tilt is not None else np.arange(1.0, len(a) + 1.0))
    w = t - np.dot(t, a) * a
    w = w / np.linalg.norm(w)
    return target_cos * a + np.sqrt(1.0 - target_cos**2) * w


def toy_examples(n=12, n_words=8, dim=6, seed=0):
    """Tiny paired corpus with random features; returns (examples, vocab)."""
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(n_words)]
    vocab = cp.vocab_from_counts({w: 1 for w in words})
    lines = [
        [words[int(j)] for j in rng.integers(0, n_words, size=int(rng.integers(2, 6)))]
        for _ in range(n)
    ]
    captions = cp.encode_captions(lines, vocab)
    feats = rng.normal(size=(n, dim)).astype(np.float32)
    return cp.pair_examples(captions, feats, captions_per_image=1), vocab
