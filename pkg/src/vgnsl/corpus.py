"""Caption and image-feature ingestion.

Captions arrive pre-tokenized (lowercase, single-space separated); this
module never does linguistic preprocessing.  Image features travel in the
VGNF binary format documented on write_features.
"""
from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, FormatError

UNK_TOKEN = "<unk>"

FEATURE_MAGIC = b"VGNF"
FEATURE_VERSION = 1


@dataclass
class Vocabulary:
    words: List[str]  # id -> word, dense 0..V-1
    word_to_id: Dict[str, int]
    unk_id: int

    def __len__(self) -> int:
        return len(self.words)

    def lookup(self, word: str) -> int:
        return self.word_to_id.get(word, self.unk_id)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.lookup(t) for t in tokens]


@dataclass
class Caption:
    tokens: List[str]
    ids: List[int]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class PairedExample:
    caption: Caption
    image_index: int
    feature: np.ndarray  # (D,) float32


def load_captions(path) -> List[List[str]]:
    """One caption per line, tokens separated by single spaces."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            tokens = line.rstrip("\n").split(" ")
            tokens = [t for t in tokens if t]
            if not tokens:
                raise DataError(f"line {lineno}: empty caption")
            out.append(tokens)
    if not out:
        raise DataError(f"no captions in {path}")
    return out


def build_vocab(path, max_size: int = 10000, min_count: int = 1) -> Vocabulary:
    """Most frequent words up to max_size plus a reserved unknown symbol.

    Frequency ties break lexicographically so the table is deterministic.
    """
    counts: Counter = Counter()
    for tokens in load_captions(path):
        counts.update(t for t in tokens if t != UNK_TOKEN)
    return vocab_from_counts(counts, max_size=max_size, min_count=min_count)


def vocab_from_counts(
    counts: Dict[str, int], max_size: int = 10000, min_count: int = 1
) -> Vocabulary:
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [w for w, c in ranked if c >= min_count][:max_size]
    words = [UNK_TOKEN] + kept
    return Vocabulary(words, {w: i for i, w in enumerate(words)}, unk_id=0)


def encode_captions(token_lists: Iterable[Sequence[str]], vocab: Vocabulary) -> List[Caption]:
    return [Caption(list(toks), vocab.encode(toks)) for toks in token_lists]


def write_features(path, features: np.ndarray) -> None:
    """Write image features as VGNF.

    Layout: magic "VGNF", then u32 little-endian version (=1), count, dim,
    then count*dim IEEE-754 float32 little-endian values, row-major.
    """
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 2:
        raise DataError(f"feature array must be 2-D, got shape {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise DataError("feature array contains non-finite values")
    count, dim = feats.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, count, dim))
        f.write(feats.tobytes())


def load_features(path) -> np.ndarray:
    """Read a VGNF file back into a (count, dim) float32 array."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, not a VGNF file")
        head = f.read(12)
        if len(head) != 12:
            raise FormatError(f"{path}: truncated header")
        version, count, dim = struct.unpack("<III", head)
        if version != FEATURE_VERSION:
            raise FormatError(f"{path}: unsupported VGNF version {version}")
        payload = f.read(4 * count * dim)
        if len(payload) != 4 * count * dim:
            raise FormatError(
                f"{path}: truncated payload, expected {count}x{dim} float32"
            )
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    feats = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()
    if not np.all(np.isfinite(feats)):
        raise FormatError(f"{path}: non-finite feature values")
    return feats


def load_manifest(path) -> List[Tuple[int, int]]:
    """Lines of "caption_index<TAB>image_index", both 0-based."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"manifest line {lineno}: expected 2 tab-separated fields")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise DataError(f"manifest line {lineno}: non-integer index")
    return pairs


def pair_examples(
    captions: Sequence[Caption],
    features: np.ndarray,
    captions_per_image: Optional[int] = None,
    manifest: Optional[Sequence[Tuple[int, int]]] = None,
) -> List[PairedExample]:
    """Attach each caption to one image row.

    Without a manifest, caption i maps to image i // captions_per_image and
    counts must agree exactly.
    """
    n_images = features.shape[0]
    image_of = {}
    if manifest is not None:
        for cap_idx, img_idx in manifest:
            if not 0 <= cap_idx < len(captions):
                raise DataError(f"manifest caption index {cap_idx} out of range")
            if not 0 <= img_idx < n_images:
                raise DataError(f"manifest image index {img_idx} out of range")
            image_of[cap_idx] = img_idx
    if captions_per_image is not None:
        if len(captions) != captions_per_image * n_images:
            raise DataError(
                f"{len(captions)} captions cannot pair {n_images} images "
                f"at {captions_per_image} captions per image"
            )
        for i in range(len(captions)):
            image_of.setdefault(i, i // captions_per_image)
    if len(image_of) != len(captions):
        missing = next(i for i in range(len(captions)) if i not in image_of)
        raise DataError(f"caption {missing} has no image assignment")
    return [
        PairedExample(captions[i], image_of[i], features[image_of[i]])
        for i in range(len(captions))
    ]


def batches(
    examples: Sequence,
    batch_size: int,
    seed=0,
    shuffle: bool = False,
    training: bool = False,
) -> List[list]:
    """Split examples into batches; the short final batch is kept.

    Deterministic for a fixed seed.  Training mode requires batch_size >= 2
    because the contrastive sums need in-batch negatives.
    """
    if training and batch_size < 2:
        raise DataError("training batches need batch_size >= 2 for negatives")
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = np.arange(len(examples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(examples))
    return [
        [examples[j] for j in order[i : i + batch_size]]
        for i in range(0, len(examples), batch_size)
    ]


def load_word_vectors(path) -> Dict[str, np.ndarray]:
    """Pretrained vectors, one "word v1 v2 ... vK" line each."""
    table: Dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p]
            if not parts:
                continue
            if len(parts) < 2:
                raise DataError(f"word-vector line {lineno}: no values")
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError:
                raise DataError(f"word-vector line {lineno}: non-numeric value")
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise DataError(
                    f"word-vector line {lineno}: dimension {vec.shape[0]} != {dim}"
                )
            table[parts[0]] = vec
    if not table:
        raise DataError(f"no word vectors in {path}")
    return table
