"""Visual-semantic matching: the ranking loss, concreteness, and rewards.

The matching score between an image vector v and a constituent vector c is
the cosine of (v @ phi) and c.  All contrastive sums range over the current
minibatch.  Gradients are derived by hand; vse_backward only ever touches
phi and the embedding table, never the score net.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, DegenerateInputError
from .parser import ModelParams, combine

# NumPy >= 2 keeps float32 arithmetic in float32 under NEP 50; hyper margins
# are plain Python floats and do not upcast.


@dataclass
class VseHyper:
    margin: float = 0.2  # ranking-loss margin
    margin_c: float = 0.2  # concreteness/abstractness margin
    hi_weight: float = 20.0  # head-initial penalty weight

    def __post_init__(self):
        if self.margin < 0 or self.margin_c < 0 or self.hi_weight < 0:
            raise DataError("margins and the head-initial weight must be >= 0")


@dataclass
class GradientSet:
    d_embeddings: np.ndarray
    d_w1: np.ndarray
    d_b1: np.ndarray
    d_w2: np.ndarray
    d_b2: np.ndarray
    d_phi: np.ndarray

    @classmethod
    def zeros(cls, params: ModelParams) -> "GradientSet":
        return cls(
            d_embeddings=np.zeros_like(params.embeddings),
            d_w1=np.zeros_like(params.w1),
            d_b1=np.zeros_like(params.b1),
            d_w2=np.zeros_like(params.w2),
            d_b2=np.zeros_like(params.b2),
            d_phi=np.zeros_like(params.phi),
        )


@dataclass
class EncodedCaption:
    """A caption with a fixed tree structure and its constituent vectors."""

    token_ids: Sequence[int]
    children: Sequence[Tuple[int, int]]
    vectors: np.ndarray  # (2n-1, d)


def map_images(features: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return np.atleast_2d(features) @ phi


def _unit_rows(x: np.ndarray, what: str) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError(f"zero-norm {what} vector")
    return x / norms[:, None], norms


def cosine(u: np.ndarray, c: np.ndarray) -> float:
    nu = np.linalg.norm(u)
    nc = np.linalg.norm(c)
    if nu == 0 or nc == 0:
        raise DegenerateInputError("cosine of a zero-norm vector")
    return float(np.dot(u, c) / (nu * nc))


def match_score(v: np.ndarray, c: np.ndarray, phi: np.ndarray) -> float:
    """cos(phi-mapped image vector, constituent vector), in [-1, 1]."""
    return cosine(v @ phi, c)


def match_matrix(images: np.ndarray, constituents: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """All pairwise matching scores; rows are images, columns constituents."""
    un, _ = _unit_rows(map_images(images, phi), "mapped image")
    cn, _ = _unit_rows(constituents, "constituent")
    return un @ cn.T


def _stack_constituents(
    caption_vectors: Sequence[np.ndarray],
) -> Tuple[np.ndarray, np.ndarray]:
    if len(caption_vectors) == 0:
        raise DataError("batch has no captions")
    owners = np.concatenate(
        [np.full(len(v), i, dtype=np.intp) for i, v in enumerate(caption_vectors)]
    )
    return np.concatenate(list(caption_vectors), axis=0), owners


def _ranking_hinges(
    s: np.ndarray, owners: np.ndarray, margin: float
) -> Tuple[float, np.ndarray]:
    """Loss value and dL/dS for the two contrastive sums.

    Image-anchored terms compare every foreign constituent against every own
    constituent of the same image; caption-anchored terms compare each
    constituent's score under foreign images against its own image.  Hinge
    terms sitting exactly at zero contribute nothing to the gradient.
    """
    n_images, n_cols = s.shape
    ds = np.zeros_like(s)
    loss = 0.0
    cols = np.arange(n_cols)
    for i in range(n_images):
        own = cols[owners == i]
        foreign = cols[owners != i]
        if own.size == 0 or foreign.size == 0:
            continue
        diff = s[i, foreign][:, None] - s[i, own][None, :] + margin
        active = diff > 0
        loss += float(diff[active].sum())
        ds[i, foreign] += active.sum(axis=1)
        ds[i, own] -= active.sum(axis=0)
    matched = s[owners, cols]
    diff = s - matched[None, :] + margin
    active = diff > 0
    active[owners, cols] = False
    loss += float(diff[active].sum())
    ds += active
    ds[owners, cols] -= active.sum(axis=0)
    return loss, ds


def vse_loss(
    caption_vectors: Sequence[np.ndarray],
    images: np.ndarray,
    phi: np.ndarray,
    hyper: VseHyper,
) -> float:
    """Hinge-based triplet ranking loss over all in-batch constituents."""
    constituents, owners = _stack_constituents(caption_vectors)
    if images.shape[0] != len(caption_vectors):
        raise DataError("one image per caption required")
    s = match_matrix(images, constituents, phi)
    loss, _ = _ranking_hinges(s, owners, hyper.margin)
    return loss


def vse_backward(
    encodings: Sequence[EncodedCaption],
    images: np.ndarray,
    params: ModelParams,
    hyper: VseHyper,
) -> Tuple[float, GradientSet]:
    """Loss plus its exact gradient w.r.t. phi and the embedding table.

    The constituent-side gradient flows through every L2 normalization of
    the tree structure recorded in each encoding, down to the embedding rows
    of the tokens present in the batch.
    """
    constituents, owners = _stack_constituents([e.vectors for e in encodings])
    if images.shape[0] != len(encodings):
        raise DataError("one image per caption required")
    u = map_images(images, params.phi)
    un, nu = _unit_rows(u, "mapped image")
    cn, nc = _unit_rows(constituents, "constituent")
    s = un @ cn.T
    loss, ds = _ranking_hinges(s, owners, hyper.margin)
    grads = GradientSet.zeros(params)
    if not np.any(ds):
        return loss, grads

    dun = ds @ cn
    dcn = ds.T @ un
    du = (dun - np.sum(dun * un, axis=1, keepdims=True) * un) / nu[:, None]
    dc = (dcn - np.sum(dcn * cn, axis=1, keepdims=True) * cn) / nc[:, None]
    if not np.all(np.isfinite(du)) or not np.all(np.isfinite(dc)):
        raise DegenerateInputError("non-finite intermediate in vse_backward")
    grads.d_phi += np.atleast_2d(images).T @ du

    offset = 0
    for enc in encodings:
        n = len(enc.token_ids)
        g = dc[offset : offset + len(enc.vectors)].copy()
        offset += len(enc.vectors)
        # composed nodes in reverse creation order, then the leaves
        for t in range(len(enc.children) - 1, -1, -1):
            a, b = enc.children[t]
            z = enc.vectors[n + t]
            norm = np.linalg.norm(enc.vectors[a] + enc.vectors[b])
            gz = (g[n + t] - np.dot(g[n + t], z) * z) / norm
            g[a] += gz
            g[b] += gz
        if params.normalize_embeddings:
            rows = params.embeddings[np.asarray(enc.token_ids, dtype=np.intp)]
            norms = np.linalg.norm(rows, axis=1)
            for i, tok in enumerate(enc.token_ids):
                x = enc.vectors[i]
                grads.d_embeddings[tok] += (g[i] - np.dot(g[i], x) * x) / norms[i]
        else:
            for i, tok in enumerate(enc.token_ids):
                grads.d_embeddings[tok] += g[i]
    return loss, grads


def _relu_sum(x: np.ndarray) -> float:
    return float(x[x > 0].sum())


def _negative_scores(
    z: np.ndarray,
    v_own: np.ndarray,
    neg_images: Optional[np.ndarray],
    neg_constituents: Optional[np.ndarray],
    phi: np.ndarray,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """(own match, foreign constituents vs own image, z vs foreign images)."""
    u_own = v_own @ phi
    m_own = cosine(u_own, z)
    m_cons = np.zeros(0)
    m_imgs = np.zeros(0)
    if neg_constituents is not None and len(neg_constituents) > 0:
        cn, _ = _unit_rows(np.atleast_2d(neg_constituents), "constituent")
        m_cons = cn @ (u_own / np.linalg.norm(u_own))
    if neg_images is not None and len(neg_images) > 0:
        un, _ = _unit_rows(map_images(neg_images, phi), "mapped image")
        m_imgs = un @ (z / np.linalg.norm(z))
    return m_own, m_cons, m_imgs


def concreteness(
    z: np.ndarray,
    v_own: np.ndarray,
    neg_images: Optional[np.ndarray],
    neg_constituents: Optional[np.ndarray],
    phi: np.ndarray,
    hyper: VseHyper,
) -> float:
    """Summed hinge margins of z's own-image match over in-batch negatives.

    Both sums are empty when the batch holds no other caption, giving 0.
    """
    m_own, m_cons, m_imgs = _negative_scores(z, v_own, neg_images, neg_constituents, phi)
    return _relu_sum(m_own - m_cons - hyper.margin_c) + _relu_sum(
        m_own - m_imgs - hyper.margin_c
    )


def abstractness(
    z: np.ndarray,
    v_own: np.ndarray,
    neg_images: Optional[np.ndarray],
    neg_constituents: Optional[np.ndarray],
    phi: np.ndarray,
    hyper: VseHyper,
) -> float:
    """Hinge sums rewarding z for matching its image *worse* than negatives."""
    m_own, m_cons, m_imgs = _negative_scores(z, v_own, neg_images, neg_constituents, phi)
    return _relu_sum(m_cons - m_own + hyper.margin_c) + _relu_sum(
        m_imgs - m_own + hyper.margin_c
    )


def reward(
    x_left: np.ndarray,
    x_right: np.ndarray,
    v_own: np.ndarray,
    neg_images: Optional[np.ndarray],
    neg_constituents: Optional[np.ndarray],
    phi: np.ndarray,
    hyper: VseHyper,
) -> float:
    """Concreteness of the combined constituent."""
    z = combine(x_left, x_right)
    return concreteness(z, v_own, neg_images, neg_constituents, phi, hyper)


def reward_hi(
    x_left: np.ndarray,
    x_right: np.ndarray,
    v_own: np.ndarray,
    neg_images: Optional[np.ndarray],
    neg_constituents: Optional[np.ndarray],
    phi: np.ndarray,
    hyper: VseHyper,
) -> float:
    """Head-initial variant: divide by the right constituent's abstractness.

    The abstractness argument is the right constituent *before* combination,
    so absorbing an abstract word leftward is discouraged.
    """
    r = reward(x_left, x_right, v_own, neg_images, neg_constituents, phi, hyper)
    a = abstractness(x_right, v_own, neg_images, neg_constituents, phi, hyper)
    return r / (hyper.hi_weight * a + 1.0)
