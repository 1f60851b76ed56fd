"""Query perturbation, knowledge-base retrieval and cross-attention fusion.

A batch of query embeddings ``q`` (B, d) is jittered with Gaussian noise,
the jittered rows retrieve their top-n neighbours from a knowledge base, and
the neighbours ``v`` (B, n, d) are merged back into an enriched ``q*``::

    score = q @ v.T / sqrt(d)        # (B, 1, n)
    q*    = score @ v                # (B, d)

``literal`` mode uses the raw scores as weights; ``softmax`` mode normalizes
them over the n neighbours first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Protocol

import numpy as np

from .errors import ValidationError
from .pqkb import DEFAULT_TOP_N, KnowledgeBase, adc_search

MODES = ("literal", "softmax")


@dataclass(frozen=True)
class NoiseConfig:
    mean: float = 0.0
    var: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.var >= 0.0:
            raise ValidationError(f"noise variance must be >= 0, got {self.var}")


class Retriever(Protocol):
    def __call__(self, queries: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Return decoded neighbours ``(B, n, d)`` and their ids ``(B, n)``."""


class FusionResult(NamedTuple):
    q_star: np.ndarray  # (B, d)
    ids: np.ndarray  # (B, n)
    vectors: np.ndarray  # (B, n, d), the retrieved k == v
    weights: np.ndarray  # (B, n), scores after the mode's normalization


def _as_batch(q) -> np.ndarray:
    arr = np.asarray(q, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[1] == 1:
        arr = arr[:, 0, :]
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValidationError(f"expected a (B, d) or (B, 1, d) batch, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("embedding batch contains non-finite values")
    return arr


def perturb_query(q, noise: NoiseConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Return ``q + eps`` with ``eps ~ N(mean, var)`` i.i.d.; ``q`` is left untouched.

    The generator defaults to one seeded from ``noise.seed``.
    """
    base = _as_batch(q)
    if noise.var == 0.0 and noise.mean == 0.0:
        return base.copy()
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    return base + rng.normal(noise.mean, math.sqrt(noise.var), size=base.shape)


def attention_score(q, k) -> np.ndarray:
    """Scaled dot products between each query and its keys, shape ``(B, 1, n)``."""
    qb = _as_batch(q)
    keys = np.asarray(k, dtype=np.float64)
    if keys.ndim != 3 or keys.shape[0] != qb.shape[0] or keys.shape[2] != qb.shape[1]:
        raise ValidationError(f"keys shape {keys.shape} incompatible with queries {qb.shape}")
    d = qb.shape[1]
    return np.einsum("bd,bnd->bn", qb, keys)[:, None, :] / math.sqrt(d)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def fusion_weights(score, mode: str = "literal") -> np.ndarray:
    s = np.asarray(score, dtype=np.float64)
    if s.ndim == 3:
        s = s[:, 0, :]
    if mode == "literal":
        return s
    if mode == "softmax":
        return _softmax(s)
    raise ValidationError(f"unknown fusion mode {mode!r}")


def fuse(score, v, mode: str = "literal") -> np.ndarray:
    """Weighted sum of retrieved vectors: ``q*[b] = sum_i w[b, i] * v[b, i]``."""
    w = fusion_weights(score, mode)
    vals = np.asarray(v, dtype=np.float64)
    if vals.ndim != 3 or vals.shape[:2] != w.shape:
        raise ValidationError(f"values shape {vals.shape} does not match scores {w.shape}")
    return np.einsum("bn,bnd->bd", w, vals)


def fuse_backward(q, v, weights, grad_q_star, mode: str = "literal") -> np.ndarray:
    """Gradient of a loss w.r.t. the scoring query, given its gradient w.r.t. ``q*``.

    Retrieved vectors are constants (the retrieval argmin has no gradient).
    """
    vals = np.asarray(v, dtype=np.float64)
    g = np.asarray(grad_q_star, dtype=np.float64)
    d = vals.shape[2]
    grad_w = np.einsum("bnd,bd->bn", vals, g)
    if mode == "literal":
        grad_s = grad_w
    elif mode == "softmax":
        grad_s = weights * (grad_w - (weights * grad_w).sum(axis=1, keepdims=True))
    else:
        raise ValidationError(f"unknown fusion mode {mode!r}")
    return np.einsum("bn,bnd->bd", grad_s, vals) / math.sqrt(d)


def local_retriever(kb: KnowledgeBase) -> Callable[[np.ndarray, int], tuple[np.ndarray, np.ndarray]]:
    """Retriever backed by in-process ADC search over ``kb``."""

    def retrieve(queries: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
        vecs, ids = [], []
        for row in queries:
            res = adc_search(row, kb, n)
            vecs.append(res.vectors)
            ids.append(res.ids)
        return pad_neighbours(vecs, ids, n)

    return retrieve


def pad_neighbours(vecs, ids, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-query results, repeating the last neighbour up to ``n``."""
    out_v, out_i = [], []
    for v, i in zip(vecs, ids):
        short = n - len(i)
        if short > 0:
            v = np.concatenate([v, np.repeat(v[-1:], short, axis=0)])
            i = np.concatenate([i, np.repeat(i[-1:], short)])
        out_v.append(v)
        out_i.append(i)
    return np.stack(out_v), np.stack(out_i).astype(np.uint64)


def retrieve_and_fuse(
    q,
    kb: KnowledgeBase | Retriever,
    n: int = DEFAULT_TOP_N,
    noise: NoiseConfig | None = None,
    mode: str = "literal",
    score_with_perturbed: bool = False,
    rng: np.random.Generator | None = None,
) -> FusionResult:
    """Perturb, retrieve top-``n`` and fuse into ``q*``.

    The perturbed query only drives retrieval; scoring uses the clean ``q``
    unless ``score_with_perturbed`` is set.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown fusion mode {mode!r}")
    if n < 1:
        raise ValidationError("n must be >= 1")
    qb = _as_batch(q)
    retrieve = local_retriever(kb) if isinstance(kb, KnowledgeBase) else kb
    if isinstance(kb, KnowledgeBase) and kb.d != qb.shape[1]:
        raise ValidationError(f"knowledge base d={kb.d} != query d={qb.shape[1]}")
    q_tilde = perturb_query(qb, noise if noise is not None else NoiseConfig(), rng)
    vectors, ids = retrieve(q_tilde, n)
    scorer = q_tilde if score_with_perturbed else qb
    score = attention_score(scorer, vectors)
    weights = fusion_weights(score, mode)
    q_star = np.einsum("bn,bnd->bd", weights, vectors)
    return FusionResult(q_star, ids, vectors, weights)
