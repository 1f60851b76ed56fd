"""Decoupled contrastive loss and its analytic gradient.

For anchor ``a_i`` with positive ``p_i`` and negatives ``N(i)``::

    loss_i = -<a_i, p_i>/tau + log sum_{n in N(i)} exp(<a_i, n>/tau)

The positive pair is left out of the normalizer. The reported loss averages
the anchor->positive direction with the positive->anchor direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ValidationError

NEGATIVE_POLICIES = ("positives", "all")
DEFAULT_TAU = 0.1


@dataclass
class DCLCache:
    anchors: np.ndarray
    positives: np.ndarray
    tau: float
    policy: str
    # softmax weights over negatives, one matrix per (direction, pool)
    w_ap: np.ndarray
    w_pa: np.ndarray
    w_aa: np.ndarray | None
    w_pp: np.ndarray | None


class DCLResult(NamedTuple):
    loss: float
    per_sample: np.ndarray
    similarity: np.ndarray  # (B, B), anchors @ positives.T
    cache: DCLCache


def _masked_lse(logits: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-sum-exp over ``mask`` entries, plus the softmax weights."""
    z = np.where(mask, logits, -np.inf)
    mx = z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z - mx), 0.0)
    s = e.sum(axis=1, keepdims=True)
    return (mx + np.log(s))[:, 0], e / s


def _lse_two(l1, l2, mask):
    logits = np.concatenate([l1, l2], axis=1)
    full_mask = np.concatenate([mask, mask], axis=1)
    lse, w = _masked_lse(logits, full_mask)
    b = l1.shape[1]
    return lse, w[:, :b], w[:, b:]


def dcl_loss(anchors, positives, tau: float = DEFAULT_TAU, negatives: str = "positives") -> DCLResult:
    """Symmetrized DCL over a batch of ``B`` paired rows.

    ``negatives="positives"`` uses the other rows of the opposite view
    (K = B - 1); ``"all"`` also adds the other rows of the same view
    (K = 2B - 2). Rows are expected to be L2-normalized by the caller; the
    loss itself works on raw dot products.
    """
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    if a.ndim != 2 or a.shape != p.shape:
        raise ValidationError(f"anchor/positive shapes differ: {a.shape} vs {p.shape}")
    bsz = a.shape[0]
    if bsz < 2:
        raise ValidationError("DCL needs B >= 2 so every anchor has a negative")
    if not tau > 0:
        raise ValidationError(f"temperature must be > 0, got {tau}")
    if negatives not in NEGATIVE_POLICIES:
        raise ValidationError(f"unknown negatives policy {negatives!r}")

    sim = a @ p.T
    off = ~np.eye(bsz, dtype=bool)
    pos = np.diag(sim) / tau
    if negatives == "positives":
        lse_a, w_ap = _masked_lse(sim / tau, off)
        lse_p, w_pa = _masked_lse(sim.T / tau, off)
        w_aa = w_pp = None
    else:
        lse_a, w_ap, w_aa = _lse_two(sim / tau, (a @ a.T) / tau, off)
        lse_p, w_pa, w_pp = _lse_two(sim.T / tau, (p @ p.T) / tau, off)
    per_sample = 0.5 * ((lse_a - pos) + (lse_p - pos))
    cache = DCLCache(a, p, float(tau), negatives, w_ap, w_pa, w_aa, w_pp)
    return DCLResult(float(per_sample.mean()), per_sample, sim, cache)


def dcl_loss_backward(cache: DCLCache) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the mean loss w.r.t. anchors and positives."""
    a, p, tau = cache.anchors, cache.positives, cache.tau
    bsz = a.shape[0]
    if cache.w_ap.shape != (bsz, bsz):
        raise ValidationError("cache does not match its stored batch")
    scale = 0.5 / (bsz * tau)
    # d loss / d sim, where sim = a @ p.T
    g_sim = scale * (cache.w_ap + cache.w_pa.T - 2.0 * np.eye(bsz))
    grad_a = g_sim @ p
    grad_p = g_sim.T @ a
    if cache.policy == "all":
        g_aa = scale * cache.w_aa
        g_pp = scale * cache.w_pp
        grad_a += (g_aa + g_aa.T) @ a
        grad_p += (g_pp + g_pp.T) @ p
    return grad_a, grad_p
