"""Similarities, hard-pair mining and the training objectives.

Every loss here is a fused op on the similarity matrix (or the logits)
with a hand-written gradient. Pair selection is treated as a constant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError
from .tensor import Tensor, add, gram, scale, softmax_cross_entropy

ALTERNATE_KINDS = ("contrastive", "triplet", "lifted")
DEFAULT_MARGINS = {"contrastive": 0.5, "triplet": 0.1, "lifted": 1.0}


@dataclass(frozen=True)
class LossHyper:
    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 1.0
    eps: float = 0.1
    eta: float = 0.1
    margin: float | None = None

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.eps < 0 or self.eta < 0:
            raise ValueError("eps and eta must be non-negative")


@dataclass
class MinedPairs:
    """Boolean [n, n] masks; row i holds anchor i's chosen partners."""

    pos: np.ndarray
    neg: np.ndarray

    def positives(self, i: int) -> set[int]:
        return set(np.flatnonzero(self.pos[i]).tolist())

    def negatives(self, i: int) -> set[int]:
        return set(np.flatnonzero(self.neg[i]).tolist())

    @property
    def n_pos(self) -> int:
        return int(self.pos.sum())

    @property
    def n_neg(self) -> int:
        return int(self.neg.sum())


def similarity_matrix(emb: Tensor) -> Tensor:
    """Cosine similarities of unit rows, exactly symmetric."""
    return gram(emb)


def mine_pairs(S, labels, eps: float) -> MinedPairs:
    """Select hard pairs per anchor with strict margin inequalities.

    A negative j is kept when S_ij exceeds the anchor's hardest positive
    similarity minus ``eps``; a positive j is kept when S_ij is below the
    hardest negative similarity plus ``eps``. The anchor itself never
    counts as its own positive.
    """
    s = S.data if isinstance(S, Tensor) else np.asarray(S)
    s = np.ascontiguousarray(s, dtype=np.float64)
    y = np.ascontiguousarray(labels, dtype=np.int64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] != y.shape[0]:
        raise DimensionError(f"mine_pairs: S {s.shape} vs {y.shape[0]} labels")
    if s.shape[0] < 2:
        raise ValueError("mine_pairs needs at least two points")
    pos, neg = kernels.mine_masks(s, y, float(eps))
    return MinedPairs(pos, neg)


def _log1p_sum_exp(a: np.ndarray, mask: np.ndarray):
    """Row-wise log(1 + sum_{mask} exp(a)) and the softmax weights of the terms."""
    a = np.where(mask, a, -np.inf)
    m = np.maximum(a.max(axis=1, keepdims=True), 0.0)
    e = np.where(mask, np.exp(a - m), 0.0)
    lse = m + np.log(np.exp(-m) + e.sum(axis=1, keepdims=True))
    w = np.where(mask, np.exp(a - lse), 0.0)
    return lse[:, 0], w


def multi_similarity_loss(S: Tensor, pairs: MinedPairs, hyper: LossHyper = LossHyper(),
                          reduction: str = "sum") -> Tensor:
    """Multi-similarity loss summed over anchors (``reduction="mean"`` divides by n)."""
    if pairs.pos.shape != S.shape:
        raise DimensionError(f"pairs {pairs.pos.shape} do not match S {S.shape}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    s = S.data.astype(np.float64)
    a, b, lam = hyper.alpha, hyper.beta, hyper.lam
    lp, wp = _log1p_sum_exp(-a * (s - lam), pairs.pos)
    ln, wn = _log1p_sum_exp(b * (s - lam), pairs.neg)
    total = (lp / a + ln / b).sum()
    div = s.shape[0] if reduction == "mean" else 1
    dS = ((wn - wp) / div).astype(S.dtype)

    def back(g):
        return (g * dS,)

    return Tensor._wrap(np.asarray(total / div, dtype=S.dtype), (S,), back)


def rotation_loss(logits: Tensor, z) -> Tensor:
    """Cross-entropy summed over all 4m rotated copies, divided by m."""
    if logits.shape[0] % 4:
        raise ValueError(f"rotation batch has {logits.shape[0]} rows, not a multiple of 4")
    return scale(softmax_cross_entropy(logits, z), 4.0)


def combined_loss(l_ms: Tensor, l_rot: Tensor, eta: float) -> Tensor:
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    return add(l_ms, scale(l_rot, eta))


def _contrastive(s, pairs, margin):
    hinge = s - margin
    active = pairs.neg & (hinge > 0)
    value = np.where(pairs.pos, 1.0 - s, 0.0).sum() + np.where(active, hinge, 0.0).sum()
    grad = -pairs.pos.astype(np.float64) + active
    return value, grad


def _triplet(s, pairs, margin):
    # t[i, p, q] = S_iq - S_ip + margin over mined (anchor, positive, negative)
    t = s[:, None, :] - s[:, :, None] + margin
    valid = pairs.pos[:, :, None] & pairs.neg[:, None, :]
    active = valid & (t > 0)
    value = np.where(active, t, 0.0).sum()
    grad = active.sum(axis=1) - active.sum(axis=2)
    return value, grad.astype(np.float64)


def _lifted(s, pairs, margin):
    # per anchor i and positive p: J = log sum_{q in N_i} exp(margin - (1 - S_iq)) + (1 - S_ip)
    has_neg = pairs.neg.any(axis=1)
    a = np.where(pairs.neg, margin - (1.0 - s), -np.inf)
    m = np.where(has_neg, a.max(axis=1), 0.0)
    e = np.where(pairs.neg, np.exp(a - m[:, None]), 0.0)
    tot = e.sum(axis=1)
    lse = np.where(has_neg, m + np.log(np.where(has_neg, tot, 1.0)), 0.0)
    w = np.where(pairs.neg, e / np.where(has_neg, tot, 1.0)[:, None], 0.0)
    J = lse[:, None] + (1.0 - s)
    use = pairs.pos & has_neg[:, None]
    hinge = np.where(use, np.maximum(J, 0.0), 0.0)
    value = (hinge ** 2).sum()
    coef = 2.0 * hinge
    grad = -coef + coef.sum(axis=1, keepdims=True) * w
    return value, grad


_ALTERNATES = {"contrastive": _contrastive, "triplet": _triplet, "lifted": _lifted}


def alternate_loss(kind: str, S: Tensor, labels, margin: float | None = None, eps: float = 0.1,
                   pairs: MinedPairs | None = None) -> Tensor:
    """Contrastive, triplet or lifted-structure loss in cosine form over mined pairs."""
    if kind not in _ALTERNATES:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {ALTERNATE_KINDS}")
    if S.shape[0] < 2:
        raise ValueError("alternate_loss needs at least two points")
    if pairs is None:
        pairs = mine_pairs(S, labels, eps)
    m = DEFAULT_MARGINS[kind] if margin is None else float(margin)
    value, grad = _ALTERNATES[kind](S.data.astype(np.float64), pairs, m)
    grad = grad.astype(S.dtype)
    return Tensor._wrap(np.asarray(value, dtype=S.dtype), (S,), lambda g: (g * grad,))


def metric_loss(kind: str, S: Tensor, labels, hyper: LossHyper, reduction: str = "sum"):
    """Dispatch on the configured loss kind; returns ``(loss, pairs)``."""
    pairs = mine_pairs(S, labels, hyper.eps)
    if kind == "ms":
        return multi_similarity_loss(S, pairs, hyper, reduction), pairs
    return alternate_loss(kind, S, labels, hyper.margin, hyper.eps, pairs), pairs
