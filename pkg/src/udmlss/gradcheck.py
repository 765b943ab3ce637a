"""Finite-difference gradient checks for every loss and the full network.

All checks run in float64 with central differences (h = 1e-5). Mined
pairs are computed once at the base point and then held fixed, so each
checked function is smooth.
"""
from __future__ import annotations

import numpy as np

from .losses import (
    ALTERNATE_KINDS, LossHyper, alternate_loss, combined_loss, mine_pairs,
    multi_similarity_loss, rotation_loss, similarity_matrix,
)
from .model import BackboneSpec, backbone_forward, embed, init_params, rotation_logits
from .tensor import (
    Tensor, conv2d, global_avg_pool, grad_check, grad_check_many, l2_normalize_rows, linear, relu,
    softmax_cross_entropy, tsum,
)

H = 1e-5


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _batch(rng, n=6, d=4, classes=2):
    labels = np.arange(n) % classes
    return rng.standard_normal((n, d)), labels


def check_ms_loss(rng) -> float:
    x, y = _batch(rng)
    hyper = LossHyper()
    pairs = mine_pairs(similarity_matrix(l2_normalize_rows(Tensor(x))), y, 2.0)
    return grad_check(lambda e: multi_similarity_loss(similarity_matrix(l2_normalize_rows(e)), pairs, hyper), Tensor(x), H)


def check_rotation_loss(rng) -> float:
    logits = rng.standard_normal((8, 4))
    z = np.tile(np.arange(4), 2)
    return grad_check(lambda t: rotation_loss(t, z), Tensor(logits), H)


def check_combined_loss(rng, eta=0.5) -> float:
    x, y = _batch(rng)
    logits = Tensor(rng.standard_normal((8, 4)))
    z = np.tile(np.arange(4), 2)
    e = Tensor(x)
    pairs = mine_pairs(similarity_matrix(l2_normalize_rows(e)), y, 2.0)

    def fn():
        l_ms = multi_similarity_loss(similarity_matrix(l2_normalize_rows(e)), pairs)
        return combined_loss(l_ms, rotation_loss(logits, z), eta)

    return grad_check_many(fn, [e, logits], H)


def check_alternate(rng, kind) -> float:
    x, y = _batch(rng, n=8)
    pairs = mine_pairs(similarity_matrix(l2_normalize_rows(Tensor(x))), y, 2.0)
    margin = {"contrastive": 0.05, "triplet": 0.5, "lifted": 1.0}[kind]
    return grad_check(lambda e: alternate_loss(kind, similarity_matrix(l2_normalize_rows(e)), y, margin,
                                               pairs=pairs), Tensor(x), H)


def _off_kinks(rng, shape, pre, margin=1e-3):
    """Draw inputs until every pre-activation clears the ReLU kink by ``margin``."""
    while True:
        x = rng.standard_normal(shape)
        if np.abs(pre(Tensor(x)).data).min() > margin:
            return Tensor(x)


def check_primitives(rng) -> dict[str, float]:
    w = Tensor(rng.standard_normal((4, 3)))
    b = Tensor(rng.standard_normal(3))
    k = Tensor(rng.standard_normal((2, 3, 3, 3)))
    xl = _off_kinks(rng, (5, 4), lambda x: linear(x, w, b))
    xc = _off_kinks(rng, (2, 3, 6, 6), lambda x: conv2d(x, k, 2, 1))
    return {
        "linear": grad_check(lambda x: tsum(relu(linear(x, w, b))), xl, H),
        "conv2d": grad_check(lambda x: tsum(global_avg_pool(relu(conv2d(x, k, 2, 1))) * 1.0), xc, H),
        "l2_normalize_rows": grad_check(lambda x: tsum(l2_normalize_rows(x) * Tensor(np.arange(12.0).reshape(3, 4))),
                                        Tensor(rng.standard_normal((3, 4))), H),
        "softmax_cross_entropy": grad_check(lambda x: softmax_cross_entropy(x, [0, 2, 1]),
                                            Tensor(rng.standard_normal((3, 3))), H),
    }


def check_network(rng, eta=0.5) -> float:
    """Joint objective through a reduced-width instance of the full network."""
    spec = BackboneSpec("small_conv", (3, 4, 5), 1, 8)
    params = init_params(spec, 3, int(rng.integers(1 << 31)), np.float64)
    for t in params.parameters():
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    x = Tensor(rng.standard_normal((6, 1, 8, 8)))
    rx = Tensor(rng.standard_normal((8, 1, 8, 8)))
    z = np.tile(np.arange(4), 2)
    y = np.arange(6) % 2
    pairs = mine_pairs(similarity_matrix(embed(params, backbone_forward(params, x))), y, 2.0)

    def fn():
        S = similarity_matrix(embed(params, backbone_forward(params, x)))
        l_rot = rotation_loss(rotation_logits(params, backbone_forward(params, rx)), z)
        return combined_loss(multi_similarity_loss(S, pairs), l_rot, eta)

    return grad_check_many(fn, params.parameters(), H)


def run_suite(seed: int = 0) -> dict[str, float]:
    """Max relative error per checked function."""
    rng = np.random.default_rng(seed)
    out = {
        "multi_similarity_loss": check_ms_loss(rng),
        "rotation_loss": check_rotation_loss(rng),
        "combined_loss": check_combined_loss(rng),
    }
    for kind in ALTERNATE_KINDS:
        out[f"{kind}_loss"] = check_alternate(rng, kind)
    out.update(check_primitives(rng))
    out["network"] = check_network(rng)
    return out
