"""Retrieval and clustering quality metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .clustering import kmeans
from .model import ModelParams, infer


@dataclass
class EvalReport:
    recall: dict[int, float]
    nmi: float
    n_queries: int

    def to_json(self) -> str:
        d = asdict(self)
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        return json.dumps(d, sort_keys=True)


def _rank(sims: np.ndarray) -> np.ndarray:
    """Indices ordered by similarity descending, ties by ascending index."""
    return np.argsort(-sims, kind="stable")


def recall_at_k(emb, labels, ks) -> dict[int, float]:
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    n = emb.shape[0]
    ks = [int(k) for k in ks]
    if ks != sorted(ks) or not ks or ks[0] < 1:
        raise ValueError(f"ks must be a sorted list of positive ints, got {ks}")
    classes, counts = np.unique(labels, return_counts=True)
    singles = classes[counts < 2]
    if len(singles):
        raise ValueError(f"classes with a single member: {singles.tolist()}")
    if ks[-1] > n - 1:
        raise ValueError(f"max K={ks[-1]} exceeds n-1={n - 1}")
    sims = emb @ emb.T
    # first rank (1-based) at which a same-label item appears, per query
    first_hit = np.empty(n, dtype=np.int64)
    for i in range(n):
        s = sims[i].copy()
        s[i] = -np.inf
        order = _rank(s)
        order = order[order != i]
        hits = np.flatnonzero(labels[order] == labels[i])
        first_hit[i] = hits[0] + 1
    return {k: float(np.mean(first_hit <= k)) for k in ks}


def retrieve(query, gallery, k: int) -> tuple[np.ndarray, np.ndarray]:
    gallery = np.asarray(gallery, dtype=np.float64)
    if k < 1 or k > gallery.shape[0]:
        raise ValueError(f"k={k} outside [1, {gallery.shape[0]}]")
    sims = gallery @ np.asarray(query, dtype=np.float64)
    order = _rank(sims)[:k]
    return order, sims[order]


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth) -> float:
    """Mutual information over the arithmetic mean of the two entropies (natural log)."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} vs {truth.shape[0]}")
    if pred.size == 0:
        raise ValueError("nmi needs at least one sample")
    _, a = np.unique(pred, return_inverse=True)
    _, b = np.unique(truth, return_inverse=True)
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1)
    ha, hb = _entropy(joint.sum(axis=1)), _entropy(joint.sum(axis=0))
    if ha == 0 and hb == 0:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    n = pred.size
    pij = joint / n
    outer = np.outer(joint.sum(axis=1), joint.sum(axis=0)) / n ** 2
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(min(1.0, max(0.0, mi / ((ha + hb) / 2))))


def evaluate_embeddings(emb, labels, ks=(1, 2, 4, 8), seed: int = 0) -> EvalReport:
    labels = np.asarray(labels)
    n_classes = len(np.unique(labels))
    clusters = kmeans(emb, n_classes, seed)
    return EvalReport(recall_at_k(emb, labels, ks), nmi(clusters.labels, labels), int(len(labels)))


def evaluate(params: ModelParams, images, labels, ks=(1, 2, 4, 8), seed: int = 0) -> EvalReport:
    """Inference-mode embeddings of ``images`` scored against ``labels``."""
    return evaluate_embeddings(infer(params, images, what="embed"), labels, ks, seed)


def export_csv(path, emb, ids=None) -> None:
    emb = np.asarray(emb)
    ids = np.arange(emb.shape[0]) if ids is None else ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"dim{j}" for j in range(emb.shape[1])])
        for i, row in zip(ids, emb):
            w.writerow([int(i)] + [repr(float(v)) for v in row])
