"""Retrieval metrics: distance matrices, mAP, CMC, and a brute-force mAP oracle."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass
class RetrievalReport:
    distances: np.ndarray
    per_query_ap: list[float]
    mAP: float
    cmc: np.ndarray  # cmc[k-1] = rank-k accuracy
    ranks: tuple[int, ...] = field(default=(1, 5, 10))

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_json(self) -> dict:
        return {"mAP": self.mAP,
                "cmc": {str(k): self.rank(k) for k in self.ranks},
                "per_query_ap": list(self.per_query_ap)}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def distance_matrix(query, gallery, metric: str = "euclidean") -> np.ndarray:
    q, g = _arr(query), _arr(gallery)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"query {q.shape} and gallery {g.shape} must be [n, E] with shared E")
    if metric == "cosine":
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        gn = g / np.linalg.norm(g, axis=1, keepdims=True)
        return 1.0 - qn @ gn.T
    if metric != "euclidean":
        raise ValueError(f"unknown metric {metric!r}")
    diff = q[:, None, :] - g[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _check(dist, q_labels, g_labels):
    dist = _arr(dist)
    q_labels, g_labels = np.asarray(q_labels), np.asarray(g_labels)
    if dist.shape != (len(q_labels), len(g_labels)):
        raise ValueError(f"distance matrix {dist.shape} does not match {len(q_labels)} queries "
                         f"x {len(g_labels)} gallery items")
    return dist, q_labels, g_labels


def evaluate(dist, q_labels, g_labels, ks=(1, 5, 10)) -> RetrievalReport:
    """Rank by ascending distance (ties by gallery index) and score every query."""
    dist, q_labels, g_labels = _check(dist, q_labels, g_labels)
    Q, G = dist.shape
    aps = []
    cmc = np.zeros(G)
    for i in range(Q):
        order = np.argsort(dist[i], kind="stable")
        hits = g_labels[order] == q_labels[i]
        if not hits.any():
            raise EvaluationError(f"query {i} has no matching gallery item")
        hit_ranks = np.flatnonzero(hits) + 1
        aps.append(math.fsum((np.arange(len(hit_ranks)) + 1) / hit_ranks) / len(hit_ranks))
        cmc[hit_ranks[0] - 1:] += 1
    return RetrievalReport(dist, aps, math.fsum(aps) / Q, cmc / Q, tuple(ks))


def map_oracle(dist, q_labels, g_labels) -> float:
    """mAP by walking each query's explicitly sorted gallery list; test use only."""
    dist, q_labels, g_labels = _check(dist, q_labels, g_labels)
    aps = []
    for i in range(dist.shape[0]):
        ranked = sorted(range(dist.shape[1]), key=lambda j: (dist[i, j], j))
        found, precisions = 0, []
        for pos, j in enumerate(ranked, start=1):
            if g_labels[j] == q_labels[i]:
                found += 1
                precisions.append(found / pos)
        if not found:
            raise EvaluationError(f"query {i} has no matching gallery item")
        aps.append(math.fsum(precisions) / found)
    return math.fsum(aps) / len(aps)
