"""Filtered link-prediction ranking (MRR, Hits@10) and client-weighted aggregation."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .scoring import rotation


@dataclass
class RankingResult:
    mrr: float
    hits_at_10: float
    ranks: np.ndarray

    @classmethod
    def from_ranks(cls, ranks) -> "RankingResult":
        ranks = np.asarray(ranks, dtype=float)
        return cls(float(np.mean(1.0 / ranks)), float(np.mean(ranks <= 10)), ranks)


def build_filter(triples):
    """Index known triples as (h, r) -> tails and (r, t) -> heads."""
    tails, heads = defaultdict(set), defaultdict(set)
    for h, r, t in np.asarray(triples).tolist():
        tails[(h, r)].add(t)
        heads[(r, t)].add(h)
    return tails, heads


def rank_with_ties(scores: np.ndarray, true_idx: int, skip) -> float:
    """Filtered rank of ``true_idx``; a tied block shares its mean rank."""
    s = scores[true_idx]
    keep = np.ones(len(scores), dtype=bool)
    keep[list(skip)] = False
    keep[true_idx] = False
    others = scores[keep]
    return 1.0 + np.count_nonzero(others > s) + 0.5 * np.count_nonzero(others == s)


def _complex(x):
    d = x.shape[-1] // 2
    return x[..., :d] + 1j * x[..., d:]


def _real(z):
    return np.concatenate([z.real, z.imag], axis=-1)


def _query_anchors(method, entity, relation, queries, corrupt_tail: bool):
    """Per-query vector x such that each candidate's score is a function of x and the candidate row.

    Distance methods: score = -||x - e||.  ComplEx: score = x . e.
    """
    h, r, t = entity[queries[:, 0]], relation[queries[:, 1]], entity[queries[:, 2]]
    if method == "transe":
        return h + r if corrupt_tail else t - r
    if method == "rotate":
        rot = rotation(r)
        # |r| = 1, so ||e * r - t|| = ||e - t * conj(r)||
        return _real(_complex(h) * rot) if corrupt_tail else _real(_complex(t) * np.conj(rot))
    hr = _complex(h) * _complex(r)
    if corrupt_tail:
        return _real(hr)
    w = _complex(r) * np.conj(_complex(t))
    return np.concatenate([w.real, -w.imag], axis=-1)


def _candidate_scores(method, entity, relation, queries, corrupt_tail: bool):
    """Scores of every entity as the missing tail (or head) of each query, via matrix products."""
    x = _query_anchors(method, entity, relation, queries, corrupt_tail)
    cross = x @ entity.T
    if method == "complex":
        return cross
    sq = np.sum(x * x, axis=1)[:, None] + np.sum(entity * entity, axis=1)[None, :] - 2.0 * cross
    return -np.sqrt(np.maximum(sq, 0.0))


def evaluate_ranking(table, queries, filter_triples) -> RankingResult:
    """Rank every query's tail and head among all of the client's entities (filtered setting)."""
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    if len(queries) == 0:
        raise ValueError("no queries to evaluate")
    tails, heads = build_filter(filter_triples)
    ranks = np.empty(2 * len(queries))
    tail_scores = _candidate_scores(table.method, table.entity, table.relation, queries, True)
    head_scores = _candidate_scores(table.method, table.entity, table.relation, queries, False)
    for i, (h, r, t) in enumerate(queries.tolist()):
        ranks[2 * i] = rank_with_ties(tail_scores[i], t, tails.get((h, r), ()))
        ranks[2 * i + 1] = rank_with_ties(head_scores[i], h, heads.get((r, t), ()))
    return RankingResult.from_ranks(ranks)


def weighted_metrics(results, weights) -> tuple[float, float]:
    """Weighted mean of per-client MRR and Hits@10 (weights: triple counts)."""
    weights = np.asarray(weights, dtype=float)
    if len(results) != len(weights):
        raise ValueError("need exactly one weight per client result")
    total = weights.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    mrr = float(sum(w * r.mrr for w, r in zip(weights, results)) / total)
    hits = float(sum(w * r.hits_at_10 for w, r in zip(weights, results)) / total)
    return mrr, hits
