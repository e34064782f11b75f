"""Mutual distillation between a low- and a high-dimensional embedding table (FedE-KD)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..kge.model import (
    AdamState,
    EmbeddingTable,
    adam_step,
    adversarial_terms,
    batch_scores,
    iter_batches,
    sample_negatives,
    scatter_gradients,
    NonFiniteLoss,
)


@dataclass
class DualEmbeddingTable:
    low: EmbeddingTable
    high: EmbeddingTable

    def __post_init__(self):
        if self.low.dim >= self.high.dim:
            raise ValueError("low table must have a smaller dimension than the high table")
        if self.low.entity.shape[0] != self.high.entity.shape[0]:
            raise ValueError("low and high tables must cover the same entities")


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def kl_divergence(p, q) -> np.ndarray:
    """KL(p || q) along the last axis; zero-probability entries of p contribute nothing."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def score_distributions(pos, neg):
    """Softmax over [positive, negatives] for each example."""
    logits = np.concatenate([pos[:, None], neg], axis=1)
    return np.exp(_log_softmax(logits))


def kd_terms(low_pos, low_neg, high_pos, high_neg, hp, distill: bool = True):
    """Per-example FedE-KD loss and its derivatives w.r.t. both tables' scores.

    Returns ``(per_example_loss, (dpos_L, dneg_L), (dpos_H, dneg_H))``; the
    derivatives are per-example (not yet divided by the batch size).
    """
    ll, dpl, dnl, _ = adversarial_terms(low_pos, low_neg, hp)
    lh, dph, dnh, _ = adversarial_terms(high_pos, high_neg, hp)
    supervised = ll + lh
    if not distill:
        return supervised, (dpl, dnl), (dph, dnh)
    if np.any(supervised <= 0):
        raise ValueError("supervised loss is zero; the co-distillation divisor degenerates")
    a = np.concatenate([low_pos[:, None], low_neg], axis=1)
    b = np.concatenate([high_pos[:, None], high_neg], axis=1)
    lp, lq = _log_softmax(a), _log_softmax(b)
    p, q = np.exp(lp), np.exp(lq)
    kl_pq = np.sum(p * (lp - lq), axis=1)
    kl_qp = np.sum(q * (lq - lp), axis=1)
    c = 1.0 / supervised  # treated as a constant
    per = supervised + c * (kl_pq + kl_qp)
    ga = c[:, None] * (p * (lp - lq - kl_pq[:, None]) + p - q)
    gb = c[:, None] * (q * (lq - lp - kl_qp[:, None]) + q - p)
    return per, (dpl + ga[:, 0], dnl + ga[:, 1:]), (dph + gb[:, 0], dnh + gb[:, 1:])


def kd_local_loss(dual: DualEmbeddingTable, batch, neg_h, neg_t, hp, distill: bool = True):
    """Batch-mean FedE-KD loss with row-sparse gradients for both tables."""
    low, high = dual.low, dual.high
    emb_l, pos_l, neg_l = batch_scores(low.entity, low.relation, low.method, batch, neg_h, neg_t)
    emb_h, pos_h, neg_h_scores = batch_scores(high.entity, high.relation, high.method, batch, neg_h, neg_t)
    per, (dpl, dnl), (dph, dnh) = kd_terms(pos_l, neg_l, pos_h, neg_h_scores, hp, distill)
    b = len(batch)
    g_low = scatter_gradients(low.entity.shape, low.relation.shape, low.method, emb_l,
                              batch, neg_h, neg_t, dpl / b, dnl / b)
    g_high = scatter_gradients(high.entity.shape, high.relation.shape, high.method, emb_h,
                               batch, neg_h, neg_t, dph / b, dnh / b)
    return float(per.mean()), g_low, g_high


def kd_local_train(shard, dual: DualEmbeddingTable, hp, states: tuple[AdamState, AdamState], rng,
                   distill: bool = True) -> list[float]:
    """Joint local training; both tables see the same batches and negatives."""
    if len(shard.train) == 0:
        raise ValueError(f"client {shard.client_id} has no training triples")
    losses = []
    for _ in range(hp.local_epochs):
        for batch in iter_batches(shard.train, hp.batch_size, rng):
            neg_h, neg_t = sample_negatives(batch, shard.num_entities, hp.negatives, rng)
            loss, g_low, g_high = kd_local_loss(dual, batch, neg_h, neg_t, hp, distill)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"client {shard.client_id}: non-finite distillation loss")
            adam_step(dual.low, g_low, states[0], hp.learning_rate)
            adam_step(dual.high, g_high, states[1], hp.learning_rate)
            losses.append(loss)
    return losses
