"""Embedding tables, the self-adversarial negative-sampling loss, sparse Adam and local training."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .scoring import entity_width, relation_width, score, score_backward


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 8.0
    epsilon: float = 2.0
    adv_temperature: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 512
    local_epochs: int = 3
    negatives: int = 16

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.adv_temperature <= 0:
            raise ValueError("adv_temperature must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")


@dataclass
class EmbeddingTable:
    method: str
    dim: int
    entity: np.ndarray
    relation: np.ndarray
    shared: np.ndarray
    history: np.ndarray

    @property
    def entity_width(self) -> int:
        return self.entity.shape[1]

    def shared_rows(self) -> np.ndarray:
        return self.entity[self.shared]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.method, self.dim, self.entity.copy(), self.relation.copy(),
                              self.shared.copy(), self.history.copy())


def init_bound(hp: Hyperparams, dim: int) -> float:
    return (hp.gamma + hp.epsilon) / dim


def init_embeddings(shard, hp: Hyperparams, dim: int, seed: int, method: str = "transe",
                    num_global_entities: int | None = None) -> EmbeddingTable:
    """Uniform init in +-(gamma+epsilon)/dim; RotatE phases uniform in [-pi, pi].

    Entity rows are cut from one seeded global matrix, so every owner of an
    entity starts from the same vector.  Relations are drawn per client.
    """
    if dim <= 0:
        raise ValueError("embedding dimension must be positive")
    if method != "transe" and (dim < 2 or dim % 2):
        raise ValueError("complex-space methods need an even dimension")
    bound = init_bound(hp, dim)
    de, dr = entity_width(method, dim), relation_width(method, dim)
    n_global = num_global_entities or int(shard.local_to_global.max()) + 1
    global_rows = np.random.default_rng([seed, 0]).uniform(-bound, bound, size=(n_global, de))
    entity = global_rows[shard.local_to_global].copy()
    rel_rng = np.random.default_rng([seed, 1, shard.client_id])
    if method == "rotate":
        relation = rel_rng.uniform(-np.pi, np.pi, size=(shard.num_relations, dr))
    else:
        relation = rel_rng.uniform(-bound, bound, size=(shard.num_relations, dr))
    shared = np.asarray(shard.shared_entities, dtype=np.int64)
    return EmbeddingTable(method, dim, entity, relation, shared.copy(), entity[shared].copy())


@dataclass
class Gradients:
    """Row-sparse gradients: unique row indices and their summed gradient rows."""

    entity_idx: np.ndarray
    entity_grad: np.ndarray
    relation_idx: np.ndarray
    relation_grad: np.ndarray


def _scatter(idx, rows, width):
    """Sum ``rows`` sharing an index; returns (sorted unique indices, summed rows)."""
    uniq, inv = np.unique(idx.reshape(-1), return_inverse=True)
    flat = (inv[:, None] * width + np.arange(width)).ravel()
    summed = np.bincount(flat, weights=rows.reshape(-1), minlength=len(uniq) * width)
    return uniq, summed.reshape(len(uniq), width)


def sample_negatives(batch: np.ndarray, num_entities: int, k: int, rng: np.random.Generator):
    """Corrupt head or tail (fair coin per negative) with a uniform local entity.

    Returns (neg_heads, neg_tails), each (B, k).
    """
    b = len(batch)
    ents = rng.integers(0, num_entities, size=(b, k))
    corrupt_head = rng.random((b, k)) < 0.5
    neg_h = np.where(corrupt_head, ents, batch[:, :1])
    neg_t = np.where(corrupt_head, batch[:, 2:3], ents)
    return neg_h, neg_t


def adversarial_weights(neg_scores, temperature: float) -> np.ndarray:
    z = temperature * neg_scores
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def _neg_log_sigmoid(x):
    return np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def adversarial_terms(pos, neg, hp: Hyperparams, weights=None):
    """Per-example loss and per-example derivatives w.r.t. positive and negative scores."""
    if neg.shape[-1] == 0:
        raise ValueError("self-adversarial loss needs at least one negative per positive")
    w = adversarial_weights(neg, hp.adv_temperature) if weights is None else weights
    per = _neg_log_sigmoid(hp.gamma + pos) + np.sum(w * _neg_log_sigmoid(-neg - hp.gamma), axis=-1)
    return per, -_sigmoid(-hp.gamma - pos), w * _sigmoid(neg + hp.gamma), w


def loss_from_scores(pos, neg, hp: Hyperparams, weights=None):
    """Batch-mean self-adversarial loss and its derivatives w.r.t. the scores.

    ``weights`` overrides the softmax weights (used to freeze them when
    probing the loss numerically).
    """
    per, d_pos, d_neg, w = adversarial_terms(pos, neg, hp, weights)
    b = pos.shape[0]
    return float(per.mean()), d_pos / b, d_neg / b, w


class BatchEmbeddings(NamedTuple):
    """Gathered rows of a batch; ``diff``/``neg_diff`` hold TransE residuals when available."""

    H: np.ndarray
    R: np.ndarray
    T: np.ndarray
    NH: np.ndarray
    NT: np.ndarray
    diff: Optional[np.ndarray] = None
    neg_diff: Optional[np.ndarray] = None


def scatter_gradients(entity_shape, relation_shape, method, emb: BatchEmbeddings, batch, neg_h, neg_t,
                      d_pos, d_neg) -> "Gradients":
    """Push score derivatives back onto the touched entity and relation rows."""
    H, R, T, NH, NT = emb[:5]
    Rn = R[:, None, :]
    gh, gr, gt = score_backward(method, H, R, T, d_pos, emb.diff)
    ngh, ngr, ngt = score_backward(method, NH, Rn, NT, d_neg, emb.neg_diff)
    de, dr = entity_shape[1], relation_shape[1]
    ent_idx = np.concatenate([batch[:, 0], batch[:, 2], neg_h.reshape(-1), neg_t.reshape(-1)])
    ent_rows = np.concatenate([gh, gt, ngh.reshape(-1, de), ngt.reshape(-1, de)])
    rel_rows = gr + ngr.sum(axis=1)
    eu, eg = _scatter(ent_idx, ent_rows, de)
    ru, rg = _scatter(batch[:, 1], rel_rows, dr)
    return Gradients(eu, eg, ru, rg)


def batch_scores(entity, relation, method, batch, neg_h, neg_t):
    H, R, T = entity[batch[:, 0]], relation[batch[:, 1]], entity[batch[:, 2]]
    NH, NT = entity[neg_h], entity[neg_t]
    if method == "transe":
        diff, neg_diff = H + R - T, NH + R[:, None, :] - NT
        pos = -np.sqrt(np.sum(diff * diff, axis=-1))
        neg = -np.sqrt(np.sum(neg_diff * neg_diff, axis=-1))
        return BatchEmbeddings(H, R, T, NH, NT, diff, neg_diff), pos, neg
    return BatchEmbeddings(H, R, T, NH, NT), score(method, H, R, T), score(method, NH, R[:, None, :], NT)


def self_adversarial_loss(entity, relation, method, batch, neg_h, neg_t, hp: Hyperparams,
                          weights=None, with_grad=True):
    """Loss over a batch of positives with their corrupted negatives.

    Returns ``(loss, Gradients | None, weights)``.  Gradients treat the
    adversarial weights as constants.
    """
    if neg_h.shape[1] == 0:
        raise ValueError("self-adversarial loss needs at least one negative per positive")
    emb, pos, neg = batch_scores(entity, relation, method, batch, neg_h, neg_t)
    loss, d_pos, d_neg, w = loss_from_scores(pos, neg, hp, weights)
    if not with_grad:
        return loss, None, w
    grads = scatter_gradients(entity.shape, relation.shape, method, emb, batch, neg_h, neg_t, d_pos, d_neg)
    return loss, grads, w


@dataclass
class AdamState:
    m_entity: np.ndarray
    v_entity: np.ndarray
    m_relation: np.ndarray
    v_relation: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_table(cls, table: EmbeddingTable) -> "AdamState":
        return cls(np.zeros_like(table.entity), np.zeros_like(table.entity),
                   np.zeros_like(table.relation), np.zeros_like(table.relation))


def adam_rows(param, m, v, idx, grad, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place lazy Adam on the rows ``idx`` of ``param``."""
    if grad.shape != (len(idx), param.shape[1]):
        raise ValueError(f"gradient shape {grad.shape} does not match {len(idx)} rows of width {param.shape[1]}")
    m_rows = beta1 * m[idx] + (1 - beta1) * grad
    v_rows = beta2 * v[idx] + (1 - beta2) * grad * grad
    m[idx], v[idx] = m_rows, v_rows
    m_hat = m_rows / (1 - beta1**step)
    v_hat = v_rows / (1 - beta2**step)
    param[idx] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(table: EmbeddingTable, grads: Gradients, state: AdamState, lr: float) -> EmbeddingTable:
    """Bias-corrected Adam on the touched rows only; moment state is kept across rounds."""
    if state.m_entity.shape != table.entity.shape or state.m_relation.shape != table.relation.shape:
        raise ValueError("Adam state shape does not match the embedding table")
    state.step += 1
    adam_rows(table.entity, state.m_entity, state.v_entity, grads.entity_idx, grads.entity_grad,
              state.step, lr, state.beta1, state.beta2, state.eps)
    adam_rows(table.relation, state.m_relation, state.v_relation, grads.relation_idx,
              grads.relation_grad, state.step, lr, state.beta1, state.beta2, state.eps)
    return table


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainStats:
    losses: list[float] = field(default_factory=list)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")


def iter_batches(train: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(train))
    for start in range(0, len(train), batch_size):
        yield train[order[start : start + batch_size]]


def local_train(shard, table: EmbeddingTable, hp: Hyperparams, state: AdamState,
                rng: np.random.Generator, epochs: int | None = None) -> TrainStats:
    """Run ``hp.local_epochs`` seeded-shuffled passes over the shard's training triples."""
    if len(shard.train) == 0:
        raise ValueError(f"client {shard.client_id} has no training triples")
    stats = TrainStats()
    for _ in range(hp.local_epochs if epochs is None else epochs):
        for batch in iter_batches(shard.train, hp.batch_size, rng):
            neg_h, neg_t = sample_negatives(batch, shard.num_entities, hp.negatives, rng)
            loss, grads, _ = self_adversarial_loss(table.entity, table.relation, table.method,
                                                   batch, neg_h, neg_t, hp)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"client {shard.client_id}: non-finite loss at Adam step {state.step + 1}")
            adam_step(table, grads, state, hp.learning_rate)
            stats.losses.append(loss)
    return stats
