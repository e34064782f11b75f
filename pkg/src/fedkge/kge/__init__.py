from .evaluate import RankingResult, build_filter, evaluate_ranking, rank_with_ties, weighted_metrics
from .model import (
    AdamState,
    EmbeddingTable,
    Gradients,
    Hyperparams,
    NonFiniteLoss,
    adam_step,
    init_bound,
    init_embeddings,
    local_train,
    sample_negatives,
    self_adversarial_loss,
)
from .scoring import METHODS, checked_score, entity_width, relation_width, rotation, score, score_backward

__all__ = [
    "AdamState",
    "EmbeddingTable",
    "Gradients",
    "Hyperparams",
    "METHODS",
    "NonFiniteLoss",
    "RankingResult",
    "adam_step",
    "build_filter",
    "checked_score",
    "entity_width",
    "evaluate_ranking",
    "init_bound",
    "init_embeddings",
    "local_train",
    "rank_with_ties",
    "relation_width",
    "rotation",
    "sample_negatives",
    "score",
    "score_backward",
    "self_adversarial_loss",
    "weighted_metrics",
]
