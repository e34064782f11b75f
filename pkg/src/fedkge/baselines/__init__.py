from .fede import fede_round, fedepl_dimension, svd_exchange
from .kd import DualEmbeddingTable, kd_local_loss, kd_local_train, kd_terms, kl_divergence, score_distributions
from .svd import (
    SvdFactors,
    jacobi_svd,
    orthogonality_regularizer,
    orthogonality_regularizer_grad,
    svd_compress,
    svd_restore,
    svdplus_final_epoch,
    transmitted_params,
)
