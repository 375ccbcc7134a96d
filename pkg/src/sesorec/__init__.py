"""Two-party secure social recommendation.

A rating holder and a social-network holder jointly train a socially
regularized matrix factorization model.  The only cross-party computations
are matrix products, which run under a secret-sharing protocol over the
ring of integers modulo ``2**l``.
"""
from .data import RatingDataset, SocialGraph, filter_min_interactions, kfold_split, load_ratings, load_social
from .metrics import PredictionSet, ndcg_at_n, rmse
from .model import (
    Hyperparams,
    LatentFactors,
    SecureProductClient,
    SocialPartyServer,
    evaluate,
    grad_U,
    grad_V,
    objective,
    predict,
    train,
    train_sesorec_loopback,
)
from .ring import FixedPointConfig, decode_fixed, encode_fixed, ring_matmul, truncate
from .sharing import MaskPolicy, MaskSource, TrustedInitializer, ssmm_execute, tismm_execute
from .transport import connect, connect_loopback, tcp_pair

__version__ = "0.1.0"

__all__ = [
    "FixedPointConfig", "encode_fixed", "decode_fixed", "truncate", "ring_matmul",
    "MaskPolicy", "MaskSource", "TrustedInitializer", "ssmm_execute", "tismm_execute",
    "connect", "connect_loopback", "tcp_pair",
    "RatingDataset", "SocialGraph", "load_ratings", "load_social", "filter_min_interactions", "kfold_split",
    "PredictionSet", "rmse", "ndcg_at_n",
    "Hyperparams", "LatentFactors", "SecureProductClient", "SocialPartyServer",
    "objective", "grad_U", "grad_V", "train", "train_sesorec_loopback", "predict", "evaluate",
]
