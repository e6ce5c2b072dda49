"""Bucketed sparse-embedding classification heads solved in closed form,
with a single-round federated aggregation simulator."""

from .bucketing import BucketKind, BucketStrategy, BucketingModel, encode, encode_batch, fit_boundaries, hamming
from .data import FeatureMatrix, Generator, SyntheticSpec, generate, load_features, one_hot, save_features
from .federation import (
    ClientPayload,
    CommReport,
    PartitionPlan,
    ProtocolConfig,
    aggregate,
    client_round,
    evaluate,
    partition_dirichlet,
    partition_shard,
    run_protocol,
)
from .lift import LiftConfig, composite_index, lift, lift_batch, make_permutation
from .solver import (
    GramStats,
    SafleModel,
    accumulate,
    empty_stats,
    fit_linear_baseline,
    fit_safle,
    gram_sparsity,
    load_model,
    predict,
    predict_batch,
    recover_unregularized,
    regularize,
    save_model,
    solve_regularized,
)

__version__ = "0.1.0"
