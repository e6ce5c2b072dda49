"""Run configuration and the two ablation sweeps shared by the CLI and scripts.

Bucket sweep: every strategy at every bucket count gets the same vocabulary
budget ``V``; the group size is the largest ``G`` with ``k**G <= V`` (at least
one digit). Accuracy is averaged over several permutation seeds because a
single shuffle decides which features end up sharing a group.

Shape sweep: the lifted dimension ``D_e = E * V`` is held fixed while ``V``
grows and ``E`` shrinks; the code vector is padded or truncated to ``E * G``.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .bucketing import BucketKind, BucketStrategy, BucketingModel, fit_boundaries
from .data import FeatureMatrix
from .errors import ConfigError
from .federation import PartitionPlan, client_round, evaluate
from .lift import LiftConfig
from .solver import fit_safle, gram_sparsity

BUCKET_GRID = (2, 8, 14, 20)
SHAPE_VOCABS = (8, 16, 32, 64, 128)
DEFAULT_VOCAB = 256


def group_for_vocab(base: int, vocab: int) -> int:
    """Largest ``G >= 1`` with ``base**G <= vocab``."""
    g = 1
    while base ** (g + 1) <= vocab:
        g += 1
    return g


@dataclass(frozen=True)
class RunConfig:
    strategy: str = "binary-overlap"
    buckets: int = 8
    experts: int | None = None
    group_size: int | None = None
    base: int | None = None
    gamma: float = 1.0
    seed: int = 0
    clients: int = 1
    partition: str = "dirichlet:0.1"

    def __post_init__(self):
        kind = BucketKind.parse(self.strategy)
        if self.experts is not None and self.group_size is not None:
            raise ConfigError("give either experts or group_size, not both")
        strat = BucketStrategy(kind, self.buckets)
        if self.base is not None and self.base != strat.alphabet:
            raise ConfigError(
                f"base {self.base} does not match the {kind.cli_name} alphabet size {strat.alphabet}"
            )
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")

    @property
    def bucket_strategy(self) -> BucketStrategy:
        return BucketStrategy(BucketKind.parse(self.strategy), self.buckets)

    def lift_for(self, n_codes: int) -> LiftConfig:
        k = self.bucket_strategy.alphabet
        if self.experts is not None:
            return LiftConfig.from_experts(n_codes, self.experts, k, self.seed)
        g = self.group_size if self.group_size is not None else group_for_vocab(k, DEFAULT_VOCAB)
        return LiftConfig.from_group_size(n_codes, g, k, self.seed)

    def to_record(self) -> dict:
        return asdict(self)


def fit_central(train: FeatureMatrix, config: RunConfig):
    """Fit boundaries on ``train`` and solve the pooled problem; returns ``(model, seconds)``."""
    t0 = time.perf_counter()
    bucketing = fit_boundaries(train.X, config.bucket_strategy)
    lift = config.lift_for(bucketing.n_codes)
    model = fit_safle(train.X, train.y, train.n_classes, bucketing, lift, config.gamma)
    return model, time.perf_counter() - t0


def _mean_accuracy(train, test, bucketing: BucketingModel, make_lift, seeds, gamma) -> list[float]:
    return [
        evaluate(fit_safle(train.X, train.y, train.n_classes, bucketing, make_lift(s), gamma), test)
        for s in seeds
    ]


def bucket_sweep(
    train: FeatureMatrix,
    test: FeatureMatrix,
    vocab: int = 64,
    seeds=(0, 1, 2, 3),
    gamma: float = 1.0,
    grid=BUCKET_GRID,
) -> list[dict]:
    """Accuracy for each strategy x bucket count at a fixed vocabulary budget."""
    rows = []
    for kind in BucketKind:
        for b in grid:
            strat = BucketStrategy(kind, b)
            bucketing = fit_boundaries(train.X, strat)
            g = group_for_vocab(strat.alphabet, vocab)

            def make_lift(s, g=g, n=bucketing.n_codes, k=strat.alphabet):
                return LiftConfig.from_group_size(n, g, k, s)

            accs = _mean_accuracy(train, test, bucketing, make_lift, seeds, gamma)
            lift = make_lift(seeds[0])
            rows.append(
                {
                    "sweep": "buckets",
                    "strategy": kind.cli_name,
                    "buckets": b,
                    "group_size": g,
                    "experts": lift.experts,
                    "vocab": lift.vocab,
                    "lifted_dim": lift.lifted_dim,
                    "accuracy": float(np.mean(accs)),
                    "accuracy_per_seed": accs,
                }
            )
    return rows


def shape_sweep(
    train: FeatureMatrix,
    test: FeatureMatrix | None,
    strategy: BucketStrategy,
    lifted_dim: int = 2048,
    vocabs=SHAPE_VOCABS,
    seed: int = 0,
    gamma: float = 1.0,
) -> list[dict]:
    """Payload size, Gram sparsity and (optionally) accuracy over ``(E, V)`` at fixed ``D_e``."""
    bucketing = fit_boundaries(train.X, strategy)
    k = strategy.alphabet
    everyone = PartitionPlan("all", 0.0, 1, seed, np.zeros(train.n_samples, dtype=np.int64))
    rows = []
    for v in vocabs:
        g = group_for_vocab(k, v)
        if k**g != v or lifted_dim % v:
            raise ConfigError(f"vocabulary {v} must be a power of {k} dividing {lifted_dim}")
        lift = LiftConfig(seed, lifted_dim // v, g, k, bucketing.n_codes)
        payload = client_round(train, everyone, 0, bucketing, lift, gamma)
        row = {
            "sweep": "embedding-shape",
            "experts": lift.experts,
            "vocab": v,
            "group_size": g,
            "lifted_dim": lift.lifted_dim,
            "payload_bytes": len(payload.to_bytes()),
            "gram_nnz": int(payload.gram.nnz),
            "gram_sparsity": gram_sparsity(payload.gram - gamma * sp.identity(lifted_dim, format="csr")),
        }
        if test is not None:
            model = fit_safle(train.X, train.y, train.n_classes, bucketing, lift, gamma)
            row["accuracy"] = evaluate(model, test)
        rows.append(row)
    return rows
