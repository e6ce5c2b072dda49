"""Federated vs. pooled solution across client counts and non-IID partitions."""

import argparse
import itertools
import json

import numpy as np

from safle.bucketing import BucketKind, BucketStrategy, fit_boundaries
from safle.data import Generator, SyntheticSpec, generate, train_test_split
from safle.federation import ProtocolConfig, evaluate, parse_partition, run_protocol
from safle.lift import LiftConfig
from safle.solver import fit_safle


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--dims", type=int, default=64)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--noise", type=float, default=4.0)
    p.add_argument("--clients", type=int, nargs="+", default=[1, 10, 100])
    p.add_argument("--partitions", nargs="+", default=["dirichlet:0.05", "dirichlet:0.1", "shard:2", "shard:4"])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    syn = SyntheticSpec(Generator.GAUSSIAN_MIXTURES, args.samples, args.dims, args.classes, args.noise, args.seed)
    train, test = train_test_split(generate(syn), 0.2, args.seed)
    bm = fit_boundaries(train.X, BucketStrategy(BucketKind.BINARY_OVERLAP, 4))
    lift = LiftConfig.from_group_size(bm.n_codes, 5, 2, args.seed)
    central = fit_safle(train.X, train.y, args.classes, bm, lift)
    print(json.dumps({"clients": 0, "partition": "pooled", "accuracy": evaluate(central, test)}))
    for k, part in itertools.product(args.clients, args.partitions):
        plan = parse_partition(part, k, train.y, args.seed)
        model, report = run_protocol(train, plan, ProtocolConfig(bm, lift, 1.0))
        diff = np.linalg.norm(model.weights - central.weights) / np.linalg.norm(central.weights)
        print(json.dumps({
            "clients": k,
            "partition": part,
            "accuracy": evaluate(model, test),
            "rel_weight_diff": float(diff),
            "mean_label_entropy": float(plan.label_entropies(train.y, args.classes).mean()),
            "mean_payload_mb": report.mean_payload_mb,
            "rounds": report.rounds,
        }))


if __name__ == "__main__":
    main()
