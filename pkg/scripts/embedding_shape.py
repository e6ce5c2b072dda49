"""Payload size, Gram sparsity and accuracy over (E, V) at a fixed lifted dimension."""

import argparse
import json

from safle.bucketing import BucketKind, BucketStrategy
from safle.data import Generator, SyntheticSpec, generate, train_test_split
from safle.experiments import shape_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--generator", default="gaussian-mixtures")
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--dims", type=int, default=128)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--noise", type=float, default=4.0)
    p.add_argument("--lifted-dim", type=int, default=2048)
    p.add_argument("--vocabs", type=int, nargs="+", default=[8, 16, 32, 64, 128])
    p.add_argument("--buckets", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    syn = SyntheticSpec(args.generator, args.samples, args.dims, args.classes, args.noise, args.seed)
    train, test = train_test_split(generate(syn), 0.2, args.seed)
    strat = BucketStrategy(BucketKind.BINARY_OVERLAP, args.buckets)
    for row in shape_sweep(train, test, strat, args.lifted_dim, tuple(args.vocabs), args.seed):
        print(json.dumps(row))


if __name__ == "__main__":
    main()
