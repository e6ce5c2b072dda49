"""Strategy x bucket-count accuracy table on the XOR task (JSON lines to stdout)."""

import argparse
import json

from safle.data import Generator, SyntheticSpec, generate, train_test_split
from safle.experiments import BUCKET_GRID, bucket_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--dims", type=int, default=8)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--lift-seeds", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    fm = generate(SyntheticSpec(Generator.XOR, args.samples, args.dims, 2, seed=args.seed))
    train, test = train_test_split(fm, 0.25, args.seed)
    rows = bucket_sweep(train, test, args.vocab, tuple(range(args.lift_seeds)), grid=BUCKET_GRID)
    for r in rows:
        print(json.dumps(r))
    print()
    print(f"{'B_n':>4} " + " ".join(f"{k:>15}" for k in ("integer", "onehot", "binary-overlap")))
    acc = {(r["strategy"], r["buckets"]): r["accuracy"] for r in rows}
    for b in BUCKET_GRID:
        print(f"{b:>4} " + " ".join(f"{acc[k, b]:>15.4f}" for k in ("integer", "onehot", "binary-overlap")))


if __name__ == "__main__":
    main()
