"""Convert externally extracted features to an SFLF file.

Input is an ``.npz`` with arrays ``X`` (N x d_b, float) and ``y`` (N, int
labels in 0..C-1), e.g. penultimate-layer activations of a frozen image
backbone dumped by any framework. The class count defaults to ``max(y) + 1``.
"""

import argparse

import numpy as np

from safle.data import FeatureMatrix, save_features


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("npz")
    p.add_argument("out")
    p.add_argument("--classes", type=int)
    args = p.parse_args()

    with np.load(args.npz) as data:
        X, y = data["X"], data["y"]
    n_classes = args.classes or int(y.max()) + 1
    n = save_features(FeatureMatrix(X, y, n_classes), args.out)
    print(f"wrote {args.out}: {X.shape[0]} x {X.shape[1]}, {n_classes} classes, {n} bytes")


if __name__ == "__main__":
    main()
