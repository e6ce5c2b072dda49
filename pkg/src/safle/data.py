"""Feature matrices, the SFLF feature file and synthetic generators.

SFLF layout (little-endian)::

    b"SFLF" | version u32 | N u64 | d_b u32 | C u32 | X f32[N*d_b] | y u32[N]

Features are stored as f32 and promoted to f64 on load.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, ConfigError, FormatError, LabelOutOfRange, NonFiniteValue, ShapeOverflow

FEATURE_MAGIC = b"SFLF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIQII")


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    X: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    n_classes: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ConfigError(f"inconsistent shapes X{X.shape} y{y.shape}")
        if X.shape[0] < 1:
            raise ConfigError("feature matrix needs at least one row")
        if not np.all(np.isfinite(X)):
            raise NonFiniteValue("features contain NaN or Inf")
        if self.n_classes < 1 or y.min() < 0 or y.max() >= self.n_classes:
            raise LabelOutOfRange(f"labels must lie in 0..{self.n_classes - 1}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, index) -> "FeatureMatrix":
        return FeatureMatrix(self.X[index], self.y[index], self.n_classes)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in 0..{n_classes - 1}")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def features_to_bytes(fm: FeatureMatrix) -> bytes:
    head = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, fm.n_samples, fm.n_features, fm.n_classes)
    return head + fm.X.astype("<f4").tobytes() + fm.y.astype("<u4").tobytes()


def features_from_bytes(buf: bytes) -> FeatureMatrix:
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise BadMagic(f"expected feature magic {FEATURE_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise ShapeOverflow("feature header truncated")
    _, version, n, d_b, n_classes = _HEADER.unpack_from(buf)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    need = _HEADER.size + 4 * n * d_b + 4 * n
    if len(buf) != need:
        raise ShapeOverflow(f"header promises {need} bytes, file has {len(buf)}")
    X = np.frombuffer(buf, "<f4", n * d_b, _HEADER.size).reshape(n, d_b)
    y = np.frombuffer(buf, "<u4", n, _HEADER.size + 4 * n * d_b)
    if not np.all(np.isfinite(X)):
        raise NonFiniteValue("feature file contains NaN or Inf")
    if n and y.max() >= n_classes:
        raise LabelOutOfRange(f"label {int(y.max())} >= class count {n_classes}")
    return FeatureMatrix(X.astype(np.float64), y.astype(np.int64), n_classes)


def save_features(fm: FeatureMatrix, path) -> int:
    data = features_to_bytes(fm)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        return features_from_bytes(fh.read())


class Generator(enum.Enum):
    XOR = "xor"
    GAUSSIAN_MIXTURES = "gaussian-mixtures"
    LINEARLY_SEPARABLE = "linear"


@dataclass(frozen=True)
class SyntheticSpec:
    generator: Generator
    n_samples: int
    n_features: int
    n_classes: int = 2
    noise_sigma: float = 0.0
    seed: int = 0
    clusters_per_class: int = 3
    margin: float = 0.1
    pairs_per_bit: int = 1


def _xor(syn: SyntheticSpec, rng: np.random.Generator):
    # class bit b is the majority vote of the sign parities of its designated pairs;
    # with one pair per bit this is plain XOR
    bits = int(np.log2(syn.n_classes))
    r = syn.pairs_per_bit
    if 2**bits != syn.n_classes or bits < 1:
        raise ConfigError("xor generator needs a power-of-two class count >= 2")
    if r < 1 or r % 2 == 0:
        raise ConfigError("pairs_per_bit must be a positive odd number")
    informative = 2 * bits * r
    if syn.n_features < informative:
        raise ConfigError(f"xor with {syn.n_classes} classes needs at least {informative} features")
    X = rng.standard_normal((syn.n_samples, syn.n_features))
    signs = (X[:, :informative] > 0).astype(np.int64).reshape(-1, bits, r, 2)
    parity = signs[..., 0] ^ signs[..., 1]
    votes = (2 * parity.sum(axis=2) > r).astype(np.int64)
    y = votes @ (2 ** np.arange(bits))
    if syn.noise_sigma > 0:
        X[:, :informative] += syn.noise_sigma * rng.standard_normal((syn.n_samples, informative))
    return X, y


def _mixtures(syn: SyntheticSpec, rng: np.random.Generator):
    centers = 2.0 * rng.standard_normal((syn.n_classes, syn.clusters_per_class, syn.n_features))
    y = rng.integers(0, syn.n_classes, syn.n_samples)
    which = rng.integers(0, syn.clusters_per_class, syn.n_samples)
    sigma = syn.noise_sigma if syn.noise_sigma > 0 else 1.0
    X = centers[y, which] + sigma * rng.standard_normal((syn.n_samples, syn.n_features))
    return X, y


def _linear(syn: SyntheticSpec, rng: np.random.Generator):
    # hyperplanes through the origin; rejection keeps a margin between the top two scores
    W = rng.standard_normal((syn.n_features, syn.n_classes))
    W /= np.linalg.norm(W, axis=0)
    if syn.n_classes == 2:
        W[:, 1] = -W[:, 0]
    kept_X, kept_y, have = [], [], 0
    while have < syn.n_samples:
        X = rng.standard_normal((2 * syn.n_samples, syn.n_features))
        s = np.sort(X @ W, axis=1)
        ok = s[:, -1] - s[:, -2] >= 2 * syn.margin
        kept_X.append(X[ok])
        kept_y.append(np.argmax(X[ok] @ W, axis=1))
        have += int(ok.sum())
    X = np.concatenate(kept_X)[: syn.n_samples]
    y = np.concatenate(kept_y)[: syn.n_samples]
    if syn.noise_sigma > 0:
        X = X + syn.noise_sigma * rng.standard_normal(X.shape)
    return X, y


def generate(syn: SyntheticSpec) -> FeatureMatrix:
    if syn.n_samples < 1 or syn.n_features < 1 or syn.n_classes < 2:
        raise ConfigError("synthetic syn needs n_samples >= 1, n_features >= 1, n_classes >= 2")
    rng = np.random.default_rng(syn.seed)
    make = {
        Generator.XOR: _xor,
        Generator.GAUSSIAN_MIXTURES: _mixtures,
        Generator.LINEARLY_SEPARABLE: _linear,
    }[Generator(syn.generator)]
    X, y = make(syn, rng)
    return FeatureMatrix(X, y, syn.n_classes)


def train_test_split(fm: FeatureMatrix, test_fraction: float = 0.2, seed: int = 0):
    rng = np.random.default_rng(seed)
    order = rng.permutation(fm.n_samples)
    n_test = int(round(test_fraction * fm.n_samples))
    return fm.subset(np.sort(order[n_test:])), fm.subset(np.sort(order[:n_test]))
