"""Quantile bucketing of continuous features into small-alphabet codes.

Three strategies turn each scalar feature into a fixed-length block of
integer codes:

* ``INTEGER``: one code per feature, the bin index in ``0..B_n-1``.
* ``ONEHOT``: ``B_n`` bits, bit ``l`` set iff the value falls in bin ``l``.
* ``BINARY_OVERLAP``: thermometer bits, bit ``l`` set iff ``x >= t_l``.
  There is one bit per threshold, so ``B_n - 1`` bits per feature.

Thresholds are per-feature empirical quantiles at ``1/B_n, ..., (B_n-1)/B_n``
(inverse-CDF definition with averaging at exact order-statistic hits).
Duplicated thresholds and thresholds at the column minimum are collapsed;
the freed slots hold ``+inf`` so every feature keeps the same block length.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CodeOutOfRange, ConfigError, DimensionMismatch, FormatError, NonFiniteValue

_ENCODE_CHUNK = 4096


class BucketKind(enum.IntEnum):
    INTEGER = 0
    ONEHOT = 1
    BINARY_OVERLAP = 2

    @classmethod
    def parse(cls, name: str) -> "BucketKind":
        key = name.strip().lower().replace("_", "-")
        aliases = {
            "integer": cls.INTEGER,
            "onehot": cls.ONEHOT,
            "one-hot": cls.ONEHOT,
            "binary-overlap": cls.BINARY_OVERLAP,
            "binaryoverlap": cls.BINARY_OVERLAP,
            "thermometer": cls.BINARY_OVERLAP,
        }
        if key not in aliases:
            raise ConfigError(f"unknown bucketing strategy {name!r}")
        return aliases[key]

    @property
    def cli_name(self) -> str:
        return {0: "integer", 1: "onehot", 2: "binary-overlap"}[int(self)]


@dataclass(frozen=True)
class BucketStrategy:
    kind: BucketKind
    buckets: int

    def __post_init__(self):
        if int(self.buckets) < 2:
            raise ConfigError(f"bucket count must be >= 2, got {self.buckets}")
        object.__setattr__(self, "kind", BucketKind(self.kind))
        object.__setattr__(self, "buckets", int(self.buckets))

    @property
    def codes_per_feature(self) -> int:
        if self.kind == BucketKind.INTEGER:
            return 1
        if self.kind == BucketKind.ONEHOT:
            return self.buckets
        return self.buckets - 1

    @property
    def alphabet(self) -> int:
        return self.buckets if self.kind == BucketKind.INTEGER else 2


@dataclass(frozen=True, eq=False)
class BucketingModel:
    """Fitted thresholds, shape ``(d_b, B_n - 1)``, shared by every client."""

    strategy: BucketStrategy
    thresholds: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.array(self.thresholds, dtype=np.float64)
        if t.ndim != 2 or t.shape[1] != self.strategy.buckets - 1:
            raise DimensionMismatch(
                f"thresholds must have shape (d_b, {self.strategy.buckets - 1}), got {t.shape}"
            )
        t.setflags(write=False)
        object.__setattr__(self, "thresholds", t)

    @property
    def n_features(self) -> int:
        return self.thresholds.shape[0]

    @property
    def n_codes(self) -> int:
        return self.n_features * self.strategy.codes_per_feature

    @property
    def alphabet(self) -> int:
        return self.strategy.alphabet

    @property
    def degenerate_features(self) -> np.ndarray:
        """Features whose codes never change (constant or collapsed columns)."""
        return np.flatnonzero(np.all(np.isinf(self.thresholds), axis=1))

    def effective_buckets(self) -> np.ndarray:
        return 1 + np.sum(np.isfinite(self.thresholds), axis=1)

    def __eq__(self, other):
        if not isinstance(other, BucketingModel):
            return NotImplemented
        return self.strategy == other.strategy and np.array_equal(self.thresholds, other.thresholds)

    def to_bytes(self) -> bytes:
        head = struct.pack("<BII", int(self.strategy.kind), self.strategy.buckets, self.n_features)
        return head + self.thresholds.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["BucketingModel", int]:
        try:
            kind, buckets, d_b = struct.unpack_from("<BII", buf, offset)
        except struct.error as exc:
            raise FormatError("truncated bucketing block") from exc
        offset += struct.calcsize("<BII")
        if kind not in (0, 1, 2) or buckets < 2:
            raise FormatError(f"bad bucketing header kind={kind} buckets={buckets}")
        count = d_b * (buckets - 1)
        if len(buf) < offset + 8 * count:
            raise FormatError("truncated bucketing thresholds")
        t = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(d_b, buckets - 1)
        model = cls(BucketStrategy(BucketKind(kind), buckets), t.astype(np.float64))
        return model, offset + 8 * count


def quantile_thresholds(column: np.ndarray, buckets: int) -> np.ndarray:
    """Raw (uncollapsed) thresholds of one column.

    For ``q = j / B_n`` the threshold is the sorted value at index
    ``ceil(q N) - 1``; when ``q N`` is an integer ``m`` the two order
    statistics ``m - 1`` and ``m`` are averaged instead.
    """
    s = np.sort(np.asarray(column, dtype=np.float64))
    n = s.shape[0]
    out = np.empty(buckets - 1)
    for j in range(1, buckets):
        m, r = divmod(j * n, buckets)
        out[j - 1] = s[m] if r else 0.5 * (s[m - 1] + s[m])
    return out


def _collapse(raw: np.ndarray, col_min: float) -> np.ndarray:
    keep = np.unique(raw[raw > col_min])
    out = np.full(raw.shape[0], np.inf)
    out[: keep.shape[0]] = keep
    return out


def fit_boundaries(features, strategy: BucketStrategy) -> BucketingModel:
    """Fit per-feature quantile thresholds on a calibration matrix ``(N, d_b)``.

    Constant columns end up with all thresholds at ``+inf`` and always encode
    to code 0; they are listed in ``BucketingModel.degenerate_features``.
    """
    X = np.asarray(getattr(features, "X", features), dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d feature matrix, got shape {X.shape}")
    n, d_b = X.shape
    if n < strategy.buckets:
        raise ConfigError(f"need at least B_n={strategy.buckets} rows to fit, got {n}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteValue("calibration features contain NaN or Inf")
    thresholds = np.empty((d_b, strategy.buckets - 1))
    for i in range(d_b):
        col = X[:, i]
        thresholds[i] = _collapse(quantile_thresholds(col, strategy.buckets), col.min())
    return BucketingModel(strategy, thresholds)


def _encode_block(model: BucketingModel, X: np.ndarray) -> np.ndarray:
    above = X[:, :, None] >= model.thresholds[None, :, :]
    kind = model.strategy.kind
    n = X.shape[0]
    if kind == BucketKind.BINARY_OVERLAP:
        return above.reshape(n, -1).astype(np.int32)
    bins = above.sum(axis=2, dtype=np.int32)
    if kind == BucketKind.INTEGER:
        return bins
    onehot = bins[:, :, None] == np.arange(model.strategy.buckets, dtype=np.int32)
    return onehot.reshape(n, -1).astype(np.int32)


def encode_batch(model: BucketingModel, X) -> np.ndarray:
    """Encode an ``(N, d_b)`` matrix into ``(N, d_b * L)`` int32 codes."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise DimensionMismatch(f"expected (N, {model.n_features}) features, got {X.shape}")
    out = np.empty((X.shape[0], model.n_codes), dtype=np.int32)
    for start in range(0, X.shape[0], _ENCODE_CHUNK):
        stop = start + _ENCODE_CHUNK
        out[start:stop] = _encode_block(model, X[start:stop])
    return out


def encode(model: BucketingModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.n_features:
        raise DimensionMismatch(f"expected a vector of length {model.n_features}, got {x.shape}")
    return encode_batch(model, x[None, :])[0]


def encode_value(model: BucketingModel, value: float, feature_index: int) -> np.ndarray:
    """Code block of a single scalar at one feature position."""
    if not 0 <= feature_index < model.n_features:
        raise DimensionMismatch(f"feature index {feature_index} out of range")
    sub = BucketingModel(model.strategy, model.thresholds[feature_index : feature_index + 1])
    return _encode_block(sub, np.array([[value]], dtype=np.float64))[0]


def hamming(model: BucketingModel, x1: float, x2: float, feature_index: int) -> int:
    """Number of differing code digits between two values of one feature."""
    a = encode_value(model, x1, feature_index)
    b = encode_value(model, x2, feature_index)
    return int(np.count_nonzero(a != b))


def check_codes(codes: np.ndarray, alphabet: int) -> None:
    if codes.size and (codes.min() < 0 or codes.max() >= alphabet):
        raise CodeOutOfRange(f"codes must lie in 0..{alphabet - 1}")
