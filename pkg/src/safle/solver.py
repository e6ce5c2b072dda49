"""Closed-form least squares over the lifted feature space.

The lifted design matrix has exactly ``E`` ones per row, so its Gram matrix
``C = Phi^T Phi`` holds co-occurrence counts and ``M = Phi^T Y`` holds
per-class activation counts. Both are plain sums over samples, which is what
makes client statistics add up to the pooled statistics.

``C`` is stored as the upper triangle (diagonal included) in a
``scipy.sparse.csr_matrix``; factorisation happens on a dense copy, so the
lifted dimension is capped at ``DENSE_LIMIT``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .bucketing import BucketingModel, encode_batch
from .data import one_hot
from .errors import (
    AlreadyRegularized,
    BadMagic,
    ConfigError,
    DimensionMismatch,
    FactorizationFailure,
    FormatError,
    IndexOutOfRange,
    NegativeEigenBeyondTolerance,
    NonPositiveGamma,
    NotRegularized,
    ShapeMismatch,
    ShapeOverflow,
)
from .lift import LiftConfig, lift_batch

DENSE_LIMIT = 16384
RANK_CUTOFF = 1e-10
NEGATIVE_EIG_TOL = 1e-8

MODEL_MAGIC = b"SAFL"
MODEL_VERSION = 1


def _upper(mat) -> sp.csr_matrix:
    out = sp.triu(mat, format="csr")
    out.sum_duplicates()
    out.sort_indices()
    return out


@dataclass(frozen=True, eq=False)
class GramStats:
    gram: sp.csr_matrix = field(repr=False)
    moments: np.ndarray = field(repr=False)
    n_samples: int = 0
    gamma: float = 0.0
    regularized: bool = False

    @property
    def lifted_dim(self) -> int:
        return self.moments.shape[0]

    @property
    def n_classes(self) -> int:
        return self.moments.shape[1]

    def dense_gram(self) -> np.ndarray:
        return symmetric_dense(self.gram)


def empty_stats(lifted_dim: int, n_classes: int) -> GramStats:
    return GramStats(
        sp.csr_matrix((lifted_dim, lifted_dim), dtype=np.float64),
        np.zeros((lifted_dim, n_classes)),
    )


def symmetric_dense(upper) -> np.ndarray:
    """Full symmetric dense matrix from an upper-triangular sparse store."""
    if upper.shape[0] > DENSE_LIMIT:
        raise ConfigError(f"lifted dimension {upper.shape[0]} exceeds dense limit {DENSE_LIMIT}")
    u = upper.toarray()
    return u + u.T - np.diag(np.diag(u))


def lifted_matrix(rows: np.ndarray, lifted_dim: int) -> sp.csr_matrix:
    rows = np.asarray(rows, dtype=np.int64)
    n, e = rows.shape
    if rows.size and (rows.min() < 0 or rows.max() >= lifted_dim):
        raise IndexOutOfRange(f"active index outside 0..{lifted_dim - 1}")
    indptr = np.arange(0, n * e + 1, e, dtype=np.int64)
    return sp.csr_matrix((np.ones(n * e), rows.ravel(), indptr), shape=(n, lifted_dim))


def accumulate(stats: GramStats, rows, labels) -> GramStats:
    """Add a batch of lifted rows ``(N, E)`` with one-hot labels ``(N, C)``."""
    if stats.regularized:
        raise AlreadyRegularized("cannot accumulate into regularized statistics")
    rows = np.asarray(rows, dtype=np.int64)
    if rows.ndim == 1:
        rows = rows.reshape(1, -1) if rows.size else rows.reshape(0, 0)
    Y = np.asarray(labels, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != rows.shape[0] or Y.shape[1] != stats.n_classes:
        raise DimensionMismatch(f"labels must have shape ({rows.shape[0]}, {stats.n_classes})")
    if rows.shape[0] == 0:
        return stats
    phi = lifted_matrix(rows, stats.lifted_dim)
    gram = _upper(stats.gram + _upper(phi.T @ phi))
    moments = stats.moments + phi.T @ Y
    return replace(stats, gram=gram, moments=moments, n_samples=stats.n_samples + rows.shape[0])


def merge(a: GramStats, b: GramStats) -> GramStats:
    """Entrywise sum of two statistics objects with matching shapes and gamma flags."""
    if a.moments.shape != b.moments.shape:
        raise ShapeMismatch(f"cannot merge stats of shapes {a.moments.shape} and {b.moments.shape}")
    if a.regularized != b.regularized:
        raise ConfigError("cannot merge regularized with unregularized stats")
    return GramStats(
        _upper(a.gram + b.gram),
        a.moments + b.moments,
        a.n_samples + b.n_samples,
        a.gamma + b.gamma,
        a.regularized,
    )


def regularize(stats: GramStats, gamma: float) -> GramStats:
    if stats.regularized:
        raise AlreadyRegularized("statistics already carry a ridge term")
    if not gamma > 0:
        raise NonPositiveGamma(f"gamma must be > 0, got {gamma}")
    ridge = sp.identity(stats.lifted_dim, format="csr") * float(gamma)
    return replace(stats, gram=_upper(stats.gram + ridge), gamma=float(gamma), regularized=True)


def solve_regularized(stats: GramStats) -> np.ndarray:
    """Ridge solution ``(C + gamma I)^-1 M`` via a Cholesky factorisation."""
    if not stats.regularized:
        raise NotRegularized("solve_regularized needs regularized statistics")
    A = stats.dense_gram()
    try:
        factor = scipy.linalg.cho_factor(A, lower=False, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationFailure("Gram matrix not positive definite; increase gamma") from exc
    return scipy.linalg.cho_solve(factor, stats.moments, check_finite=False)


def pinv_solve(A: np.ndarray, M: np.ndarray, rcond: float = RANK_CUTOFF) -> np.ndarray:
    """Minimum-norm solution of ``A W = M`` for symmetric PSD ``A``.

    Eigenvalues at or below ``rcond * lambda_max`` are treated as zero.
    """
    M = np.asarray(M, dtype=np.float64)
    evals, evecs = np.linalg.eigh(A)
    top = evals[-1] if evals.size else 0.0
    if top <= 0:
        return np.zeros((A.shape[0],) + M.shape[1:])
    if evals[0] < -NEGATIVE_EIG_TOL * top:
        raise NegativeEigenBeyondTolerance(
            f"smallest eigenvalue {evals[0]:.3e} is too negative for a PSD Gram (max {top:.3e})"
        )
    keep = evals > rcond * top
    Q = evecs[:, keep]
    coeff = Q.T @ M
    coeff /= evals[keep].reshape((-1,) + (1,) * (M.ndim - 1))
    return Q @ coeff


def recover_unregularized(C_agg, M_agg, n_clients: int, gamma: float, rcond: float = RANK_CUTOFF) -> np.ndarray:
    """Strip the summed ridge ``K * gamma * I`` and return the pseudoinverse solution.

    ``C_agg`` is either a sparse upper triangle (as carried by payloads) or a
    full dense symmetric matrix.
    """
    if n_clients < 1:
        raise ConfigError("need at least one client")
    if not gamma > 0:
        raise NonPositiveGamma(f"gamma must be > 0, got {gamma}")
    M = np.asarray(M_agg, dtype=np.float64)
    if C_agg.shape[0] != C_agg.shape[1] or C_agg.shape[0] != M.shape[0]:
        raise ShapeMismatch(f"Gram {C_agg.shape} incompatible with moments {M.shape}")
    ridge = n_clients * gamma
    diag = (C_agg.diagonal() if sp.issparse(C_agg) else np.diag(C_agg)) - ridge
    top = diag.max(initial=0.0)
    if diag.min(initial=0.0) < -NEGATIVE_EIG_TOL * max(top, 1.0):
        raise NegativeEigenBeyondTolerance("recovered Gram has a negative diagonal entry")
    W = np.zeros(M.shape)
    if top <= 0:
        return W
    # a PSD matrix with a ~zero diagonal entry has a ~zero row, which the
    # pseudoinverse maps to zero; solve on the remaining columns only
    active = np.flatnonzero(diag > rcond * top)
    if sp.issparse(C_agg):
        A = symmetric_dense(sp.csr_matrix(C_agg)[active][:, active])
    else:
        A = np.array(C_agg, dtype=np.float64)[np.ix_(active, active)]
    A[np.diag_indices_from(A)] -= ridge
    W[active] = pinv_solve(A, M[active], rcond)
    return W


def gram_sparsity(stats) -> float:
    """Fraction of zero entries in the full symmetric Gram matrix."""
    upper = stats.gram if isinstance(stats, GramStats) else stats
    d = upper.shape[0]
    if d == 0:
        return 1.0
    coo = upper.tocoo()
    nz = coo.data != 0
    diag = int(np.count_nonzero(coo.row[nz] == coo.col[nz]))
    full = 2 * int(np.count_nonzero(nz)) - diag
    return 1.0 - full / float(d) ** 2


@dataclass(frozen=True, eq=False)
class SafleModel:
    weights: np.ndarray = field(repr=False)
    bucketing: BucketingModel
    lift: LiftConfig
    n_classes: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.lift.lifted_dim, self.n_classes):
            raise ShapeMismatch(
                f"weights shape {w.shape} != ({self.lift.lifted_dim}, {self.n_classes})"
            )
        if self.bucketing.n_codes != self.lift.n_codes:
            raise ShapeMismatch("bucketing output length does not match lift input length")
        object.__setattr__(self, "weights", w)

    def tables(self) -> np.ndarray:
        """Per-expert embedding tables, shape ``(E, V, C)``."""
        return self.weights.reshape(self.lift.experts, self.lift.vocab, self.n_classes)

    def lifted_rows(self, X) -> np.ndarray:
        return lift_batch(self.lift, encode_batch(self.bucketing, X))


def lookup_logits(weights: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Sum the selected table rows expert by expert in ascending order."""
    rows = np.asarray(rows)
    out = np.zeros((rows.shape[0], weights.shape[1]))
    for j in range(rows.shape[1]):
        out += weights[rows[:, j]]
    return out


def sparse_logits(weights: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``Phi(x)^T W`` as a sparse product; same additions as ``lookup_logits``."""
    return lifted_matrix(rows, weights.shape[0]) @ weights


def predict_batch(model: SafleModel, X) -> np.ndarray:
    return lookup_logits(model.weights, model.lifted_rows(X))


def predict(model: SafleModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("predict expects one feature vector; use predict_batch")
    return predict_batch(model, x[None, :])[0]


def fit_safle(
    X,
    labels,
    n_classes: int,
    bucketing: BucketingModel,
    lift: LiftConfig,
    gamma: float = 1.0,
) -> SafleModel:
    """Pooled (single-party) fit: the same ridge-then-recover path with one client."""
    rows = lift_batch(lift, encode_batch(bucketing, X))
    stats = accumulate(empty_stats(lift.lifted_dim, n_classes), rows, one_hot(labels, n_classes))
    stats = regularize(stats, gamma)
    W = recover_unregularized(stats.gram, stats.moments, 1, gamma)
    return SafleModel(W, bucketing, lift, n_classes)


def fit_linear_baseline(X, labels, n_classes: int, gamma: float = 1.0, recover: bool = True) -> np.ndarray:
    """Linear head on raw features, ``d_b x C``.

    With ``recover`` the ridge is removed again and the minimum-norm least
    squares solution is returned; otherwise the ridge solution itself.
    """
    X = np.asarray(X, dtype=np.float64)
    if not gamma > 0:
        raise NonPositiveGamma(f"gamma must be > 0, got {gamma}")
    Y = one_hot(labels, n_classes) if np.ndim(labels) == 1 else np.asarray(labels, dtype=np.float64)
    C_r = X.T @ X + gamma * np.eye(X.shape[1])
    M = X.T @ Y
    if recover:
        return recover_unregularized(C_r, M, 1, gamma)
    try:
        factor = scipy.linalg.cho_factor(C_r, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationFailure("linear Gram not positive definite") from exc
    return scipy.linalg.cho_solve(factor, M, check_finite=False)


def model_to_bytes(model: SafleModel) -> bytes:
    return b"".join(
        [
            MODEL_MAGIC,
            struct.pack("<I", MODEL_VERSION),
            model.bucketing.to_bytes(),
            model.lift.to_bytes(),
            struct.pack("<I", model.n_classes),
            model.weights.astype("<f8").tobytes(),
        ]
    )


def model_from_bytes(buf: bytes) -> SafleModel:
    if buf[:4] != MODEL_MAGIC:
        raise BadMagic(f"expected model magic {MODEL_MAGIC!r}, got {bytes(buf[:4])!r}")
    if len(buf) < 8:
        raise ShapeOverflow("model header truncated")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    bucketing, off = BucketingModel.from_bytes(buf, 8)
    lift, off = LiftConfig.from_bytes(buf, off)
    if len(buf) < off + 4:
        raise ShapeOverflow("model file truncated before class count")
    (n_classes,) = struct.unpack_from("<I", buf, off)
    off += 4
    count = lift.lifted_dim * n_classes
    if len(buf) != off + 8 * count:
        raise ShapeOverflow(f"weight block holds {len(buf) - off} bytes, expected {8 * count}")
    W = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(lift.lifted_dim, n_classes)
    return SafleModel(W.astype(np.float64), bucketing, lift, n_classes)


def save_model(model: SafleModel, path) -> int:
    data = model_to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_model(path) -> SafleModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
