"""Single-round federated protocol simulation.

Each client lifts its own data, forms ``C_k + gamma I`` and ``M_k`` and sends
them once. The server sums the payloads in ascending client id, removes
``K gamma I`` and solves with the pseudoinverse. Because the sums equal the
pooled statistics, the result does not depend on how data was split.

Payload wire format (little-endian)::

    b"SFLP" | version u32 | client_id u32 | n_samples u64 | gamma f64
    | D_e u32 | C u32 | nnz u64 | nnz x (row u32, col u32, value f64)
    | M f64[D_e*C] row-major | checksum u64

Triplets cover the upper triangle including the diagonal, sorted by
``(row, col)``. The checksum is 64-bit FNV-1a over every preceding byte.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import scipy.sparse as sp

from .bucketing import BucketingModel, encode_batch
from .data import FeatureMatrix, one_hot
from .errors import (
    BadMagic,
    ChecksumMismatch,
    ConfigError,
    EmptyClient,
    FormatError,
    GammaMismatch,
    ShapeMismatch,
    ShapeOverflow,
    TooFewSamples,
)
from .lift import LiftConfig, lift_batch
from .solver import SafleModel, accumulate, empty_stats, gram_sparsity, predict_batch, recover_unregularized, regularize

PAYLOAD_MAGIC = b"SFLP"
PAYLOAD_VERSION = 1
_PAYLOAD_HEAD = struct.Struct("<4sIIQdIIQ")
_TRIPLET = np.dtype([("row", "<u4"), ("col", "<u4"), ("value", "<f8")])
MAX_REPAIRS = 100

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@numba.njit(cache=False)
def _fnv1a64(data, h):
    prime = np.uint64(FNV_PRIME)
    for b in data:
        h ^= np.uint64(b)
        h *= prime
    return h


def fnv1a64(data: bytes) -> int:
    arr = np.frombuffer(data, dtype=np.uint8)
    return int(_fnv1a64(arr, np.uint64(FNV_OFFSET)))


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("SAFLE_THREADS", "1")))
    except ValueError:
        return 1


# -- partitioning -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    scheme: str
    param: float
    n_clients: int
    seed: int
    assignment: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.ndim != 1 or (a.size and (a.min() < 0 or a.max() >= self.n_clients)):
            raise ConfigError("assignment entries must be client ids in 0..K-1")
        counts = np.bincount(a, minlength=self.n_clients)
        if np.any(counts == 0):
            raise EmptyClient(f"clients {np.flatnonzero(counts == 0).tolist()} hold no samples")
        object.__setattr__(self, "assignment", a)

    def client_indices(self, client_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client_id)

    def client_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clients)

    def label_histograms(self, labels, n_classes: int) -> np.ndarray:
        hist = np.zeros((self.n_clients, n_classes), dtype=np.int64)
        np.add.at(hist, (self.assignment, np.asarray(labels)), 1)
        return hist

    def label_entropies(self, labels, n_classes: int) -> np.ndarray:
        hist = self.label_histograms(labels, n_classes).astype(float)
        p = hist / hist.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, -p * np.log(p), 0.0)
        return terms.sum(axis=1)

    def to_json(self) -> str:
        return json.dumps(
            {
                "scheme": self.scheme,
                "param": self.param,
                "n_clients": self.n_clients,
                "seed": self.seed,
                "assignment": self.assignment.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        d = json.loads(text)
        return cls(d["scheme"], d["param"], d["n_clients"], d["seed"], np.array(d["assignment"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "PartitionPlan":
        return cls.from_json(Path(path).read_text())


def _repair_empty(assignment: np.ndarray, n_clients: int) -> np.ndarray:
    # move one sample from the largest client into each empty one
    for _ in range(MAX_REPAIRS):
        counts = np.bincount(assignment, minlength=n_clients)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return assignment
        donor = int(np.argmax(counts))
        victim = np.flatnonzero(assignment == donor)[-1]
        assignment[victim] = empty[0]
    if np.any(np.bincount(assignment, minlength=n_clients) == 0):
        raise EmptyClient(f"could not fill every client after {MAX_REPAIRS} repairs")
    return assignment


def partition_dirichlet(labels, n_clients: int, alpha: float, seed: int = 0) -> PartitionPlan:
    """Per class, draw client shares from Dirichlet(alpha) and split multinomially."""
    labels = np.asarray(labels, dtype=np.int64)
    if n_clients < 1:
        raise ConfigError("need at least one client")
    if not alpha > 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    if labels.shape[0] < n_clients:
        raise TooFewSamples(f"{labels.shape[0]} samples cannot fill {n_clients} clients")
    rng = np.random.default_rng(seed)
    assignment = np.empty(labels.shape[0], dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        shares = rng.dirichlet(np.full(n_clients, float(alpha)))
        counts = rng.multinomial(idx.shape[0], shares / shares.sum())
        assignment[idx] = np.repeat(np.arange(n_clients), counts)
    assignment = _repair_empty(assignment, n_clients)
    return PartitionPlan("dirichlet", float(alpha), n_clients, seed, assignment)


def partition_shard(labels, n_clients: int, shards_per_client: int, seed: int = 0) -> PartitionPlan:
    """Sort by label, cut ``K*s`` contiguous shards, shuffle them and deal ``s`` each."""
    labels = np.asarray(labels, dtype=np.int64)
    if n_clients < 1 or shards_per_client < 1:
        raise ConfigError("client count and shards per client must be >= 1")
    total = n_clients * shards_per_client
    if labels.shape[0] < total:
        raise TooFewSamples(f"{labels.shape[0]} samples cannot form {total} shards")
    rng = np.random.default_rng(seed)
    shards = np.array_split(np.argsort(labels, kind="stable"), total)
    order = rng.permutation(total)
    assignment = np.empty(labels.shape[0], dtype=np.int64)
    for pos, shard in enumerate(order):
        assignment[shards[shard]] = pos // shards_per_client
    return PartitionPlan("shard", shards_per_client, n_clients, seed, assignment)


def parse_partition(text: str, n_clients: int, labels, seed: int = 0) -> PartitionPlan:
    """Build a plan from ``dirichlet:<alpha>`` or ``shard:<s>``."""
    name, _, value = text.partition(":")
    try:
        if name == "dirichlet":
            return partition_dirichlet(labels, n_clients, float(value), seed)
        if name == "shard":
            return partition_shard(labels, n_clients, int(value), seed)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad partition parameter in {text!r}") from exc
    raise ConfigError(f"unknown partition scheme {text!r}; use dirichlet:<alpha> or shard:<s>")


# -- payloads -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClientPayload:
    client_id: int
    n_samples: int
    gamma: float
    gram: sp.csr_matrix = field(repr=False)
    moments: np.ndarray = field(repr=False)

    @property
    def lifted_dim(self) -> int:
        return self.moments.shape[0]

    @property
    def n_classes(self) -> int:
        return self.moments.shape[1]

    def triplets(self) -> np.ndarray:
        coo = sp.triu(self.gram, format="csr")
        coo.sum_duplicates()
        coo.sort_indices()
        out = np.empty(coo.nnz, dtype=_TRIPLET)
        out["row"] = np.repeat(np.arange(coo.shape[0]), np.diff(coo.indptr))
        out["col"] = coo.indices
        out["value"] = coo.data
        return out

    def to_bytes(self) -> bytes:
        trip = self.triplets()
        body = b"".join(
            [
                _PAYLOAD_HEAD.pack(
                    PAYLOAD_MAGIC,
                    PAYLOAD_VERSION,
                    self.client_id,
                    self.n_samples,
                    self.gamma,
                    self.lifted_dim,
                    self.n_classes,
                    trip.shape[0],
                ),
                trip.tobytes(),
                np.ascontiguousarray(self.moments, dtype="<f8").tobytes(),
            ]
        )
        return body + struct.pack("<Q", fnv1a64(body))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ClientPayload":
        if buf[:4] != PAYLOAD_MAGIC:
            raise BadMagic(f"expected payload magic {PAYLOAD_MAGIC!r}")
        if len(buf) < _PAYLOAD_HEAD.size + 8:
            raise ShapeOverflow("payload truncated")
        _, version, cid, n, gamma, d_e, n_cls, nnz = _PAYLOAD_HEAD.unpack_from(buf)
        if version != PAYLOAD_VERSION:
            raise FormatError(f"unsupported payload version {version}")
        off = _PAYLOAD_HEAD.size
        need = off + nnz * _TRIPLET.itemsize + 8 * d_e * n_cls + 8
        if len(buf) != need:
            raise ShapeOverflow(f"payload header promises {need} bytes, got {len(buf)}")
        (stored,) = struct.unpack_from("<Q", buf, need - 8)
        if fnv1a64(memoryview(buf)[: need - 8]) != stored:
            raise ChecksumMismatch(f"payload of client {cid} failed its checksum")
        trip = np.frombuffer(buf, _TRIPLET, nnz, off)
        off += nnz * _TRIPLET.itemsize
        M = np.frombuffer(buf, "<f8", d_e * n_cls, off).reshape(d_e, n_cls).astype(np.float64)
        if nnz and (trip["row"].max() >= d_e or trip["col"].max() >= d_e or np.any(trip["row"] > trip["col"])):
            raise FormatError("payload triplets outside the upper triangle")
        gram = sp.csr_matrix(
            (trip["value"].astype(np.float64), (trip["row"].astype(np.int64), trip["col"].astype(np.int64))),
            shape=(d_e, d_e),
        )
        gram.sort_indices()
        return cls(cid, n, gamma, gram, M)


def client_round(
    features: FeatureMatrix,
    plan: PartitionPlan,
    client_id: int,
    bucketing: BucketingModel,
    lift: LiftConfig,
    gamma: float,
) -> ClientPayload:
    """What one client computes: encode, lift, accumulate, add the ridge."""
    idx = plan.client_indices(client_id)
    if idx.size == 0:
        raise EmptyClient(f"client {client_id} holds no samples")
    rows = lift_batch(lift, encode_batch(bucketing, features.X[idx]))
    stats = accumulate(
        empty_stats(lift.lifted_dim, features.n_classes), rows, one_hot(features.y[idx], features.n_classes)
    )
    stats = regularize(stats, gamma)
    return ClientPayload(client_id, stats.n_samples, stats.gamma, stats.gram, stats.moments)


class Aggregator:
    """Server-side running sum; payloads must arrive in ascending client id."""

    def __init__(self):
        self.gram = None
        self.moments = None
        self.gamma = None
        self.count = 0
        self.n_samples = 0
        self._last_id = -1

    def add(self, payload: ClientPayload) -> None:
        if payload.client_id <= self._last_id:
            raise ConfigError(
                f"payload {payload.client_id} out of order or duplicated (last {self._last_id})"
            )
        if self.gram is None:
            self.gram = payload.gram.copy()
            self.moments = payload.moments.copy()
            self.gamma = payload.gamma
        else:
            if payload.moments.shape != self.moments.shape:
                raise ShapeMismatch(f"payload shape {payload.moments.shape} != {self.moments.shape}")
            if payload.gamma != self.gamma:
                raise GammaMismatch(f"payload gamma {payload.gamma} != {self.gamma}")
            self.gram = self.gram + payload.gram
            self.moments = self.moments + payload.moments
        self._last_id = payload.client_id
        self.count += 1
        self.n_samples += payload.n_samples

    def result(self):
        if self.count == 0:
            raise ConfigError("no payloads to aggregate")
        gram = self.gram.tocsr()
        gram.sum_duplicates()
        gram.sort_indices()
        return gram, self.moments, self.count


def aggregate(payloads) -> tuple[sp.csr_matrix, np.ndarray, int]:
    """Sum ``(C_k^r, M_k)`` over payloads in ascending client id; returns ``(C, M, K)``."""
    agg = Aggregator()
    for p in sorted(payloads, key=lambda p: p.client_id):
        agg.add(p)
    return agg.result()


# -- protocol driver ------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolConfig:
    bucketing: BucketingModel
    lift: LiftConfig
    gamma: float = 1.0
    workers: int | None = None
    spool_dir: str | None = None


@dataclass
class CommReport:
    payload_bytes: list[int]
    client_sparsity: list[float]
    aggregate_sparsity: float
    rounds: int = 1

    @property
    def n_clients(self) -> int:
        return len(self.payload_bytes)

    @property
    def total_bytes(self) -> int:
        return int(sum(self.payload_bytes))

    @property
    def mean_payload_mb(self) -> float:
        return self.total_bytes / max(1, self.n_clients) / 1e6


def _transport(buf: bytes, client_id: int, spool_dir) -> bytes:
    if spool_dir is None:
        return buf
    path = Path(spool_dir) / f"client_{client_id:05d}.sflp"
    path.write_bytes(buf)
    return path.read_bytes()


def run_protocol(features: FeatureMatrix, plan: PartitionPlan, config: ProtocolConfig):
    """Run one communication round over every client and solve at the server.

    Returns ``(SafleModel, CommReport)``. Client work may run on a thread pool
    (``SAFLE_THREADS``); merging always happens in ascending client id.
    """
    if not config.gamma > 0:
        raise ConfigError(f"gamma must be > 0, got {config.gamma}")
    if config.spool_dir is not None:
        Path(config.spool_dir).mkdir(parents=True, exist_ok=True)

    def work(cid: int):
        payload = client_round(features, plan, cid, config.bucketing, config.lift, config.gamma)
        wire = _transport(payload.to_bytes(), cid, config.spool_dir)
        return ClientPayload.from_bytes(wire), len(wire)

    workers = config.workers or default_workers()
    agg = Aggregator()
    sizes, sparsity, sent = [], [], np.zeros(plan.n_clients, dtype=np.int64)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for received, nbytes in pool.map(work, range(plan.n_clients)):
            sent[received.client_id] += 1
            sizes.append(nbytes)
            sparsity.append(gram_sparsity(received.gram))
            agg.add(received)
    if not np.all(sent == 1):
        raise RuntimeError("single-round protocol violated: expected one payload per client")
    gram, moments, k = agg.result()
    W = recover_unregularized(gram, moments, k, config.gamma)
    model = SafleModel(W, config.bucketing, config.lift, features.n_classes)
    report = CommReport(sizes, sparsity, gram_sparsity(gram), rounds=1)
    return model, report


def evaluate(model: SafleModel, features: FeatureMatrix) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    return float(np.mean(predictions(model, features.X) == features.y))


def predictions(model: SafleModel, X) -> np.ndarray:
    return np.argmax(predict_batch(model, X), axis=1)


def confusion(model: SafleModel, features: FeatureMatrix) -> np.ndarray:
    out = np.zeros((model.n_classes, model.n_classes), dtype=np.int64)
    np.add.at(out, (features.y, predictions(model, features.X)), 1)
    return out
