"""Shuffle, group and index bucket codes into a sparse one-hot lift.

A code vector ``b`` of length ``d_q`` is permuted (``b'[i] = b[perm[i]]``),
cut into ``E`` consecutive groups of ``G`` digits and each group is read as
a base-``k`` number (first digit least significant). Group ``j`` activates
column ``j * V + idx_j`` of the lifted space, ``V = k**G``, so each lifted
row has exactly ``E`` ones, one per ``V``-sized block.

If ``E * G > d_q`` the permuted vector is right-padded with zero codes; if
``E * G < d_q`` (only reachable by asking for an explicit ``(E, G)`` pair,
as the fixed-size embedding sweeps do) the trailing permuted codes are
dropped.

Permutation PRNG
----------------
SplitMix64, with all arithmetic mod 2**64::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

Fisher-Yates runs ``i = n-1 .. 1`` and swaps ``perm[i]`` with
``perm[next() % (i + 1)]``, starting from the identity.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass

import numpy as np

from .bucketing import check_codes
from .errors import CodeOutOfRange, ConfigError, DimensionMismatch, FormatError

MASK64 = (1 << 64) - 1
MAX_VOCAB = 1 << 20


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def make_permutation(seed: int, n: int) -> np.ndarray:
    if n < 1:
        raise ConfigError("permutation length must be >= 1")
    gen = SplitMix64(seed)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = gen.next() % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.array(perm, dtype=np.int64)


def composite_index(group_codes, base: int) -> int:
    """Read ``G`` digits as a base-``k`` number, first digit least significant."""
    digits = [int(g) for g in group_codes]
    if any(d < 0 or d >= base for d in digits):
        raise CodeOutOfRange(f"group codes {digits} out of range for base {base}")
    idx = 0
    for power, d in enumerate(digits):
        idx += d * base**power
    return idx


@dataclass(frozen=True)
class LiftConfig:
    seed: int
    experts: int
    group_size: int
    base: int
    n_codes: int

    def __post_init__(self):
        if min(self.experts, self.group_size, self.n_codes) < 1:
            raise ConfigError("experts, group_size and n_codes must all be >= 1")
        if self.base < 2:
            raise ConfigError(f"base must be >= 2, got {self.base}")
        if self.base**self.group_size > MAX_VOCAB:
            raise ConfigError(
                f"vocabulary {self.base}**{self.group_size} exceeds the 2**20 guardrail"
            )
        if not 0 <= self.seed <= MASK64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    @classmethod
    def from_experts(cls, n_codes: int, experts: int, base: int, seed: int = 0) -> "LiftConfig":
        if experts < 1 or experts > n_codes:
            raise ConfigError(f"expert count must be in 1..{n_codes}, got {experts}")
        group = -(-n_codes // experts)
        return cls(seed, experts, group, base, n_codes)

    @classmethod
    def from_group_size(cls, n_codes: int, group_size: int, base: int, seed: int = 0) -> "LiftConfig":
        if group_size < 1:
            raise ConfigError("group size must be >= 1")
        return cls(seed, -(-n_codes // group_size), group_size, base, n_codes)

    @property
    def vocab(self) -> int:
        return self.base**self.group_size

    @property
    def lifted_dim(self) -> int:
        return self.experts * self.vocab

    @property
    def padding(self) -> int:
        return max(0, self.experts * self.group_size - self.n_codes)

    @property
    def permutation(self) -> np.ndarray:
        return _cached_permutation(self.seed, self.n_codes)

    def to_bytes(self) -> bytes:
        return struct.pack("<QIIII", self.seed, self.experts, self.group_size, self.base, self.n_codes)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["LiftConfig", int]:
        try:
            seed, e, g, k, d_q = struct.unpack_from("<QIIII", buf, offset)
        except struct.error as exc:
            raise FormatError("truncated lift block") from exc
        try:
            cfg = cls(seed, e, g, k, d_q)
        except ConfigError as exc:
            raise FormatError(f"invalid lift block: {exc}") from exc
        return cfg, offset + struct.calcsize("<QIIII")


@functools.lru_cache(maxsize=64)
def _cached_permutation(seed: int, n: int) -> np.ndarray:
    perm = make_permutation(seed, n)
    perm.setflags(write=False)
    return perm


def lift_batch(config: LiftConfig, codes) -> np.ndarray:
    """Active lifted indices, shape ``(N, E)``, ascending within each row."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != config.n_codes:
        raise DimensionMismatch(f"expected (N, {config.n_codes}) codes, got {codes.shape}")
    check_codes(codes, config.base)
    n = codes.shape[0]
    width = config.experts * config.group_size
    shuffled = codes[:, config.permutation].astype(np.int64)
    if width > config.n_codes:
        shuffled = np.concatenate([shuffled, np.zeros((n, width - config.n_codes), np.int64)], axis=1)
    else:
        shuffled = shuffled[:, :width]
    digits = shuffled.reshape(n, config.experts, config.group_size)
    weights = config.base ** np.arange(config.group_size, dtype=np.int64)
    idx = digits @ weights
    return idx + np.arange(config.experts, dtype=np.int64) * config.vocab


def lift(config: LiftConfig, codes) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.ndim != 1:
        raise DimensionMismatch("lift expects a single code vector")
    return lift_batch(config, codes[None, :])[0]


def dense_lift(config: LiftConfig, rows: np.ndarray) -> np.ndarray:
    """Materialise lifted rows as a dense 0/1 matrix; for small problems and tests."""
    rows = np.atleast_2d(rows)
    out = np.zeros((rows.shape[0], config.lifted_dim))
    np.put_along_axis(out, rows, 1.0, axis=1)
    return out
