import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safle.errors import CodeOutOfRange, ConfigError, DimensionMismatch, FormatError
from safle.lift import LiftConfig, SplitMix64, composite_index, dense_lift, lift, lift_batch, make_permutation


def test_splitmix_reference_values():
    # reference outputs of the published SplitMix64 for seed 0
    g = SplitMix64(0)
    assert [g.next() for _ in range(3)] == [
        0xE220A8397B1DCDAF,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ]


def test_permutation_small_cases():
    assert make_permutation(123, 1).tolist() == [0]
    a = make_permutation(42, 8)
    assert np.array_equal(a, make_permutation(42, 8))
    assert sorted(a.tolist()) == list(range(8))


def test_permutation_matches_hand_rolled_fisher_yates():
    g = SplitMix64(7)
    p = list(range(6))
    for i in range(5, 0, -1):
        j = g.next() % (i + 1)
        p[i], p[j] = p[j], p[i]
    assert make_permutation(7, 6).tolist() == p


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(1, 1024))
def test_permutation_inverse(seed, n):
    p = make_permutation(seed, n)
    inv = np.empty_like(p)
    inv[p] = np.arange(n)
    assert np.array_equal(p[inv], np.arange(n))


def test_composite_index_examples():
    assert composite_index([0, 0, 0], 3) == 0
    assert composite_index([1, 0, 2], 3) == 19
    assert composite_index([4, 4, 4, 4], 5) == 5**4 - 1
    with pytest.raises(CodeOutOfRange):
        composite_index([0, 3], 3)


def identity_config(experts, group, base):
    # find a seed whose permutation is the identity so the hand examples apply verbatim
    n = experts * group
    for seed in range(10000):
        if np.array_equal(make_permutation(seed, n), np.arange(n)):
            return LiftConfig(seed, experts, group, base, n)
    raise AssertionError("no identity seed")


def test_lift_examples():
    assert lift(LiftConfig(0, 1, 1, 2, 1), [1]).tolist() == [1]
    cfg = identity_config(2, 2, 2)
    assert lift(cfg, [1, 0, 0, 1]).tolist() == [1, 6]


def test_lift_applies_permutation():
    cfg = LiftConfig(5, 2, 2, 2, 4)
    codes = np.array([1, 1, 0, 0])
    shuffled = codes[cfg.permutation]
    expect = [composite_index(shuffled[:2], 2), 4 + composite_index(shuffled[2:], 2)]
    assert lift(cfg, codes).tolist() == expect


def test_padding_and_truncation():
    cfg = LiftConfig.from_experts(5, 2, 2, seed=3)
    assert (cfg.group_size, cfg.padding) == (3, 1)
    codes = np.array([1, 1, 1, 1, 1])
    rows = lift(cfg, codes)
    # the padded digit is the most significant digit of the last group and is 0
    assert rows.tolist() == [7, 8 + 3]
    short = LiftConfig(3, 2, 2, 2, 5)
    assert lift(short, codes).tolist() == [3, 4 + 3]


def test_guardrails():
    with pytest.raises(ConfigError):
        LiftConfig(0, 1, 21, 2, 21)
    LiftConfig(0, 1, 20, 2, 20)
    with pytest.raises(ConfigError):
        LiftConfig(-1, 1, 1, 2, 1)
    with pytest.raises(ConfigError):
        LiftConfig.from_experts(4, 5, 2)
    with pytest.raises(DimensionMismatch):
        lift(LiftConfig(0, 1, 2, 2, 2), [1, 0, 1])
    with pytest.raises(CodeOutOfRange):
        lift(LiftConfig(0, 1, 2, 2, 2), [1, 2])


def test_config_round_trip():
    cfg = LiftConfig.from_group_size(17, 4, 3, seed=2**63 + 5)
    back, off = LiftConfig.from_bytes(cfg.to_bytes())
    assert back == cfg and off == 24
    with pytest.raises(FormatError):
        LiftConfig.from_bytes(cfg.to_bytes()[:10])


def test_batch_edge_cases():
    cfg = LiftConfig.from_group_size(6, 2, 3, seed=1)
    assert lift_batch(cfg, np.zeros((0, 6), dtype=int)).shape == (0, 3)
    row = np.array([[2, 0, 1, 1, 0, 2]])
    rows = lift_batch(cfg, np.repeat(row, 3, axis=0))
    assert np.all(rows == rows[0])


@st.composite
def lift_case(draw):
    base = draw(st.integers(2, 5))
    group = draw(st.integers(1, 4))
    n_codes = draw(st.integers(1, 12))
    cfg = LiftConfig.from_group_size(n_codes, group, base, draw(st.integers(0, 2**64 - 1)))
    n = draw(st.integers(1, 8))
    codes = np.array(draw(st.lists(st.integers(0, base - 1), min_size=n * n_codes, max_size=n * n_codes)))
    return cfg, codes.reshape(n, n_codes)


@settings(max_examples=80, deadline=None)
@given(lift_case())
def test_batch_matches_row_loop_and_block_structure(case):
    cfg, codes = case
    rows = lift_batch(cfg, codes)
    for r, c in zip(rows, codes):
        assert np.array_equal(r, lift(cfg, c))
        blocks = r // cfg.vocab
        assert blocks.tolist() == list(range(cfg.experts))
    dense = dense_lift(cfg, rows)
    assert np.all(dense.sum(axis=1) == cfg.experts)


@settings(max_examples=80, deadline=None)
@given(lift_case())
def test_lift_is_injective_without_truncation(case):
    cfg, codes = case
    rows = lift_batch(cfg, codes)
    for i in range(len(codes)):
        for j in range(i + 1, len(codes)):
            same_codes = np.array_equal(codes[i], codes[j])
            assert same_codes == np.array_equal(rows[i], rows[j])
