import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import run_single_round
from safle.bucketing import BucketKind, BucketStrategy, fit_boundaries
from safle.data import FeatureMatrix, Generator, SyntheticSpec, generate, one_hot
from safle.errors import (
    BadMagic,
    ChecksumMismatch,
    ConfigError,
    EmptyClient,
    GammaMismatch,
    ShapeMismatch,
    ShapeOverflow,
    TooFewSamples,
)
from safle.federation import (
    ClientPayload,
    PartitionPlan,
    ProtocolConfig,
    aggregate,
    client_round,
    evaluate,
    fnv1a64,
    parse_partition,
    partition_dirichlet,
    partition_shard,
)
from safle.lift import LiftConfig
from safle.solver import SafleModel, accumulate, empty_stats, fit_safle, gram_sparsity, lookup_logits


def small_problem(n=600, d_b=4, n_cls=3, seed=0, buckets=4, group=3):
    fm = generate(SyntheticSpec(Generator.GAUSSIAN_MIXTURES, n, d_b, n_cls, seed=seed))
    bm = fit_boundaries(fm.X, BucketStrategy(BucketKind.BINARY_OVERLAP, buckets))
    lift = LiftConfig.from_group_size(bm.n_codes, group, 2, seed)
    return fm, bm, lift


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_fnv_reference_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


# -- partitioning


def test_dirichlet_single_client():
    plan = partition_dirichlet(np.arange(10) % 3, 1, 0.5, seed=1)
    assert np.all(plan.assignment == 0)


def test_dirichlet_large_alpha_is_near_uniform():
    # 5% relative to the uniform share; enough samples that multinomial noise
    # (about 1% relative here) cannot reach it
    labels = np.repeat(np.arange(10), 50000)
    for seed in range(3):
        plan = partition_dirichlet(labels, 5, 1e6, seed)
        hist = plan.label_histograms(labels, 10)
        share = hist / hist.sum(axis=1, keepdims=True)
        assert np.all(np.abs(share - 0.1) <= 0.05 * 0.1)


def test_dirichlet_small_alpha_is_heterogeneous():
    labels = np.repeat(np.arange(10), 500)
    low = partition_dirichlet(labels, 10, 0.05, 0).label_entropies(labels, 10).mean()
    high = partition_dirichlet(labels, 10, 1e6, 0).label_entropies(labels, 10).mean()
    assert low < high


def test_dirichlet_repairs_empty_clients():
    labels = np.zeros(50, dtype=int)
    plan = partition_dirichlet(labels, 20, 0.01, seed=3)
    assert np.all(plan.client_sizes() >= 1)
    with pytest.raises(TooFewSamples):
        partition_dirichlet(labels[:5], 6, 1.0)


def test_shard_examples():
    labels = np.repeat(np.arange(10), 100)
    assert np.all(partition_shard(labels, 1, 1).assignment == 0)
    plan = partition_shard(labels, 50, 2, seed=2)
    hist = plan.label_histograms(labels, 10)
    # shards of 10 samples never straddle a class boundary on balanced data
    assert np.all((hist > 0).sum(axis=1) <= 2)
    assert np.array_equal(plan.assignment, partition_shard(labels, 50, 2, seed=2).assignment)
    with pytest.raises(TooFewSamples):
        partition_shard(labels[:5], 3, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 1000), st.integers(40, 200))
def test_shard_structure(k, s, seed, n):
    labels = np.random.default_rng(seed).integers(0, 5, n)
    plan = partition_shard(labels, k, s, seed)
    order = np.argsort(labels, kind="stable")
    shards = np.array_split(order, k * s)
    sizes = [len(x) for x in shards]
    assert max(sizes) - min(sizes) <= 1
    for shard in shards:
        # a shard is a contiguous run of the label-sorted data and lives on one client
        assert len(set(plan.assignment[shard].tolist())) == 1
    per_client = np.bincount([plan.assignment[sh[0]] for sh in shards], minlength=k)
    assert np.all(per_client == s)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.floats(0.01, 100), st.integers(0, 1000))
def test_dirichlet_plan_invariants(k, alpha, seed):
    labels = np.random.default_rng(seed).integers(0, 4, 150)
    plan = partition_dirichlet(labels, k, alpha, seed)
    assert plan.assignment.shape == labels.shape
    assert np.all(plan.client_sizes() >= 1)
    assert np.array_equal(plan.assignment, partition_dirichlet(labels, k, alpha, seed).assignment)


def test_plan_file_round_trip(tmp_path):
    labels = np.arange(40) % 4
    plan = parse_partition("dirichlet:0.3", 4, labels, seed=9)
    plan.save(tmp_path / "plan.json")
    back = PartitionPlan.load(tmp_path / "plan.json")
    assert np.array_equal(back.assignment, plan.assignment)
    assert (back.scheme, back.param, back.n_clients, back.seed) == ("dirichlet", 0.3, 4, 9)
    with pytest.raises(ConfigError):
        parse_partition("lda:0.1", 4, labels)
    with pytest.raises(ConfigError):
        parse_partition("shard:two", 4, labels)
    with pytest.raises(EmptyClient):
        PartitionPlan("x", 0, 3, 0, np.array([0, 0, 1]))


# -- payloads and aggregation


def test_single_sample_client():
    fm, bm, lift = small_problem(n=50)
    plan = PartitionPlan("x", 0, 2, 0, np.r_[0, np.ones(49, dtype=int)])
    p = client_round(fm, plan, 0, bm, lift, 0.25)
    C = p.gram.toarray()
    E = lift.experts
    raw = C - 0.25 * np.eye(lift.lifted_dim)
    assert np.count_nonzero(np.diag(raw)) == E and np.all(np.diag(raw)[np.diag(raw) != 0] == 1)
    assert np.count_nonzero(np.triu(raw, 1)) == E * (E - 1) // 2
    assert np.all(np.tril(C, -1) == 0)


def test_concatenated_clients_equal_payload_sum():
    fm, bm, lift = small_problem()
    plan = partition_dirichlet(fm.y, 3, 0.5, seed=1)
    pays = [client_round(fm, plan, c, bm, lift, 0.5) for c in range(3)]
    merged = PartitionPlan("x", 0, 2, 0, np.where(plan.assignment == 2, 1, 0))
    joint = client_round(fm, merged, 0, bm, lift, 0.5)
    ridge = 0.5 * sp.identity(lift.lifted_dim)
    assert np.array_equal((pays[0].gram + pays[1].gram - ridge).toarray(), joint.gram.toarray())
    assert np.array_equal(pays[0].moments + pays[1].moments, joint.moments)


def test_aggregate_examples():
    fm, bm, lift = small_problem()
    plan = partition_dirichlet(fm.y, 10, 0.1, seed=2)
    pays = [client_round(fm, plan, c, bm, lift, 1.0) for c in range(10)]
    C, M, K = aggregate(pays[:1])
    assert K == 1 and np.array_equal(C.toarray(), pays[0].gram.toarray())
    C, M, K = aggregate(reversed(pays))
    assert K == 10
    rows = lift.lifted_dim
    central = accumulate(empty_stats(rows, 3), fm_rows(fm, bm, lift), one_hot(fm.y, 3))
    assert np.array_equal(C.toarray(), central.gram.toarray() + 10 * np.eye(rows))
    assert np.array_equal(M, central.moments)


def fm_rows(fm, bm, lift):
    from safle.bucketing import encode_batch
    from safle.lift import lift_batch

    return lift_batch(lift, encode_batch(bm, fm.X))


def test_aggregate_disjoint_supports():
    a = ClientPayload(0, 1, 1.0, sp.csr_matrix(([1.0], ([0], [1])), shape=(3, 3)), np.zeros((3, 1)))
    b = ClientPayload(1, 1, 1.0, sp.csr_matrix(([2.0], ([1], [2])), shape=(3, 3)), np.ones((3, 1)))
    C, M, K = aggregate([b, a])
    assert C.toarray().tolist() == [[0, 1, 0], [0, 0, 2], [0, 0, 0]]
    assert K == 2 and M.sum() == 3


def test_aggregate_rejects_inconsistent_payloads():
    a = ClientPayload(0, 1, 1.0, sp.csr_matrix((3, 3)), np.zeros((3, 1)))
    with pytest.raises(GammaMismatch):
        aggregate([a, ClientPayload(1, 1, 2.0, sp.csr_matrix((3, 3)), np.zeros((3, 1)))])
    with pytest.raises(ShapeMismatch):
        aggregate([a, ClientPayload(1, 1, 1.0, sp.csr_matrix((4, 4)), np.zeros((4, 1)))])
    with pytest.raises(ConfigError):
        aggregate([a, a])


def test_payload_wire_layout():
    g = sp.csr_matrix(([3.0, 1.0, 2.0], ([0, 0, 1], [0, 1, 1])), shape=(2, 2))
    p = ClientPayload(7, 11, 0.5, g, np.array([[1.0, 2.0], [3.0, 4.0]]))
    buf = p.to_bytes()
    assert buf[:4] == b"SFLP"
    assert len(buf) == 44 + 3 * 16 + 4 * 8 + 8
    assert int.from_bytes(buf[-8:], "little") == fnv1a64(buf[:-8])
    q = ClientPayload.from_bytes(buf)
    assert (q.client_id, q.n_samples, q.gamma) == (7, 11, 0.5)
    assert q.to_bytes() == buf
    with pytest.raises(BadMagic):
        ClientPayload.from_bytes(b"SFLQ" + buf[4:])
    with pytest.raises(ShapeOverflow):
        ClientPayload.from_bytes(buf[:-1])
    flipped = bytearray(buf)
    flipped[60] ^= 1
    with pytest.raises(ChecksumMismatch):
        ClientPayload.from_bytes(bytes(flipped))


# -- protocol


def test_protocol_matches_central_fit(tmp_path):
    fm, bm, lift = small_problem(n=900)
    central = fit_safle(fm.X, fm.y, 3, bm, lift, gamma=1.0)
    for k, scheme in [(1, "dirichlet:1"), (2, "shard:2"), (10, "dirichlet:0.05"), (100, "shard:3")]:
        plan = parse_partition(scheme, k, fm.y, seed=k)
        spool = tmp_path / f"k{k}" if k == 10 else None
        model, report = run_single_round(fm, plan, ProtocolConfig(bm, lift, 1.0, spool_dir=spool))
        assert rel(model.weights, central.weights) <= 1e-8
        assert evaluate(model, fm) == evaluate(central, fm)
        if spool:
            files = sorted(spool.iterdir())
            assert [f.stat().st_size for f in files] == report.payload_bytes


def test_protocol_is_bitwise_deterministic_across_workers():
    fm, bm, lift = small_problem(n=400)
    plan = partition_dirichlet(fm.y, 8, 0.1, seed=5)
    a, ra = run_single_round(fm, plan, ProtocolConfig(bm, lift, 0.7, workers=1))
    b, rb = run_single_round(fm, plan, ProtocolConfig(bm, lift, 0.7, workers=4))
    assert np.array_equal(a.weights, b.weights)
    assert ra.payload_bytes == rb.payload_bytes


def test_report_bytes_match_serialized_payloads():
    fm, bm, lift = small_problem(n=300)
    plan = partition_dirichlet(fm.y, 4, 1.0, seed=0)
    _, report = run_single_round(fm, plan, ProtocolConfig(bm, lift, 1.0))
    expect = [len(client_round(fm, plan, c, bm, lift, 1.0).to_bytes()) for c in range(4)]
    assert report.payload_bytes == expect
    assert report.total_bytes == sum(expect)


def test_payload_shrinks_as_vocab_grows_at_fixed_width():
    rng = np.random.default_rng(0)
    # 64 features x 3 bits covers E * G for every shape, so no group is padding
    fm = FeatureMatrix(rng.standard_normal((2000, 64)), rng.integers(0, 4, 2000), 4)
    bm = fit_boundaries(fm.X, BucketStrategy(BucketKind.BINARY_OVERLAP, 4))
    plan = PartitionPlan("x", 0, 1, 0, np.zeros(2000, dtype=int))
    sizes, sparsity = [], []
    for g in (3, 4, 5, 6):
        lift = LiftConfig(0, 512 // 2**g, g, 2, bm.n_codes)
        p = client_round(fm, plan, 0, bm, lift, 1.0)
        sizes.append(len(p.to_bytes()))
        sparsity.append(gram_sparsity(p.gram))
    assert sizes == sorted(sizes, reverse=True)
    assert sparsity == sorted(sparsity)


def test_evaluate_examples():
    fm, bm, lift = small_problem(n=200)
    zero = SafleModel(np.zeros((lift.lifted_dim, 3)), bm, lift, 3)
    assert evaluate(zero, fm) == np.mean(fm.y == 0)
    # a model whose logits are the one-hot labels: one expert, one row per sample
    rng = np.random.default_rng(1)
    X = rng.standard_normal((64, 1))
    y = rng.integers(0, 2, 64)
    bm1 = fit_boundaries(X, BucketStrategy(BucketKind.INTEGER, 64))
    lift1 = LiftConfig(0, 1, 1, 64, 1)
    exact = fit_safle(X, y, 2, bm1, lift1)
    assert evaluate(exact, FeatureMatrix(X, y, 2)) == 1.0
    rows = exact.lifted_rows(X)
    assert np.allclose(lookup_logits(exact.weights, rows), one_hot(y, 2))


def test_linearly_separable_lifted_data():
    fm = generate(SyntheticSpec(Generator.LINEARLY_SEPARABLE, 4000, 2, 2, margin=0.2, seed=3))
    bm = fit_boundaries(fm.X, BucketStrategy(BucketKind.BINARY_OVERLAP, 16))
    model = fit_safle(fm.X, fm.y, 2, bm, LiftConfig.from_group_size(bm.n_codes, 10, 2, seed=0))
    assert evaluate(model, fm) >= 0.99
