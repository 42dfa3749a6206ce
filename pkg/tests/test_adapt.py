import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsda.adapt import FULL, AdaptConfig, adapt_weights, assemble_lsda, disassemble, nearest_neighbors
from lsda.exceptions import ShapeError, ValidationError
from lsda.model import CategoryPartition, WeightMatrix, init_network

from oracles import brute_force_neighbors, literal_transfer


def partition_of(K, m):
    return CategoryPartition.create([f"c{i:02d}" for i in range(K)], m)


def random_instance(rng, m, n_a, d):
    Wc = WeightMatrix(rng.normal(size=(m + n_a, d)), rng.normal(size=m + n_a))
    dB = WeightMatrix(rng.normal(size=(m, d)), rng.normal(size=m))
    return Wc, dB, partition_of(m + n_a, m)


def test_parallel_row_is_nearest():
    W = np.eye(4)[:3].copy()
    rows = np.vstack([W, 3 * W[2]])
    nm = nearest_neighbors(WeightMatrix(rows, np.zeros(4)), partition_of(4, 3), AdaptConfig(k=1))
    assert nm.neighbors(3) == [(2, 0.0)]


def test_orthonormal_ties_break_by_index():
    # perturbation along a fourth axis keeps rows 1 and 2 exactly equidistant
    rows = np.vstack([np.eye(4)[:3], [1.0, 0.0, 0.0, 1e-6]])
    nm = nearest_neighbors(WeightMatrix(rows, np.zeros(4)), partition_of(4, 3), AdaptConfig(k=FULL))
    idx = [i for i, _ in nm.neighbors(3)]
    dist = [x for _, x in nm.neighbors(3)]
    assert idx == [0, 1, 2]
    assert dist[1] == pytest.approx(math.sqrt(2), abs=1e-8)
    assert dist[1] == dist[2]


def test_exact_ties_break_by_index():
    # A row equidistant from B rows 0 and 2, closer than row 1
    rows = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    nm = nearest_neighbors(WeightMatrix(rows, np.zeros(4)), partition_of(4, 3), AdaptConfig(k=2))
    assert [i for i, _ in nm.neighbors(3)] == [0, 2]


def test_random_neighbors_match_brute_force():
    rng = np.random.default_rng(0)
    Wc, _, part = random_instance(rng, 6, 4, 16)
    nm = nearest_neighbors(Wc, part, AdaptConfig(k=3))
    assert nm.indices.tolist() == brute_force_neighbors(Wc.values, 6, 3)


def test_k_validation():
    rng = np.random.default_rng(1)
    Wc, _, part = random_instance(rng, 4, 2, 5)
    with pytest.raises(ValidationError):
        nearest_neighbors(Wc, part, AdaptConfig(k=99))
    with pytest.raises(ValidationError):
        AdaptConfig(k=0)
    with pytest.raises(ValidationError):
        AdaptConfig(k="ALL")
    assert AdaptConfig(k="full").k == FULL


def test_zero_row_propagates():
    rows = np.array([[1.0, 0.0], [0.0, 0.0], [0.5, 0.5]])
    with pytest.raises(ValidationError, match="row 1"):
        nearest_neighbors(WeightMatrix(rows, np.zeros(3)), partition_of(3, 2), AdaptConfig(k=1))


def test_include_bias_changes_metric():
    rows = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.1]])
    bias = np.array([0.0, 5.0, 5.0])
    part = partition_of(3, 2)
    assert nearest_neighbors(WeightMatrix(rows, bias), part, AdaptConfig(k=1)).indices.tolist() == [[0]]
    with_bias = nearest_neighbors(WeightMatrix(rows, bias), part, AdaptConfig(k=1, include_bias=True))
    assert with_bias.indices.tolist() == [[1]]


def test_zero_delta_identity():
    rng = np.random.default_rng(2)
    Wc, dB, part = random_instance(rng, 4, 3, 6)
    zero = WeightMatrix.zeros(4, 6)
    for k in (1, 2, FULL):
        cfg = AdaptConfig(k=k)
        out = adapt_weights(Wc, zero, nearest_neighbors(Wc, part, cfg), cfg)
        assert out.bit_equal(Wc)


def test_k1_takes_single_neighbor():
    rng = np.random.default_rng(3)
    Wc, dB, part = random_instance(rng, 4, 3, 6)
    cfg = AdaptConfig(k=1)
    nm = nearest_neighbors(Wc, part, cfg)
    out = adapt_weights(Wc, dB, nm, cfg)
    for j in part.A:
        (i, _), = nm.neighbors(j)
        np.testing.assert_array_equal(out.values[j], Wc.values[j] + dB.values[i])
        assert out.bias[j] == Wc.bias[j] + dB.bias[i]
    np.testing.assert_array_equal(out.values[:4], Wc.values[:4] + dB.values)


def test_literal_transcription_k2():
    rng = np.random.default_rng(4)
    Wc, dB, part = random_instance(rng, 4, 2, 8)
    cfg = AdaptConfig(k=2)
    out = adapt_weights(Wc, dB, nearest_neighbors(Wc, part, cfg), cfg)
    want_w, want_b = literal_transfer(Wc.values, Wc.bias, dB.values, dB.bias, 4, 2, adapt_bias=True)
    np.testing.assert_allclose(out.values, want_w, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out.bias, want_b, rtol=1e-12, atol=1e-14)


def test_full_average_is_column_mean():
    rng = np.random.default_rng(5)
    Wc, dB, part = random_instance(rng, 5, 3, 7)
    out = adapt_weights(Wc, dB, nearest_neighbors(Wc, part, AdaptConfig()), AdaptConfig())
    col_mean = np.add.reduce(dB.values, axis=0) / 5
    for j in part.A:
        np.testing.assert_allclose(out.values[j] - Wc.values[j], col_mean, rtol=1e-12, atol=1e-14)


def test_no_bias_adapt_keeps_a_bias():
    rng = np.random.default_rng(6)
    Wc, dB, part = random_instance(rng, 4, 3, 5)
    cfg = AdaptConfig(adapt_bias=False)
    out = adapt_weights(Wc, dB, nearest_neighbors(Wc, part, cfg), cfg)
    np.testing.assert_array_equal(out.bias[4:], Wc.bias[4:])


def test_adapt_shape_error():
    rng = np.random.default_rng(7)
    Wc, dB, part = random_instance(rng, 4, 2, 5)
    nm = nearest_neighbors(Wc, part, AdaptConfig(k=1))
    with pytest.raises(ShapeError):
        adapt_weights(Wc, WeightMatrix.zeros(4, 6), nm)


def test_input_not_modified():
    rng = np.random.default_rng(8)
    Wc, dB, part = random_instance(rng, 4, 2, 5)
    before = Wc.values.copy()
    adapt_weights(Wc, dB, nearest_neighbors(Wc, part, AdaptConfig()), AdaptConfig())
    np.testing.assert_array_equal(Wc.values, before)


instance = st.tuples(st.integers(1, 6), st.integers(1, 4), st.integers(2, 8), st.integers(0, 2**32 - 1))


@settings(max_examples=60, deadline=None)
@given(instance, st.sampled_from([1, 2, FULL]), st.sampled_from([0.0, 2.0, -0.5]))
def test_linearity_in_delta(inst, k, alpha):
    m, n_a, d, seed = inst
    if k != FULL and k > m:
        k = m
    Wc, dB, part = random_instance(np.random.default_rng(seed), m, n_a, d)
    cfg = AdaptConfig(k=k)
    nm = nearest_neighbors(Wc, part, cfg)
    base = adapt_weights(Wc, dB, nm, cfg)
    scaled = adapt_weights(Wc, WeightMatrix(alpha * dB.values, alpha * dB.bias), nm, cfg)
    np.testing.assert_allclose(scaled.values, Wc.values + alpha * (base.values - Wc.values), atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(instance, st.floats(0.01, 100.0), st.integers(0, 9))
def test_neighbor_scale_invariance(inst, scale, row):
    m, n_a, d, seed = inst
    Wc, _, part = random_instance(np.random.default_rng(seed), m, n_a, d)
    row %= m + n_a
    values = Wc.values.copy()
    values[row] *= scale
    a = nearest_neighbors(Wc, part, AdaptConfig())
    b = nearest_neighbors(WeightMatrix(values, Wc.bias), part, AdaptConfig())
    # equal up to distance ties that rescaling may perturb in the last ulp
    np.testing.assert_allclose(a.distances, b.distances, atol=1e-12)
    gaps = np.diff(a.distances, axis=1)
    if gaps.size == 0 or gaps.min() > 1e-9:
        assert a.indices.tolist() == b.indices.tolist()


@settings(max_examples=60, deadline=None)
@given(instance, st.randoms(use_true_random=False))
def test_permutation_equivariance(inst, rnd):
    m, n_a, d, seed = inst
    Wc, dB, part = random_instance(np.random.default_rng(seed), m, n_a, d)
    perm = list(range(m))
    rnd.shuffle(perm)
    Wp = WeightMatrix(np.vstack([Wc.values[perm], Wc.values[m:]]), np.concatenate([Wc.bias[perm], Wc.bias[m:]]))
    dBp = WeightMatrix(dB.values[perm], dB.bias[perm])
    k = min(2, m)
    cfg = AdaptConfig(k=k)
    a = nearest_neighbors(Wc, part, cfg)
    b = nearest_neighbors(Wp, part, cfg)
    gaps = np.diff(nearest_neighbors(Wc, part, AdaptConfig()).distances, axis=1)
    if gaps.size and gaps.min() < 1e-9:
        return  # exact ties resolve by index, which the permutation changes
    assert [[perm[i] for i in row] for row in b.indices.tolist()] == a.indices.tolist()
    np.testing.assert_allclose(adapt_weights(Wp, dBp, b, cfg).values[m:],
                               adapt_weights(Wc, dB, a, cfg).values[m:], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(instance)
def test_k_prefix(inst):
    m, n_a, d, seed = inst
    Wc, _, part = random_instance(np.random.default_rng(seed), m, n_a, d)
    full = nearest_neighbors(Wc, part, AdaptConfig())
    dist = full.distances
    assert np.all(np.diff(dist, axis=1) >= 0)
    for k in range(1, m + 1):
        nm = nearest_neighbors(Wc, part, AdaptConfig(k=k))
        assert nm.indices.tolist() == full.indices[:, :k].tolist()
        assert all(len(set(r)) == k for r in nm.indices.tolist())


def detector_pair(seed=0):
    part = partition_of(6, 4)
    pre = init_network(part, 10, (8, 5), seed=seed)
    rng = np.random.default_rng(seed)
    ft_head = pre.head.to_detector(WeightMatrix(rng.normal(size=(1, 5)), rng.normal(size=1)))
    dB = WeightMatrix(rng.normal(size=(4, 5)), rng.normal(size=4))
    return part, pre, ft_head, dB


def test_assemble_round_trip():
    part, pre, ft_head, dB = detector_pair()
    head = assemble_lsda(pre.head, ft_head, dB, part, AdaptConfig(k=2))
    fcA, fcB, deltaB, bg = disassemble(head)
    assert fcA.bit_equal(pre.head.fcA)
    assert fcB.bit_equal(pre.head.fcB)
    assert deltaB.bit_equal(dB)
    assert bg.bit_equal(ft_head.background)
    assert head.state == "detector"
    assert head.effective().rows == 7


def test_assemble_matches_literal_transfer():
    part, pre, ft_head, dB = detector_pair(3)
    head = assemble_lsda(pre.head, ft_head, dB, part, AdaptConfig(k=3))
    W = head.category_weights()
    Wc = pre.head.classifier()
    want_w, want_b = literal_transfer(Wc.values, Wc.bias, dB.values, dB.bias, 4, 3, adapt_bias=True)
    np.testing.assert_allclose(W.values, want_w, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(W.bias, want_b, rtol=1e-12, atol=1e-14)


def test_assemble_rejects_mismatch():
    part, pre, ft_head, dB = detector_pair()
    other = partition_of(6, 3)
    with pytest.raises(ValidationError):
        assemble_lsda(pre.head, ft_head, dB, other, AdaptConfig(k=1))
    with pytest.raises(ValidationError):
        assemble_lsda(ft_head, ft_head, dB, part)
    with pytest.raises(ShapeError):
        assemble_lsda(pre.head, ft_head, WeightMatrix.zeros(4, 3), part)
