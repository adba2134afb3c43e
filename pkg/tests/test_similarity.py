import numpy as np
import pytest

from repsim.container import ActivationSet, TensorBlock
from repsim.errors import DataError, UndefinedSimilarityError
from repsim.similarity import (
    cka_exact,
    cka_matrix,
    cka_minibatch,
    gram,
    hsic1,
    layer_distance_profile,
    minibatches,
    CkaMatrix,
)
from repsim.synth import gen_independent_pair, gen_orthogonal_pair, random_orthogonal


def hsic1_oracle(k, l):
    """Term-by-term evaluation of the unbiased estimator with explicit loops."""
    n = k.shape[0]
    kt = k.copy()
    lt = l.copy()
    for i in range(n):
        kt[i, i] = 0.0
        lt[i, i] = 0.0
    trace = sum(kt[i, j] * lt[j, i] for i in range(n) for j in range(n))
    sum_k = sum(kt[i, j] for i in range(n) for j in range(n))
    sum_l = sum(lt[i, j] for i in range(n) for j in range(n))
    cross = sum(kt[i, j] * lt[j, m] for i in range(n) for j in range(n) for m in range(n))
    return (trace + sum_k * sum_l / ((n - 1) * (n - 2)) - 2.0 / (n - 2) * cross) / (n * (n - 3))


def cka_oracle(x, y):
    """Naive CKA: loops for the Gram matrices, oracle HSIC terms."""
    def gram_loops(m):
        n = m.shape[0]
        out = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                out[i, j] = float(np.dot(m[i], m[j]))
        return out

    k = gram_loops(np.asarray(x, dtype=np.float64))
    l = gram_loops(np.asarray(y, dtype=np.float64))
    return hsic1_oracle(k, l) / np.sqrt(hsic1_oracle(k, k) * hsic1_oracle(l, l))


# --- gram -------------------------------------------------------------------

def test_gram_identity():
    k = gram(np.eye(4)).values
    assert np.array_equal(k, np.eye(4))


def test_gram_all_ones():
    k = gram(np.ones((4, 2))).values
    assert np.array_equal(k, np.full((4, 4), 2.0))


def test_gram_matches_double_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 3))
    k = gram(x).values
    for i in range(6):
        for j in range(6):
            assert abs(k[i, j] - float(np.dot(x[i], x[j]))) <= 1e-12


def test_gram_rejects_bad_input():
    with pytest.raises(DataError):
        gram(np.ones((3, 2)))  # n < 4
    with pytest.raises(DataError):
        gram(np.array([[np.inf, 0.0]] * 4))


# --- hsic1 ------------------------------------------------------------------

def test_hsic1_zero_matrices():
    z = np.zeros((4, 4))
    assert hsic1(z, z) == 0.0


def test_hsic1_matches_oracle_small_n():
    rng = np.random.default_rng(7)
    for _ in range(25):
        n = int(rng.integers(4, 9))
        k = gram(rng.standard_normal((n, 3))).values
        l = gram(rng.standard_normal((n, 2))).values
        got = hsic1(k, l)
        want = hsic1_oracle(k, l)
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_hsic1_unbiased_under_independence():
    vals = []
    for i in range(300):
        g = np.random.Generator(np.random.PCG64(np.random.SeedSequence(99, spawn_key=(i,))))
        x = g.standard_normal((32, 16))
        y = g.standard_normal((32, 16))
        vals.append(hsic1(gram(x).values, gram(y).values))
    vals = np.array(vals)
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    assert abs(vals.mean()) <= 3.0 * se


def test_hsic1_dimension_mismatch():
    with pytest.raises(DataError):
        hsic1(np.zeros((4, 4)), np.zeros((5, 5)))


# --- cka_exact --------------------------------------------------------------

def test_cka_self_is_exactly_one():
    rng = np.random.default_rng(11)
    for _ in range(10):
        x = rng.standard_normal((16, 5))
        assert cka_exact(x, x) == 1.0


def test_cka_orthogonal_and_scale_invariance():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((32, 8))
    q = random_orthogonal(8, rng)
    assert abs(cka_exact(x, x @ q) - 1.0) < 1e-9
    for c in (1e-3, 1.0, 1e3):
        assert abs(cka_exact(x, c * x) - 1.0) < 1e-9


def test_cka_matches_composition_oracle():
    rng = np.random.default_rng(17)
    x = rng.standard_normal((32, 8))
    y = rng.standard_normal((32, 5))
    assert abs(cka_exact(x, y) - cka_oracle(x, y)) < 1e-10


def test_cka_symmetry():
    rng = np.random.default_rng(19)
    x = rng.standard_normal((24, 6))
    y = rng.standard_normal((24, 9))
    assert abs(cka_exact(x, y) - cka_exact(y, x)) <= 1e-12


def test_cka_scale_invariance_both_sides():
    rng = np.random.default_rng(23)
    x = rng.standard_normal((24, 6))
    y = rng.standard_normal((24, 9))
    base = cka_exact(x, y)
    for c in (1e-3, 1.0, 1e3):
        assert abs(cka_exact(c * x, y) - base) < 1e-9


def test_cka_sample_permutation_invariance():
    rng = np.random.default_rng(29)
    x = rng.standard_normal((20, 4))
    y = rng.standard_normal((20, 7))
    perm = rng.permutation(20)
    assert abs(cka_exact(x[perm], y[perm]) - cka_exact(x, y)) <= 1e-12


def test_cka_degenerate_features_raise():
    x = np.ones((8, 3))  # constant rows: zero-diagonal gram is constant, HSIC_1 = 0
    y = np.random.default_rng(0).standard_normal((8, 3))
    with pytest.raises(UndefinedSimilarityError):
        cka_exact(x, y)


# --- cka_minibatch ----------------------------------------------------------

def test_minibatch_k1_equals_exact():
    rng = np.random.default_rng(31)
    for _ in range(20):
        x = rng.standard_normal((16, 6))
        y = rng.standard_normal((16, 4))
        mb = cka_minibatch([x], [y], batch_size=16)
        assert abs(mb - cka_exact(x, y)) <= 1e-12


def test_minibatch_discards_trailing_partial():
    rng = np.random.default_rng(37)
    x = rng.standard_normal((40, 5))
    y = rng.standard_normal((40, 5))
    full = cka_minibatch(list(minibatches(x[:32], 16)), list(minibatches(y[:32], 16)), batch_size=16)
    with_tail = cka_minibatch(list(minibatches(x, 16)), list(minibatches(y, 16)), batch_size=16)
    assert with_tail == full


def test_minibatch_misaligned_batches():
    x = np.random.default_rng(0).standard_normal((8, 3))
    with pytest.raises(DataError):
        cka_minibatch([x], [x, x], batch_size=8)
    with pytest.raises(DataError):
        cka_minibatch([x], [x[:6]], batch_size=8)


def test_minibatch_self_stream_is_one():
    rng = np.random.default_rng(41)
    x = rng.standard_normal((64, 5))
    batches = list(minibatches(x, 16))
    assert cka_minibatch(batches, batches, batch_size=16) == 1.0


def test_minibatch_orthogonal_pair_high():
    fx, fy = gen_orthogonal_pair(1024, 32, 7)
    value = cka_minibatch(
        list(minibatches(fx.values, 32)), list(minibatches(fy.values, 32)), batch_size=32
    )
    assert value >= 0.999


def test_minibatch_batch_preserving_permutation():
    rng = np.random.default_rng(43)
    x = rng.standard_normal((48, 5))
    y = rng.standard_normal((48, 6))
    base = cka_minibatch(list(minibatches(x, 16)), list(minibatches(y, 16)), batch_size=16)
    # permute rows within each batch of 16, identically for both streams
    perm = np.concatenate([rng.permutation(16) + 16 * b for b in range(3)])
    permuted = cka_minibatch(
        list(minibatches(x[perm], 16)), list(minibatches(y[perm], 16)), batch_size=16
    )
    assert abs(base - permuted) <= 1e-12


def test_minibatch_batching_stability_on_orthogonal_fixture():
    fx, fy = gen_orthogonal_pair(1024, 32, 11)
    values = [
        cka_minibatch(list(minibatches(fx.values, bs)), list(minibatches(fy.values, bs)), batch_size=bs)
        for bs in (32, 64, 128, 256)
    ]
    assert max(values) - min(values) < 0.01


# --- cka_matrix -------------------------------------------------------------

def _activation_fixture(seed, n=128, p=6, layers=3, model="m"):
    rng = np.random.default_rng(seed)
    blocks = [
        TensorBlock(f"block{i}.mlp.fc2", rng.standard_normal((n, p)).astype(np.float32))
        for i in range(layers)
    ]
    ids = [f"s{i:04d}" for i in range(n)]
    return ActivationSet(model_id=model, sample_ids=ids, layers=blocks)


def test_cka_matrix_self_diagonal_exactly_one():
    acts = _activation_fixture(5)
    m = cka_matrix(acts, acts, pooling="flatten", batch_size=16)
    assert np.array_equal(np.diag(m.values), np.ones(3))
    assert m.num_samples == 128
    assert m.batch_size == 16


def test_cka_matrix_filter():
    acts = _activation_fixture(5)
    m = cka_matrix(acts, acts, batch_size=16, layer_filter="block1")
    assert m.layer_names_a == ["block1.mlp.fc2"]
    with pytest.raises(DataError):
        cka_matrix(acts, acts, batch_size=16, layer_filter="nope")


def test_cka_matrix_needs_enough_samples():
    acts = _activation_fixture(5, n=24)
    with pytest.raises(DataError):
        cka_matrix(acts, acts, batch_size=16)


def test_cka_matrix_flags_degenerate_layer():
    n = 64
    rng = np.random.default_rng(47)
    layers = [
        TensorBlock("block0.mlp.fc2", rng.standard_normal((n, 4)).astype(np.float32)),
        TensorBlock("block1.mlp.fc2", np.ones((n, 4), np.float32)),  # constant: undefined CKA
    ]
    acts = ActivationSet("m", [f"s{i}" for i in range(n)], layers)
    m = cka_matrix(acts, acts, batch_size=16)
    assert m.defined[0, 0]
    assert not m.defined[1, 1]
    assert ("block1.mlp.fc2", "block1.mlp.fc2") in m.undefined_pairs()


def test_cka_matrix_independent_sets_near_zero():
    a = _activation_fixture(101, n=512, p=16, layers=2, model="a")
    b = _activation_fixture(202, n=512, p=16, layers=2, model="b")
    m = cka_matrix(a, b, batch_size=32)
    assert np.all(np.abs(m.values) < 0.05)


def test_cka_matrix_threads_match_single():
    a = _activation_fixture(7, n=128, p=6, layers=3)
    b = _activation_fixture(8, n=128, p=6, layers=3, model="b")
    m1 = cka_matrix(a, b, batch_size=16, threads=1)
    m4 = cka_matrix(a, b, batch_size=16, threads=4)
    assert np.array_equal(m1.values, m4.values)


def test_cka_matrix_alignment_reorders():
    a = _activation_fixture(9, n=64, p=5, layers=1)
    # same content, reversed sample order: CKA(a, reversed a) must be 1 on the diagonal
    rev = ActivationSet(
        model_id="rev",
        sample_ids=list(reversed(a.sample_ids)),
        layers=[TensorBlock(t.name, t.data[::-1].copy()) for t in a.layers],
    )
    m = cka_matrix(a, rev, batch_size=16)
    assert m.values[0, 0] == 1.0


# --- layer_distance_profile ---------------------------------------------------

def _matrix_from_values(values):
    values = np.asarray(values, dtype=np.float64)
    return CkaMatrix(
        layer_names_a=[f"a{i}" for i in range(values.shape[0])],
        layer_names_b=[f"b{j}" for j in range(values.shape[1])],
        values=values,
        batch_size=32,
        num_samples=64,
        pooling_mode="flatten",
    )


def test_profile_2x2_distances():
    m = _matrix_from_values([[0.5, 0.5], [0.5, 0.5]])
    profile = layer_distance_profile(m, num_bins=2)
    # distances are {0, 1, 1, 0}: two pairs per bin under 2 bins
    assert [b.count for b in profile.bins] == [2, 2]
    assert profile.total_pairs == 4


def test_profile_constant_matrix():
    m = _matrix_from_values(np.full((3, 4), 0.25))
    profile = layer_distance_profile(m, num_bins=3)
    for b in profile.bins:
        if b.count:
            assert b.mean == pytest.approx(0.25, abs=1e-15)


def test_profile_matches_hand_enumeration():
    rng = np.random.default_rng(53)
    values = rng.random((3, 4))
    m = _matrix_from_values(values)
    num_bins = 4
    profile = layer_distance_profile(m, num_bins=num_bins)
    sums = [0.0] * num_bins
    counts = [0] * num_bins
    for i in range(3):
        for j in range(4):
            d = abs(i / 2 - j / 3)
            idx = min(int(d * num_bins), num_bins - 1)
            sums[idx] += values[i, j]
            counts[idx] += 1
    assert [b.count for b in profile.bins] == counts
    for b, s, c in zip(profile.bins, sums, counts):
        if c:
            assert b.mean == pytest.approx(s / c, abs=1e-12)
    assert profile.total_pairs == 12


def test_profile_rejects_bad_args():
    m = _matrix_from_values(np.full((3, 3), 0.5))
    with pytest.raises(DataError):
        layer_distance_profile(m, num_bins=0)
    single = _matrix_from_values(np.full((1, 3), 0.5))
    with pytest.raises(DataError):
        layer_distance_profile(single, num_bins=2)
