import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstyle.numerics import RngStream, channel_stats, coordwise_median, cosine_similarity, instance_stats


def test_cosine_identical_and_orthogonal():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0


def test_cosine_diagonal():
    assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(0.70710678, abs=1e-8)


def test_cosine_zero_norm_raises():
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 0])


def test_cosine_length_mismatch():
    with pytest.raises(ValueError):
        cosine_similarity([1, 0, 0], [1, 0])


def test_channel_stats_constant():
    mu, sigma = channel_stats(np.full((2, 3, 4, 5), 5.0))
    np.testing.assert_array_equal(mu, [5, 5, 5])
    np.testing.assert_array_equal(sigma, [0, 0, 0])


def test_channel_stats_two_values():
    mu, sigma = channel_stats(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
    assert mu[0] == 2.0
    assert sigma[0] == 1.0


def test_channel_stats_duplicate_sample():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 4))
    a = channel_stats(x)
    b = channel_stats(np.concatenate([x, x]))
    np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-15)
    np.testing.assert_allclose(a[1], b[1], rtol=0, atol=1e-15)


def test_channel_stats_empty():
    with pytest.raises(ValueError):
        channel_stats(np.zeros((0, 3, 2, 2)))


def _flat_loop_stats(x):
    n, c, h, w = x.shape
    mus, sigmas = [], []
    for ch in range(c):
        vals = [x[i, ch, r, q] for i in range(n) for r in range(h) for q in range(w)]
        m = math.fsum(vals) / len(vals)
        mus.append(m)
        sigmas.append(math.sqrt(math.fsum((v - m) ** 2 for v in vals) / len(vals)))
    return np.array(mus), np.array(sigmas)


@pytest.mark.parametrize("seed", range(5))
def test_channel_stats_concat_matches_flat_oracle(seed):
    g = np.random.default_rng(seed)
    a = g.normal(size=(2, 3, 3, 4))
    b = g.normal(loc=2.0, size=(3, 3, 3, 4))
    mu, sigma = channel_stats(np.concatenate([a, b]))
    mu_o, sigma_o = _flat_loop_stats(np.concatenate([a, b]))
    np.testing.assert_allclose(mu, mu_o, atol=1e-12)
    np.testing.assert_allclose(sigma, sigma_o, atol=1e-12)


def test_instance_stats_shapes():
    x = np.random.default_rng(1).normal(size=(5, 3, 4, 4))
    mu, sigma = instance_stats(x)
    assert mu.shape == sigma.shape == (5, 3)
    m0, s0 = channel_stats(x[2:3])
    np.testing.assert_allclose(mu[2], m0)
    np.testing.assert_allclose(sigma[2], s0)


def test_median_examples():
    np.testing.assert_array_equal(coordwise_median([(1, 10), (2, 20), (3, 30)]), [2, 20])
    np.testing.assert_array_equal(coordwise_median([(4, 5, 6)]), [4, 5, 6])
    np.testing.assert_array_equal(coordwise_median([(0, 0), (0, 0), (100, 100)]), [0, 0])


def test_median_even_count_averages_middle():
    np.testing.assert_array_equal(coordwise_median([(1,), (2,), (4,), (10,)]), [3.0])


def test_median_errors():
    with pytest.raises(ValueError):
        coordwise_median([])
    with pytest.raises(ValueError):
        coordwise_median([(1, 2), (1, 2, 3)])


vectors = st.lists(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=3, max_size=3),
    min_size=1,
    max_size=7,
)


@given(vectors, st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_median_permutation_invariant(vs, rnd):
    shuffled = list(vs)
    rnd.shuffle(shuffled)
    np.testing.assert_array_equal(coordwise_median(vs), coordwise_median(shuffled))


@given(vectors.filter(lambda v: len(v) >= 3), st.floats(1e6, 1e300))
@settings(max_examples=100, deadline=None)
def test_median_ignores_growing_maximum(vs, big):
    arr = np.array(vs)
    before = coordwise_median(arr)
    # replace the row holding each coordinate's maximum by an arbitrarily larger value
    for c in range(arr.shape[1]):
        i = int(np.argmax(arr[:, c]))
        arr[i, c] = max(arr[i, c], big)
    np.testing.assert_array_equal(coordwise_median(arr), before)


def test_rng_stream_reproducible():
    a = RngStream(7, (3, 1)).generator().random(10)
    b = RngStream(7, (3, 1)).generator().random(10)
    c = RngStream(7, (3, 2)).generator().random(10)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rng_stream_child():
    assert RngStream(1, (2,)).child(3) == RngStream(1, (2, 3))


def test_rng_stream_distinct_seeds():
    draws = {tuple(RngStream(s).generator().integers(0, 2**31, 4)) for s in range(20)}
    assert len(draws) == 20


@pytest.mark.parametrize("perm", list(itertools.permutations(range(3))))
def test_median_three_groups_all_orders(perm):
    vs = [(1.0, 9.0), (5.0, 1.0), (3.0, 4.0)]
    np.testing.assert_array_equal(coordwise_median([vs[i] for i in perm]), [3.0, 4.0])
