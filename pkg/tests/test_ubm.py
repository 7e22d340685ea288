import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lfekit.errors import DimensionMismatch, FormatError, TooFewFrames
from lfekit.ubm import (
    WEIGHT_FLOOR,
    DiagGmm,
    block_size,
    decode_gmm,
    em_fit,
    encode_gmm,
    init_kmeans,
    log_likelihood,
    train_ubm,
)


def mixture_frames(seed, k, d, n):
    r = np.random.default_rng(seed)
    means = r.normal(0, 3, (k, d))
    comp = r.integers(k, size=n)
    return means[comp] + r.normal(size=(n, d)) * r.uniform(0.3, 2.0, (k, d))[comp]


def brute_force_density(gmm, x):
    """Average log of sum_c w_c prod_d N(x_d | mu_cd, var_cd), one frame at a time."""
    total = 0.0
    for frame in x:
        p = 0.0
        for w, mu, var in zip(gmm.weights, gmm.means, gmm.variances):
            p += w * np.prod(np.exp(-0.5 * (frame - mu) ** 2 / var) / np.sqrt(2 * np.pi * var))
        total += np.log(p)
    return total / len(x)


def test_single_gaussian_at_mode():
    gmm = DiagGmm(np.array([1.0]), np.zeros((1, 1)), np.ones((1, 1)))
    assert log_likelihood(gmm, np.zeros((1, 1))) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)


@given(seed=st.integers(0, 10_000), k=st.integers(1, 3), d=st.integers(1, 3))
def test_log_likelihood_matches_brute_force(seed, k, d):
    r = np.random.default_rng(seed)
    w = r.dirichlet(np.ones(k))
    gmm = DiagGmm(w, r.normal(size=(k, d)), r.uniform(0.2, 3.0, (k, d)))
    x = r.normal(0, 2, (6, d))
    assert log_likelihood(gmm, x) == pytest.approx(brute_force_density(gmm, x), abs=1e-10)


def test_far_frame_is_finite():
    gmm = DiagGmm(np.array([0.5, 0.5]), np.array([[0.0], [1.0]]), np.full((2, 1), 1e-3))
    ll = log_likelihood(gmm, np.array([[1e6]]))
    assert np.isfinite(ll) and ll < -1e10


def test_dimension_mismatch():
    gmm = DiagGmm(np.array([1.0]), np.zeros((1, 2)), np.ones((1, 2)))
    with pytest.raises(DimensionMismatch):
        log_likelihood(gmm, np.zeros((3, 3)))
    with pytest.raises(DimensionMismatch):
        em_fit(gmm, np.zeros((30, 1)))


def test_single_cluster_closed_form(rng):
    x = rng.normal([1.0, -2.0], [0.5, 3.0], (500, 2))
    gmm = init_kmeans(x, 1)
    np.testing.assert_allclose(gmm.means[0], x.mean(0), atol=1e-12)
    np.testing.assert_allclose(gmm.variances[0], x.var(0), atol=1e-12)


def test_em_k1_on_two_points():
    x = np.array([[0.0], [2.0]] * 5)
    gmm = em_fit(DiagGmm(np.ones(1), np.array([[0.3]]), np.array([[5.0]])), x, n_iter=1)
    assert gmm.means[0, 0] == pytest.approx(1.0)
    assert gmm.variances[0, 0] == pytest.approx(1.0)


def test_kmeans_two_clouds(rng):
    centers = np.array([[0.0, 0.0], [10.0, 0.0]])
    x = np.concatenate([rng.normal(c, 1.0, (2000, 2)) for c in centers])
    gmm = init_kmeans(x, 2, seed=5)
    found = gmm.means[np.argsort(gmm.means[:, 0])]
    np.testing.assert_allclose(found, centers, atol=0.1)
    np.testing.assert_allclose(gmm.weights, 0.5)


def test_kmeans_deterministic_and_too_few_frames(rng):
    x = rng.normal(size=(300, 3))
    a, b = init_kmeans(x, 4, seed=2), init_kmeans(x, 4, seed=2)
    np.testing.assert_array_equal(a.means, b.means)
    with pytest.raises(TooFewFrames):
        init_kmeans(x, 31)


def test_recovers_two_component_mixture():
    r = np.random.default_rng(7)
    n = 100_000
    x = np.where(r.random(n) < 0.5, -3.0, 3.0) + r.standard_normal(n)
    gmm = train_ubm(x[:, None], 2, n_iter=20, seed=0)
    means = np.sort(gmm.means[:, 0])
    se = np.sqrt(1.0 / (n / 2))
    assert abs(means[0] + 3) < 3 * se and abs(means[1] - 3) < 3 * se


@given(seed=st.integers(0, 10_000), k=st.sampled_from([1, 2, 8]), d=st.sampled_from([1, 5]))
def test_em_monotone(seed, k, d):
    x = mixture_frames(seed, 3, d, 400)
    log = train_ubm(x, k, n_iter=8, seed=seed).train_log
    assert len(log) == 9
    for prev, cur in zip(log, log[1:]):
        assert cur >= prev - 1e-8 * abs(prev)


def test_invariants_after_training(rng):
    x = mixture_frames(3, 4, 3, 2000)
    gmm = train_ubm(x, 8, n_iter=5)
    assert gmm.weights.sum() == pytest.approx(1.0, abs=1e-9)
    assert gmm.weights.min() >= WEIGHT_FLOOR * (1 - 1e-12)
    assert np.all(gmm.variances >= 1e-3 * x.var(0) * (1 - 1e-12))
    resp, _ = gmm.posteriors(x)
    np.testing.assert_allclose(resp.sum(1), 1.0, atol=1e-9)


def test_dead_component_rescue_keeps_monotone():
    # two identical components pointing at the same cloud plus an empty one far away
    r = np.random.default_rng(0)
    x = np.concatenate([r.normal(0, 1, (990, 1)), r.normal(40, 1, (10, 1))])
    init = DiagGmm(np.array([0.5, 0.49, 0.01]), np.array([[0.1], [-0.1], [-500.0]]), np.ones((3, 1)))
    gmm = em_fit(init, x, n_iter=10)
    assert np.all(np.diff(gmm.train_log) >= -1e-8 * np.abs(gmm.train_log[:-1]))
    assert np.min(np.abs(gmm.means[:, 0] - 40)) < 1.0


def test_permutation_equivariance(rng):
    x = mixture_frames(11, 4, 2, 1500)
    init = init_kmeans(x, 4, seed=1)
    perm = np.array([2, 0, 3, 1])
    permuted = DiagGmm(init.weights[perm], init.means[perm], init.variances[perm], [], init.var_floor)
    a, b = em_fit(init, x, 6), em_fit(permuted, x, 6)
    np.testing.assert_allclose(b.means, a.means[perm], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(b.variances, a.variances[perm], rtol=1e-9)
    np.testing.assert_allclose(b.weights, a.weights[perm], rtol=1e-9)


def test_thread_count_independent():
    k = 512
    x = mixture_frames(5, 6, 3, 5 * block_size(k) + 17)
    one = em_fit(init_kmeans(x, k, 0), x, 2, threads=1)
    many = em_fit(init_kmeans(x, k, 0), x, 2, threads=4)
    np.testing.assert_array_equal(one.means, many.means)
    np.testing.assert_array_equal(one.variances, many.variances)
    assert one.train_log == many.train_log


def test_model_file_round_trip(rng):
    gmm = train_ubm(rng.normal(size=(200, 2)), 3, n_iter=2)
    blob = encode_gmm(gmm)
    assert blob[:4] == b"LFEG"
    back, end = decode_gmm(blob)
    assert end == len(blob)
    np.testing.assert_array_equal(back.means, gmm.means)
    assert back.train_log == gmm.train_log
    with pytest.raises(FormatError):
        decode_gmm(blob[:-8])
