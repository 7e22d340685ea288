import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import subspace_angles
from scipy.optimize import least_squares

from lfekit.errors import ConfigMismatch, DimensionMismatch, EmptyUtterance, FormatError, TooFewUtterances
from lfekit.features import FeatureMatrix
from lfekit.tvspace import (
    BaumWelchStats,
    ConditionSet,
    TvModel,
    accumulate_stats,
    decode_condition,
    decode_tv,
    encode_condition,
    encode_tv,
    extract_condition,
    extract_ivector,
    extract_ivectors,
    train_tv,
    tv_objective,
)
from lfekit.ubm import DiagGmm


def random_ubm(r, k, d):
    return DiagGmm(r.dirichlet(np.ones(k)), r.normal(size=(k, d)), r.uniform(0.3, 2.0, (k, d)))


def random_stats(r, k, d, name="u"):
    return BaumWelchStats(name, r.uniform(0.5, 20.0, k), r.normal(0, 3, (k, d)))


def least_squares_ivector(ubm, T, stats):
    """Minimise |w|^2 + sum_c N_c |S_c^-1/2 (F_c / N_c - T_c w)|^2 with a generic solver."""
    k, d = ubm.means.shape
    r = T.shape[1]
    Tc = T.reshape(k, d, r)
    scale = np.sqrt(stats.N[:, None] / ubm.variances)
    target = stats.F / stats.N[:, None]

    def residual(w):
        fit = scale * (target - Tc @ w)
        return np.concatenate([w, fit.ravel()])

    return least_squares(residual, np.zeros(r), xtol=1e-15, ftol=1e-15, gtol=1e-15).x


def test_single_component_stats(rng):
    ubm = DiagGmm(np.ones(1), np.array([[0.5, -1.0]]), np.ones((1, 2)))
    x = rng.normal(size=(37, 2))
    s = accumulate_stats(ubm, x)
    assert s.N[0] == 37.0
    np.testing.assert_allclose(s.F[0], (x - ubm.means[0]).sum(0), atol=1e-12)


def test_equidistant_frame_splits_evenly():
    ubm = DiagGmm(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.ones((2, 1)))
    s = accumulate_stats(ubm, np.zeros((1, 1)))
    np.testing.assert_allclose(s.N, [0.5, 0.5])


@given(seed=st.integers(0, 10_000), k=st.integers(1, 4), d=st.integers(1, 3), n=st.integers(1, 20))
def test_stats_match_per_frame_oracle(seed, k, d, n):
    r = np.random.default_rng(seed)
    ubm = random_ubm(r, k, d)
    x = r.normal(0, 2, (n, d))
    s = accumulate_stats(ubm, FeatureMatrix("u", x))
    N = np.zeros(k)
    F = np.zeros((k, d))
    x = x.astype(np.float32).astype(np.float64)
    for frame in x:
        dens = ubm.weights * np.prod(np.exp(-0.5 * (frame - ubm.means) ** 2 / ubm.variances)
                                     / np.sqrt(2 * np.pi * ubm.variances), axis=1)
        g = dens / dens.sum()
        N += g
        F += g[:, None] * (frame - ubm.means)
    np.testing.assert_allclose(s.N, N, atol=1e-10)
    np.testing.assert_allclose(s.F, F, atol=1e-10)
    assert s.N.sum() == pytest.approx(n, abs=1e-6)
    assert s.utterance_id == "u"


def test_stats_errors():
    ubm = DiagGmm(np.ones(1), np.zeros((1, 2)), np.ones((1, 2)))
    with pytest.raises(DimensionMismatch):
        accumulate_stats(ubm, np.zeros((3, 3)))
    with pytest.raises(EmptyUtterance):
        accumulate_stats(ubm, np.zeros((0, 2)))


@given(seed=st.integers(0, 10_000), k=st.integers(1, 4), d=st.integers(1, 3), rank=st.integers(1, 3))
def test_ivector_matches_generic_minimiser(seed, k, d, rank):
    r = np.random.default_rng(seed)
    ubm = random_ubm(r, k, d)
    T = r.normal(size=(k * d, rank))
    s = random_stats(r, k, d)
    w = extract_ivector(TvModel(ubm, T), s).w
    np.testing.assert_allclose(w, least_squares_ivector(ubm, T, s), atol=1e-6)


@given(t=st.floats(-5, 5), var=st.floats(0.1, 10), n=st.floats(0, 100), f=st.floats(-50, 50))
def test_scalar_closed_form(t, var, n, f):
    ubm = DiagGmm(np.ones(1), np.zeros((1, 1)), np.array([[var]]))
    w = extract_ivector(TvModel(ubm, np.array([[t]])), BaumWelchStats("u", np.array([n]), np.array([[f]]))).w[0]
    expected = (t * f / var) / (1 + t * t * n / var)
    assert w == pytest.approx(expected, abs=1e-10, rel=1e-10)


def test_zero_subspace_and_empty_utterance(rng):
    ubm = random_ubm(rng, 3, 2)
    s = random_stats(rng, 3, 2)
    assert np.all(extract_ivector(TvModel(ubm, np.zeros((6, 2))), s).w == 0)
    empty = BaumWelchStats("e", np.zeros(3), np.zeros((3, 2)))
    assert np.all(extract_ivector(TvModel(ubm, rng.normal(size=(6, 2))), empty).w == 0)


@given(t=st.floats(0.2, 3), var=st.floats(0.2, 5), n=st.floats(0.5, 50), mean=st.floats(-5, 5).filter(lambda m: abs(m) > 0.01))
def test_more_evidence_shrinks_less(t, var, n, mean):
    ubm = DiagGmm(np.ones(1), np.zeros((1, 1)), np.array([[var]]))
    model = TvModel(ubm, np.array([[t]]))
    unregularised = mean / t
    gaps = []
    for scale in (1, 2, 4):
        s = BaumWelchStats("u", np.array([n * scale]), np.array([[mean * n * scale]]))
        gaps.append(abs(extract_ivector(model, s).w[0] - unregularised))
    assert gaps[0] > gaps[1] > gaps[2]


def scalar_em(t, var, stats, n_iter):
    for _ in range(n_iter):
        num = den = 0.0
        for n, f in stats:
            prec = 1 + t * t * n / var
            w = t * f / var / prec
            num += f * w
            den += n * (1 / prec + w * w)
        t = num / den
    return t


def test_scalar_em_oracle(rng):
    var = 1.7
    ubm = DiagGmm(np.ones(1), np.zeros((1, 1)), np.array([[var]]))
    raw = [(float(n), float(f)) for n, f in zip(rng.uniform(1, 30, 12), rng.normal(0, 8, 12))]
    stats = [BaumWelchStats(str(i), np.array([n]), np.array([[f]])) for i, (n, f) in enumerate(raw)]
    for n_iter in (1, 2, 5):
        model = train_tv(ubm, stats, 1, n_iter, T_init=np.array([[0.3]]))
        assert model.T[0, 0] == pytest.approx(scalar_em(0.3, var, raw, n_iter), abs=1e-10)


def noiseless_stats(seed, k=4, d=3, rank=2, n_utts=300):
    r = np.random.default_rng(seed)
    ubm = DiagGmm(np.full(k, 1 / k), r.normal(size=(k, d)), r.uniform(0.5, 2.0, (k, d)))
    T_true = r.normal(size=(k * d, rank))
    stats = []
    for u in range(n_utts):
        n = r.uniform(5, 50, k)
        w = r.standard_normal(rank)
        stats.append(BaumWelchStats(f"u{u}", n, n[:, None] * (T_true @ w).reshape(k, d)))
    return ubm, T_true, stats


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_subspace_recovery(seed):
    ubm, T_true, stats = noiseless_stats(seed)
    model = train_tv(ubm, stats, 2, n_iter=20, seed=seed)
    assert np.max(subspace_angles(model.T, T_true)) < 0.05


def test_training_invariants(rng):
    ubm, _, stats = noiseless_stats(3, rank=3)
    for s in stats:
        s.F += rng.normal(0, 1, s.F.shape) * np.sqrt(s.N)[:, None]
    model = train_tv(ubm, stats, 3, n_iter=8, seed=1)
    log = model.train_log
    assert len(log) == 9
    assert all(b >= a - 1e-8 * abs(a) for a, b in zip(log, log[1:]))
    assert np.linalg.svd(model.T, compute_uv=False).min() > 1e-10
    assert tv_objective(model, stats) == pytest.approx(log[-1])
    again = train_tv(ubm, stats, 3, n_iter=8, seed=1)
    np.testing.assert_array_equal(model.T, again.T)
    threaded = train_tv(ubm, stats, 3, n_iter=8, seed=1, threads=4)
    np.testing.assert_array_equal(model.T, threaded.T)


def test_training_preconditions(rng):
    ubm = random_ubm(rng, 2, 2)
    stats = [random_stats(rng, 2, 2, str(i)) for i in range(3)]
    with pytest.raises(TooFewUtterances):
        train_tv(ubm, stats[:2], 3)
    with pytest.raises(ValueError):
        train_tv(ubm, stats * 2, 5)
    with pytest.raises(DimensionMismatch):
        train_tv(ubm, [random_stats(rng, 3, 2)] * 3, 1)


def test_batched_extraction_equals_single(rng):
    ubm = random_ubm(rng, 3, 2)
    model = TvModel(ubm, rng.normal(size=(6, 2)))
    stats = [random_stats(rng, 3, 2, str(i)) for i in range(70)]
    many = extract_ivectors(model, stats, threads=3)
    single = np.array([extract_ivector(model, s).w for s in stats])
    np.testing.assert_allclose(many, single, rtol=1e-12, atol=1e-12)


def _condition(rng, model):
    feats = [FeatureMatrix(f"u{i}", rng.normal(size=(20, 2)), "cfg") for i in range(5)]
    return extract_condition(model, feats, ["a", "a", "b", "b", "c"], ("fi", "en"), "cfg")


def test_condition_extraction_and_files(rng):
    model = train_tv(random_ubm(rng, 3, 2), [random_stats(rng, 3, 2, str(i)) for i in range(10)], 2, 3)
    cs = _condition(rng, model)
    assert len(cs) == 5 and cs.vectors.dtype == np.float32
    assert cs.ivectors()[4].speaker_id == "c" and cs.ivectors()[0].condition == ("fi", "en")
    blob = encode_condition(cs)
    assert blob[:4] == b"LFEI"
    back = decode_condition(blob)
    assert back.utterance_ids == cs.utterance_ids and back.speaker_ids == cs.speaker_ids
    assert back.condition == ("fi", "en")
    np.testing.assert_array_equal(back.vectors, cs.vectors)
    with pytest.raises(FormatError):
        decode_condition(blob[:-3])
    tv_blob = encode_tv(model)
    assert tv_blob[:4] == b"LFET"
    m2 = decode_tv(tv_blob)
    np.testing.assert_array_equal(m2.T, model.T)
    np.testing.assert_array_equal(m2.ubm.means, model.ubm.means)
    assert m2.train_log == model.train_log
    with pytest.raises(FormatError):
        decode_tv(tv_blob[:-8])


def test_condition_config_mismatch(rng):
    model = TvModel(random_ubm(rng, 2, 2), rng.normal(size=(4, 1)))
    feats = [FeatureMatrix("u", rng.normal(size=(5, 2)), "other")]
    with pytest.raises(ConfigMismatch):
        extract_condition(model, feats, ["s"], ("a", "b"), "cfg")


def test_condition_rerun_is_byte_identical(rng):
    model = TvModel(random_ubm(rng, 3, 2), rng.normal(size=(6, 2)))
    feats = [FeatureMatrix(f"u{i}", rng.normal(size=(30, 2))) for i in range(4)]
    a = extract_condition(model, feats, list("aabb"), ("x", "y"))
    b = extract_condition(model, feats, list("aabb"), ("x", "y"), threads=4)
    assert encode_condition(a) == encode_condition(b)
    assert isinstance(a, ConditionSet)
