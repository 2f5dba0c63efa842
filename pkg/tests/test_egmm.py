import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from gapscore.config import SynthConfig
from gapscore.data.models import MaskedMatrix
from gapscore.data.repository import ModelRepository
from gapscore.data.rng import SeededRng
from gapscore.services.egmm_service import (
    EgmmModel,
    Gmm,
    REG_DELTA,
    fit_egmm,
    fit_gmm,
    log_density,
    marginal_log_density,
    score_egmm,
    score_matrix,
    select_ks,
    tail_probability,
)
from gapscore.services.synth_service import generate
from gapscore.utils.errors import ConfigurationError, DomainError, UnsupportedInputError

LOG_STD_NORMAL_PEAK = -0.5 * math.log(2 * math.pi)


def _gaussian_pdf(x, mean, cov):
    diff = np.asarray(x) - mean
    d = len(mean)
    quad = diff @ np.linalg.inv(cov) @ diff
    return math.exp(-0.5 * quad) / math.sqrt((2 * math.pi) ** d * np.linalg.det(cov))


def _mixture_pdf(gmm, x):
    return sum(w * _gaussian_pdf(x, m, c) for w, m, c in zip(gmm.weights, gmm.means, gmm.covs))


def _random_gmm(gen, k=2, d=2):
    covs = []
    for _ in range(k):
        q, _ = np.linalg.qr(gen.standard_normal((d, d)))
        covs.append(q @ np.diag(gen.uniform(0.3, 2.0, d)) @ q.T)
    weights = gen.uniform(0.2, 1.0, k)
    return Gmm(weights=weights / weights.sum(), means=gen.uniform(-2, 2, (k, d)), covs=np.array(covs))


def _standard_normal(d=1):
    return Gmm(weights=np.ones(1), means=np.zeros((1, d)), covs=np.eye(d)[None])


def test_single_component_is_closed_form(rng, gaussian_matrix):
    gmm = fit_gmm(gaussian_matrix, 1, rng)
    X = gaussian_matrix.values
    pooled = np.cov(X, rowvar=False, bias=True)
    reg = REG_DELTA * np.trace(pooled) / X.shape[1]
    assert gmm.k == 1
    np.testing.assert_allclose(gmm.means[0], X.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(gmm.covs[0], pooled + reg * np.eye(4), atol=1e-12)


def test_two_blobs_are_recovered(rng, blob_data):
    gmm = fit_gmm(blob_data, 2, rng)
    centers = gmm.means[np.argsort(gmm.means[:, 0])]
    np.testing.assert_allclose(centers[0], [0.0, 0.0], atol=0.1)
    np.testing.assert_allclose(centers[1], [10.0, 10.0], atol=0.1)


def test_em_objective_never_decreases(rng, blob_data):
    gmm = fit_gmm(blob_data, 3, rng)
    trace = np.asarray(gmm.ll_trace)
    assert trace.size >= 2
    assert np.all(np.diff(trace) >= -1e-9)


def test_trace_ends_at_the_penalized_objective(rng, blob_data):
    gmm = fit_gmm(blob_data, 2, rng)
    X = blob_data.values
    pooled = np.cov(X, rowvar=False, bias=True)
    reg = REG_DELTA * np.trace(pooled) / X.shape[1]
    terms = np.column_stack([
        np.log(w) + multivariate_normal(m, c).logpdf(X) - 0.5 * reg * np.trace(np.linalg.inv(c))
        for w, m, c in zip(gmm.weights, gmm.means, gmm.covs)
    ])
    penalized = float(logsumexp(terms, axis=1).mean())
    plain = float(np.mean([log_density(gmm, x) for x in X]))
    assert gmm.ll_trace[-1] == pytest.approx(penalized, abs=1e-8)
    assert gmm.ll_trace[-1] < plain


def test_weights_sum_to_one_and_covariances_positive_definite(rng, blob_data):
    gmm = fit_gmm(blob_data, 4, rng)
    assert abs(gmm.weights.sum() - 1.0) < 1e-12
    for c in gmm.covs:
        np.testing.assert_allclose(c, c.T, atol=1e-12)
        assert np.linalg.eigvalsh(c).min() > 0


def test_fit_gmm_errors(rng):
    with pytest.raises(ConfigurationError):
        fit_gmm(MaskedMatrix.from_array([[1.0, 2.0], [3.0, 4.0]]), 3, rng)
    with pytest.raises(UnsupportedInputError):
        fit_gmm(MaskedMatrix.from_array([[1.0, np.nan], [3.0, 4.0]]), 1, rng)


def test_standard_normal_log_density():
    assert log_density(_standard_normal(), [0.0]) == pytest.approx(LOG_STD_NORMAL_PEAK, abs=1e-12)
    assert LOG_STD_NORMAL_PEAK == pytest.approx(-0.9189, abs=1e-4)


def test_density_highest_at_dominant_mean():
    gmm = Gmm(weights=np.array([0.7, 0.3]), means=np.array([[0.0, 0.0], [1.0, -1.0]]),
              covs=np.array([np.diag([1.0, 2.0]), np.eye(2)]))
    top = int(np.argmax(gmm.weights))
    mean = gmm.means[top]
    offset = mean + 5 * np.sqrt(np.diag(gmm.covs[top]))
    assert log_density(gmm, mean) >= log_density(gmm, offset)


def test_log_density_matches_direct_summation(common_seed):
    gen = np.random.default_rng(common_seed)
    for _ in range(20):
        gmm = _random_gmm(gen)
        x = gen.uniform(-3, 3, 2)
        assert log_density(gmm, x) == pytest.approx(math.log(_mixture_pdf(gmm, x)), abs=1e-10)


def test_marginal_of_standard_normal():
    assert marginal_log_density(_standard_normal(2), [np.nan, 0.0]) == pytest.approx(LOG_STD_NORMAL_PEAK, abs=1e-12)


def test_marginal_without_missing_equals_log_density(common_seed):
    gmm = _random_gmm(np.random.default_rng(common_seed))
    assert marginal_log_density(gmm, [0.4, -1.2]) == log_density(gmm, [0.4, -1.2])


def test_marginal_matches_numerical_integration(common_seed):
    gen = np.random.default_rng(common_seed)
    grid = np.linspace(-30.0, 30.0, 30001)
    for _ in range(100):
        gmm = _random_gmm(gen)
        x2 = 0.7
        joint = np.zeros_like(grid)
        for w, m, c in zip(gmm.weights, gmm.means, gmm.covs):
            prec = np.linalg.inv(c)
            d0, d1 = grid - m[0], x2 - m[1]
            quad = prec[0, 0] * d0 ** 2 + 2 * prec[0, 1] * d0 * d1 + prec[1, 1] * d1 ** 2
            joint += w * np.exp(-0.5 * quad) / (2 * math.pi * math.sqrt(np.linalg.det(c)))
        numeric = math.log(trapezoid(joint, grid))
        assert abs(marginal_log_density(gmm, [np.nan, x2]) - numeric) < 1e-3


def test_marginalizing_in_two_steps(common_seed):
    gmm = _random_gmm(np.random.default_rng(common_seed), k=2, d=3)
    keep = [0, 1]
    restricted = Gmm(weights=gmm.weights, means=gmm.means[:, keep],
                     covs=gmm.covs[:, keep][:, :, keep])
    once = marginal_log_density(gmm, [0.3, np.nan, np.nan])
    twice = marginal_log_density(restricted, [0.3, np.nan])
    assert once == pytest.approx(twice, abs=1e-12)


def test_marginal_needs_an_observed_column():
    with pytest.raises(DomainError):
        marginal_log_density(_standard_normal(2), [np.nan, np.nan])


def test_select_ks():
    assert select_ks({3: -10.0, 4: -10.5, 5: -13.0}) == [3, 4]
    assert select_ks({3: -2.0, 4: -2.0, 5: -2.0}) == [3, 4, 5]
    assert select_ks({3: 10.0, 4: 8.6, 5: 8.4}) == [3, 4]
    with pytest.raises(ConfigurationError):
        select_ks({3: None})


def test_fit_egmm_fits_every_replicate(rng, common_seed):
    data = MaskedMatrix.from_array(np.random.default_rng(common_seed).standard_normal((200, 2)))
    model = fit_egmm(data, ks=(3, 4, 5), reps_per_k=15, rng=rng)
    assert set(model.oob_ll) == {3, 4, 5}
    assert model.kept_ks == select_ks(model.oob_ll)
    assert model.n_models == 15 * len(model.kept_ks)
    assert model.model_ks == [k for k in model.kept_ks for _ in range(15)]


def test_fit_egmm_is_deterministic(common_seed, gaussian_matrix):
    a = fit_egmm(gaussian_matrix, ks=(1, 2), reps_per_k=3, rng=SeededRng(common_seed), n_jobs=2)
    b = fit_egmm(gaussian_matrix, ks=(1, 2), reps_per_k=3, rng=SeededRng(common_seed))
    assert a.to_dict() == b.to_dict()


def test_unit_density_scores_zero():
    peaked = Gmm(weights=np.ones(1), means=np.zeros((1, 1)), covs=np.full((1, 1, 1), 1.0 / (2 * math.pi)))
    model = EgmmModel(models=[peaked], kept_ks=[1], n_features=1)
    assert score_egmm(model, [0.0]).score == pytest.approx(0.0, abs=1e-12)


def test_marginal_equals_baseline_on_complete_rows(rng, gaussian_matrix):
    model = fit_egmm(gaussian_matrix, ks=(2,), reps_per_k=3, rng=rng)
    baseline = score_matrix(model, gaussian_matrix, "baseline").scores
    marginal = score_matrix(model, gaussian_matrix, "marginal").scores
    assert np.array_equal(baseline, marginal)


def test_marginal_score_is_average_over_models(common_seed):
    gen = np.random.default_rng(common_seed)
    g1, g2 = _random_gmm(gen), _random_gmm(gen)
    model = EgmmModel(models=[g1, g2], kept_ks=[2], n_features=2)
    queries = MaskedMatrix.from_array([[0.3, np.nan], [0.3, 1.0]])

    def marginal_pdf(gmm, x0):
        return sum(w * _gaussian_pdf([x0], m[:1], c[:1, :1]) for w, m, c in zip(gmm.weights, gmm.means, gmm.covs))

    expected_partial = -0.5 * (math.log(marginal_pdf(g1, 0.3)) + math.log(marginal_pdf(g2, 0.3)))
    expected_full = -0.5 * (math.log(_mixture_pdf(g1, [0.3, 1.0])) + math.log(_mixture_pdf(g2, [0.3, 1.0])))

    scores = score_matrix(model, queries, "marginal").scores
    assert scores[0] == pytest.approx(expected_partial, abs=1e-10)
    assert scores[1] == pytest.approx(expected_full, abs=1e-10)


def test_empty_rows_need_explicit_fallback(rng, gaussian_matrix):
    model = fit_egmm(gaussian_matrix, ks=(1,), reps_per_k=2, rng=rng)
    queries = MaskedMatrix.from_array([[np.nan] * 4, [0.0, 0.1, np.nan, 0.2]])
    with pytest.raises(DomainError):
        score_matrix(model, queries, "marginal")
    result = score_matrix(model, queries, "marginal", allow_fallback=True)
    assert result.not_scored.tolist() == [True, False]
    assert result.scores[0] == model.fallback_score


def test_tail_probability_of_normal_quantile(rng):
    estimate = tail_probability(_standard_normal(), [1.96], n_samples=100_000, rng=rng)
    expected = 0.04999579
    assert abs(estimate.probability - expected) < 4 * estimate.stderr


def test_tail_probability_extremes(rng):
    assert tail_probability(_standard_normal(), [0.0], n_samples=500, rng=rng).probability == 1.0
    assert tail_probability(_standard_normal(), [50.0], n_samples=500, rng=rng).probability == 0.0


def test_tail_probability_decreases_away_from_the_mode(common_seed):
    gmm = _standard_normal(2)
    tails = [
        tail_probability(gmm, [r, np.nan], n_samples=2000, rng=SeededRng(common_seed)).probability
        for r in (0.0, 0.5, 1.0, 2.0, 3.0)
    ]
    assert all(a >= b for a, b in zip(tails, tails[1:]))


def test_tail_scores_in_unit_interval(rng, gaussian_matrix):
    model = fit_egmm(gaussian_matrix, ks=(2,), reps_per_k=2, rng=rng)
    queries = gaussian_matrix.take(np.arange(10)).with_mask(np.tile([True, True, False, True], (10, 1)))
    with pytest.raises(ConfigurationError):
        score_matrix(model, queries, "tail")
    scores = score_matrix(model, queries, "tail", n_samples=300, rng=rng.fork(9)).scores
    assert np.all((scores >= 0.0) & (scores <= 1.0))


def test_model_file_round_trip(tmp_path, rng, gaussian_matrix):
    model = fit_egmm(gaussian_matrix, ks=(1, 2), reps_per_k=2, rng=rng)
    path = tmp_path / "egmm.json"
    ModelRepository.save(model, path)
    loaded = ModelRepository.load(path)
    assert isinstance(loaded, EgmmModel)
    assert loaded.kept_ks == model.kept_ks
    assert np.array_equal(score_matrix(loaded, gaussian_matrix).scores, score_matrix(model, gaussian_matrix).scores)


def test_tight_anomaly_cluster_gets_its_own_component(common_seed):
    data = generate(SynthConfig(), SeededRng(common_seed))
    gmm = fit_gmm(data.features, 2, SeededRng(common_seed).fork(1))
    anomalous = int(np.argmax(gmm.means.mean(axis=1)))
    assert gmm.weights[anomalous] == pytest.approx(0.1, abs=0.02)
    np.testing.assert_allclose(gmm.means[anomalous], 3.0, atol=0.3)
