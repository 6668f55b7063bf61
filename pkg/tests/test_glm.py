import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from mvpower import families
from mvpower.exceptions import RankDeficiencyError, ValidationError
from mvpower.glm import (
    build_model_matrix, diagnostics, ds_residuals, fit_columns, fit_manyglm, lr_statistic,
    ml_dispersion,
)
from mvpower.ingest import AbundanceMatrix, DesignFrame, Numeric
from mvpower.synthetic import site_design


def group_design(n_per_group, levels=("control", "restored", "reference")):
    return site_design(n_per_group, levels)


def test_model_matrix_dummy_coding():
    X = build_model_matrix(group_design(3), ["Site.Type"])
    assert X.X.shape == (9, 3)
    assert X.column_names == ("(Intercept)", "Site.Typerestored", "Site.Typereference")
    np.testing.assert_array_equal(X.X[:, 0], 1.0)
    np.testing.assert_array_equal(X.X[:, 1], [0, 0, 0, 1, 1, 1, 0, 0, 0])
    assert X.term_map == {"Site.Type": (1, 2)}
    assert build_model_matrix(group_design(3), []).X.shape == (9, 1)


def test_model_matrix_rank_error_names_columns():
    D = DesignFrame({"a": Numeric([1.0, 2.0, 3.0, 4.0]), "b": Numeric([2.0, 4.0, 6.0, 8.0])})
    with pytest.raises(RankDeficiencyError, match="'b'"):
        build_model_matrix(D, ["a", "b"])
    with pytest.raises(ValidationError, match="unknown covariate"):
        build_model_matrix(D, ["c"])


def test_poisson_intercept_is_log_mean():
    Y = AbundanceMatrix.from_array([[1], [2], [3]])
    fit = fit_manyglm(Y, build_model_matrix(DesignFrame({}, ("s1", "s2", "s3")), []), "poisson")
    assert fit.B[0, 0] == pytest.approx(np.log(2.0), abs=1e-10)
    assert fit.converged[0]
    assert fit.loglik[0] == pytest.approx(stats.poisson.logpmf([1, 2, 3], 2.0).sum(), rel=1e-12)


def _nb_grid_oracle(y):
    """Exact NB likelihood maximised on a dense grid, then polished by scipy on the grid winner."""
    from scipy import optimize

    def nll(params):
        b0, logphi = params
        phi = np.exp(logphi)
        return -stats.nbinom.logpmf(y, phi, phi / (phi + np.exp(b0))).sum()

    b_grid = np.log(y.mean()) + np.linspace(-0.5, 0.5, 41)
    t_grid = np.linspace(np.log(1e-2), np.log(1e5), 81)
    vals = np.array([[nll((b, t)) for t in t_grid] for b in b_grid])
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    res = optimize.minimize(nll, [b_grid[i], t_grid[j]], method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000})
    return res.x, -res.fun


def test_nb_intercept_only_matches_grid_oracle():
    rng = np.random.default_rng(4)
    y = stats.nbinom.rvs(1.5, 1.5 / (1.5 + 6.0), size=60, random_state=rng)
    (b0, logphi), ll = _nb_grid_oracle(y)
    fit = fit_columns(y[:, None], np.ones((60, 1)), "negative_binomial")
    assert fit.loglik[0] >= ll - 1e-8
    assert fit.B[0, 0] == pytest.approx(b0, abs=1e-4)
    assert np.log(fit.phi[0]) == pytest.approx(logphi, abs=1e-3)
    assert fit.B[0, 0] == pytest.approx(np.log(y.mean()), abs=1e-8)


def test_nb_near_poisson_data_gives_large_size():
    rng = np.random.default_rng(5)
    y = rng.poisson(5.0, size=200)
    fit = fit_columns(y[:, None], np.ones((200, 1)), "negative_binomial")
    assert fit.phi[0] > 50
    assert fit.B[0, 0] == pytest.approx(np.log(y.mean()), abs=1e-8)


def _random_problem(seed, family, n_per=6, p=4):
    rng = np.random.default_rng(seed)
    X = build_model_matrix(group_design(n_per), ["Site.Type"])
    mu = np.exp(rng.normal(1.0, 0.6, size=(3, p)))[np.repeat(np.arange(3), n_per)]
    if family == "poisson":
        Y = rng.poisson(mu)
    elif family == "negative_binomial":
        Y = rng.negative_binomial(2.0, 2.0 / (2.0 + mu))
    else:
        Y = (rng.random(mu.shape) < mu / (1 + mu)).astype(int)
    return X, Y


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["poisson", "negative_binomial", "binomial"]))
def test_score_equations_hold(seed, family):
    X, Y = _random_problem(seed, family)
    fit = fit_columns(Y, X.X, family)
    for j in np.flatnonzero(fit.converged & ~fit.degenerate):
        mu = fit.mu[:, j]
        if family == "negative_binomial":
            # d loglik / d beta = X^T (y - mu) / (1 + mu/phi)
            score = X.X.T @ ((Y[:, j] - mu) / (1.0 + mu / fit.phi[j]))
        else:
            score = X.X.T @ (Y[:, j] - mu)
        assert np.max(np.abs(score)) < 1e-6 * max(1.0, Y[:, j].sum())


@pytest.mark.parametrize("family", ["poisson", "negative_binomial", "binomial"])
def test_loglik_never_decreases_across_iterations(family):
    for seed in range(5):
        X, Y = _random_problem(seed, family, n_per=10, p=8)
        trace = []
        fit_columns(Y, X.X, family, phi=2.0 if family == "negative_binomial" else None, trace=trace)
        T = np.array(trace)
        assert len(T) >= 2
        d = np.diff(T, axis=0)
        assert np.all(d >= -1e-12 * np.abs(T[1:]))


def test_column_permutation_equivariance():
    X, Y = _random_problem(8, "negative_binomial", n_per=10, p=7)
    perm = np.random.default_rng(0).permutation(7)
    a = fit_columns(Y, X.X, "negative_binomial")
    b = fit_columns(Y[:, perm], X.X, "negative_binomial")
    np.testing.assert_allclose(b.B, a.B[:, perm], rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(b.phi, a.phi[perm], rtol=1e-8)
    np.testing.assert_allclose(b.loglik, a.loglik[perm], rtol=1e-12)


def test_batched_fit_matches_single_column_fits():
    X, Y = _random_problem(9, "negative_binomial", n_per=10, p=5)
    whole = fit_columns(Y, X.X, "negative_binomial")
    for j in range(5):
        one = fit_columns(Y[:, [j]], X.X, "negative_binomial")
        assert one.loglik[0] == pytest.approx(whole.loglik[j], rel=1e-12)


def test_all_zero_taxon_is_flagged_and_contributes_nothing():
    Y = np.zeros((12, 2), dtype=int)
    Y[:, 1] = [0, 1, 3, 0, 2, 5, 1, 0, 4, 2, 2, 1]
    X = build_model_matrix(group_design(4), ["Site.Type"])
    A = AbundanceMatrix.from_array(Y)
    alt = fit_manyglm(A, X, "negative_binomial")
    null = fit_manyglm(A, X.without("Site.Type"), "negative_binomial", phi=alt.phi)
    assert alt.degenerate[0] and not alt.converged[0]
    assert alt.B[0, 0] == families.ETA_FLOOR
    assert np.isfinite(alt.loglik[0])
    stat = lr_statistic(null, alt)
    assert stat.per_taxon[0] == 0.0 and stat.value == stat.per_taxon[1]


def test_poisson_lr_matches_closed_form():
    rng = np.random.default_rng(12)
    n_per = 15
    mu = np.array([[2.0, 3.0], [20.0, 3.0], [2.0, 3.0]])[np.repeat(np.arange(3), n_per)]
    Y = rng.poisson(mu)
    X = build_model_matrix(group_design(n_per), ["Site.Type"])
    A = AbundanceMatrix.from_array(Y)
    alt = fit_manyglm(A, X, "poisson")
    null = fit_manyglm(A, X.without("Site.Type"), "poisson")
    stat = lr_statistic(null, alt)
    g = np.repeat(np.arange(3), n_per)
    for j in range(2):
        y = Y[:, j].astype(float)
        gm = np.array([y[g == k].mean() for k in range(3)])[g]
        expected = 2.0 * np.sum(special.xlogy(y, gm) - special.xlogy(y, y.mean()))
        assert stat.per_taxon[j] == pytest.approx(expected, rel=1e-8)
    assert stat.per_taxon[0] > 10 * stat.per_taxon[1]


def test_lr_statistic_basic_properties(pilot, pilot_fit):
    same = lr_statistic(pilot_fit, pilot_fit)
    assert same.value == 0.0
    null = fit_manyglm(pilot.counts, pilot_fit.model_matrix.without("Site.Type"),
                       "negative_binomial", phi=pilot_fit.phi)
    s = lr_statistic(null, pilot_fit)
    assert s.value >= 0 and np.all(s.per_taxon >= 0)
    with pytest.raises(ValidationError, match="nested"):
        lr_statistic(pilot_fit, null)
    perm = list(reversed(pilot.counts.taxon_names))
    Yp = pilot.counts.select(perm)
    altp = fit_manyglm(Yp, pilot_fit.model_matrix, "negative_binomial")
    nullp = fit_manyglm(Yp, null.model_matrix, "negative_binomial", phi=altp.phi)
    assert lr_statistic(nullp, altp).value == pytest.approx(s.value, rel=1e-9)


def test_binomial_requires_presence_absence():
    with pytest.raises(ValidationError, match="presence-absence"):
        fit_columns(np.array([[0], [2], [1]]), np.ones((3, 1)), "binomial")


def test_ml_dispersion_respects_bounds():
    y = np.full((10, 1), 3.0)
    phi = ml_dispersion(y, np.full((10, 1), 3.0))
    assert families.PHI_BOUNDS[0] <= phi[0] <= families.PHI_BOUNDS[1]


def test_ds_residual_zero_cell_bound_and_determinism(pilot, pilot_fit):
    r1 = ds_residuals(pilot_fit, pilot.counts, np.random.default_rng(3))
    r2 = ds_residuals(pilot_fit, pilot.counts, np.random.default_rng(3))
    np.testing.assert_array_equal(r1, r2)
    zero = pilot.counts.counts == 0
    F0 = families.cdf(np.zeros_like(pilot_fit.fitted_means), pilot_fit.fitted_means,
                      "negative_binomial", pilot_fit.phi)
    assert np.all(r1[zero] <= special.ndtri(F0[zero]) + 1e-12)


def test_residuals_under_true_model_are_standard_normal():
    rng = np.random.default_rng(21)
    n, p = 400, 5
    mu = np.tile(np.geomspace(0.5, 10, p), (n, 1))
    Y = rng.negative_binomial(1.5, 1.5 / (1.5 + mu))
    X = build_model_matrix(DesignFrame({}, tuple(f"s{i}" for i in range(n))), [])
    fit = fit_manyglm(AbundanceMatrix.from_array(Y), X, "negative_binomial")
    from dataclasses import replace
    truth = replace(fit, fitted_means=mu, phi=np.full(p, 1.5))
    r = ds_residuals(truth, AbundanceMatrix.from_array(Y), rng)
    assert stats.kstest(r.ravel(), "norm").pvalue > 0.01


def test_diagnostics_tables():
    rng = np.random.default_rng(2)
    n = 300
    means = np.geomspace(1, 30, 8)
    Y = rng.poisson(np.tile(means, (n, 1)))
    Y[:, 0] = 0
    A = AbundanceMatrix.from_array(Y)
    X = build_model_matrix(DesignFrame({}, A.sample_ids), [])
    taxa, cells = diagnostics(fit_manyglm(A, X, "poisson"), A)
    assert list(taxa.columns) == ["taxon", "mean", "variance"]
    assert list(cells.columns) == ["sample", "taxon", "eta", "residual"]
    assert taxa.loc[0, "mean"] == 0 and taxa.loc[0, "variance"] == 0
    assert len(cells) == n * 8
    slope = np.polyfit(taxa["mean"][1:], taxa["variance"][1:], 1)[0]
    assert slope == pytest.approx(1.0, abs=0.2)


def test_diagnostics_nb_variance_is_mean_plus_mean_squared():
    rng = np.random.default_rng(6)
    n = 4000
    means = np.array([0.5, 1.0, 2.0, 4.0])
    Y = rng.negative_binomial(1.0, 1.0 / (1.0 + np.tile(means, (n, 1))))
    A = AbundanceMatrix.from_array(Y)
    X = build_model_matrix(DesignFrame({}, A.sample_ids), [])
    taxa, _ = diagnostics(fit_manyglm(A, X, "negative_binomial"), A)
    m = taxa["mean"].to_numpy()
    np.testing.assert_allclose(taxa["variance"], m + m**2, rtol=0.15)
