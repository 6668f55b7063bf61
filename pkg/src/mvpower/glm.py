"""Per-taxon GLMs over a shared design: fitting, LR statistics, residuals.

Fitting is vectorised over columns. Every taxon (and, in power simulations,
every taxon of every simulated dataset) is one column of a response matrix
sharing the model matrix ``X``; columns are solved independently and a
converged column is frozen, so its result never depends on which other
columns share the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import special

from . import _dispersion, families
from .exceptions import DimensionError, RankDeficiencyError, ValidationError
from .ingest import AbundanceMatrix, Categorical, DesignFrame

MAX_IRLS_ITER = 100
IRLS_TOL = 1e-8
MAX_OUTER_ITER = 25
MAX_HALVINGS = 30


@dataclass(frozen=True)
class ModelMatrix:
    X: np.ndarray
    column_names: tuple
    term_map: dict
    terms: tuple
    design: DesignFrame

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def without(self, term: str) -> "ModelMatrix":
        if term not in self.term_map:
            raise ValidationError(f"unknown term {term!r}; available terms {list(self.terms)}")
        return build_model_matrix(self.design, [t for t in self.terms if t != term])

    def with_design(self, design: DesignFrame) -> "ModelMatrix":
        return build_model_matrix(design, self.terms)


def build_model_matrix(design: DesignFrame, formula_terms: Sequence[str]) -> ModelMatrix:
    """Intercept plus treatment-coded categorical and raw numeric columns."""
    cols = [np.ones(design.n)]
    names = ["(Intercept)"]
    term_map = {}
    for term in formula_terms:
        if term not in design.columns:
            raise ValidationError(f"unknown covariate {term!r}; design has {list(design.columns)}")
        col = design[term]
        start = len(cols)
        if isinstance(col, Categorical):
            codes = col.codes()
            for k, level in enumerate(col.levels[1:], start=1):
                cols.append((codes == k).astype(float))
                names.append(f"{term}{level}")
        else:
            cols.append(np.asarray(col.values, dtype=float))
            names.append(term)
        term_map[term] = tuple(range(start, len(cols)))
    X = np.column_stack(cols)
    _check_rank(X, names)
    X.setflags(write=False)
    return ModelMatrix(X, tuple(names), term_map, tuple(formula_terms), design)


def _check_rank(X, names):
    n, k = X.shape
    if k > n:
        raise RankDeficiencyError(f"{k} model columns exceed {n} observations")
    if np.linalg.matrix_rank(X) == k:
        return
    for j in range(1, k):
        if np.linalg.matrix_rank(X[:, : j + 1]) <= np.linalg.matrix_rank(X[:, :j]):
            coef = np.linalg.lstsq(X[:, :j], X[:, j], rcond=None)[0]
            partners = [names[i] for i in range(j) if abs(coef[i]) > 1e-8]
            raise RankDeficiencyError(
                f"model matrix is rank deficient: column {names[j]!r} is collinear with {partners}"
            )
    raise RankDeficiencyError("model matrix is rank deficient")


@dataclass(frozen=True)
class ManyGLMFit:
    """Independent marginal GLM fits, one column per taxon."""

    B: np.ndarray
    phi: Optional[np.ndarray]
    family: str
    fitted_means: np.ndarray
    loglik: np.ndarray
    converged: np.ndarray
    degenerate: np.ndarray
    model_matrix: ModelMatrix
    taxon_names: tuple
    counts: Optional[AbundanceMatrix] = field(default=None, repr=False)

    @property
    def column_names(self) -> tuple:
        return self.model_matrix.column_names

    @property
    def eta(self) -> np.ndarray:
        return families.link(self.fitted_means, self.family)

    def means_for(self, X: np.ndarray, coeffs: np.ndarray | None = None) -> np.ndarray:
        B = self.B if coeffs is None else coeffs
        return families.inverse_link(X @ B, self.family)


@dataclass(frozen=True)
class TestStatistic:
    value: float
    per_taxon: np.ndarray


@dataclass
class ColumnFit:
    """Raw arrays from a batched fit; columns index taxa (or dataset-taxa)."""

    B: np.ndarray
    phi: Optional[np.ndarray]
    mu: np.ndarray
    loglik: np.ndarray
    converged: np.ndarray
    degenerate: np.ndarray


def _degenerate_columns(Y, family):
    zero = np.all(Y == 0, axis=0)
    if family == "binomial":
        return zero | np.all(Y == 1, axis=0)
    return zero


def _working(y, eta, mu, family, phi):
    """IRLS weights and working response."""
    if family == "binomial":
        var = np.maximum(mu * (1.0 - mu), 1e-12)
        return var, eta + (y - mu) / var
    if family == "negative_binomial":
        w = mu / (1.0 + mu / phi)
    else:
        w = mu
    return w, eta + (y - mu) / mu


def _solve_weighted(X, W, z):
    n, k = X.shape
    outer = (X[:, :, None] * X[:, None, :]).reshape(n, k * k)
    XtWX = (outer.T @ W).T.reshape(-1, k, k)
    XtWz = (X.T @ (W * z)).T
    try:
        return np.linalg.solve(XtWX, XtWz[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(XtWz)
        for m in range(XtWX.shape[0]):
            out[m] = np.linalg.lstsq(XtWX[m], XtWz[m], rcond=None)[0]
        return out


def _eta_of(X, B):
    return np.clip(X @ B, families.ETA_FLOOR, families.ETA_CEIL)


def _colsum_ll(y, mu, family, phi):
    if family == "negative_binomial":
        phi = np.broadcast_to(np.asarray(phi, float), (y.shape[1],))
        return _dispersion.nb_loglik(np.asfortranarray(y, dtype=float),
                                     np.asfortranarray(mu, dtype=float), np.ascontiguousarray(phi))
    return families.loglik_terms(y, mu, family, phi).sum(axis=0)


def _colsum_kernel(y, mu, family, phi):
    return families.loglik_kernel(y, mu, family, phi).sum(axis=0)


def _irls(Y, X, family, phi=None, B0=None, trace=None):
    """Fit all columns of ``Y`` with fixed dispersion. Returns B, mu, kernel ll, converged.

    Step-halving keeps each column's log-likelihood nondecreasing once a
    coefficient vector exists; convergence is on relative deviance change.
    """
    n, m = Y.shape
    k = X.shape[1]
    phi_full = None if phi is None else np.broadcast_to(np.asarray(phi, float), (m,))
    # log-likelihoods below are kernels (constants in mu dropped); the
    # deviance is their difference from the saturated kernel
    if family == "binomial":
        ll_sat = np.zeros(m)
    else:
        sat = families.loglik_kernel(Y, np.where(Y > 0, Y, 1.0), family, phi_full)
        ll_sat = np.where(Y > 0, sat, 0.0).sum(axis=0)

    if B0 is None:
        B = np.zeros((k, m))
        if family == "binomial":
            mu = (Y + 0.5) / 2.0
        else:
            mu = Y + 0.1
        eta = families.link(mu, family)
        ll = np.full(m, -np.inf)
    else:
        B = np.array(B0, dtype=float, copy=True)
        eta = _eta_of(X, B)
        mu = families.inverse_link(eta, family)
        ll = _colsum_kernel(Y, mu, family, phi_full)
    converged = np.zeros(m, dtype=bool)
    active = np.arange(m)

    for _ in range(MAX_IRLS_ITER):
        if active.size == 0:
            break
        y = Y[:, active]
        ph = None if phi_full is None else phi_full[active]
        w, z = _working(y, eta[:, active], mu[:, active], family, ph)
        B_new = _solve_weighted(X, w, z).T
        eta_new = _eta_of(X, B_new)
        mu_new = families.inverse_link(eta_new, family)
        ll_new = _colsum_kernel(y, mu_new, family, ph)
        ll_old = ll[active]
        B_old = B[:, active]
        slack = 1e-12 * np.abs(ll_old)
        bad = ~(ll_new >= ll_old - slack) & np.isfinite(ll_old)
        for _h in range(MAX_HALVINGS):
            if not bad.any():
                break
            B_new[:, bad] = 0.5 * (B_new[:, bad] + B_old[:, bad])
            eta_new[:, bad] = _eta_of(X, B_new[:, bad])
            mu_new[:, bad] = families.inverse_link(eta_new[:, bad], family)
            ll_new[bad] = _colsum_kernel(y[:, bad], mu_new[:, bad], family,
                                     None if ph is None else ph[bad])
            bad = bad & ~(ll_new >= ll_old - slack)
        if bad.any():
            # no ascent direction left; keep previous iterate
            B_new[:, bad] = B_old[:, bad]
            eta_new[:, bad] = _eta_of(X, B_old[:, bad])
            mu_new[:, bad] = families.inverse_link(eta_new[:, bad], family)
            ll_new[bad] = ll_old[bad]
        dev_new = 2.0 * (ll_sat[active] - ll_new)
        dev_old = 2.0 * (ll_sat[active] - ll_old)
        done = np.abs(dev_new - dev_old) / (np.abs(dev_new) + 0.1) < IRLS_TOL
        # a column with no ascent left after halving sits at its optimum
        done |= bad
        B[:, active] = B_new
        eta[:, active] = eta_new
        mu[:, active] = mu_new
        ll[active] = ll_new
        if trace is not None:
            trace.append(ll.copy())
        converged[active[done]] = True
        active = active[~done]
    return B, mu, ll, converged


def ml_dispersion(Y, mu, phi0=None, max_iter=100, tol=1e-8):
    """Maximum-likelihood NB size per column given fitted means.

    Safeguarded Newton on log(phi) within ``families.PHI_BOUNDS``.
    """
    Y = np.asfortranarray(Y, dtype=float)
    mu = np.asfortranarray(mu, dtype=float)
    m = Y.shape[1]
    if phi0 is None:
        num = (mu**2).sum(axis=0)
        den = ((Y - mu) ** 2 - mu).sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            phi0 = np.where(den > 0, num / den, 100.0)
        phi0 = np.clip(phi0, 0.01, 1e4)
    theta0 = np.log(np.broadcast_to(np.asarray(phi0, float), (m,))).copy()
    lo, hi = np.log(families.PHI_BOUNDS[0]), np.log(families.PHI_BOUNDS[1])
    return _dispersion.ml_phi(Y, mu, theta0, lo, hi, tol, max_iter)


def fit_columns(Y, X, family, phi=None, trace=None) -> ColumnFit:
    """Fit every column of ``Y`` (n x m) on model matrix ``X`` (n x k).

    For the negative binomial, ``phi=None`` estimates one size per column by
    alternating IRLS and ML for phi; a given ``phi`` is held fixed.
    """
    families.check_family(family)
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, m = Y.shape
    if X.shape[0] != n:
        raise DimensionError(f"X has {X.shape[0]} rows, Y has {n}")
    k = X.shape[1]
    if family == "binomial" and np.any((Y != 0) & (Y != 1)):
        raise ValidationError("binomial family requires presence-absence (0/1) data")

    degenerate = _degenerate_columns(Y, family)
    ok = np.flatnonzero(~degenerate)
    B = np.zeros((k, m))
    B[0, degenerate] = families.ETA_FLOOR
    if family == "binomial":
        B[0, degenerate & np.all(Y == 1, axis=0)] = -families.ETA_FLOOR
    converged = np.zeros(m, dtype=bool)
    phi_out = None
    if family == "negative_binomial":
        phi_out = np.full(m, families.PHI_BOUNDS[1])
        if phi is not None:
            phi_out[:] = np.broadcast_to(np.asarray(phi, float), (m,))

    if ok.size:
        Yk = Y[:, ok]
        if family != "negative_binomial":
            Bk, _, _, conv = _irls(Yk, X, family, trace=trace)
        elif phi is not None:
            Bk, _, _, conv = _irls(Yk, X, family, phi=phi_out[ok], trace=trace)
        else:
            Bk, mu, _, conv = _irls(Yk, X, "poisson")
            ph = ml_dispersion(Yk, mu)
            ll = _colsum_ll(Yk, mu, family, ph)
            outer_ok = np.zeros(ok.size, dtype=bool)
            active = np.arange(ok.size)
            for _ in range(MAX_OUTER_ITER):
                ya = Yk[:, active]
                Ba, mu_a, _, conv_a = _irls(ya, X, family, phi=ph[active], B0=Bk[:, active],
                                            trace=trace)
                ph_a = ml_dispersion(ya, mu_a, phi0=ph[active])
                ll_a = _colsum_ll(ya, mu_a, family, ph_a)
                change = np.abs(ll_a - ll[active]) / (np.abs(ll_a) + 0.1)
                ph[active], Bk[:, active], mu[:, active] = ph_a, Ba, mu_a
                ll[active], conv[active] = ll_a, conv_a
                done = change < IRLS_TOL
                outer_ok[active[done]] = True
                active = active[~done]
                if active.size == 0:
                    break
                trace = None
            conv = conv & outer_ok
            phi_out[ok] = ph
        B[:, ok] = Bk
        converged[ok] = conv

    eta = _eta_of(X, B)
    mu = families.inverse_link(eta, family)
    if family == "negative_binomial" and phi is None and ok.size:
        loglik = np.empty(m)
        loglik[ok] = ll
        if degenerate.any():
            loglik[degenerate] = _colsum_ll(Y[:, degenerate], mu[:, degenerate], family,
                                            phi_out[degenerate])
    else:
        loglik = _colsum_ll(Y, mu, family, phi_out)
    return ColumnFit(B, phi_out, mu, loglik, converged, degenerate)


def fit_manyglm(Y: AbundanceMatrix, X: ModelMatrix, family: str, phi=None) -> ManyGLMFit:
    """Fit one GLM per taxon (log link; logit for binomial)."""
    if Y.n != X.n:
        raise DimensionError(f"counts have {Y.n} rows, model matrix has {X.n}")
    cf = fit_columns(Y.counts, X.X, family, phi=phi)
    return _wrap(cf, family, X, Y)


def _wrap(cf: ColumnFit, family, X, Y) -> ManyGLMFit:
    for a in (cf.B, cf.mu, cf.loglik, cf.converged, cf.degenerate):
        a.setflags(write=False)
    if cf.phi is not None:
        cf.phi.setflags(write=False)
    return ManyGLMFit(cf.B, cf.phi, family, cf.mu, cf.loglik, cf.converged, cf.degenerate,
                      X, Y.taxon_names, Y)


def lr_columns(ll_alt, ll_null, degenerate):
    per = np.maximum(2.0 * (ll_alt - ll_null), 0.0)
    per[degenerate] = 0.0
    return per


def lr_statistic(fit_null: ManyGLMFit, fit_alt: ManyGLMFit) -> TestStatistic:
    """Sum over taxa of likelihood-ratio statistics, each floored at zero."""
    if fit_null.family != fit_alt.family:
        raise ValidationError("null and alternative fits use different families")
    if fit_null.taxon_names != fit_alt.taxon_names:
        raise ValidationError("null and alternative fits cover different taxa")
    if fit_null.counts is not None and fit_alt.counts is not None:
        if not np.array_equal(fit_null.counts.counts, fit_alt.counts.counts):
            raise ValidationError("null and alternative fits use different data")
    if not set(fit_null.column_names) <= set(fit_alt.column_names):
        extra = sorted(set(fit_null.column_names) - set(fit_alt.column_names))
        raise ValidationError(f"null model is not nested in alternative (extra columns {extra})")
    per = lr_columns(fit_alt.loglik, fit_null.loglik, fit_alt.degenerate | fit_null.degenerate)
    return TestStatistic(float(per.sum()), per)


def pit_bounds(Y, mu, family, phi=None):
    """CDF just below and at each observation."""
    Y = np.asarray(Y, dtype=float)
    return families.cdf(Y - 1.0, mu, family, phi), families.cdf(Y, mu, family, phi)


def ds_residuals(fit: ManyGLMFit, Y: AbundanceMatrix, rng: np.random.Generator,
                 eps: float = 1e-10) -> np.ndarray:
    """Randomised probability-integral-transform residuals on the normal scale."""
    if Y.counts.shape != fit.fitted_means.shape:
        raise DimensionError(
            f"fit is for shape {fit.fitted_means.shape}, counts have shape {Y.counts.shape}"
        )
    lower, upper = pit_bounds(Y.counts, fit.fitted_means, fit.family, fit.phi)
    v = rng.random(Y.counts.shape)
    u = np.clip(lower + v * (upper - lower), eps, 1.0 - eps)
    return special.ndtri(u)


def diagnostics(fit: ManyGLMFit, Y: AbundanceMatrix, rng: np.random.Generator | None = None):
    """Mean-variance table per taxon and fitted-vs-residual table per cell."""
    counts = Y.counts.astype(float)
    taxa = pd.DataFrame({
        "taxon": list(Y.taxon_names),
        "mean": counts.mean(axis=0),
        "variance": counts.var(axis=0, ddof=1),
    })
    if rng is None:
        rng = np.random.default_rng(0)
    resid = ds_residuals(fit, Y, rng)
    eta = np.clip(families.link(fit.fitted_means, fit.family), families.ETA_FLOOR, None)
    n, p = counts.shape
    cells = pd.DataFrame({
        "sample": np.repeat(np.array(Y.sample_ids, dtype=object), p),
        "taxon": np.tile(np.array(Y.taxon_names, dtype=object), n),
        "eta": eta.ravel(),
        "residual": resid.ravel(),
    })
    return taxa, cells
