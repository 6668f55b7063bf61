"""Gaussian copula with factor-analytic correlation over discrete GLM margins.

Counts are generated as ``y_ij = F_j^{-1}(Phi(z_ij))`` where ``z_i`` has
correlation ``Lambda Lambda' + diag(Psi)`` (unit diagonal) and ``F_j`` is the
marginal GLM distribution of taxon ``j``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import __version__, families
from .exceptions import ConvergenceError, DimensionError, NumericError, ValidationError
from .glm import ManyGLMFit, _degenerate_columns, _wrap, build_model_matrix, ds_residuals, fit_columns
from .ingest import AbundanceMatrix, DesignFrame

SCHEMA = "mvpower.copula/1"
EM_MAX_ITER = 500
EM_TOL = 1e-8
MIN_UNIQUENESS = 1e-5
U_MAX = 1.0 - 1e-12
MAX_TABLE = 1_000_000


def fa_param_count(p: int, q: int) -> int:
    """Free parameters of a p-variate q-factor covariance: p(q+1) - q(q-1)/2."""
    if p < 1 or q < 0:
        raise ValidationError(f"need p >= 1 and q >= 0, got p={p}, q={q}")
    if q >= p:
        raise ValidationError(f"number of factors q={q} must be less than p={p}")
    return p * (q + 1) - q * (q - 1) // 2


@dataclass
class FactorAnalysis:
    loadings: np.ndarray
    uniquenesses: np.ndarray
    loglik: float
    n_iter: int
    trace: list


def _fa_loglik(S, loadings, psi, n):
    p = S.shape[0]
    sigma = loadings @ loadings.T + np.diag(psi)
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0:
        return -np.inf
    return -0.5 * n * (p * np.log(2 * np.pi) + logdet + np.trace(np.linalg.solve(sigma, S)))


def factor_analysis(S, q, n, max_iter=EM_MAX_ITER, tol=EM_TOL) -> FactorAnalysis:
    """Maximum-likelihood factor analysis of a covariance matrix by EM.

    Starts from the leading ``q`` eigenvectors of ``S``. Raises
    ``ConvergenceError`` (carrying the log-likelihood trace) if the relative
    log-likelihood change is still above ``tol`` after ``max_iter`` steps.
    """
    S = np.asarray(S, dtype=float)
    p = S.shape[0]
    if q == 0:
        psi = np.diag(S).copy()
        return FactorAnalysis(np.zeros((p, 0)), psi, _fa_loglik(S, np.zeros((p, 0)), psi, n), 0, [])
    vals, vecs = np.linalg.eigh(S)
    order = np.argsort(vals)[::-1][:q]
    L = vecs[:, order] * np.sqrt(np.maximum(vals[order], 1e-6))
    psi = np.maximum(np.diag(S) - (L**2).sum(axis=1), 0.1 * np.diag(S))
    ll = _fa_loglik(S, L, psi, n)
    trace = [ll]
    Iq = np.eye(q)
    for it in range(1, max_iter + 1):
        # E-step: regression of factors on observations
        sigma = L @ L.T + np.diag(psi)
        beta = np.linalg.solve(sigma, L).T
        Ezz = Iq - beta @ L + beta @ S @ beta.T
        # M-step
        L = S @ beta.T @ np.linalg.inv(Ezz)
        psi = np.maximum(np.diag(S - L @ beta @ S), MIN_UNIQUENESS)
        ll_new = _fa_loglik(S, L, psi, n)
        trace.append(ll_new)
        if abs(ll_new - ll) <= tol * abs(ll):
            return FactorAnalysis(L, psi, ll_new, it, trace)
        ll = ll_new
    raise ConvergenceError(
        f"factor analysis EM did not converge in {max_iter} iterations "
        f"(last relative change {abs(trace[-1] - trace[-2]) / abs(trace[-2]):.3g})",
        trace,
    )


def standardize(loadings, uniquenesses):
    """Rescale to unit implied variances and rotate so the top q x q block is lower triangular."""
    loadings = np.asarray(loadings, dtype=float)
    uniquenesses = np.asarray(uniquenesses, dtype=float)
    d = (loadings**2).sum(axis=1) + uniquenesses
    L = loadings / np.sqrt(d)[:, None]
    psi = uniquenesses / d
    q = L.shape[1]
    if q > 0:
        Q, R = np.linalg.qr(L[:q].T)
        L = L @ Q
        signs = np.sign(np.diag(L[:q]))
        signs[signs == 0] = 1.0
        L = L * signs
        L[:q][np.triu_indices(q, 1)] = 0.0
    return L, psi


@dataclass(frozen=True)
class CopulaModel:
    loadings: np.ndarray
    uniquenesses: np.ndarray
    margins: ManyGLMFit
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return self.loadings.shape[1]

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def family(self) -> str:
        return self.margins.family

    @property
    def taxon_names(self) -> tuple:
        return self.margins.taxon_names

    @property
    def correlation(self) -> np.ndarray:
        sigma = self.loadings @ self.loadings.T + np.diag(self.uniquenesses)
        d = np.sqrt(np.diag(sigma))
        sigma = sigma / np.outer(d, d)
        np.fill_diagonal(sigma, 1.0)
        return sigma

    def to_dict(self) -> dict:
        m = self.margins
        return {
            "schema": SCHEMA,
            "version": __version__,
            "family": m.family,
            "taxa": list(m.taxon_names),
            "terms": list(m.model_matrix.terms),
            "column_names": list(m.column_names),
            "coefficients": m.B.tolist(),
            "dispersions": None if m.phi is None else m.phi.tolist(),
            "loglik": m.loglik.tolist(),
            "converged": m.converged.tolist(),
            "q": self.q,
            "loadings": self.loadings.tolist(),
            "uniquenesses": self.uniquenesses.tolist(),
            "seed": self.seed,
            "estimation": self.metadata,
            "design": m.model_matrix.design.to_dict(),
            "counts": None if m.counts is None else m.counts.counts.tolist(),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1, sort_keys=False) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "CopulaModel":
        if d.get("schema") != SCHEMA:
            raise ValidationError(f"unsupported model schema {d.get('schema')!r}; expected {SCHEMA}")
        design = DesignFrame.from_dict(d["design"])
        X = build_model_matrix(design, d["terms"])
        if list(X.column_names) != list(d["column_names"]):
            raise ValidationError("model columns do not match stored design")
        family = families.check_family(d["family"])
        B = np.array(d["coefficients"], dtype=float).reshape(X.k, len(d["taxa"]))
        phi = None if d["dispersions"] is None else np.array(d["dispersions"], dtype=float)
        counts = None
        if d.get("counts") is not None:
            counts = AbundanceMatrix(np.array(d["counts"]), tuple(d["taxa"]), design.sample_ids)
        mu = families.inverse_link(np.clip(X.X @ B, families.ETA_FLOOR, families.ETA_CEIL), family)
        loglik = np.array(d["loglik"], dtype=float)
        degenerate = (_degenerate_columns(counts.counts, family) if counts is not None
                      else np.zeros(B.shape[1], dtype=bool))
        margins = ManyGLMFit(B, phi, family, mu, loglik, np.array(d["converged"], dtype=bool),
                             degenerate, X, tuple(d["taxa"]), counts)
        q = int(d["q"])
        loadings = np.array(d["loadings"], dtype=float).reshape(len(d["taxa"]), q)
        return cls(loadings, np.array(d["uniquenesses"], dtype=float), margins,
                   d.get("seed"), d.get("estimation", {}))

    @classmethod
    def from_json(cls, path) -> "CopulaModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def score_correlation(fit: ManyGLMFit, Y: AbundanceMatrix, rng, n_rand: int = 5) -> np.ndarray:
    """Average correlation matrix of randomised-PIT normal scores."""
    R = np.zeros((Y.p, Y.p))
    for _ in range(n_rand):
        Z = ds_residuals(fit, Y, rng)
        R += np.corrcoef(Z, rowvar=False)
    return R / n_rand


def fit_copula(fit: ManyGLMFit, Y: AbundanceMatrix, q: int, rng: np.random.Generator,
               n_rand: int = 5, seed: int | None = None) -> CopulaModel:
    """Estimate the factor-analytic copula correlation from pilot fits.

    Normal scores from ``n_rand`` independent randomisations are summarised by
    their averaged correlation matrix, which is then fitted by EM factor
    analysis and rescaled to unit diagonal.
    """
    if fit.fitted_means.shape != Y.counts.shape:
        raise DimensionError("fit does not correspond to the supplied counts")
    fa_param_count(Y.p, q)
    meta = {
        "method": "EM factor analysis of averaged randomised-PIT score correlations",
        "n_randomisations": n_rand,
        "em_max_iter": EM_MAX_ITER,
        "em_tol": EM_TOL,
        "n_obs": Y.n,
        "n_parameters": fa_param_count(Y.p, q),
        "warnings": [],
    }
    if fa_param_count(Y.p, q) > Y.n * Y.p:
        msg = f"q={q} implies more covariance parameters than observed cells"
        meta["warnings"].append(msg)
        warnings.warn(msg)
    S = score_correlation(fit, Y, rng, n_rand)
    fa = factor_analysis(S, q, Y.n)
    L, psi = standardize(fa.loadings, fa.uniquenesses)
    meta["loglik"] = float(fa.loglik)
    meta["em_iterations"] = fa.n_iter
    model = CopulaModel(L, psi, fit, seed, meta)
    try:
        np.linalg.cholesky(model.correlation)
    except np.linalg.LinAlgError:
        raise NumericError("fitted copula correlation is not positive definite") from None
    return model


def draw_latent(loadings, uniquenesses, n_rows: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance latent normals: factors first, then unique parts."""
    p, q = loadings.shape
    f = rng.standard_normal((n_rows, q))
    e = rng.standard_normal((n_rows, p)) * np.sqrt(uniquenesses)
    scale = np.sqrt((loadings**2).sum(axis=1) + uniquenesses)
    return (f @ loadings.T + e) / scale


class MarginalSampler:
    """Quantile inversion for fixed per-cell margins.

    Rows sharing a mean within a taxon share one tabulated CDF, so the cost
    of tabulation is paid once per distinct (mean, dispersion) and reused for
    every simulated dataset.
    """

    def __init__(self, family: str, mu: np.ndarray, phi=None):
        self.family = families.check_family(family)
        mu = np.asarray(mu, dtype=float)
        if not np.all(np.isfinite(mu)):
            i, j = np.argwhere(~np.isfinite(mu))[0]
            raise NumericError(f"non-finite simulation mean at row {i}, taxon {j}")
        self.mu = mu
        self.n, self.p = mu.shape
        self.phi = None if phi is None else np.broadcast_to(np.asarray(phi, float), (self.p,))
        self._groups = []
        for j in range(self.p):
            uniq, inv = np.unique(mu[:, j], return_inverse=True)
            rows = [np.flatnonzero(inv == g) for g in range(uniq.size)]
            tables = [self._table(m, None if self.phi is None else self.phi[j]) for m in uniq]
            self._groups.append(list(zip(uniq, rows, tables)))

    def _table(self, mu, phi):
        if self.family == "binomial":
            return np.array([1.0 - mu, 1.0])
        top = families.ppf(U_MAX, mu, self.family, phi)
        if not np.isfinite(top) or top > MAX_TABLE:
            return None
        return families.cdf(np.arange(int(top) + 1), mu, self.family, phi)

    def quantile(self, u: np.ndarray) -> np.ndarray:
        """Smallest m with F(m) >= u, for ``u`` of shape (..., n, p)."""
        u = np.minimum(np.asarray(u, dtype=float), U_MAX)
        out = np.empty(u.shape, dtype=np.int64)
        for j in range(self.p):
            ph = None if self.phi is None else self.phi[j]
            for mu, rows, table in self._groups[j]:
                uu = u[..., rows, j]
                if table is None:
                    y = families.ppf(uu, mu, self.family, ph)
                else:
                    y = np.searchsorted(table, uu, side="left")
                    over = y >= table.size
                    if over.any():
                        y = y.astype(float)
                        y[over] = families.ppf(uu[over], mu, self.family, ph)
                out[..., rows, j] = y
        return out


def simulate_counts(model: CopulaModel, sampler: MarginalSampler,
                    rng: np.random.Generator) -> np.ndarray:
    z = draw_latent(model.loadings, model.uniquenesses, sampler.n, rng)
    return sampler.quantile(special.ndtr(z))


def simulate(model: CopulaModel, coeffs, dispersions, X_new, rng: np.random.Generator,
             sampler: MarginalSampler | None = None) -> AbundanceMatrix:
    """Draw one abundance matrix with margins given by ``coeffs`` at ``X_new``."""
    X = X_new.X if hasattr(X_new, "X") else np.asarray(X_new, dtype=float)
    coeffs = np.asarray(getattr(coeffs, "values", coeffs), dtype=float)
    if X.shape[1] != coeffs.shape[0]:
        raise DimensionError(f"X_new has {X.shape[1]} columns, coefficients have {coeffs.shape[0]} rows")
    if coeffs.shape[1] != model.p:
        raise DimensionError(f"coefficients cover {coeffs.shape[1]} taxa, model has {model.p}")
    if sampler is None:
        with np.errstate(over="ignore"):
            mu = families.inverse_link(X @ coeffs, model.family)
        sampler = MarginalSampler(model.family, mu, dispersions)
    counts = simulate_counts(model, sampler, rng)
    ids = getattr(getattr(X_new, "design", None), "sample_ids", None)
    return AbundanceMatrix.from_array(counts, model.taxon_names, ids)


def refit_margins(model: CopulaModel, Y: AbundanceMatrix) -> ManyGLMFit:
    """Refit the model's marginal GLMs to new counts on the same design."""
    X = model.margins.model_matrix
    return _wrap(fit_columns(Y.counts, X.X, model.family), model.family, X, Y)
