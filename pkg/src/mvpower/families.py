"""Marginal count distributions: link, log-likelihood and CDF per family.

Negative binomial is parameterised by mean ``mu`` and size ``phi`` so that
``Var = mu + mu**2 / phi``.
"""

from __future__ import annotations

import numpy as np
from scipy import special, stats

from .exceptions import ValidationError

ETA_FLOOR = -20.0
ETA_CEIL = 30.0
PHI_BOUNDS = (1e-3, 1e6)


def check_family(family: str) -> str:
    if family not in ("poisson", "negative_binomial", "binomial"):
        raise ValidationError(f"unknown family {family!r}")
    return family


def inverse_link(eta, family):
    if family == "binomial":
        return special.expit(eta)
    return np.exp(eta)


def link(mu, family):
    if family == "binomial":
        return special.logit(mu)
    return np.log(mu)


def loglik_terms(y, mu, family, phi=None):
    """Elementwise log-likelihood; ``phi`` broadcasts against columns."""
    if family == "poisson":
        return special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)
    if family == "negative_binomial":
        phi = np.asarray(phi, dtype=float)
        return (
            special.gammaln(y + phi) - special.gammaln(phi) - special.gammaln(y + 1.0)
            + phi * np.log(phi / (phi + mu))
            + special.xlogy(y, mu / (phi + mu))
        )
    # presence-absence; clip keeps log finite at separation
    mu = np.clip(mu, 1e-300, 1.0 - 1e-16)
    return special.xlogy(y, mu) + special.xlogy(1.0 - y, 1.0 - mu)


def loglik_kernel(y, mu, family, phi=None):
    """Terms of the log-likelihood that vary with ``mu`` (``phi`` fixed)."""
    # mu > 0 always here (linear predictor is floored)
    if family == "poisson":
        return y * np.log(mu) - mu
    if family == "negative_binomial":
        phi = np.asarray(phi, dtype=float)
        return y * np.log(mu) - (y + phi) * np.log1p(mu / phi)
    return loglik_terms(y, mu, family)


def cdf(y, mu, family, phi=None):
    """P(Y <= y); returns 0 for y < 0."""
    y = np.asarray(y, dtype=float)
    if family == "poisson":
        out = special.pdtr(np.maximum(y, 0.0), mu)
    elif family == "negative_binomial":
        phi = np.asarray(phi, dtype=float)
        out = special.betainc(phi, np.maximum(y, 0.0) + 1.0, phi / (phi + mu))
    else:
        out = np.where(y >= 1, 1.0, 1.0 - mu)
    return np.where(y < 0, 0.0, out)


def ppf(u, mu, family, phi=None):
    """Smallest integer m with cdf(m) >= u (scalar parameters)."""
    if family == "poisson":
        return stats.poisson.ppf(u, mu)
    if family == "negative_binomial":
        return stats.nbinom.ppf(u, phi, phi / (phi + mu))
    return np.where(u <= 1.0 - mu, 0.0, 1.0)
