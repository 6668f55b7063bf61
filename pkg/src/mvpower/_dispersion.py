"""Compiled per-column negative binomial likelihood and size estimation.

scipy's polygamma is an order of magnitude slower than digamma and cannot be
called from compiled loops, so digamma/trigamma are evaluated here by upward
recurrence to x >= 10 followed by the asymptotic series (abs. error < 1e-13).
Terms depending only on (y, phi) are evaluated once per distinct count.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _digamma(x):
    r = 0.0
    while x < 10.0:
        r -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    return r + math.log(x) - 0.5 / x - f * (
        1.0 / 12 - f * (1.0 / 120 - f * (1.0 / 252 - f * (1.0 / 240 - f / 132)))
    )


@njit(cache=True)
def _trigamma(x):
    r = 0.0
    while x < 10.0:
        r += 1.0 / (x * x)
        x += 1.0
    f = 1.0 / (x * x)
    return r + 1.0 / x + 0.5 * f + (f / x) * (1.0 / 6 - f * (1.0 / 30 - f * (1.0 / 42 - f / 30)))


@njit(cache=True)
def _distinct(y):
    s = np.sort(y)
    vals = np.empty(s.size)
    wts = np.empty(s.size)
    k = 0
    for i in range(s.size):
        if k > 0 and s[i] == vals[k - 1]:
            wts[k - 1] += 1.0
        else:
            vals[k] = s[i]
            wts[k] = 1.0
            k += 1
    return vals[:k], wts[:k]


@njit(cache=True)
def _profile(y, mu, vals, wts, theta):
    """phi-dependent log-likelihood and its first two derivatives in theta = log(phi)."""
    phi = math.exp(theta)
    n = y.shape[0]
    ll = -n * math.lgamma(phi)
    s = -n * _digamma(phi) + n * (math.log(phi) + 1.0)
    ds = -n * _trigamma(phi) + n / phi
    for k in range(vals.shape[0]):
        ll += wts[k] * math.lgamma(vals[k] + phi)
        s += wts[k] * _digamma(vals[k] + phi)
        ds += wts[k] * _trigamma(vals[k] + phi)
    for i in range(n):
        a = mu[i] + phi
        la = math.log(a)
        ll += phi * (math.log(phi) - la) - y[i] * la
        s -= la + (y[i] + phi) / a
        ds -= 1.0 / a + (mu[i] - y[i]) / (a * a)
    return ll, phi * s, phi * s + phi * phi * ds


@njit(cache=True)
def ml_phi(Y, MU, theta0, lo, hi, tol, max_iter):
    """Safeguarded Newton on log(phi) per column, clamped to [lo, hi]."""
    m = Y.shape[1]
    out = np.empty(m)
    for j in range(m):
        y = Y[:, j]
        mu = MU[:, j]
        vals, wts = _distinct(y)
        th = min(max(theta0[j], lo), hi)
        f, g, h = _profile(y, mu, vals, wts, th)
        for _ in range(max_iter):
            if h < 0.0:
                step = -g / h
            else:
                step = 1.0 if g > 0 else -1.0
            step = min(max(step, -2.0), 2.0)
            new = min(max(th + step, lo), hi)
            step = new - th
            if step == 0.0:
                break
            fn, gn, hn = _profile(y, mu, vals, wts, new)
            k = 0
            while fn < f and k < 40:
                step *= 0.5
                new = th + step
                fn, gn, hn = _profile(y, mu, vals, wts, new)
                k += 1
            if fn < f:
                break
            th, f, g, h = new, fn, gn, hn
            if abs(step) < tol:
                break
        out[j] = math.exp(th)
    return out


@njit(cache=True)
def nb_loglik(Y, MU, PHI):
    """Exact NB log-likelihood summed over rows, per column."""
    n, m = Y.shape
    out = np.empty(m)
    for j in range(m):
        phi = PHI[j]
        vals, wts = _distinct(Y[:, j])
        lg_phi = math.lgamma(phi)
        log_phi = math.log(phi)
        ll = 0.0
        for k in range(vals.shape[0]):
            ll += wts[k] * (math.lgamma(vals[k] + phi) - lg_phi - math.lgamma(vals[k] + 1.0))
        for i in range(n):
            y = Y[i, j]
            la = math.log(MU[i, j] + phi)
            ll += phi * (log_phi - la)
            if y > 0:
                ll += y * (math.log(MU[i, j]) - la)
        out[j] = ll
    return out
