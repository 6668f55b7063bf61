"""Monte Carlo power estimation.

Two estimators share one data generator (the fitted copula):

* ``powersim_critical`` simulates ``n_resamp`` datasets under the null once,
  takes the upper ``1 - alpha`` order statistic of their test statistics as
  a critical value, and counts alternative statistics above it. It needs
  ``2 * (n_power + n_resamp)`` model fits.
* ``powersim_nested`` computes a parametric-bootstrap p-value for each
  alternative dataset from ``n_resamp`` datasets simulated under that
  dataset's own null fit. It needs ``2 * n_power * (n_resamp + 1)`` fits and
  serves as the reference for the critical-value approximation.

Both use the same random streams for the alternative datasets.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import scipy
from scipy import special

from . import __version__, families, rng as rngs
from .copula import CopulaModel, MarginalSampler, draw_latent
from .effects import CoefficientMatrix, EffectSpec, effect_alt, effect_null
from .exceptions import DimensionError, MvPowerError, ValidationError
from .glm import fit_columns, lr_columns
from .ingest import DesignFrame, resolve_workers

STATISTIC = "sum of per-taxon likelihood-ratio statistics"


@dataclass(frozen=True)
class PowerSettings:
    N: int
    alpha: float = 0.05
    n_power: int = 1000
    n_resamp: int = 1000
    seed: int = 0
    workers: int | str = 1
    batch_size: int = 100

    def __post_init__(self):
        if int(self.N) < 1:
            raise ValidationError(f"N must be positive, got {self.N}")
        if not 0.0 < float(self.alpha) < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if int(self.n_power) < 1 or int(self.n_resamp) < 1:
            raise ValidationError("n_power and n_resamp must be >= 1")
        if int(self.batch_size) < 1:
            raise ValidationError("batch_size must be >= 1")


@dataclass
class PowerResult:
    power: float
    mc_se: float
    method: str
    critical_value: Optional[float]
    null_stats: np.ndarray
    alt_stats: np.ndarray
    p_values: Optional[np.ndarray]
    fit_count: int
    wall_time_seconds: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "power": self.power,
            "mc_se": self.mc_se,
            "method": self.method,
            "critical_value": self.critical_value,
            "fit_count": self.fit_count,
            "wall_time_seconds": self.wall_time_seconds,
            "metadata": self.metadata,
        }

    def write(self, out_dir) -> list:
        """Write result.json plus statistic CSVs; returns written file names."""
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "result.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")
        names = ["result.json"]
        pd.DataFrame({"index": np.arange(self.alt_stats.size), "statistic": self.alt_stats}) \
            .to_csv(out / "alt_stats.csv", index=False, float_format="%.17g")
        names.append("alt_stats.csv")
        if self.null_stats.size:
            pd.DataFrame({"index": np.arange(self.null_stats.size), "statistic": self.null_stats}) \
                .to_csv(out / "null_stats.csv", index=False, float_format="%.17g")
            names.append("null_stats.csv")
        if self.p_values is not None:
            pd.DataFrame({"index": np.arange(self.p_values.size), "p_value": self.p_values}) \
                .to_csv(out / "p_values.csv", index=False, float_format="%.17g")
            names.append("p_values.csv")
        return names


def extend_design(design: DesignFrame, N: int) -> DesignFrame:
    """Replicate covariate patterns to N rows, keeping pilot proportions.

    Pattern counts follow largest-remainder apportionment with ties broken
    by first appearance; output rows are grouped by pattern in order of first
    appearance.
    """
    keys, first_row, counts = [], {}, {}
    for i in range(design.n):
        key = design.row_key(i)
        if key not in first_row:
            first_row[key] = i
            keys.append(key)
            counts[key] = 0
        counts[key] += 1
    N = int(N)
    if N < len(keys):
        raise ValidationError(f"N={N} is smaller than the {len(keys)} distinct covariate patterns")
    quotas = [N * counts[k] / design.n for k in keys]
    alloc = [math.floor(q + 1e-9) for q in quotas]
    remainders = [q - a for q, a in zip(quotas, alloc)]
    short = N - sum(alloc)
    order = sorted(range(len(keys)), key=lambda g: (-round(remainders[g], 9), g))
    for g in order[:short]:
        alloc[g] += 1
    rows = [first_row[k] for k, a in zip(keys, alloc) for _ in range(a)]
    return design.take(rows)


def critical_value(null_stats: np.ndarray, alpha: float) -> float:
    """Order statistic of index ceil((1 - alpha) * n), 1-based."""
    n = null_stats.size
    k = math.ceil(round((1.0 - alpha) * n, 9))
    k = min(max(k, 1), n)
    return float(np.sort(null_stats)[k - 1])


# -- worker plumbing --------------------------------------------------------

_CTX: dict = {}


def _init_worker(ctx):
    global _CTX
    _CTX = ctx


def _run(fn, tasks, ctx, workers):
    """Map ``fn`` over ``tasks`` with results returned in task order."""
    workers = min(resolve_workers(workers), max(len(tasks), 1))
    if workers == 1:
        global _CTX
        saved = _CTX
        _CTX = ctx
        try:
            return [fn(t) for t in tasks]
        finally:
            _CTX = saved
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,)) as ex:
        return list(ex.map(fn, tasks))


def _chunks(n, size):
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def _lr_batch(counts, X_alt, X_null, family):
    """Sum-LR statistic for each dataset in ``counts`` (R x N x p)."""
    R, N, p = counts.shape
    Y = counts.transpose(1, 0, 2).reshape(N, R * p)
    alt = fit_columns(Y, X_alt, family)
    null = fit_columns(Y, X_null, family, phi=alt.phi)
    per = lr_columns(alt.loglik, null.loglik, alt.degenerate | null.degenerate)
    return per.reshape(R, p).sum(axis=1), alt, null


def _simulate_batch(model, sampler, seed, phase, indices, *prefix):
    z = np.stack([
        draw_latent(model.loadings, model.uniquenesses, sampler.n,
                    rngs.stream(seed, phase, *prefix, i))
        for i in indices
    ])
    return sampler.quantile(special.ndtr(z))


def _stats_task(task):
    phase, a, b = task
    c = _CTX
    counts = _simulate_batch(c["model"], c["samplers"][phase], c["seed"], phase, range(a, b))
    T, _, _ = _lr_batch(counts, c["X_alt"], c["X_null"], c["family"])
    return T


def _nested_task(i):
    c = _CTX
    model, family = c["model"], c["family"]
    counts = _simulate_batch(model, c["samplers"][rngs.ALT], c["seed"], rngs.ALT, [i])
    T_obs, alt, null = _lr_batch(counts, c["X_alt"], c["X_null"], family)
    mu0 = families.inverse_link(np.clip(c["X_null"] @ null.B, families.ETA_FLOOR,
                                        families.ETA_CEIL), family)
    sampler = MarginalSampler(family, mu0, alt.phi)
    exceed = 0
    for a, b in _chunks(c["n_resamp"], c["batch_size"]):
        sims = _simulate_batch(model, sampler, c["seed"], rngs.NESTED, range(a, b), i)
        T, _, _ = _lr_batch(sims, c["X_alt"], c["X_null"], family)
        exceed += int(np.sum(T >= T_obs[0]))
    return float(T_obs[0]), (1 + exceed) / (c["n_resamp"] + 1)


# -- estimators ---------------------------------------------------------------

def _coeff_values(coeffs, model):
    if isinstance(coeffs, CoefficientMatrix):
        if coeffs.taxon_names != model.taxon_names:
            raise ValidationError("coefficient taxa do not match the model")
        if coeffs.column_names != model.margins.column_names:
            raise ValidationError("coefficient rows do not match the model's design columns")
        return coeffs.values
    values = np.asarray(coeffs, dtype=float)
    if values.shape != model.margins.B.shape:
        raise DimensionError(f"coefficients have shape {values.shape}, expected {model.margins.B.shape}")
    return values


def _setup(model: CopulaModel, coeffs_alt, term, settings: PowerSettings):
    margins = model.margins
    if term not in margins.model_matrix.term_map:
        raise ValidationError(f"unknown term {term!r}; available terms {list(margins.model_matrix.terms)}")
    B_alt = _coeff_values(coeffs_alt, model)
    design = extend_design(margins.model_matrix.design, settings.N)
    X = margins.model_matrix.with_design(design)
    X0 = X.without(term)
    return B_alt, X, X0


def _sampler(model, X, B):
    eta = np.clip(X @ B, families.ETA_FLOOR, families.ETA_CEIL)
    return MarginalSampler(model.family, families.inverse_link(eta, model.family), model.margins.phi)


def _metadata(method, model, term, settings, extra=None):
    meta = {
        "method": method,
        "statistic": STATISTIC,
        "term": term,
        "family": model.family,
        "N": int(settings.N),
        "alpha": float(settings.alpha),
        "n_power": int(settings.n_power),
        "n_resamp": int(settings.n_resamp),
        "seed": int(settings.seed),
        "batch_size": int(settings.batch_size),
        "null_generator": "parametric simulation from the fitted copula",
        "versions": {"mvpower": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "warnings": [],
    }
    meta.update(extra or {})
    return meta


def powersim_critical(model: CopulaModel, coeffs_alt, term: str,
                      settings: PowerSettings) -> PowerResult:
    """Power as the share of alternative statistics above a simulated critical value."""
    t0 = time.perf_counter()
    B_alt, X, X0 = _setup(model, coeffs_alt, term, settings)
    B_null = effect_null(model.margins, term).values
    ctx = {
        "model": model,
        "family": model.family,
        "seed": settings.seed,
        "X_alt": X.X,
        "X_null": X0.X,
        "samplers": {rngs.NULL: _sampler(model, X.X, B_null), rngs.ALT: _sampler(model, X.X, B_alt)},
    }
    tasks = [(rngs.NULL, a, b) for a, b in _chunks(settings.n_resamp, settings.batch_size)]
    tasks += [(rngs.ALT, a, b) for a, b in _chunks(settings.n_power, settings.batch_size)]
    out = _run(_stats_task, tasks, ctx, settings.workers)
    n_null = len(_chunks(settings.n_resamp, settings.batch_size))
    null_stats = np.concatenate(out[:n_null])
    alt_stats = np.concatenate(out[n_null:])
    c_alpha = critical_value(null_stats, settings.alpha)
    power = float(np.mean(alt_stats > c_alpha))
    meta = _metadata("critical", model, term, settings,
                     {"null_coefficients": "effect_null (term zeroed, intercept from null refit)"})
    if np.all(null_stats == null_stats[0]):
        msg = "degenerate null distribution: all null statistics are equal"
        meta["warnings"].append(msg)
        warnings.warn(msg)
    return PowerResult(
        power=power,
        mc_se=math.sqrt(power * (1 - power) / settings.n_power),
        method="critical",
        critical_value=c_alpha,
        null_stats=null_stats,
        alt_stats=alt_stats,
        p_values=None,
        fit_count=2 * (settings.n_power + settings.n_resamp),
        wall_time_seconds=time.perf_counter() - t0,
        metadata=meta,
    )


def powersim_nested(model: CopulaModel, coeffs_alt, term: str,
                    settings: PowerSettings) -> PowerResult:
    """Power from per-dataset parametric-bootstrap p-values (reference method)."""
    t0 = time.perf_counter()
    B_alt, X, X0 = _setup(model, coeffs_alt, term, settings)
    ctx = {
        "model": model,
        "family": model.family,
        "seed": settings.seed,
        "X_alt": X.X,
        "X_null": X0.X,
        "n_resamp": int(settings.n_resamp),
        "batch_size": int(settings.batch_size),
        "samplers": {rngs.ALT: _sampler(model, X.X, B_alt)},
    }
    out = _run(_nested_task, list(range(settings.n_power)), ctx, settings.workers)
    alt_stats = np.array([t for t, _ in out])
    p_values = np.array([pv for _, pv in out])
    power = float(np.mean(p_values <= settings.alpha))
    meta = _metadata("nested", model, term, settings, {
        "null_coefficients": "null-model refit of each simulated dataset",
        "p_value": "(1 + #{T_null >= T_obs}) / (n_resamp + 1)",
    })
    return PowerResult(
        power=power,
        mc_se=math.sqrt(power * (1 - power) / settings.n_power),
        method="nested",
        critical_value=None,
        null_stats=np.empty(0),
        alt_stats=alt_stats,
        p_values=p_values,
        fit_count=2 * settings.n_power * (settings.n_resamp + 1),
        wall_time_seconds=time.perf_counter() - t0,
        metadata=meta,
    )


def curve_seed(master_seed: int, index: int) -> int:
    return rngs.derive_seed(master_seed, rngs.CURVE, index)


def power_curve(model: CopulaModel, spec_grid: Sequence, term: str, settings: PowerSettings,
                increasers=(), decreasers=()) -> pd.DataFrame:
    """Critical-value power over a grid of (rho, N) pairs, sorted by (rho, N).

    Grid point ``k`` (in sorted order) runs with seed ``curve_seed(seed, k)``.
    A failing point is recorded in the ``error`` column and the sweep goes on.
    """
    grid = sorted((float(r), int(n)) for r, n in spec_grid)
    if not grid:
        raise ValidationError("power curve grid is empty")
    rows = []
    for k, (rho, N) in enumerate(grid):
        row = {"rho": rho, "N": N, "power": np.nan, "mc_se": np.nan, "crit_value": np.nan,
               "fits": 0, "seconds": np.nan, "seed": curve_seed(settings.seed, k), "error": ""}
        try:
            spec = EffectSpec(term, rho, frozenset(increasers), frozenset(decreasers))
            coeffs = effect_alt(model.margins, spec)
            s = PowerSettings(N, settings.alpha, settings.n_power, settings.n_resamp,
                              row["seed"], settings.workers, settings.batch_size)
            res = powersim_critical(model, coeffs, term, s)
            row.update(power=res.power, mc_se=res.mc_se, crit_value=res.critical_value,
                       fits=res.fit_count, seconds=res.wall_time_seconds)
        except MvPowerError as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return pd.DataFrame(rows, columns=["rho", "N", "power", "mc_se", "crit_value", "fits",
                                       "seconds", "seed", "error"])
