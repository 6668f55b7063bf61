"""Effect-size coefficient matrices for power simulation.

A single multiplicative effect ``rho`` is applied to listed increaser taxa
(and its inverse to decreasers). For an ordered categorical term with levels
``baseline, L1, ..., Lm`` the level ``Ll`` receives ``l * log(rho)``, giving
mean ratios ``rho, rho**2, ...`` relative to the baseline. For binomial
margins the same arithmetic happens on the logit scale, so ``rho`` is an
odds ratio.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .exceptions import DimensionError, ValidationError
from .glm import ManyGLMFit, fit_manyglm
from .ingest import Categorical


@dataclass(frozen=True)
class EffectSpec:
    term: str
    effect_size: float
    increasers: frozenset = frozenset()
    decreasers: frozenset = frozenset()

    def __post_init__(self):
        rho = float(self.effect_size)
        if not np.isfinite(rho) or rho <= 0:
            raise ValidationError(f"effect size must be a positive number, got {self.effect_size}")
        inc = frozenset(self.increasers)
        dec = frozenset(self.decreasers)
        both = sorted(inc & dec)
        if both:
            raise ValidationError(f"taxa listed as both increaser and decreaser: {both}")
        object.__setattr__(self, "effect_size", rho)
        object.__setattr__(self, "increasers", inc)
        object.__setattr__(self, "decreasers", dec)


@dataclass(frozen=True)
class CoefficientMatrix:
    values: np.ndarray
    column_names: tuple
    taxon_names: tuple

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (len(self.column_names), len(self.taxon_names)):
            raise DimensionError(
                f"coefficient shape {v.shape} does not match "
                f"{len(self.column_names)} columns x {len(self.taxon_names)} taxa"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "column_names", tuple(self.column_names))
        object.__setattr__(self, "taxon_names", tuple(self.taxon_names))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["column", *self.taxon_names])
            for name, row in zip(self.column_names, self.values):
                w.writerow([name, *(repr(float(x)) for x in row)])

    @classmethod
    def read_csv(cls, path) -> "CoefficientMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        taxa = rows[0][1:]
        names = [r[0] for r in rows[1:]]
        values = [[float(x) for x in r[1:]] for r in rows[1:]]
        return cls(np.array(values).reshape(len(names), len(taxa)), tuple(names), tuple(taxa))


def _term_columns(fit: ManyGLMFit, term: str):
    tmap = fit.model_matrix.term_map
    if term not in tmap:
        raise ValidationError(f"unknown term {term!r}; available terms {list(tmap)}")
    return tmap[term]


def _taxon_index(fit: ManyGLMFit, names: Iterable[str]):
    names = sorted(names)
    missing = [t for t in names if t not in fit.taxon_names]
    if missing:
        raise ValidationError(f"unknown taxa in effect specification: {missing}")
    return [fit.taxon_names.index(t) for t in names]


def effect_alt(fit: ManyGLMFit, spec: EffectSpec) -> CoefficientMatrix:
    """Fitted coefficients with the term's columns replaced by the effect pattern."""
    cols = _term_columns(fit, spec.term)
    inc = _taxon_index(fit, spec.increasers)
    dec = _taxon_index(fit, spec.decreasers)
    B = np.array(fit.B, dtype=float)
    log_rho = np.log(spec.effect_size)
    # level index above baseline; a numeric term has a single column with index 1
    steps = np.arange(1, len(cols) + 1, dtype=float)
    for c, step in zip(cols, steps):
        B[c, :] = 0.0
        B[c, inc] = step * log_rho
        B[c, dec] = -step * log_rho
    return CoefficientMatrix(B, fit.column_names, fit.taxon_names)


def effect_null(fit: ManyGLMFit, term: str) -> CoefficientMatrix:
    """Coefficients with the term removed.

    For a categorical term the intercepts come from a refit of the model
    without the term, so simulated overall abundance matches the pilot data.
    """
    cols = _term_columns(fit, term)
    B = np.array(fit.B, dtype=float)
    B[list(cols), :] = 0.0
    if isinstance(fit.model_matrix.design[term], Categorical):
        if fit.counts is None:
            raise ValidationError("effect_null needs the pilot counts to refit the null model")
        null = fit_manyglm(fit.counts, fit.model_matrix.without(term), fit.family, phi=fit.phi)
        B[0, :] = null.B[0, :]
    return CoefficientMatrix(B, fit.column_names, fit.taxon_names)


def read_taxon_list(path) -> list:
    """Newline-delimited taxon names; blank lines and ``#`` comments skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(line)
    return out
