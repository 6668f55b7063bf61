"""Reading and validating abundance matrices, designs and run configuration."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .exceptions import DimensionError, ParseError, ValidationError

FAMILIES = ("poisson", "negative_binomial", "binomial")


@dataclass(frozen=True)
class AbundanceMatrix:
    """n x p matrix of nonnegative integer counts with sample and taxon labels."""

    counts: np.ndarray
    taxon_names: tuple
    sample_ids: tuple

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise DimensionError(f"counts must be 2-D, got shape {counts.shape}")
        n, p = counts.shape
        if n < 2 or p < 1:
            raise ValidationError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if not np.all(np.isfinite(counts)):
            raise ValidationError("counts contain missing or non-finite cells")
        if np.any(counts < 0):
            i, j = np.argwhere(counts < 0)[0]
            raise ValidationError(f"negative count at row {i}, taxon {j}")
        if np.any(counts != np.round(counts)):
            i, j = np.argwhere(counts != np.round(counts))[0]
            raise ValidationError(f"non-integer count at row {i}, taxon {j}")
        taxa = tuple(str(t) for t in self.taxon_names)
        samples = tuple(str(s) for s in self.sample_ids)
        if len(taxa) != p:
            raise DimensionError(f"{len(taxa)} taxon names for {p} columns")
        if len(samples) != n:
            raise DimensionError(f"{len(samples)} sample ids for {n} rows")
        if len(set(taxa)) != p:
            raise ValidationError(f"duplicate taxon names: {_duplicates(taxa)}")
        if len(set(samples)) != n:
            raise ValidationError(f"duplicate sample ids: {_duplicates(samples)}")
        arr = counts.astype(np.int64)
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)
        object.__setattr__(self, "taxon_names", taxa)
        object.__setattr__(self, "sample_ids", samples)

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def p(self) -> int:
        return self.counts.shape[1]

    @classmethod
    def from_array(cls, counts, taxon_names=None, sample_ids=None):
        counts = np.asarray(counts)
        n, p = counts.shape
        if taxon_names is None:
            taxon_names = [f"taxon{j + 1}" for j in range(p)]
        if sample_ids is None:
            sample_ids = [f"s{i + 1}" for i in range(n)]
        return cls(counts, tuple(taxon_names), tuple(sample_ids))

    def select(self, taxa: Sequence[str]) -> "AbundanceMatrix":
        idx = [self.taxon_names.index(t) for t in taxa]
        return AbundanceMatrix(self.counts[:, idx], tuple(taxa), self.sample_ids)


def _duplicates(items):
    seen, dup = set(), []
    for it in items:
        if it in seen and it not in dup:
            dup.append(it)
        seen.add(it)
    return dup


@dataclass(frozen=True)
class Categorical:
    levels: tuple
    values: tuple

    def __post_init__(self):
        levels = tuple(str(v) for v in self.levels)
        if not levels:
            raise ValidationError("categorical column needs at least one level")
        if len(set(levels)) != len(levels):
            raise ValidationError(f"duplicate levels {_duplicates(levels)}")
        values = tuple(str(v) for v in self.values)
        unknown = sorted(set(values) - set(levels))
        if unknown:
            raise ValidationError(f"unknown level(s) {unknown}; declared {list(levels)}")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "values", values)

    @property
    def baseline(self) -> str:
        return self.levels[0]

    def codes(self) -> np.ndarray:
        index = {lv: k for k, lv in enumerate(self.levels)}
        return np.array([index[v] for v in self.values], dtype=int)

    def take(self, rows) -> "Categorical":
        return Categorical(self.levels, tuple(self.values[i] for i in rows))


@dataclass(frozen=True)
class Numeric:
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1:
            raise DimensionError("numeric column must be 1-D")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("numeric column contains missing or non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def take(self, rows) -> "Numeric":
        return Numeric(self.values[np.asarray(rows, dtype=int)])


Column = Union[Categorical, Numeric]


@dataclass(frozen=True)
class DesignFrame:
    """Covariates for n observations; column order is preserved."""

    columns: Mapping[str, Column]
    sample_ids: tuple = field(default=())

    def __post_init__(self):
        cols = dict(self.columns)
        lengths = {name: len(col.values) for name, col in cols.items()}
        if len(set(lengths.values())) > 1:
            raise DimensionError(f"design columns differ in length: {lengths}")
        n = next(iter(lengths.values())) if lengths else len(self.sample_ids)
        ids = tuple(str(s) for s in self.sample_ids) or tuple(f"s{i + 1}" for i in range(n))
        if len(ids) != n:
            raise DimensionError(f"{len(ids)} sample ids for {n} design rows")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "sample_ids", ids)

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    def __getitem__(self, name: str) -> Column:
        return self.columns[name]

    def row_key(self, i: int) -> tuple:
        return tuple(
            col.values[i] if isinstance(col, Categorical) else float(col.values[i])
            for col in self.columns.values()
        )

    def take(self, rows, sample_ids=None) -> "DesignFrame":
        rows = list(rows)
        cols = {name: col.take(rows) for name, col in self.columns.items()}
        if sample_ids is None:
            sample_ids = tuple(f"s{i + 1}" for i in range(len(rows)))
        return DesignFrame(cols, tuple(sample_ids))

    def to_dict(self) -> dict:
        out = {"sample_ids": list(self.sample_ids), "columns": []}
        for name, col in self.columns.items():
            if isinstance(col, Categorical):
                out["columns"].append(
                    {"name": name, "type": "categorical", "levels": list(col.levels),
                     "values": list(col.values)}
                )
            else:
                out["columns"].append(
                    {"name": name, "type": "numeric", "values": col.values.tolist()}
                )
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DesignFrame":
        cols = {}
        for c in d["columns"]:
            if c["type"] == "categorical":
                cols[c["name"]] = Categorical(tuple(c["levels"]), tuple(c["values"]))
            else:
                cols[c["name"]] = Numeric(np.array(c["values"], dtype=float))
        return cls(cols, tuple(d["sample_ids"]))


def _read_rows(path):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise ParseError(f"{path}: empty file")
    return rows


def read_counts(path, format: str = "csv") -> AbundanceMatrix:
    """Read a wide counts CSV: header of taxon names, first column sample ids."""
    if format != "csv":
        raise ValidationError(f"unsupported format {format!r}; only 'csv'")
    rows = _read_rows(path)
    header = [h.strip() for h in rows[0]]
    taxa = header[1:]
    if not taxa:
        raise ParseError("header has no taxon columns", row=1)
    samples, data = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(row)}", row=r)
        samples.append(row[0].strip())
        vals = []
        for name, cell in zip(taxa, row[1:]):
            cell = cell.strip()
            if cell == "":
                raise ParseError("missing cell", row=r, column=name)
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"malformed cell {cell!r}", row=r, column=name) from None
            if v < 0 or v != np.floor(v) or not np.isfinite(v):
                raise ValidationError(
                    f"invalid count {cell!r} at row {r}, column {name!r}: "
                    "counts must be nonnegative integers"
                )
            vals.append(v)
        data.append(vals)
    return AbundanceMatrix(np.array(data, dtype=np.int64).reshape(len(data), len(taxa)),
                           tuple(taxa), tuple(samples))


def write_counts(Y: AbundanceMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", *Y.taxon_names])
        for sid, row in zip(Y.sample_ids, Y.counts):
            w.writerow([sid, *(int(v) for v in row)])


def read_design(path, schema: Mapping[str, object], n_rows: int | None = None) -> DesignFrame:
    """Read a design CSV (first column sample ids) using declared column types.

    ``schema`` maps column name to either ``"numeric"`` or an ordered list of
    levels (first = baseline). Undeclared columns are ignored.
    """
    rows = _read_rows(path)
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if n_rows is not None and len(body) != n_rows:
        raise DimensionError(f"design has {len(body)} rows, counts have {n_rows}")
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(row)}", row=r)
    cols = {}
    for name, decl in schema.items():
        if name not in header[1:]:
            raise ValidationError(f"declared column {name!r} not in design header {header[1:]}")
        k = header.index(name)
        raw = [row[k].strip() for row in body]
        if isinstance(decl, str):
            if decl != "numeric":
                raise ValidationError(f"unknown column type {decl!r} for {name!r}")
            vals = []
            for r, cell in enumerate(raw, start=2):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"malformed numeric cell {cell!r}", row=r, column=name) from None
            cols[name] = Numeric(np.array(vals))
        else:
            levels = tuple(str(lv) for lv in decl)
            for r, cell in enumerate(raw, start=2):
                if cell not in levels:
                    raise ValidationError(
                        f"unknown level {cell!r} at row {r}, column {name!r}; declared {list(levels)}"
                    )
            cols[name] = Categorical(levels, tuple(raw))
    return DesignFrame(cols, tuple(row[0].strip() for row in body))


@dataclass(frozen=True)
class RunConfig:
    family: str = "negative_binomial"
    n_factors: int = 2
    alpha: float = 0.05
    n_power: int = 1000
    n_resamp: int = 1000
    seed: int = 0
    workers: Union[int, str] = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if int(self.n_factors) < 0:
            raise ValidationError("n_factors must be nonnegative")
        if not 0.0 < float(self.alpha) < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if int(self.n_power) < 1 or int(self.n_resamp) < 1:
            raise ValidationError("n_power and n_resamp must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if self.workers != "auto" and int(self.workers) < 1:
            raise ValidationError("workers must be a positive integer or 'auto'")

    def check_taxa(self, p: int) -> None:
        if not self.n_factors < p:
            raise ValidationError(f"n_factors={self.n_factors} must be < p={p}")

    def resolved_workers(self) -> int:
        return resolve_workers(self.workers)


def resolve_workers(workers) -> int:
    if workers == "auto":
        return max(1, (os.cpu_count() or 1) - 1)
    return max(1, int(workers))


_CONFIG_TYPES = {"family": str, "n_factors": int, "alpha": float, "n_power": int,
                 "n_resamp": int, "seed": int, "workers": str}


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected key=value, got {line!r}", row=lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def run_config_from_mapping(values: Mapping[str, object]) -> RunConfig:
    kwargs = {}
    for key, typ in _CONFIG_TYPES.items():
        if key in values and values[key] is not None:
            raw = values[key]
            try:
                if key == "workers":
                    kwargs[key] = raw if raw == "auto" else int(raw)
                else:
                    kwargs[key] = typ(raw)
            except (TypeError, ValueError):
                raise ParseError(f"bad value {raw!r} for {key}") from None
    return RunConfig(**kwargs)
