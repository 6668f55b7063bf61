"""Command-line interface: ``mvpower {fit,power,curve,diagnose}``.

Exit codes: 0 success, 2 validation or parse error, 3 numeric failure,
4 I/O error. Every command writes a ``manifest.json`` into its output
directory recording the resolved configuration and SHA-256 digests of inputs
and outputs.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, rng as rngs
from .copula import CopulaModel, fit_copula
from .effects import EffectSpec, effect_alt, read_taxon_list
from .exceptions import NumericError, ParseError, ValidationError
from .glm import build_model_matrix, diagnostics, fit_manyglm
from .ingest import read_config_file, read_counts, read_design, resolve_workers
from .power import PowerSettings, power_curve, powersim_critical, powersim_nested

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

DEFAULTS = {
    "family": "negative_binomial",
    "n_factors": 2,
    "n_rand": 5,
    "alpha": 0.05,
    "nsim": 1000,
    "nresamp": 1000,
    "seed": 0,
    "workers": "1",
    "method": "critical",
    "batch_size": 100,
}


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs: list,
                   started: str) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {name: {"path": str(p), "sha256": sha256(p)} for name, p in inputs.items() if p},
        "outputs": {name: sha256(out_dir / name) for name in outputs},
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def verify_manifest(out_dir) -> dict:
    """Recompute input and output digests; returns ``{name: ok}``."""
    out_dir = Path(out_dir)
    with open(out_dir / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    status = {}
    for name, rec in manifest["inputs"].items():
        status[name] = Path(rec["path"]).exists() and sha256(rec["path"]) == rec["sha256"]
    for name, digest in manifest["outputs"].items():
        status[name] = (out_dir / name).exists() and sha256(out_dir / name) == digest
    return status


def _resolve(args, keys) -> dict:
    """Merge defaults < config file < flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config))
        for alias, key in (("n_power", "nsim"), ("n_resamp", "nresamp"), ("q", "n_factors")):
            if alias in cfg:
                cfg[key] = cfg.pop(alias)
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return {k: cfg.get(k) for k in keys}


def _int(cfg, key):
    try:
        return int(cfg[key])
    except (TypeError, ValueError):
        raise ParseError(f"{key} must be an integer, got {cfg[key]!r}") from None


def _float(cfg, key):
    try:
        return float(cfg[key])
    except (TypeError, ValueError):
        raise ParseError(f"{key} must be a number, got {cfg[key]!r}") from None


def _float_list(text):
    try:
        return [float(x) for x in str(text).replace(";", ",").split(",") if x.strip()]
    except ValueError:
        raise ParseError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _schema(categorical, numeric):
    schema = {}
    for decl in categorical or []:
        if "=" not in decl:
            raise ParseError(f"--categorical expects NAME=level1,level2,..., got {decl!r}")
        name, levels = decl.split("=", 1)
        schema[name.strip()] = [lv.strip() for lv in levels.split(",") if lv.strip()]
    for name in numeric or []:
        schema[name.strip()] = "numeric"
    if not schema:
        raise ValidationError("declare at least one design column with --categorical or --numeric")
    return schema


def cmd_fit(args) -> int:
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    cfg = _resolve(args, ["family", "n_factors", "n_rand", "seed"])
    family, q, seed = cfg["family"], _int(cfg, "n_factors"), _int(cfg, "seed")
    Y = read_counts(args.counts)
    schema = _schema(args.categorical, args.numeric)
    design = read_design(args.design, schema, n_rows=Y.n)
    if design.sample_ids != Y.sample_ids:
        raise ValidationError("design sample ids do not match counts sample ids (same order required)")
    terms = args.terms.split(",") if args.terms else list(schema)
    if q >= Y.p:
        raise ValidationError(f"n_factors={q} must be less than the number of taxa p={Y.p}")
    X = build_model_matrix(design, terms)
    fit = fit_manyglm(Y, X, family)
    model = fit_copula(fit, Y, q, rngs.stream(seed, rngs.COPULA), n_rand=_int(cfg, "n_rand"),
                       seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.to_json(out / "model.json")
    taxa, cells = diagnostics(fit, Y, rngs.stream(seed, rngs.PILOT))
    taxa.to_csv(out / "diagnostics_taxa.csv", index=False, float_format="%.17g")
    cells.to_csv(out / "diagnostics_cells.csv", index=False, float_format="%.17g")
    cfg.update(terms=terms, schema=schema)
    write_manifest(out, "fit", cfg, {"counts": args.counts, "design": args.design, "config": args.config},
                   ["model.json", "diagnostics_taxa.csv", "diagnostics_cells.csv"], started)
    n_bad = int((~fit.converged & ~fit.degenerate).sum())
    print(f"fitted {Y.p} taxa ({family}), q={q}; {n_bad} taxa did not converge; wrote {out}")
    return EXIT_OK


def _effect_inputs(args, model):
    inc = read_taxon_list(args.increasers) if args.increasers else []
    dec = read_taxon_list(args.decreasers) if args.decreasers else []
    terms = model.margins.model_matrix.terms
    if args.term not in terms:
        raise ValidationError(f"unknown term {args.term!r}; available terms {list(terms)}")
    return inc, dec


POWER_KEYS = ["alpha", "nsim", "nresamp", "seed", "workers", "method", "batch_size"]


def _settings(cfg, N, seed=None):
    return PowerSettings(
        N=N,
        alpha=_float(cfg, "alpha"),
        n_power=_int(cfg, "nsim"),
        n_resamp=_int(cfg, "nresamp"),
        seed=_int(cfg, "seed") if seed is None else seed,
        workers=resolve_workers(cfg["workers"] if cfg["workers"] == "auto" else _int(cfg, "workers")),
        batch_size=_int(cfg, "batch_size"),
    )


def cmd_power(args) -> int:
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    cfg = _resolve(args, POWER_KEYS + ["effect_size", "N"])
    model = CopulaModel.from_json(args.model)
    inc, dec = _effect_inputs(args, model)
    if cfg["effect_size"] is None or cfg["N"] is None:
        raise ValidationError("--effect-size and --N are required")
    spec = EffectSpec(args.term, _float(cfg, "effect_size"), frozenset(inc), frozenset(dec))
    coeffs = effect_alt(model.margins, spec)
    settings = _settings(cfg, _int(cfg, "N"))
    if cfg["method"] not in ("critical", "nested"):
        raise ValidationError(f"--method must be critical or nested, got {cfg['method']!r}")
    run = powersim_critical if cfg["method"] == "critical" else powersim_nested
    res = run(model, coeffs, args.term, settings)
    res.metadata["effect_scale"] = "odds ratio" if model.family == "binomial" else "mean ratio"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = res.write(out)
    coeffs.to_csv(out / "coefficients.csv")
    written.append("coefficients.csv")
    write_manifest(out, "power", cfg,
                   {"model": args.model, "increasers": args.increasers,
                    "decreasers": args.decreasers, "config": args.config}, written, started)
    label = "odds ratio" if model.family == "binomial" else "effect size"
    print(f"{label} {spec.effect_size:g}, N={settings.N}, method={res.method}")
    print(f"    Power  Comp time\n  {res.power:.5f}  {res.wall_time_seconds:.5f}")
    print(f"mc_se {res.mc_se:.5f}; fits {res.fit_count}")
    return EXIT_OK


def cmd_curve(args) -> int:
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    cfg = _resolve(args, POWER_KEYS)
    model = CopulaModel.from_json(args.model)
    inc, dec = _effect_inputs(args, model)
    rhos = _float_list(args.rho)
    Ns = [int(n) for n in _float_list(args.N)]
    if not rhos or not Ns:
        raise ValidationError("--rho and --N must be nonempty")
    settings = _settings(cfg, max(Ns))
    table = power_curve(model, [(r, n) for r in rhos for n in Ns], args.term, settings, inc, dec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "curve.csv", index=False, float_format="%.17g")
    write_manifest(out, "curve", cfg,
                   {"model": args.model, "increasers": args.increasers,
                    "decreasers": args.decreasers, "config": args.config}, ["curve.csv"], started)
    ok = int((table["error"] == "").sum())
    print(f"{ok}/{len(table)} grid points succeeded; wrote {out / 'curve.csv'}")
    return EXIT_OK if ok >= 1 else EXIT_VALIDATION


def cmd_diagnose(args) -> int:
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    cfg = _resolve(args, ["seed"])
    model = CopulaModel.from_json(args.model)
    if model.margins.counts is None:
        raise ValidationError("model file carries no pilot counts")
    taxa, cells = diagnostics(model.margins, model.margins.counts,
                              rngs.stream(_int(cfg, "seed"), rngs.PILOT))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    taxa.to_csv(out / "diagnostics_taxa.csv", index=False, float_format="%.17g")
    cells.to_csv(out / "diagnostics_cells.csv", index=False, float_format="%.17g")
    write_manifest(out, "diagnose", cfg, {"model": args.model, "config": args.config},
                   ["diagnostics_taxa.csv", "diagnostics_cells.csv"], started)
    print(f"wrote diagnostics for {len(taxa)} taxa to {out}")
    return EXIT_OK


def _power_flags(p):
    p.add_argument("--model", required=True, help="model.json written by `mvpower fit`")
    p.add_argument("--term", required=True, help="covariate whose effect is tested")
    p.add_argument("--increasers", help="file of taxon names (one per line) expected to increase")
    p.add_argument("--decreasers", help="file of taxon names (one per line) expected to decrease")
    p.add_argument("--alpha", type=float, help="significance level (default 0.05)")
    p.add_argument("--nsim", type=int, help="alternative datasets n_power (default 1000)")
    p.add_argument("--nresamp", type=int, help="null datasets n_resamp (default 1000)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--workers", help="worker processes, integer or 'auto' (default 1)")
    p.add_argument("--batch-size", dest="batch_size", type=int,
                   help="datasets fitted together per task (default 100); results depend on it")
    p.add_argument("--config", help="key=value file; flags override its values")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvpower", description="Simulation-based power analysis for multivariate abundance studies.")
    parser.add_argument("--version", action="version", version=f"mvpower {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit marginal GLMs and the copula to pilot data")
    p.add_argument("--counts", required=True, help="counts CSV: sample id column, one column per taxon")
    p.add_argument("--design", required=True, help="design CSV: sample id column, covariates")
    p.add_argument("--categorical", action="append", metavar="NAME=L1,L2,...",
                   help="categorical column with ordered levels; first level is the baseline")
    p.add_argument("--numeric", action="append", metavar="NAME", help="numeric column")
    p.add_argument("--terms", help="comma-separated model terms (default: all declared columns)")
    p.add_argument("--family", choices=["poisson", "negative_binomial", "binomial"])
    p.add_argument("--n-factors", "-q", dest="n_factors", type=int, help="latent factors (default 2)")
    p.add_argument("--n-rand", dest="n_rand", type=int,
                   help="randomisations averaged for copula estimation (default 5)")
    p.add_argument("--seed", type=int, help="seed for residual randomisation (default 0)")
    p.add_argument("--config", help="key=value file; flags override its values")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("power", help="estimate power at one effect size and sample size")
    _power_flags(p)
    p.add_argument("--effect-size", "--rho", dest="effect_size", type=float,
                   help="multiplicative effect rho (odds ratio for binomial)")
    p.add_argument("--N", type=int, help="total sample size")
    p.add_argument("--method", choices=["critical", "nested"],
                   help="critical-value approximation (default) or nested p-values")
    p.set_defaults(func=cmd_power)

    p = sub.add_parser("curve", help="critical-value power over a grid of rho and N")
    _power_flags(p)
    p.add_argument("--rho", required=True, help="comma-separated effect sizes")
    p.add_argument("--N", required=True, help="comma-separated total sample sizes")
    p.set_defaults(func=cmd_curve, method=None)

    p = sub.add_parser("diagnose", help="write mean-variance and residual tables for a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
