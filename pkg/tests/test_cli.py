import json

import numpy as np
import pandas as pd
import pytest

from mvpower.cli import build_parser, main, verify_manifest
from mvpower.ingest import write_counts
from mvpower.power import curve_seed
from mvpower.synthetic import make_pilot

LEVELS = "Site.Type=control,restored,reference"


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("inputs")
    pilot = make_pilot(p=6, n_per_group=10, means=np.geomspace(0.8, 12.0, 6), seed=4)
    write_counts(pilot.counts, d / "counts.csv")
    with open(d / "design.csv", "w", encoding="utf-8") as fh:
        fh.write("sample,Site.Type,depth\n")
        for sid, lv in zip(pilot.design.sample_ids, pilot.design["Site.Type"].values):
            fh.write(f"{sid},{lv},1.0\n")
    (d / "inc.txt").write_text("taxon1\ntaxon2\n", encoding="utf-8")
    (d / "dec.txt").write_text("taxon3\n", encoding="utf-8")
    return d


def fit_args(inputs, out, *extra):
    return ["fit", "--counts", str(inputs / "counts.csv"), "--design", str(inputs / "design.csv"),
            "--categorical", LEVELS, "-q", "1", "--seed", "3", "--out", str(out), *extra]


@pytest.fixture(scope="module")
def model_dir(inputs, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert main(fit_args(inputs, out)) == 0
    return out


def test_fit_outputs(model_dir):
    names = sorted(p.name for p in model_dir.iterdir())
    assert names == ["diagnostics_cells.csv", "diagnostics_taxa.csv", "manifest.json", "model.json"]
    model = json.loads((model_dir / "model.json").read_text())
    assert model["q"] == 1 and np.array(model["loadings"]).shape == (6, 1)
    taxa = pd.read_csv(model_dir / "diagnostics_taxa.csv")
    assert list(taxa.columns) == ["taxon", "mean", "variance"]
    cells = pd.read_csv(model_dir / "diagnostics_cells.csv")
    assert list(cells.columns) == ["sample", "taxon", "eta", "residual"] and len(cells) == 180
    manifest = json.loads((model_dir / "manifest.json").read_text())
    assert manifest["command"] == "fit" and manifest["seed"] == 3
    assert set(manifest["inputs"]) == {"counts", "design"}
    assert all(verify_manifest(model_dir).values())


def test_fit_is_reproducible(inputs, model_dir, tmp_path):
    assert main(fit_args(inputs, tmp_path)) == 0
    assert (tmp_path / "model.json").read_bytes() == (model_dir / "model.json").read_bytes()


def test_manifest_detects_tampering(inputs, tmp_path):
    import shutil
    work = tmp_path / "in"
    shutil.copytree(inputs, work)
    out = tmp_path / "out"
    assert main(fit_args(work, out)) == 0
    text = (work / "counts.csv").read_text()
    (work / "counts.csv").write_text(text.replace(",0,", ",1,", 1))
    status = verify_manifest(out)
    assert status["counts"] is False and status["design"] is True


def test_fit_errors(inputs, tmp_path, capsys):
    assert main(fit_args(inputs, tmp_path / "a", "-q", "6")) == 2
    assert "validation error" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("sample,a,b\ns1,1,x\ns2,1,1\n")
    args = fit_args(inputs, tmp_path / "b")
    args[2] = str(bad)
    assert main(args) == 2
    err = capsys.readouterr().err
    assert "parse error" in err and "row 2" in err
    args[2] = str(tmp_path / "missing.csv")
    assert main(args) == 4
    assert "I/O error" in capsys.readouterr().err


def test_config_file_with_flag_override(inputs, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("family = poisson\nn_factors = 2\nseed = 3\n")
    out = tmp_path / "out"
    assert main(fit_args(inputs, out, "--config", str(cfg), "-q", "1")) == 0
    model = json.loads((out / "model.json").read_text())
    assert model["family"] == "poisson" and model["q"] == 1


def power_args(model_dir, inputs, out, *extra):
    return ["power", "--model", str(model_dir / "model.json"), "--term", "Site.Type",
            "--increasers", str(inputs / "inc.txt"), "--decreasers", str(inputs / "dec.txt"),
            "--nsim", "8", "--nresamp", "8", "--seed", "2", "--out", str(out), *extra]


def test_power_command(model_dir, inputs, tmp_path, capsys):
    out = tmp_path / "p"
    assert main(power_args(model_dir, inputs, out, "--effect-size", "1.5", "--N", "30")) == 0
    printed = capsys.readouterr().out
    assert "Power" in printed and "Comp time" in printed
    res = json.loads((out / "result.json").read_text())
    assert res["fit_count"] == 32 and res["metadata"]["N"] == 30
    assert f"{res['power']:.5f}" in printed
    for name in ["alt_stats.csv", "null_stats.csv", "coefficients.csv", "manifest.json"]:
        assert (out / name).exists()
    assert all(verify_manifest(out).values())


def test_power_nested_method(model_dir, inputs, tmp_path):
    out = tmp_path / "n"
    args = power_args(model_dir, inputs, out, "--rho", "1.5", "--N", "30", "--method", "nested",
                      "--nsim", "3", "--nresamp", "4")
    assert main(args) == 0
    res = json.loads((out / "result.json").read_text())
    assert res["method"] == "nested" and res["fit_count"] == 2 * 3 * 5
    assert (out / "p_values.csv").exists()


def test_power_unknown_term(model_dir, inputs, tmp_path, capsys):
    args = power_args(model_dir, inputs, tmp_path, "--effect-size", "1.5", "--N", "30")
    args[args.index("Site.Type")] = "Depth"
    assert main(args) == 2
    assert "Site.Type" in capsys.readouterr().err


def test_curve_command(model_dir, inputs, tmp_path):
    out = tmp_path / "c"
    args = ["curve", "--model", str(model_dir / "model.json"), "--term", "Site.Type",
            "--increasers", str(inputs / "inc.txt"), "--rho", "1.2,1.5", "--N", "2,30,45",
            "--nsim", "5", "--nresamp", "5", "--seed", "9", "--out", str(out)]
    assert main(args) == 0
    table = pd.read_csv(out / "curve.csv", keep_default_na=False)
    assert len(table) == 6
    assert list(table.columns[:7]) == ["rho", "N", "power", "mc_se", "crit_value", "fits", "seconds"]
    assert table.error[0] != "" and (table.error[[1, 2, 4, 5]] == "").all()
    # grid point 4 (rho 1.5, N 30) against a direct power run with its derived seed
    single = tmp_path / "single"
    direct = ["power", "--model", str(model_dir / "model.json"), "--term", "Site.Type",
              "--increasers", str(inputs / "inc.txt"), "--effect-size", "1.5", "--N", "30",
              "--nsim", "5", "--nresamp", "5", "--seed", str(curve_seed(9, 4)), "--out", str(single)]
    assert main(direct) == 0
    res = json.loads((single / "result.json").read_text())
    assert float(table.power[4]) == res["power"]
    assert float(table.crit_value[4]) == res["critical_value"]


def test_curve_all_points_failing(model_dir, tmp_path):
    args = ["curve", "--model", str(model_dir / "model.json"), "--term", "Site.Type", "--rho", "1.5",
            "--N", "2", "--nsim", "2", "--nresamp", "2", "--out", str(tmp_path)]
    assert main(args) == 2


def test_diagnose_command(model_dir, tmp_path):
    assert main(["diagnose", "--model", str(model_dir / "model.json"), "--seed", "3",
                 "--out", str(tmp_path)]) == 0
    a = (tmp_path / "diagnostics_cells.csv").read_bytes()
    assert a == (model_dir / "diagnostics_cells.csv").read_bytes()


def test_help_documents_flags():
    text = build_parser()._subparsers._group_actions[0].choices["power"].format_help()
    for flag in ["--seed", "--workers", "--method", "--alpha", "--nsim", "--nresamp", "--config"]:
        assert flag in text
