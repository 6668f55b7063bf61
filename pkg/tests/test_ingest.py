import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mvpower.exceptions import DimensionError, ParseError, ValidationError
from mvpower.ingest import (
    AbundanceMatrix, Categorical, DesignFrame, Numeric, RunConfig, read_config_file,
    read_counts, read_design, resolve_workers, run_config_from_mapping, write_counts,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_read_counts_basic(tmp_path):
    f = write(tmp_path / "c.csv", "sample,a,b\ns1,0,3\ns2,5,1\n")
    Y = read_counts(f)
    assert Y.taxon_names == ("a", "b")
    assert Y.sample_ids == ("s1", "s2")
    np.testing.assert_array_equal(Y.counts, [[0, 3], [5, 1]])


@pytest.mark.parametrize("cell, exc, needle", [
    ("-1", ValidationError, "row 3"),
    ("2.5", ValidationError, "'b'"),
    ("x", ParseError, "column 'b'"),
    ("", ParseError, "row 3"),
])
def test_bad_cells_name_their_location(tmp_path, cell, exc, needle):
    f = write(tmp_path / "c.csv", f"sample,a,b\ns1,0,3\ns2,5,{cell}\n")
    with pytest.raises(exc, match=needle):
        read_counts(f)


def test_ragged_row(tmp_path):
    f = write(tmp_path / "c.csv", "sample,a,b\ns1,0\ns2,1,1\n")
    with pytest.raises(ParseError, match="row 2"):
        read_counts(f)


def test_abundance_invariants():
    with pytest.raises(ValidationError):
        AbundanceMatrix.from_array([[1, 2]])
    with pytest.raises(ValidationError, match="duplicate"):
        AbundanceMatrix.from_array([[1, 2], [3, 4]], taxon_names=["a", "a"])
    with pytest.raises(ValidationError):
        AbundanceMatrix.from_array([[1.0, np.nan], [3, 4]])


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.int64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=2, max_side=6),
                  elements=st.integers(0, 10**6)))
def test_counts_round_trip(tmp_path_factory, arr):
    Y = AbundanceMatrix.from_array(arr)
    path = tmp_path_factory.mktemp("rt") / "c.csv"
    write_counts(Y, path)
    back = read_counts(path)
    np.testing.assert_array_equal(back.counts, Y.counts)
    assert back.taxon_names == Y.taxon_names and back.sample_ids == Y.sample_ids


def test_read_design_types_and_baseline(tmp_path):
    f = write(tmp_path / "d.csv",
              "sample,Site.Type,depth,ignored\ns1,control,1.5,x\ns2,restored,2.0,y\ns3,reference,2.0,z\n")
    D = read_design(f, {"Site.Type": ["control", "restored", "reference"], "depth": "numeric"})
    assert isinstance(D["Site.Type"], Categorical) and D["Site.Type"].baseline == "control"
    assert isinstance(D["depth"], Numeric)
    np.testing.assert_array_equal(D["depth"].values, [1.5, 2.0, 2.0])
    assert "ignored" not in D.columns


def test_read_design_level_order_is_as_declared(tmp_path):
    f = write(tmp_path / "d.csv", "sample,g\ns1,b\ns2,a\ns3,b\n")
    D1 = read_design(f, {"g": ["a", "b"]})
    D2 = read_design(f, {"g": ["b", "a"]})
    assert D1["g"].baseline == "a" and D2["g"].baseline == "b"
    assert D1["g"].values == D2["g"].values
    np.testing.assert_array_equal(D1["g"].codes(), 1 - D2["g"].codes())


def test_read_design_errors(tmp_path):
    f = write(tmp_path / "d.csv", "sample,g\n" + "".join(f"s{i},a\n" for i in range(9)))
    with pytest.raises(DimensionError):
        read_design(f, {"g": ["a"]}, n_rows=21)
    with pytest.raises(ValidationError, match="unknown level"):
        read_design(f, {"g": ["b"]})
    with pytest.raises(ValidationError, match="not in design header"):
        read_design(f, {"h": "numeric"})


def test_design_take_and_dict_round_trip():
    D = DesignFrame({"g": Categorical(("a", "b"), ("a", "b", "b")), "x": Numeric([1.0, 2.0, 3.0])})
    E = D.take([2, 0])
    assert E["g"].values == ("b", "a")
    np.testing.assert_array_equal(E["x"].values, [3.0, 1.0])
    F = DesignFrame.from_dict(D.to_dict())
    assert F.sample_ids == D.sample_ids and F["g"] == D["g"]


def test_run_config(tmp_path):
    f = write(tmp_path / "run.cfg", "# comment\nfamily = poisson\nn_factors=1\nalpha = 0.1 # inline\n")
    cfg = run_config_from_mapping(read_config_file(f))
    assert (cfg.family, cfg.n_factors, cfg.alpha) == ("poisson", 1, 0.1)
    with pytest.raises(ValidationError):
        RunConfig(alpha=1.0)
    with pytest.raises(ValidationError):
        RunConfig(family="gaussian")
    with pytest.raises(ValidationError):
        RunConfig(n_factors=3).check_taxa(3)
    with pytest.raises(ParseError):
        run_config_from_mapping({"n_power": "many"})
    assert resolve_workers("auto") >= 1 and resolve_workers(3) == 3
