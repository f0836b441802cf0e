import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sitepool.data import (
    DataError,
    MicroDataset,
    SchemaError,
    SiteCovariateTable,
    build_interaction_cells,
    fit_standardizer,
    is_standardized,
    load_microdata,
    load_site_covariates,
    load_summaries,
    site_control_means,
    standardize_columns,
    microcredit_site_covariates,
)


def write(tmp_path, name, df):
    path = tmp_path / name
    df.to_csv(path, index=False)
    return path


def test_minimal_microdata(tmp_path):
    df = pd.DataFrame({"site": [1, 1, 1, 2, 2, 2], "treatment": [0, 1, 1, 0, 1, 0],
                       "profit": [1.0, 2.0, 3.0, 0.5, 1.5, 0.7]})
    d = load_microdata(write(tmp_path, "m.csv", df), "profit")
    assert d.K == 2 and d.n_rows == 6 and d.n_dropped == 0
    assert d.site_counts().tolist() == [[1, 2], [2, 1]]


def test_missing_control_arm_names_site(tmp_path):
    df = pd.DataFrame({"site": [1, 1, 2, 2, 3, 3], "treatment": [0, 1, 0, 1, 1, 1],
                       "y": [1.0, 2, 3, 4, 5, 6]})
    with pytest.raises(DataError, match="site 3 lacks control arm"):
        load_microdata(write(tmp_path, "m.csv", df), "y")


def test_non_binary_treatment_and_missing_column(tmp_path):
    df = pd.DataFrame({"site": [1, 1, 2, 2], "treatment": [0, 2, 0, 1], "y": [1.0, 2, 3, 4]})
    with pytest.raises(DataError, match="binary"):
        load_microdata(write(tmp_path, "m.csv", df), "y")
    with pytest.raises(SchemaError, match="revenue"):
        load_microdata(write(tmp_path, "m.csv", df), "revenue")


def test_missing_outcomes_dropped_and_counted(tmp_path):
    df = pd.DataFrame({"site": [1, 1, 1, 2, 2], "treatment": [0, 1, 1, 0, 1],
                       "y": [1.0, np.nan, 2.0, 3.0, 4.0]})
    d = load_microdata(write(tmp_path, "m.csv", df), "y")
    assert d.n_dropped == 1 and d.n_rows == 4


def test_site_order_and_schema_mapping(tmp_path):
    df = pd.DataFrame({"village": ["Mongolia", "Bosnia", "Mongolia", "Bosnia"], "T": [0, 0, 1, 1],
                       "y": [1.0, 2.0, 3.0, 4.0]})
    d = load_microdata(write(tmp_path, "m.csv", df), "y", schema={"village": "site", "T": "treatment"})
    assert d.sites == ("Bosnia", "Mongolia")
    assert d.site.tolist() == [1, 0, 1, 0]
    df = pd.DataFrame({"site": [10, 2, 10, 2], "treatment": [0, 0, 1, 1], "y": [1.0, 2, 3, 4]})
    assert load_microdata(write(tmp_path, "n.csv", df), "y").sites == ("2", "10")


def test_table1_site_roster():
    t = microcredit_site_covariates()
    assert len(t.sites) == 7 and t.names[2] == "apr"
    assert sorted(t.sites)[0] == "Bosnia"


def test_microdata_round_trip(tmp_path, small_micro):
    path = tmp_path / "m.csv"
    small_micro.to_csv(path)
    back = load_microdata(path, "y", covariates=["x1"])
    assert back.sites == small_micro.sites
    assert np.array_equal(back.outcome, small_micro.outcome)
    assert np.array_equal(back.site, small_micro.site)
    assert np.array_equal(back.covariates["x1"], small_micro.covariates["x1"])


def test_summaries(tmp_path):
    d = load_summaries(write(tmp_path, "s.csv", pd.DataFrame({"site": ["a", "b"], "tau_hat": [1.0, 3.0],
                                                               "se_tau": [1.0, 1.0]})))
    assert d.K == 2 and not d.has_mu
    full = pd.DataFrame({"site": ["a", "b"], "tau_hat": [1.0, 3.0], "se_tau": [1.0, 1.0],
                         "mu_hat": [0.0, 1.0], "se_mu": [1.0, 2.0]})
    assert load_summaries(write(tmp_path, "f.csv", full)).has_mu
    with pytest.raises(DataError):
        load_summaries(write(tmp_path, "z.csv", full.assign(se_tau=[0.0, 1.0])))
    with pytest.raises(DataError):
        load_summaries(write(tmp_path, "p.csv", full.drop(columns="se_mu")))
    with pytest.raises(FileNotFoundError):
        load_summaries(tmp_path / "nope.csv")


def test_cells_single_covariate(small_micro):
    cells = build_interaction_cells(small_micro, ["x1"])
    assert cells.n_cells == 2
    assert cells.cell_label(0) == "x1=0" and cells.cell_label(1) == "x1=1"
    assert np.array_equal(cells.cell, small_micro.covariates["x1"])
    assert cells.counts.sum() == small_micro.n_rows


def test_cells_zero_covariates(small_micro):
    cells = build_interaction_cells(small_micro, [])
    assert cells.n_cells == 1 and np.all(cells.cell == 0) and cells.cell_label(0) == "all"


def test_cells_two_covariates_partition():
    d = MicroDataset(("1", "2"), np.array([0, 0, 0, 0, 1, 1, 1, 1]), np.array([0, 1, 0, 1, 0, 1, 0, 1]),
                     np.arange(8.0), {"a": np.array([0, 1, 0, 1, 0, 0, 1, 1]),
                                      "b": np.array([0, 0, 1, 1, 0, 0, 1, 1])})
    with pytest.warns(UserWarning):
        cells = build_interaction_cells(d, ["a", "b"])
    M = cells.membership()
    assert M.shape == (8, 4) and np.all(M.sum(axis=1) == 1)
    assert cells.cell[:4].tolist() == [0, 1, 2, 3]


def test_cells_guard_and_constant_warning(small_micro):
    many = {f"c{i}": small_micro.covariates["x1"] for i in range(5)}
    d = MicroDataset(small_micro.sites, small_micro.site, small_micro.treatment, small_micro.outcome, many)
    with pytest.raises(DataError, match="limit"):
        build_interaction_cells(d, list(many))
    const = MicroDataset(small_micro.sites, small_micro.site, small_micro.treatment, small_micro.outcome,
                         {"pb": (small_micro.site > 0).astype(int)})
    with pytest.warns(UserWarning) as record:
        cells = build_interaction_cells(const, ["pb"])
    assert any("constant" in str(w.message) for w in record)
    assert any("constant in site 1" in w for w in cells.warnings)


def test_standardize_two_points():
    t = SiteCovariateTable(("a", "b"), ("x",), np.array([[1.0], [-1.0]]))
    z, _ = standardize_columns(t)
    assert z.values[:, 0] == pytest.approx([0.7071067811865476, -0.7071067811865476])


def test_standardize_table1_apr():
    apr = np.array([100, 120, 22, 24, 13.5, 63, 12])
    mean = sum(apr) / 7
    sd = (sum((a - mean) ** 2 for a in apr) / 6) ** 0.5
    t = microcredit_site_covariates()
    z, std = standardize_columns(t)
    col = z.column("apr")
    assert col == pytest.approx((apr - mean) / sd, rel=1e-12)
    assert col[0] > 0 and np.argmin(col) == 6


def test_standardize_rejects_constant_column():
    t = SiteCovariateTable(("a", "b", "c"), ("x", "k"), np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]))
    with pytest.raises(DataError, match="k"):
        standardize_columns(t)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (6, 2), elements=st.floats(-1e3, 1e3)))
def test_standardize_properties(values):
    spread = values.std(axis=0)
    if np.any(spread < 1e-3 * np.maximum(1.0, np.abs(values).max(axis=0))):
        return
    std = fit_standardizer(values, ["a", "b"])
    z = std.transform(values)
    assert np.all(np.abs(z.mean(axis=0)) < 1e-10)
    assert np.all(np.abs(z.std(axis=0, ddof=1) - 1) < 1e-10)
    assert np.allclose(std.inverse(z), values, rtol=1e-10, atol=1e-10 * np.abs(values).max())
    again = fit_standardizer(z, ["a", "b"]).transform(z)
    assert np.allclose(again, z, atol=1e-10)
    assert is_standardized(z)


def test_site_covariates_loading(tmp_path):
    df = pd.DataFrame({"site": ["b", "a"], "x": [1.0, 2.0], "w": [3.0, 4.0]})
    t = load_site_covariates(write(tmp_path, "c.csv", df))
    assert t.sites == ("a", "b") and t.names == ("x", "w")
    assert t.aligned_to(["b", "a"]).column("x").tolist() == [1.0, 2.0]
    with pytest.raises(DataError, match="missing"):
        t.aligned_to(["a", "c"])
    assert load_site_covariates(write(tmp_path, "c.csv", df), ["w"]).names == ("w",)


def test_control_means(tiny_micro):
    assert site_control_means(tiny_micro).tolist() == [1.0, 0.25]


def test_microdata_invariants():
    with pytest.raises(DataError, match="at least 2 sites"):
        MicroDataset(("1",), np.zeros(2, int), np.array([0, 1]), np.ones(2))
    with pytest.raises(DataError, match="missing"):
        MicroDataset(("1", "2"), np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]), np.array([1, np.nan, 1, 1]))
