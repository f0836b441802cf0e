"""Regenerate the synthetic example datasets shipped in sitepool/example_data."""

from pathlib import Path

import numpy as np
import pandas as pd

from sitepool.data import SummaryDataset
from sitepool.oracle import SyntheticTruth, simulate_hierarchical_data

OUT = Path(__file__).resolve().parents[1] / "src" / "sitepool" / "example_data"


def main():
    SummaryDataset(("1", "2", "3"), np.array([4.0, 10.0, 16.0]), np.full(3, 2.0)).to_csv(
        OUT / "toy_summary.csv")

    V = np.array([[4.0, 1.2], [1.2, 9.0]])
    se = np.linspace(1.5, 4.0, 7)
    summ = simulate_hierarchical_data(
        SyntheticTruth(7, 0, mu=20.0, tau=5.0, V=V, se=se, with_mu=True, seed=11)).data
    summ.to_csv(OUT / "seven_site_summary.csv")

    rng = np.random.default_rng(5)
    X = rng.normal(size=(7, 3))
    covs = pd.DataFrame(X, columns=["apr", "saturation", "loan_size"])
    covs.insert(0, "site", [str(k + 1) for k in range(7)])
    covs.to_csv(OUT / "site_covariates.csv", index=False, float_format="%.6f")

    # profit carries a subgroup contrast on x1; revenue depends on apr
    profit = simulate_hierarchical_data(SyntheticTruth(
        7, 300, mu=[50.0, 50.0], tau=[3.0, 13.0], V=np.array([[25.0, 3.0], [3.0, 4.0]]),
        sigma_y=np.linspace(15, 30, 7), seed=21)).data
    z = (X - X.mean(axis=0)) / X.std(axis=0, ddof=1)
    revenue = simulate_hierarchical_data(SyntheticTruth(
        7, 300, mu=200.0, tau=10.0, V=np.array([[100.0, 0.0], [0.0, 1.0]]),
        sigma_y=30.0, site_covariates=z, beta_tau=[25.0, 0.0, 0.0], seed=22)).data
    df = profit.to_frame().rename(columns={"y": "profit"})
    df["revenue"] = revenue.outcome
    df.to_csv(OUT / "seven_site_microdata.csv", index=False, float_format="%.4f")


if __name__ == "__main__":
    main()
