"""Smoke test for the Python extension: python python/smoke_test.py"""

import math
import os
import tempfile

import orthoestim


def main():
    assert abs(orthoestim.bic(-1278.896, 26, 1046) - 2738.563) < 0.01
    assert orthoestim.copula_cdf("product", 0.0, 0.3, 0.5) == 0.15
    assert orthoestim.discretize_wait([0.0, 5.0, 20.0, 20.5]) == [1, 2, 2, 3]
    assert orthoestim.jenks_breaks([1.0, 1.1, 1.2, 9.0, 9.5], 2) == [1.2]
    folds = orthoestim.kfold_split(10, 3, 1)
    assert sorted(set(folds)) == [0, 1, 2]
    assert folds == orthoestim.kfold_split(10, 3, 1)

    cols, truth = orthoestim.simulate("dml-strong-confounding", 2000, seed=3)
    assert truth["format"] == "dgp/1" and truth["kind"] == "dml"
    w = [list(r) for r in zip(cols["w1"], cols["w2"], cols["w3"], cols["w4"])]
    report = orthoestim.fit_dml(
        cols["wait_time"], cols["density_low"], w, k_folds=3, seed=3, outcome_trees=30, policy_trees=30
    )
    est = report["estimate"]
    assert report["format"] == "dml/1"
    assert est["ci_low"] < est["alpha"] < est["ci_high"]
    assert abs(est["alpha"] - truth["alpha_true"]) < 5 * est["std_error"]

    cols, truth = orthoestim.simulate("copula-frank", 3000, seed=5)
    x = [list(r) for r in zip(cols["x1"], cols["x2"])]
    z = [list(r) for r in zip(cols["density_low"], cols["z1"])]
    fit = orthoestim.fit_copula(cols["stress_high"], cols["wait_cat"], x, z, family="frank")
    assert fit["format"] == "jointfit/1"
    theta = fit["fits"][0]["fit"]["theta"]
    assert math.isfinite(theta) and theta < 0

    with tempfile.TemporaryDirectory() as d:
        out = os.path.join(d, "folds")
        assert orthoestim.run_cli(["kfold", "--n", "20", "--k", "4", "--out", out]) == 0
        with open(os.path.join(out, "folds.csv")) as f:
            assert f.readline().strip() == "row_index,fold"
        assert orthoestim.run_cli(["kfold", "--n", "3", "--k", "1", "--out", out]) == 2

    try:
        orthoestim.simulate("no-such-preset", 10)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
