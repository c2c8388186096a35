"""Transforms, OLS, cross-validation, selection, and the model suite."""

import json
import math

import numpy as np
import pytest
from scipy import stats as sps

from urbanvitality.errors import DataError
from urbanvitality.stats import (
    DesignSpec,
    ModelConfig,
    box_cox,
    box_cox_loglik,
    box_cox_transform,
    build_design,
    ols_fit,
    report_to_dict,
    rfe,
    run_model_suite,
    shuffle_split_cv,
    significance_stars,
    spearman,
    stability_selection,
    write_model_report,
)


# --- Box-Cox ----------------------------------------------------------------

def test_box_cox_lambda_zero_is_log():
    x = np.array([0.5, 1.0, 2.0, 10.0, 123.4])
    assert np.allclose(box_cox_transform(x, 0.0), np.log(x), atol=1e-12)


def test_box_cox_lambda_one_shifts():
    x = np.array([1.0, 2.0, 5.0])
    assert np.allclose(box_cox_transform(x, 1.0), x - 1.0)


def test_box_cox_lambda_two():
    x = np.array([3.0])
    assert box_cox_transform(x, 2.0)[0] == pytest.approx((9.0 - 1.0) / 2.0)


def test_box_cox_rejects_nonpositive():
    with pytest.raises(DataError):
        box_cox_transform(np.array([1.0, 0.0]), 0.5)
    with pytest.raises(DataError):
        box_cox(np.array([1.0, -2.0]))


def test_box_cox_mle_matches_grid_search():
    rng = np.random.default_rng(7)
    x = np.exp(rng.normal(1.0, 0.8, size=400)) + 0.3
    _, lam = box_cox(x)
    grid = np.arange(-5.0, 5.0, 1e-3)
    lls = [box_cox_loglik(x, g) for g in grid]
    best = grid[int(np.argmax(lls))]
    assert lam == pytest.approx(best, abs=2e-3)


def test_box_cox_lognormal_lambda_near_zero():
    rng = np.random.default_rng(13)
    x = np.exp(rng.normal(0.0, 1.0, size=1000))
    _, lam = box_cox(x)
    assert abs(lam) < 0.1


def test_box_cox_normal_offset_lambda_near_one():
    # Moderate offset keeps lambda identifiable; huge offsets flatten the
    # profile likelihood and the estimate drifts regardless of estimator.
    rng = np.random.default_rng(3)
    x = rng.normal(3.0, 1.0, size=1000)
    x = x[x > 0]
    _, lam = box_cox(x)
    assert abs(lam - 1.0) < 0.1


def test_box_cox_mle_matches_scipy():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.normal(5.0, 1.0, size=500)
        x = x[x > 0]
        _, lam = box_cox(x)
        _, lam_scipy = sps.boxcox(x)
        assert lam == pytest.approx(lam_scipy, abs=1e-4)


def test_box_cox_fixed_lambda_respected():
    x = np.array([1.0, 2.0, 3.0])
    y, lam = box_cox(x, lam=0.5)
    assert lam == 0.5
    assert np.allclose(y, (np.sqrt(x) - 1.0) / 0.5)


# --- OLS --------------------------------------------------------------------

def test_significance_stars():
    assert significance_stars(0.0001) == "***"
    assert significance_stars(0.005) == "**"
    assert significance_stars(0.04) == "*"
    assert significance_stars(0.05) == ""
    assert significance_stars(0.9) == ""


def test_ols_recovers_noiseless_coefficients():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 3))
    beta = np.array([1.5, -2.0, 0.25])
    y = 4.0 + X @ beta
    fit = ols_fit(X, y, ["a", "b", "c"])
    assert np.allclose(fit.beta, beta, atol=1e-10)
    assert fit.intercept == pytest.approx(4.0, abs=1e-10)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)


def test_ols_simple_regression_closed_form():
    # Slope and intercept against the textbook formulas.
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    y = np.array([2.1, 3.9, 6.2, 8.1, 9.8, 12.3])
    fit = ols_fit(x[:, None], y, ["x"])
    sxx = ((x - x.mean()) ** 2).sum()
    slope = ((x - x.mean()) * (y - y.mean())).sum() / sxx
    intercept = y.mean() - slope * x.mean()
    assert fit.beta[0] == pytest.approx(slope)
    assert fit.intercept == pytest.approx(intercept)
    resid = y - intercept - slope * x
    sigma2 = (resid ** 2).sum() / (len(x) - 2)
    assert fit.se[0] == pytest.approx(math.sqrt(sigma2 / sxx))
    t = slope / math.sqrt(sigma2 / sxx)
    assert fit.p[0] == pytest.approx(2 * sps.t.sf(abs(t), len(x) - 2))


def test_ols_adjusted_r2():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(40, 2))
    y = X[:, 0] + rng.normal(0, 0.5, size=40)
    fit = ols_fit(X, y, ["a", "b"])
    n, p = 40, 2
    assert fit.adj_r2 == pytest.approx(1 - (1 - fit.r2) * (n - 1) / (n - p - 1))


def test_ols_rejects_collinear_and_names_column():
    rng = np.random.default_rng(5)
    a = rng.normal(size=30)
    X = np.column_stack([a, 2.0 * a])
    with pytest.raises(DataError, match="double_a"):
        ols_fit(X, rng.normal(size=30), ["a", "double_a"])


def test_ols_needs_enough_rows():
    with pytest.raises(DataError, match="n > p"):
        ols_fit(np.ones((3, 3)), np.ones(3), ["a", "b", "c"])


# --- cross-validation -------------------------------------------------------

def test_cv_deterministic_per_seed():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 3))
    y = X[:, 0] + rng.normal(0, 0.4, size=60)
    a = shuffle_split_cv(X, y, splits=50, seed=9)
    b = shuffle_split_cv(X, y, splits=50, seed=9)
    assert np.array_equal(a.scores, b.scores)
    c = shuffle_split_cv(X, y, splits=50, seed=10)
    assert not np.array_equal(a.scores, c.scores)


def test_cv_noiseless_fit_scores_one():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 2))
    y = 1.0 + X @ np.array([2.0, -1.0])
    res = shuffle_split_cv(X, y, splits=25, seed=0)
    assert res.mean_r2 == pytest.approx(1.0, abs=1e-9)


def test_cv_null_features_score_below_zero():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(60, 5))
    y = rng.normal(size=60)  # unrelated response
    res = shuffle_split_cv(X, y, splits=200, seed=0)
    assert res.mean_r2 < 0.0  # out-of-sample penalty for fitting noise


def test_cv_rejects_tiny_samples():
    with pytest.raises(DataError, match="at least 8"):
        shuffle_split_cv(np.ones((5, 1)), np.ones(5), splits=5)


# --- selection --------------------------------------------------------------

def _planted(n=150, p=8, seed=0, strong=(0, 2, 5), noise=0.3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    beta = np.zeros(p)
    for j in strong:
        beta[j] = 1.0
    y = X @ beta + rng.normal(0, noise, size=n)
    return X, y, [f"f{j}" for j in range(p)], [f"f{j}" for j in strong]


def test_stability_selection_recovers_planted_support():
    X, y, names, support = _planted()
    res = stability_selection(X, y, names, subsamples=100, seed=1)
    assert sorted(res.selected) == support
    for name in support:
        assert res.frequencies[name] >= 0.9
    for name in set(names) - set(support):
        assert res.frequencies[name] < 0.6


def test_stability_selection_null_has_no_saturated_frequencies():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(120, 10))
    y = rng.normal(size=120)
    res = stability_selection(X, y, [f"f{j}" for j in range(10)],
                              subsamples=100, seed=3)
    assert res.selected == [] or len(res.selected) <= 2
    assert max(res.frequencies.values()) < 1.0


def test_stability_selection_deterministic():
    X, y, names, _ = _planted(seed=2)
    a = stability_selection(X, y, names, subsamples=60, seed=5)
    b = stability_selection(X, y, names, subsamples=60, seed=5)
    assert a.frequencies == b.frequencies


def test_rfe_keeps_strongest_features():
    X, y, names, support = _planted(noise=0.1)
    kept = rfe(X, y, names, keep_k=3)
    assert sorted(kept) == support


def test_rfe_keep_k_bounds():
    X, y, names, _ = _planted()
    with pytest.raises(DataError, match="exceeds feature count"):
        rfe(X, y, names, keep_k=9)
    assert sorted(rfe(X, y, names, keep_k=8)) == sorted(names)


# --- design matrix ----------------------------------------------------------

def _table(n=40, seed=0):
    rng = np.random.default_rng(seed)
    ids = [f"d{i}" for i in range(n)]
    columns = {
        "activity_density": list(np.exp(rng.normal(-9, 0.5, size=n))),
        "alpha": list(rng.uniform(1.0, 5.0, size=n)),
        "beta": list(rng.normal(0.0, 2.0, size=n)),  # needs shifting
        "gamma": list(rng.uniform(10.0, 20.0, size=n)),
    }
    return ids, columns


def test_build_design_standardizes():
    ids, columns = _table()
    spec = DesignSpec("activity_density", ("alpha", "beta", "gamma"))
    design = build_design(ids, columns, spec)
    assert design.names == ["alpha", "beta", "gamma"]
    assert np.allclose(design.X.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(design.X.std(axis=0), 1.0, atol=1e-12)
    assert design.y.mean() == pytest.approx(0.0, abs=1e-12)
    assert design.y.std() == pytest.approx(1.0, abs=1e-12)
    kind, lam, shift = design.transforms["beta"]
    assert kind == "boxcox"
    assert shift == pytest.approx(1.0 - min(columns["beta"]))


def test_build_design_drops_missing_rows():
    ids, columns = _table()
    columns["alpha"][3] = None
    columns["gamma"][7] = float("nan")
    spec = DesignSpec("activity_density", ("alpha", "gamma"))
    design = build_design(ids, columns, spec)
    assert design.n_dropped_rows == 2
    assert "d3" not in design.ids and "d7" not in design.ids


def test_build_design_rejects_constant_column():
    ids, columns = _table()
    columns["alpha"] = [2.5] * len(ids)
    spec = DesignSpec("activity_density", ("alpha", "gamma"))
    design = build_design(ids, columns, spec)
    assert design.rejected == ["alpha"]
    assert design.names == ["gamma"]


def test_build_design_interactions():
    ids, columns = _table()
    spec = DesignSpec("activity_density", ("alpha", "gamma"),
                      interactions=(("alpha", "gamma"),))
    design = build_design(ids, columns, spec)
    assert design.interaction_names == ["alpha_x_gamma"]
    col = design.column("alpha_x_gamma")
    assert col.mean() == pytest.approx(0.0, abs=1e-12)
    assert col.std() == pytest.approx(1.0, abs=1e-12)
    # the interaction is the re-standardized product of the z-scored factors
    prod = design.column("alpha") * design.column("gamma")
    assert np.allclose(col, (prod - prod.mean()) / prod.std())


def test_build_design_transform_none():
    ids, columns = _table()
    spec = DesignSpec("activity_density", ("gamma",), transform="none")
    design = build_design(ids, columns, spec)
    raw = np.asarray(columns["gamma"])
    assert np.allclose(design.column("gamma"), (raw - raw.mean()) / raw.std())


def test_build_design_requires_rows():
    spec = DesignSpec("activity_density", ("alpha",))
    with pytest.raises(DataError, match="too few complete rows"):
        build_design(["a", "b"], {"activity_density": [1.0, 2.0],
                                  "alpha": [1.0, None]}, spec)


def test_build_design_missing_column():
    spec = DesignSpec("activity_density", ("nope",))
    with pytest.raises(DataError, match="'nope' not found"):
        build_design(["a"], {"activity_density": [1.0]}, spec)


# --- rank correlation -------------------------------------------------------

def test_spearman_matches_scipy():
    rng = np.random.default_rng(21)
    for _ in range(20):
        x = rng.normal(size=30)
        y = x + rng.normal(0, 2.0, size=30)
        assert spearman(x, y) == pytest.approx(sps.spearmanr(x, y).statistic)


def test_spearman_with_ties_matches_scipy():
    x = [1.0, 2.0, 2.0, 3.0, 3.0, 3.0, 4.0]
    y = [1.0, 1.0, 2.0, 2.0, 5.0, 4.0, 4.0]
    assert spearman(x, y) == pytest.approx(sps.spearmanr(x, y).statistic)


def test_spearman_constant_input_is_none():
    assert spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) is None


def test_spearman_perfect_monotone():
    x = [1.0, 2.0, 5.0, 9.0]
    assert spearman(x, [v ** 3 for v in x]) == pytest.approx(1.0)
    assert spearman(x, [-v for v in x]) == pytest.approx(-1.0)


# --- model suite ------------------------------------------------------------

def _suite_table(n=120, seed=11):
    from urbanvitality.metrics import METRIC_NAMES

    rng = np.random.default_rng(seed)
    ids = [f"d{i}" for i in range(n)]
    columns = {}
    for name in METRIC_NAMES:
        columns[name] = list(rng.uniform(0.5, 2.0, size=n))
    signal = (np.asarray(columns["intersection_density"])
              + np.asarray(columns["employment_density"]))
    z = (signal - signal.mean()) / signal.std()
    columns["activity_density"] = list(np.exp(-9.0 + 0.8 * z
                                              + rng.normal(0, 0.2, size=n)))
    return ids, columns


def test_run_model_suite_reports_all_models():
    ids, columns = _suite_table()
    config = ModelConfig(splits=30, stability_subsamples=30)
    reports = run_model_suite(ids, columns, config)
    assert sorted(reports) == ["aged_buildings", "combined", "concentration",
                               "land_use", "small_blocks", "vacuums"]
    for rep in reports.values():
        assert rep.available
    combined = reports["combined"]
    assert set(combined.selected_by) == {"stability", "rfe"}
    picked = [r.feature for r in combined.rows]
    assert "intersection_density" in picked


def test_combined_model_tracks_best_group_model():
    ids, columns = _suite_table()
    config = ModelConfig(splits=20, stability_subsamples=50)
    reports = run_model_suite(ids, columns, config)
    best_group = max(rep.adj_r2 for name, rep in reports.items()
                     if name != "combined")
    # selection can trim features, so allow a small slack below the best
    assert reports["combined"].adj_r2 >= best_group - 0.02


def test_run_model_suite_include_ids_filters_rows():
    ids, columns = _suite_table()
    config = ModelConfig(splits=10, stability_subsamples=10)
    reports = run_model_suite(ids, columns, config, include_ids=ids[:60])
    assert reports["small_blocks"].n == 60


def test_run_model_suite_small_n_reports_unavailable():
    ids, columns = _suite_table(n=5)
    reports = run_model_suite(ids, columns, ModelConfig(splits=10))
    assert not reports["combined"].available
    assert reports["combined"].note


def test_model_report_serialization(tmp_path):
    ids, columns = _suite_table()
    config = ModelConfig(splits=10, stability_subsamples=10)
    reports = run_model_suite(ids, columns, config)
    doc = report_to_dict(reports)
    assert doc["small_blocks"]["features"][0]["feature"] == "mean_block_area"
    json_path = tmp_path / "report.json"
    csv_path = tmp_path / "report.csv"
    write_model_report(reports, json_path, csv_path)
    parsed = json.loads(json_path.read_text())
    assert parsed.keys() == doc.keys()
    header = csv_path.read_text().splitlines()[0]
    assert header.startswith("model,feature,beta")
