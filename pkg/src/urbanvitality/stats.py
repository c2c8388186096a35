"""Transformations, OLS estimation, cross-validation, and feature selection.

The modelling pipeline: the response is the natural log of activity
density, predictors are shifted positive, power-transformed, and z-scored;
five per-condition OLS models plus a combined model (features picked by
stability selection and recursive feature elimination) are fitted, each
with shuffle-split cross-validation. Every stochastic step derives its
per-task RNG from a single master seed by index.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import lars_path

from .errors import DataError
from .metrics import CONDITION_GROUPS, METRIC_NAMES

DEFAULT_INTERACTIONS: tuple[tuple[str, str], ...] = (
    ("third_places", "closeness_highways"),
    ("closeness_small_parks", "closeness_highways"),
)


# --- Box-Cox ----------------------------------------------------------------

def box_cox_transform(x: np.ndarray, lam: float) -> np.ndarray:
    """(x^λ − 1)/λ, with the natural log as the λ=0 limit."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DataError("Box-Cox input must be strictly positive")
    if lam == 0.0:
        return np.log(x)
    return (np.power(x, lam) - 1.0) / lam


def box_cox_loglik(x: np.ndarray, lam: float) -> float:
    """Profile log-likelihood of the power-transform parameter."""
    x = np.asarray(x, dtype=float)
    y = box_cox_transform(x, lam)
    n = len(x)
    var = y.var()
    if var <= 0.0:
        return -np.inf
    return -n / 2.0 * math.log(var) + (lam - 1.0) * float(np.log(x).sum())

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_section_max(f, lo: float, hi: float, tol: float) -> float:
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def box_cox(x: np.ndarray, lam: float | None = None,
            bounds: tuple[float, float] = (-5.0, 5.0),
            tol: float = 1e-6) -> tuple[np.ndarray, float]:
    """Transform ``x``, fitting λ by maximum likelihood unless given."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DataError("Box-Cox input must be strictly positive")
    if lam is None:
        lam = _golden_section_max(lambda l: box_cox_loglik(x, l),
                                  bounds[0], bounds[1], tol)
    return box_cox_transform(x, lam), lam


# --- OLS --------------------------------------------------------------------

def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass
class OLSFit:
    names: list[str]
    beta: np.ndarray  # per-feature coefficients (intercept excluded)
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    stars: list[str]
    intercept: float
    r2: float
    adj_r2: float
    n: int
    residuals: np.ndarray


def _check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    _, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    tol = max(X.shape) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
    bad = [i for i, d in enumerate(diag) if d <= tol]
    if bad:
        # first column is the intercept
        cols = [names[i - 1] if i > 0 else "<intercept>" for i in bad]
        raise DataError(f"design matrix is rank deficient; collinear columns: {cols}")


def ols_fit(X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> OLSFit:
    """Least-squares fit with an intercept, classic standard errors, and
    two-sided t-test p-values."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n <= p + 1:
        raise DataError(f"need n > p + 1 observations (n={n}, p={p})")
    Xd = np.column_stack([np.ones(n), X])
    _check_rank(Xd, list(names))
    coef, _, _, _ = np.linalg.lstsq(Xd, y, rcond=None)
    fitted = Xd @ coef
    resid = y - fitted
    rss = float(resid @ resid)
    tss = float(((y - y.mean()) ** 2).sum())
    df = n - p - 1
    sigma2 = rss / df
    cov = sigma2 * np.linalg.inv(Xd.T @ Xd)
    se = np.sqrt(np.diag(cov))
    tvals = np.divide(coef, se, out=np.zeros_like(coef), where=se > 0)
    pvals = 2.0 * sps.t.sf(np.abs(tvals), df)
    r2 = 1.0 - rss / tss if tss > 0 else 0.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / df
    return OLSFit(
        names=list(names),
        beta=coef[1:], se=se[1:], t=tvals[1:], p=pvals[1:],
        stars=[significance_stars(v) for v in pvals[1:]],
        intercept=float(coef[0]), r2=r2, adj_r2=adj, n=n, residuals=resid,
    )


# --- cross-validation -------------------------------------------------------

@dataclass
class CVResult:
    mean_r2: float
    sd_r2: float
    scores: np.ndarray
    n_skipped: int


def shuffle_split_cv(X: np.ndarray, y: np.ndarray, splits: int = 1000,
                     train_frac: float = 0.75, seed: int = 0) -> CVResult:
    """Repeated random train/test partitions; test R² per split.

    Split i uses an RNG derived from (seed, i), so the per-split trace is
    reproducible and independent of execution order.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < 8:
        raise DataError(f"need at least 8 observations for CV (n={n})")
    n_train = int(n * train_frac)
    scores = []
    skipped = 0
    for i in range(splits):
        rng = np.random.default_rng([seed, i])
        perm = rng.permutation(n)
        tr, te = perm[:n_train], perm[n_train:]
        y_te = y[te]
        tss = float(((y_te - y_te.mean()) ** 2).sum())
        if tss <= 0.0:
            skipped += 1
            continue
        Xd = np.column_stack([np.ones(len(tr)), X[tr]])
        coef, _, _, _ = np.linalg.lstsq(Xd, y[tr], rcond=None)
        pred = np.column_stack([np.ones(len(te)), X[te]]) @ coef
        rss = float(((y_te - pred) ** 2).sum())
        scores.append(1.0 - rss / tss)
    arr = np.asarray(scores)
    return CVResult(float(arr.mean()) if arr.size else float("nan"),
                    float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
                    arr, skipped)


# --- feature selection ------------------------------------------------------

@dataclass
class StabilityResult:
    frequencies: dict[str, float]
    selected: list[str]
    threshold: float


def stability_selection(X: np.ndarray, y: np.ndarray, names: Sequence[str],
                        subsamples: int = 200, threshold: float = 0.6,
                        seed: int = 0,
                        max_active: int | None = None) -> StabilityResult:
    """Selection frequency of each feature over L1 paths on half-subsamples.

    Each subsample fits a lasso (LARS) path capped at ``max_active`` active
    features; a feature counts as selected in that subsample if it is ever
    active. Capping the path keeps the per-fit selection sparse, which is
    what bounds the false-selection rate; without it every feature would
    eventually enter the path and the frequencies would saturate.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if max_active is None:
        max_active = max(2, int(round(math.sqrt(0.8 * p))))
    hits = np.zeros(p)
    for b in range(subsamples):
        rng = np.random.default_rng([seed, b])
        idx = rng.permutation(n)[: n // 2]
        Xs = X[idx]
        ys = y[idx]
        mu = Xs.mean(axis=0)
        sd = Xs.std(axis=0)
        keep = sd > 0
        Xz = (Xs[:, keep] - mu[keep]) / sd[keep]
        with warnings.catch_warnings():
            # small half-subsamples can degenerate the active set; the
            # truncated path is still a valid selection
            warnings.simplefilter("ignore", ConvergenceWarning)
            _, _, coefs = lars_path(Xz, ys - ys.mean(), method="lasso",
                                    max_iter=max_active)
        active = np.any(coefs != 0.0, axis=1)
        hits[np.flatnonzero(keep)[active]] += 1
    freq = hits / subsamples
    frequencies = {name: float(f) for name, f in zip(names, freq)}
    selected = [name for name, f in frequencies.items() if f >= threshold]
    return StabilityResult(frequencies, selected, threshold)


def rfe(X: np.ndarray, y: np.ndarray, names: Sequence[str],
        keep_k: int) -> list[str]:
    """Recursive feature elimination down to ``keep_k`` features.

    Drops the feature with the smallest absolute coefficient each round;
    ties resolve to the lexicographically smallest name. A column that
    breaks the design rank is eliminated first.
    """
    names = list(names)
    if keep_k > len(names):
        raise DataError(f"keep_k={keep_k} exceeds feature count {len(names)}")
    X = np.asarray(X, dtype=float)
    cur = list(range(X.shape[1]))
    while len(cur) > keep_k:
        Xd = np.column_stack([np.ones(len(X)), X[:, cur]])
        _, r = np.linalg.qr(Xd)
        diag = np.abs(np.diag(r))
        tol = max(Xd.shape) * np.finfo(float).eps * diag.max()
        dependent = [k - 1 for k, d in enumerate(diag) if d <= tol and k > 0]
        if dependent:
            drop_pos = dependent[0]
        else:
            coef, _, _, _ = np.linalg.lstsq(Xd, y, rcond=None)
            beta = np.abs(coef[1:])
            smallest = beta.min()
            tied = [k for k, v in enumerate(beta) if v == smallest]
            drop_pos = min(tied, key=lambda k: names[cur[k]])
        cur.pop(drop_pos)
    return [names[i] for i in cur]


# --- design matrix ----------------------------------------------------------

@dataclass(frozen=True)
class DesignSpec:
    response: str
    predictors: tuple[str, ...]
    interactions: tuple[tuple[str, str], ...] = ()
    transform: str = "boxcox"  # "boxcox" or "none"
    log_response: bool = True


@dataclass
class DesignMatrix:
    ids: list[str]
    names: list[str]
    X: np.ndarray
    y: np.ndarray
    transforms: dict[str, tuple]  # name -> (kind, lambda-or-None, shift)
    standardization: dict[str, tuple[float, float]]  # name -> (mean, sd)
    y_standardization: tuple[float, float]
    interaction_names: list[str]
    rejected: list[str]
    n_dropped_rows: int

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.names.index(name)]

    def subset(self, names: Sequence[str]) -> np.ndarray:
        cols = [self.names.index(n) for n in names]
        return self.X[:, cols]


def build_design(ids: Sequence[str],
                 columns: Mapping[str, Sequence[float | None]],
                 spec: DesignSpec) -> DesignMatrix:
    """Assemble the regression design from raw per-district columns.

    Rows with any missing selected value (or a non-positive response when
    the response is log-transformed) are dropped. Predictors are shifted
    positive if needed, power-transformed, and z-scored; interaction columns
    are products of z-scored factors, re-z-scored. Constant columns are
    rejected rather than standardized.
    """
    wanted = [spec.response, *spec.predictors]
    for name in wanted:
        if name not in columns:
            raise DataError(f"column {name!r} not found in the feature table")

    keep_rows = []
    for i in range(len(ids)):
        vals = [columns[name][i] for name in wanted]
        if any(v is None or not math.isfinite(v) for v in vals):
            continue
        if spec.log_response and columns[spec.response][i] <= 0:
            continue
        keep_rows.append(i)
    n_dropped = len(ids) - len(keep_rows)
    if len(keep_rows) < 3:
        raise DataError(f"too few complete rows ({len(keep_rows)}) to build a design")

    kept_ids = [ids[i] for i in keep_rows]
    resp = np.asarray([columns[spec.response][i] for i in keep_rows], dtype=float)
    y = np.log(resp) if spec.log_response else resp
    y_mu, y_sd = float(y.mean()), float(y.std())
    if y_sd <= 0:
        raise DataError("response is constant")
    y = (y - y_mu) / y_sd

    names: list[str] = []
    cols: list[np.ndarray] = []
    transforms: dict[str, tuple] = {}
    standardization: dict[str, tuple[float, float]] = {}
    rejected: list[str] = []
    for name in spec.predictors:
        x = np.asarray([columns[name][i] for i in keep_rows], dtype=float)
        if x.std() == 0.0:
            rejected.append(name)
            continue
        shift = 1.0 - x.min() if x.min() <= 0.0 else 0.0
        x = x + shift
        if spec.transform == "boxcox":
            x, lam = box_cox(x)
            transforms[name] = ("boxcox", lam, shift)
        else:
            transforms[name] = ("none", None, shift)
        mu, sd = float(x.mean()), float(x.std())
        if sd <= 0.0:
            rejected.append(name)
            continue
        standardization[name] = (mu, sd)
        names.append(name)
        cols.append((x - mu) / sd)

    interaction_names: list[str] = []
    by_name = dict(zip(names, cols))
    for a, b in spec.interactions:
        if a not in by_name or b not in by_name:
            rejected.append(f"{a}_x_{b}")
            continue
        prod = by_name[a] * by_name[b]
        sd = float(prod.std())
        if sd <= 0.0:
            rejected.append(f"{a}_x_{b}")
            continue
        mu = float(prod.mean())
        iname = f"{a}_x_{b}"
        standardization[iname] = (mu, sd)
        names.append(iname)
        cols.append((prod - mu) / sd)
        interaction_names.append(iname)

    if not cols:
        raise DataError("no usable predictor columns")
    return DesignMatrix(kept_ids, names, np.column_stack(cols), y, transforms,
                        standardization, (y_mu, y_sd), interaction_names,
                        rejected, n_dropped)


# --- rank correlation -------------------------------------------------------

def spearman(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson correlation of average ranks; None for constant input."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 3:
        raise DataError("spearman needs two equal-length vectors of length >= 3")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return None
    rx = sps.rankdata(x)
    ry = sps.rankdata(y)
    return float(np.corrcoef(rx, ry)[0, 1])


# --- model suite ------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    seed: int = 0
    splits: int = 1000
    train_frac: float = 0.75
    stability_subsamples: int = 200
    stability_threshold: float = 0.6
    stability_max_active: int | None = None
    rfe_keep: int = 5
    transform: str = "boxcox"
    interactions: tuple[tuple[str, str], ...] = DEFAULT_INTERACTIONS
    response: str = "activity_density"


@dataclass
class FeatureRow:
    feature: str
    beta: float
    se: float
    t: float
    p: float
    stars: str


@dataclass
class RegressionReport:
    model: str
    available: bool
    rows: list[FeatureRow] = field(default_factory=list)
    adj_r2: float | None = None  # in-sample
    r2: float | None = None
    n: int = 0
    cv_mean_r2: float | None = None
    cv_sd_r2: float | None = None
    cv_skipped: int = 0
    n_dropped_rows: int = 0
    rejected: list[str] = field(default_factory=list)
    selected_by: dict[str, list[str]] = field(default_factory=dict)
    note: str | None = None
    cv_scores: np.ndarray | None = None  # per-split trace, not serialized


def _fit_report(name: str, design: DesignMatrix, feature_names: Sequence[str],
                config: ModelConfig) -> RegressionReport:
    X = design.subset(feature_names)
    fit = ols_fit(X, design.y, feature_names)
    cv = shuffle_split_cv(X, design.y, config.splits, config.train_frac,
                          config.seed)
    rows = [FeatureRow(f, float(fit.beta[i]), float(fit.se[i]), float(fit.t[i]),
                       float(fit.p[i]), fit.stars[i])
            for i, f in enumerate(feature_names)]
    return RegressionReport(name, True, rows, fit.adj_r2, fit.r2, fit.n,
                            cv.mean_r2, cv.sd_r2, cv.n_skipped,
                            design.n_dropped_rows, list(design.rejected),
                            cv_scores=cv.scores)


def run_model_suite(ids: Sequence[str],
                    columns: Mapping[str, Sequence[float | None]],
                    config: ModelConfig = ModelConfig(),
                    include_ids: Sequence[str] | None = None
                    ) -> dict[str, RegressionReport]:
    """Five per-condition OLS models plus the combined selected-feature model.

    The combined model's features are the union of the stability-selection
    picks and the recursive-elimination survivors, plus the configured
    interaction terms. Returns one report per model, keyed by model name.
    """
    if include_ids is not None:
        keep = [i for i, d in enumerate(ids) if d in set(include_ids)]
        ids = [ids[i] for i in keep]
        columns = {k: [v[i] for i in keep] for k, v in columns.items()}

    reports: dict[str, RegressionReport] = {}
    for group, metrics_in_group in CONDITION_GROUPS.items():
        predictors = tuple(m for m in metrics_in_group if m in columns)
        try:
            design = build_design(ids, columns,
                                  DesignSpec(config.response, predictors,
                                             transform=config.transform))
            usable = [n for n in design.names]
            if not usable:
                raise DataError("no usable features")
            reports[group] = _fit_report(group, design, usable, config)
        except DataError as exc:
            reports[group] = RegressionReport(group, False, note=str(exc))

    all_predictors = tuple(m for m in METRIC_NAMES if m in columns)
    try:
        design = build_design(ids, columns,
                              DesignSpec(config.response, all_predictors,
                                         interactions=config.interactions,
                                         transform=config.transform))
        base = [n for n in design.names if n not in design.interaction_names]
        Xb = design.subset(base)
        stab = stability_selection(Xb, design.y, base,
                                   config.stability_subsamples,
                                   config.stability_threshold, config.seed,
                                   config.stability_max_active)
        keep_k = min(config.rfe_keep, len(base))
        rfe_sel = rfe(Xb, design.y, base, keep_k)
        chosen = sorted(set(stab.selected) | set(rfe_sel))
        features = chosen + design.interaction_names
        if not features:
            raise DataError("combined model selected no features")
        report = _fit_report("combined", design, features, config)
        report.selected_by = {"stability": sorted(stab.selected),
                              "rfe": sorted(rfe_sel)}
        reports["combined"] = report
    except DataError as exc:
        reports["combined"] = RegressionReport("combined", False, note=str(exc))
    return reports


# --- report serialization ---------------------------------------------------

def report_to_dict(reports: Mapping[str, RegressionReport]) -> dict:
    out = {}
    for name, rep in reports.items():
        out[name] = {
            "available": rep.available,
            "n": rep.n,
            "adj_r2_insample": rep.adj_r2,
            "r2_insample": rep.r2,
            "cv_mean_r2": rep.cv_mean_r2,
            "cv_sd_r2": rep.cv_sd_r2,
            "cv_skipped": rep.cv_skipped,
            "n_dropped_rows": rep.n_dropped_rows,
            "rejected_columns": rep.rejected,
            "selected_by": rep.selected_by,
            "note": rep.note,
            "features": [
                {"feature": r.feature, "beta": r.beta, "se": r.se,
                 "t": r.t, "p": r.p, "stars": r.stars}
                for r in rep.rows
            ],
        }
    return out


def write_model_report(reports: Mapping[str, RegressionReport],
                       json_path, csv_path) -> None:
    import csv as _csv
    import json

    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(reports), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["model", "feature", "beta", "se", "t", "p", "stars",
                         "adj_r2_insample", "cv_mean_r2", "cv_sd_r2", "n"])
        for name, rep in reports.items():
            if not rep.available:
                writer.writerow([name, "<unavailable>", "", "", "", "", "",
                                 "", "", "", ""])
                continue
            for r in rep.rows:
                writer.writerow([name, r.feature, repr(r.beta), repr(r.se),
                                 repr(r.t), repr(r.p), r.stars,
                                 repr(rep.adj_r2), repr(rep.cv_mean_r2),
                                 repr(rep.cv_sd_r2), rep.n])
