"""Classical comparison criteria: AIC, BIC, DIC, chi-bar LRT, K-fold CV.

Parameter counting convention (recorded in every report): q = fixed effects
+ free variance/correlation/structural parameters; random-effect levels are
never counted.  BIC's sample-size ambiguity is surfaced, not resolved: the
report carries one row per n convention (total rows and, per grouping term,
the cluster count).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln
from scipy.stats import chi2

from .bayes import PosteriorFit
from .classical import fit_lmm
from .errors import DataError, NumericalError
from .model import Dataset, ModelSpec, build_design

Q_CONVENTION = "fixed effects + free covariance parameters (levels not counted)"


def aic(loglik: float, q: int) -> float:
    """-2 loglik + 2 q."""
    if not math.isfinite(loglik):
        raise NumericalError(f"non-finite log-likelihood {loglik}")
    if q < 0:
        raise DataError("q must be >= 0")
    return -2.0 * loglik + 2.0 * q


def bic(loglik: float, q: int, n: int) -> float:
    """-2 loglik + q ln(n); the caller chooses (and should label) n."""
    if not math.isfinite(loglik):
        raise NumericalError(f"non-finite log-likelihood {loglik}")
    if n < 1:
        raise DataError("n must be >= 1")
    return -2.0 * loglik + q * math.log(n)


def dic(fit: PosteriorFit, loglik_at) -> tuple[float, float]:
    """Deviance information criterion from posterior draws.

    ``loglik_at(values)`` evaluates log p(y | X, params) for a parameter
    vector aligned with ``fit.columns``.  p_DIC = 2 (log p at posterior
    means - mean log p over draws); negative values are reported as-is
    (the caller flags them).
    """
    at_means = float(loglik_at(fit.draws.mean(axis=0)))
    per_draw = np.array([loglik_at(row) for row in fit.draws], dtype=float)
    if not np.all(np.isfinite(per_draw)) or not math.isfinite(at_means):
        raise NumericalError("log-likelihood evaluator returned non-finite values")
    p_dic = 2.0 * (at_means - float(per_draw.mean()))
    return -2.0 * at_means + 2.0 * p_dic, p_dic


def lrt_chibar(loglik1: float, loglik0: float, tested_variances: int = 1):
    """Boundary LRT for one variance component.

    The null distribution is the equal mixture 0.5 chi^2_0 + 0.5 chi^2_1:
    p = 1 at stat 0, else 0.5 P(chi^2_1 > stat).  More than one tested
    variance needs cone weights that are out of scope, so it is refused.
    """
    if tested_variances != 1:
        raise DataError("only tested_variances=1 is supported (general cone weights out of scope)")
    if loglik1 < loglik0 - 1e-8:
        raise DataError(
            f"models are not nested: loglik1={loglik1} < loglik0={loglik0}"
        )
    stat = max(2.0 * (loglik1 - loglik0), 0.0)
    p = 1.0 if stat == 0.0 else 0.5 * float(chi2.sf(stat, df=1))
    return stat, p


def conditional_loglik_evaluator(spec: ModelSpec, data: Dataset, columns, adjacency=None):
    """log p(y | X, phi, theta) evaluator over draw rows laid out as ``columns``.

    The likelihood is conditional on the random effects (the standard DIC
    focus); covariance parameters only enter through theta.
    """
    design = build_design(spec, data)
    y = design.y
    X, Z = design.X, design.Z
    offset = design.offset if design.offset is not None else 0.0
    p = X.shape[1]
    phi_idx = [columns.index(f"phi:{n}") for n in design.fixed_names]
    theta_idx = [i for i, c in enumerate(columns) if c.startswith("theta:")]
    sigma_idx = columns.index("sigma2") if "sigma2" in columns else None
    n = design.n
    if spec.family == "poisson-log":
        log_fact = float(gammaln(y + 1.0).sum())

    def evaluate(values):
        values = np.asarray(values, dtype=float)
        eta = offset + X @ values[phi_idx]
        if theta_idx:
            eta = eta + Z @ values[theta_idx]
        if spec.family == "gaussian-identity":
            s2 = values[sigma_idx]
            resid = y - eta
            return -0.5 * (n * math.log(2 * math.pi * s2) + float(resid @ resid) / s2)
        if spec.family == "bernoulli-logit":
            return float((y * eta - np.logaddexp(0.0, eta)).sum())
        return float((y * eta - np.exp(eta)).sum()) - log_fact

    return evaluate


def kfold_cv(
    spec: ModelSpec,
    data: Dataset,
    K: int,
    metric: str = "squared",
    seed: int = 0,
    objective: str = "reml",
) -> float:
    """Mean K-fold out-of-sample prediction error, deterministic given seed.

    Predictions are X phi_hat + Z theta_hat with theta_hat = 0 for grouping
    levels unseen in the training fold; K = N is leave-one-out.
    """
    if spec.family != "gaussian-identity":
        raise DataError("kfold_cv supports the gaussian family")
    if metric not in ("squared", "absolute"):
        raise DataError(f"metric must be 'squared' or 'absolute', got {metric!r}")
    n = data.n_rows
    if not 2 <= K <= n:
        raise DataError(f"need 2 <= K <= {n}, got K={K}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    folds = np.array_split(perm, K)
    total = 0.0
    for fold in folds:
        train_rows = np.setdiff1d(np.arange(n), fold)
        train = data.subset(train_rows)
        fit = fit_lmm(spec, train, objective=objective)
        # level label -> BLUP rows, per term
        term_maps = []
        for t in fit.terms:
            lut = {lvl: j for j, lvl in enumerate(t.levels)}
            term_maps.append((t, lut))
        for i in fold:
            pred = fit.phi["(Intercept)"]
            for name in spec.fixed_terms:
                pred += fit.phi[name] * float(data.numeric(name)[i])
            if spec.offset is not None:
                pred += float(data.numeric(spec.offset)[i])
            for rt, (t, lut) in zip(spec.random_terms, term_maps):
                if rt.group == "unit":
                    continue  # unit-level effects are never shared with new rows
                lvl = data.categorical(rt.group)
                label = lvl.levels[lvl.codes[i]]
                j = lut.get(label)
                if j is None:
                    continue
                d = len(t.design_columns)
                for c, cname in enumerate(t.design_columns):
                    zval = 1.0 if cname == "1" else float(data.numeric(cname)[i])
                    pred += zval * fit.theta[t.offset + j * d + c]
            err = float(data.numeric(spec.response)[i]) - pred
            total += err * err if metric == "squared" else abs(err)
    return total / n


@dataclass
class CriteriaReport:
    rows: list = field(default_factory=list)          # per-model criteria
    lrt: dict | None = None
    cv: dict | None = None
    convention: str = Q_CONVENTION

    def add_model(self, label, loglik, q, n_rows, cluster_counts=(), dic_value=None, p_dic=None):
        row = {
            "label": label,
            "loglik": loglik,
            "q": q,
            "aic": aic(loglik, q),
            "bic_rows": bic(loglik, q, n_rows),
            "bic_n": n_rows,
        }
        for name, j in cluster_counts:
            row[f"bic_clusters[{name}]"] = bic(loglik, q, j)
        if dic_value is not None:
            row["dic"] = dic_value
            row["p_dic"] = p_dic
            if p_dic is not None and p_dic < 0:
                row["flag"] = "negative p_dic: effective parameter count below zero"
        self.rows.append(row)
        return row

    def set_lrt(self, stat, p, labels):
        self.lrt = {"stat": stat, "p": p, "models": list(labels)}

    def set_cv(self, K, metric, mean_error, seed):
        self.cv = {"K": K, "metric": metric, "mean_error": mean_error, "seed": seed}

    def as_dict(self):
        out = {"convention": self.convention, "models": self.rows}
        if self.lrt is not None:
            out["lrt"] = self.lrt
        if self.cv is not None:
            out["cv"] = self.cv
        return out

    def to_csv_rows(self):
        keys = sorted({k for row in self.rows for k in row})
        header = ["label"] + [k for k in keys if k != "label"]
        lines = [header]
        for row in self.rows:
            lines.append([row.get(k, "") for k in header])
        return lines
