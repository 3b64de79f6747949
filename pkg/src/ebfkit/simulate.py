"""Synthetic-study harness: crossed-effects generator with exact-moment
scaling, the J x n x tau grid of log EBFs, and the chi-bar p-value
calibration study.

The generator builds y = a1 + th11[j] + th21[k] + (a2 + th12[j] + th22[k]) x
+ eps over a full J x K x n crossing with a1 = a2 = 0.  Errors and the
covariate are rescaled to exact sample moments (0, 1); each random-effect
vector to an exact target sample SD (a zero target yields an exactly zero
vector).  Everything is reproducible: per-cell RNG streams derive from
(seed, cell index), so serial and parallel runs agree bit-for-bit.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .bayes import McmcConfig, gibbs_lmm
from .classical import fit_lmm, profile_loglik
from .criteria import lrt_chibar
from .ebf import ebf_for_term
from .errors import DataError
from .model import Categorical, Dataset, parse_formula

CLASSICAL_TAU11_FLOOR = 0.04

BAYES_FORMULA = "y ~ x + (1 + x | g1) + (1 + x | g2)"
CLASSICAL_FORMULA = "y ~ x + (1 + x | g1) + (1 | g2)"  # second slope dropped
TERM_NAMES = {"tau11": "g1:1", "tau12": "g1:x", "tau21": "g2:1", "tau22": "g2:x"}


def exact_scale(v, target_sd: float):
    """Affine rescale to sample mean exactly 0 and sample SD (ddof=1) exactly
    target_sd.  A zero target returns the zero vector."""
    v = np.asarray(v, dtype=float)
    if v.size < 2:
        raise DataError("exact_scale needs at least 2 values")
    centered = v - v.mean()
    if target_sd == 0.0:
        return np.zeros_like(centered)
    sd = centered.std(ddof=1)
    if sd == 0.0:
        raise DataError("constant input vector has no scale to adjust")
    return centered * (target_sd / sd)


class GeneratedData(NamedTuple):
    data: Dataset
    truth: dict


def gen_crossed(J, K, n, tau_hats, rho1=0.0, rho2=0.0, seed=0) -> GeneratedData:
    """One crossed-design dataset with exact sample moments.

    ``tau_hats`` = (t11, t12, t21, t22) target sample SDs for the first
    dimension's intercept/slope and the second dimension's intercept/slope.
    ``truth`` records the exactly scaled effect vectors.
    """
    if min(J, K, n) < 2:
        raise DataError("need J, K, n >= 2")
    t11, t12, t21, t22 = (float(t) for t in tau_hats)
    if min(t11, t12, t21, t22) < 0:
        raise DataError("target SDs must be nonnegative")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rng = np.random.default_rng(seed)
    N = J * K * n

    def draw_pair(size, rho):
        z = rng.standard_normal((size, 2))
        if rho:
            z[:, 1] = rho * z[:, 0] + np.sqrt(1 - rho * rho) * z[:, 1]
        return z

    z1 = draw_pair(J, rho1)
    z2 = draw_pair(K, rho2)
    th11 = exact_scale(z1[:, 0], t11)
    th12 = exact_scale(z1[:, 1], t12)
    th21 = exact_scale(z2[:, 0], t21)
    th22 = exact_scale(z2[:, 1], t22)
    x = exact_scale(rng.standard_normal(N), 1.0)
    eps = exact_scale(rng.standard_normal(N), 1.0)

    j_idx = np.repeat(np.arange(J), K * n)
    k_idx = np.tile(np.repeat(np.arange(K), n), J)
    y = th11[j_idx] + th21[k_idx] + (th12[j_idx] + th22[k_idx]) * x + eps
    data = Dataset.from_dict(
        {
            "y": y,
            "x": x,
            "g1": Categorical(codes=j_idx, levels=tuple(f"j{v}" for v in range(J))),
            "g2": Categorical(codes=k_idx, levels=tuple(f"k{v}" for v in range(K))),
        }
    )
    truth = {"th11": th11, "th12": th12, "th21": th21, "th22": th22, "x": x, "eps": eps}
    return GeneratedData(data=data, truth=truth)


@dataclass(frozen=True)
class SimGrid:
    J_values: tuple = (10, 30, 100)
    n_values: tuple = (10, 30, 100)
    tau11_values: tuple = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))
    tau12: float = 0.5
    tau21: float = 0.5
    tau22: float = 0.01
    K: int = 30
    rho1: float = 0.0
    rho2: float = 0.0
    replications: int = 1
    seed: int = 0
    estimator: str = "both"          # classical | bayesian | both
    mcmc: McmcConfig = field(default_factory=McmcConfig)

    def __post_init__(self):
        if self.estimator not in ("classical", "bayesian", "both"):
            raise DataError(f"unknown estimator {self.estimator!r}")
        if not self.J_values or not self.n_values or not self.tau11_values:
            raise DataError("grid must be nonempty")
        if min(self.tau12, self.tau21, self.tau22) < 0 or min(self.tau11_values) < 0:
            raise DataError("target SDs must be nonnegative")


@dataclass(frozen=True)
class SimResult:
    rows: tuple

    FIELDS = ("J", "n", "tau11_hat", "estimator", "term", "log_ebf", "flags", "replication", "seed")

    def to_csv_rows(self):
        out = [list(self.FIELDS)]
        for r in self.rows:
            out.append([r[k] for k in self.FIELDS])
        return out

    def panel_rows(self):
        """Aggregated plot data: mean log EBF of the varied intercept per
        (J, n, tau11, estimator) panel point."""
        acc = {}
        for r in self.rows:
            if r["term"] != TERM_NAMES["tau11"] or r["log_ebf"] is None:
                continue
            key = (r["J"], r["n"], r["tau11_hat"], r["estimator"])
            acc.setdefault(key, []).append(r["log_ebf"])
        out = [["J", "n", "tau11_hat", "estimator", "mean_log_ebf", "n_reps"]]
        for key in sorted(acc):
            vals = acc[key]
            out.append([*key, float(np.mean(vals)), len(vals)])
        return out


def _cells(grid):
    cells = []
    idx = 0
    for J in grid.J_values:
        for n in grid.n_values:
            for tau11 in grid.tau11_values:
                for rep in range(grid.replications):
                    cells.append((idx, J, n, float(tau11), rep))
                    idx += 1
    return cells


def _run_cell(args):
    grid, (cell_idx, J, n, tau11, rep) = args
    rows = []
    base = np.random.SeedSequence(entropy=grid.seed, spawn_key=(cell_idx,))
    data_seed, mcmc_seed = base.spawn(2)
    estimators = ("classical", "bayesian") if grid.estimator == "both" else (grid.estimator,)
    for est in estimators:
        if est == "bayesian":
            gen = gen_crossed(
                J, grid.K, n, (tau11, grid.tau12, grid.tau21, grid.tau22),
                rho1=grid.rho1, rho2=grid.rho2, seed=data_seed,
            )
            cfg = replace(grid.mcmc, seed=int(mcmc_seed.generate_state(1)[0]))
            fit = gibbs_lmm(parse_formula(BAYES_FORMULA), gen.data, cfg)
            tested = ["g1:1", "g1:x", "g2:1", "g2:x"]
        else:
            t11_eff = max(tau11, CLASSICAL_TAU11_FLOOR)
            gen = gen_crossed(
                J, grid.K, n, (t11_eff, grid.tau12, grid.tau21, grid.tau22),
                rho1=grid.rho1, rho2=grid.rho2, seed=data_seed,
            )
            try:
                fit = fit_lmm(parse_formula(CLASSICAL_FORMULA), gen.data, objective="reml")
            except Exception as exc:
                for term in ("g1:1", "g1:x", "g2:1"):
                    rows.append(_row(J, n, tau11, est, term, None, f"fit-failed:{type(exc).__name__}", rep, grid.seed))
                continue
            tested = ["g1:1", "g1:x", "g2:1"]
        for term in tested:
            try:
                res = ebf_for_term(fit, term)
            except Exception as exc:
                rows.append(_row(J, n, tau11, est, term, None, f"ebf-failed:{type(exc).__name__}", rep, grid.seed))
                continue
            if est == "classical" and "boundary" in res.flags:
                # the lme4-analog singular fit: recorded as missing
                rows.append(_row(J, n, tau11, est, term, None, "singular", rep, grid.seed))
            else:
                rows.append(
                    _row(J, n, tau11, est, term, float(res.log_ebf), ";".join(sorted(res.flags)), rep, grid.seed)
                )
    return rows


def _row(J, n, tau11, est, term, log_ebf, flags, rep, seed):
    return {
        "J": J, "n": n, "tau11_hat": tau11, "estimator": est, "term": term,
        "log_ebf": log_ebf, "flags": flags, "replication": rep, "seed": seed,
    }


def run_grid(grid: SimGrid) -> SimResult:
    """Fit and score every grid cell; per-cell failures are recorded rows,
    never fatal.  EBFKIT_THREADS > 1 runs cells in a process pool (results
    are identical to the serial order)."""
    cells = _cells(grid)
    workers = int(os.environ.get("EBFKIT_THREADS", "1") or "1")
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_cell, [(grid, c) for c in cells]))
    else:
        chunks = [_run_cell((grid, c)) for c in cells]
    rows = [row for chunk in chunks for row in chunk]
    return SimResult(rows=tuple(rows))


def pvalue_study_chibar(
    N_values=(50, 250),
    replications=500,
    seed=0,
    objective: str = "reml",
):
    """Null-calibration study of the chi-bar LRT on one-way Gaussian LMMs.

    Data are generated under H0 (tau^2 = 0) as pure noise in J = N/2 groups
    of 2; both nested models are fit with the same objective (REML by
    default; the fixed effects are identical so the REML LRT is valid).
    Reports the point mass at p = 1, the mean p-value, a 10-bin histogram of
    the continuous part, and a KS statistic of the nonzero LRT statistics
    against chi^2_1 -- deviations are reported, not hidden.
    """
    from scipy.stats import chi2 as chi2_dist
    from scipy.stats import kstest

    out = []
    root = np.random.SeedSequence(seed)
    for N in N_values:
        J = N // 2
        if J < 3:
            raise DataError("N too small for the J = N/2 design")
        g = Categorical(
            codes=np.repeat(np.arange(J), 2), levels=tuple(f"g{j}" for j in range(J))
        )
        spec = parse_formula("y ~ (1 | g)")
        pvals = np.empty(replications)
        stats = np.empty(replications)
        streams = np.random.SeedSequence(entropy=seed, spawn_key=(N,)).spawn(replications)
        for r, ss in enumerate(streams):
            rng = np.random.default_rng(ss)
            y = rng.standard_normal(2 * J)
            data = Dataset.from_dict({"y": y, "g": g})
            fit1 = fit_lmm(spec, data, objective=objective)
            ll0 = profile_loglik(spec, data, {"g": {"tau2[1]": 0.0}}, objective=objective)
            stats[r], pvals[r] = lrt_chibar(fit1.loglik, ll0)
        zero_frac = float((stats <= 1e-10).mean())
        nonzero = stats[stats > 1e-10]
        cont_p = pvals[stats > 1e-10]
        ks = kstest(nonzero, chi2_dist(df=1).cdf) if nonzero.size >= 5 else None
        hist, edges = np.histogram(cont_p, bins=10, range=(0.0, 0.5))
        out.append(
            {
                "N": N,
                "J": J,
                "replications": replications,
                "zero_stat_fraction": zero_frac,
                "mean_p": float(pvals.mean()),
                "mean_p_continuous": float(cont_p.mean()) if cont_p.size else None,
                "ks_stat_vs_chi2_1": float(ks.statistic) if ks else None,
                "ks_p_vs_chi2_1": float(ks.pvalue) if ks else None,
                "hist_bins": hist.tolist(),
                "hist_edges": edges.tolist(),
            }
        )
    return out
