"""Maximum-likelihood / REML fitting of Gaussian linear mixed models.

The marginal covariance V = sigma^2 I + Z G Z' is never formed; every
likelihood evaluation works through the q x q matrix
M = G^{-1} + Z'Z / sigma^2 and one-time cross-products, so cost is
independent of the number of rows after setup.

Variance parameters are optimized on the log-tau scale (correlations on
atanh(rho), CAR propriety on logit(alpha)) by derivative-free coordinate
descent with golden-section line searches.  Variances are bounded below by
(1e-4 * sd(y))^2; hitting that floor sets the ``boundary`` flag and EBFs
computed from such fits are marked unreliable-classical downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from . import terms as T
from .errors import DataError, FitError, NumericalError
from .model import Dataset, DesignMatrices, ModelSpec, build_design

RHO_MAX = 0.999
ATANH_RHO_MAX = math.atanh(RHO_MAX)
VAR_FLOOR_REL = 1e-4


@dataclass
class FitOptions:
    car_alpha: float = 0.95
    estimate_car_alpha: bool = False
    max_sweeps: int = 500
    f_tol: float = 1e-8
    x_tol: float = 1e-6
    inner_tol: float = 1e-10


@dataclass
class FittedModel:
    """Point estimates plus the conditional covariance of the random effects."""

    method: str                      # "ml" | "reml"
    phi: dict                        # fixed coefficients + "sigma2"
    gamma: dict                      # label -> {param: value}
    theta: np.ndarray                # stacked BLUPs, level-major per term
    omega: np.ndarray                # joint conditional covariance (or its diagonal)
    omega_is_diagonal: bool
    loglik: float
    flags: set
    spec: ModelSpec
    terms: tuple
    fixed_names: tuple
    n_obs: int
    n_params: int                    # fixed effects + free covariance parameters
    var_floor: float = 0.0           # (1e-4 sd(y))^2; variances at/below it are boundary
    design: DesignMatrices | None = field(default=None, repr=False)

    def term(self, label):
        for t in self.terms:
            if t.label == label:
                return t
        raise DataError(f"unknown random term {label!r}")

    def posterior_moments(self, idx):
        """Marginal (theta_hat, Omega block) of the selected coefficients."""
        idx = np.asarray(idx)
        th = self.theta[idx]
        if self.omega_is_diagonal:
            om = np.diag(self.omega[idx])
        else:
            om = self.omega[np.ix_(idx, idx)]
        return th, om


class _XProducts:
    """One-time cross-products; all later algebra is q- and p-dimensional."""

    def __init__(self, design: DesignMatrices):
        y = design.y.astype(float)
        if design.offset is not None:
            y = y - design.offset
        X = design.X
        Z = design.Z
        self.n, self.p = X.shape
        self.q = Z.shape[1]
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        if self.q:
            self.ZtX = np.asarray(Z.T @ X)
            self.Zty = np.asarray(Z.T @ y).ravel()
            self.ZtZ = np.asarray((Z.T @ Z).todense())
        else:
            self.ZtX = np.zeros((0, self.p))
            self.Zty = np.zeros(0)
            self.ZtZ = np.zeros((0, 0))
        self.sd_y = float(np.std(y))


def _chol_logdet(A):
    c, low = sla.cho_factor(A, lower=True)
    return (c, low), 2.0 * np.sum(np.log(np.diag(c)))


def _marginal_loglik(xp, term_infos, gammas, sigma2, objective):
    """Gaussian (RE)ML log-likelihood at fixed covariance parameters.

    Returns (loglik, beta, cM) where cM is the Cholesky of
    M = G^{-1} + Z'Z/sigma^2 (None when there are no random terms).
    """
    n, p, q = xp.n, xp.p, xp.q
    if q:
        M = xp.ZtZ / sigma2
        logdet_g = 0.0
        for t in term_infos:
            logdet_g += T.add_ginv(M, 0, t, gammas[t.label])
        try:
            cM, logdet_m = _chol_logdet(M)
        except sla.LinAlgError as exc:
            raise NumericalError("marginal covariance is not positive definite") from exc
        MiZtX = sla.cho_solve(cM, xp.ZtX)
        MiZty = sla.cho_solve(cM, xp.Zty)
        s4 = sigma2 * sigma2
        XtViX = xp.XtX / sigma2 - (xp.ZtX.T @ MiZtX) / s4
        XtViy = xp.Xty / sigma2 - (xp.ZtX.T @ MiZty) / s4
        ytViy = xp.yty / sigma2 - (xp.Zty @ MiZty) / s4
        logdet_v = n * np.log(sigma2) + logdet_g + logdet_m
    else:
        cM = None
        XtViX = xp.XtX / sigma2
        XtViy = xp.Xty / sigma2
        ytViy = xp.yty / sigma2
        logdet_v = n * np.log(sigma2)
    try:
        cB, logdet_xvx = _chol_logdet(XtViX)
    except sla.LinAlgError as exc:
        raise FitError("rank-deficient fixed-effect design") from exc
    beta = sla.cho_solve(cB, XtViy)
    quad = ytViy - beta @ XtViy
    ll = -0.5 * (n * np.log(2 * np.pi) + logdet_v + quad)
    if objective == "reml":
        ll = -0.5 * ((n - p) * np.log(2 * np.pi) + logdet_v + logdet_xvx + quad)
    return ll, beta, cM


class _ParamMap:
    """Transformed coordinate vector <-> per-term gamma dicts + sigma^2."""

    def __init__(self, term_infos, xp, opts):
        sdy = max(xp.sd_y, 1e-8)
        self.tau_floor = VAR_FLOOR_REL * sdy
        tau_lo, tau_hi = np.log(self.tau_floor), np.log(1e3 * sdy)
        self.names = []
        self.bounds = []
        self.x0 = []
        self.var_coords = []
        self.rho_coords = []
        resid_scale = max(0.5 * sdy, 2.0 * self.tau_floor)
        for t in term_infos:
            if t.kind in ("diagonal", "correlated"):
                for c in t.design_columns:
                    self._add(f"{t.label}.tau[{c}]", np.log(resid_scale * 0.6), (tau_lo, tau_hi), var=True)
                if t.kind == "correlated":
                    self._add(f"{t.label}.atanh_rho", 0.0, (-ATANH_RHO_MAX, ATANH_RHO_MAX), rho=True)
            elif t.kind == "car":
                self._add(f"{t.label}.tau", np.log(resid_scale * 0.6), (tau_lo, tau_hi), var=True)
                if opts.estimate_car_alpha:
                    self._add(
                        f"{t.label}.logit_alpha",
                        _logit(opts.car_alpha),
                        (_logit(1e-6), _logit(0.999)),
                    )
            elif t.kind == "gp-se":
                rng_x = float(np.ptp(t.gp_inputs)) or 1.0
                self._add(f"{t.label}.tau", np.log(resid_scale * 0.6), (tau_lo, tau_hi), var=True)
                self._add(
                    f"{t.label}.log_lambda",
                    np.log(rng_x / 4.0),
                    (np.log(1e-3 * rng_x), np.log(10.0 * rng_x)),
                )
        self._add("log_sigma", np.log(max(resid_scale, 2.0 * self.tau_floor)), (tau_lo, tau_hi), var=True)
        self.terms = term_infos
        self.alpha_fixed = opts.car_alpha
        self.estimate_alpha = opts.estimate_car_alpha

    def _add(self, name, x0, bounds, var=False, rho=False):
        i = len(self.names)
        self.names.append(name)
        self.x0.append(float(np.clip(x0, *bounds)))
        self.bounds.append(bounds)
        if var:
            self.var_coords.append(i)
        if rho:
            self.rho_coords.append(i)

    def unpack(self, x):
        gammas = {}
        i = 0
        for t in self.terms:
            g = {}
            if t.kind in ("diagonal", "correlated"):
                for c in t.design_columns:
                    g[f"tau2[{c}]"] = float(np.exp(2.0 * x[i])); i += 1
                if t.kind == "correlated":
                    g["rho"] = float(np.tanh(x[i])); i += 1
            elif t.kind == "car":
                g["tau2"] = float(np.exp(2.0 * x[i])); i += 1
                if self.estimate_alpha:
                    g["alpha"] = float(_inv_logit(x[i])); i += 1
                else:
                    g["alpha"] = self.alpha_fixed
            else:
                g["tau"] = float(np.exp(x[i])); i += 1
                g["lambda"] = float(np.exp(x[i])); i += 1
            gammas[t.label] = g
        sigma2 = float(np.exp(2.0 * x[i]))
        return gammas, sigma2

    def flags_at(self, x):
        flags = set()
        for i in self.var_coords:
            if x[i] <= self.bounds[i][0] + 1e-6:
                flags.add("boundary")
        for i in self.rho_coords:
            if abs(x[i]) >= ATANH_RHO_MAX - 1e-6:
                flags.add("singular")
        return flags


def _logit(p):
    return math.log(p / (1.0 - p))


def _inv_logit(v):
    return 1.0 / (1.0 + math.exp(-v))


def _golden(fobj, a, b, tol, seed_points=()):
    """Golden-section minimum of a 1-d function on [a, b]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = fobj(x1), fobj(x2)
    best = min([(f1, x1), (f2, x2)] + [(fobj(s), s) for s in seed_points])
    while b - a > tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = fobj(x1)
            if f1 < best[0]:
                best = (f1, x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = fobj(x2)
            if f2 < best[0]:
                best = (f2, x2)
    return best[1], best[0]


def _coordinate_descent(objective, x0, bounds, opts):
    """Cyclic coordinate minimization with golden-section line searches.

    Converged when a full sweep improves the objective by < f_tol and moves
    every coordinate by < x_tol.  The objective is non-increasing by
    construction (a line-search result is only accepted when it improves).
    """
    x = np.array(x0, dtype=float)
    f = objective(x)
    radii = np.full(x.size, 2.0)
    for sweep in range(opts.max_sweeps):
        f_start = f
        max_move = 0.0
        for i in range(x.size):
            lo, hi = bounds[i]

            def f_line(v, i=i):
                xt = x.copy()
                xt[i] = v
                return objective(xt)

            a = max(lo, x[i] - radii[i])
            b = min(hi, x[i] + radii[i])
            for _ in range(50):
                xi, fi = _golden(f_line, a, b, opts.inner_tol, seed_points=(x[i],))
                width = b - a
                grow_left = xi - a < 4 * opts.inner_tol and a > lo
                grow_right = b - xi < 4 * opts.inner_tol and b < hi
                if not (grow_left or grow_right):
                    break
                if grow_left:
                    a = max(lo, a - 2.0 * width)
                if grow_right:
                    b = min(hi, b + 2.0 * width)
            if fi < f:
                move = abs(xi - x[i])
                x[i] = xi
                f = fi
            else:
                move = 0.0
            radii[i] = float(np.clip(4.0 * move, 1e-4, 2.0))
            max_move = max(max_move, move)
        if f_start - f < opts.f_tol and max_move < opts.x_tol:
            return x, f, sweep + 1
    raise FitError(f"optimizer did not converge within {opts.max_sweeps} sweeps")


def _attach_structures(design, adjacency):
    """Attach adjacency objects to CAR terms (TermInfo is frozen: replace)."""
    out = []
    for t in design.terms:
        if t.kind == "car":
            if adjacency is None:
                raise DataError(f"term {t.label!r} needs an adjacency structure")
            if adjacency.J != t.n_levels:
                raise DataError(
                    f"adjacency has {adjacency.J} nodes but term {t.label!r} has "
                    f"{t.n_levels} levels"
                )
            t = replace(t, adjacency=adjacency)
        out.append(t)
    return tuple(out)


def _count_params(term_infos, estimate_alpha):
    q = 0
    for t in term_infos:
        if t.kind in ("diagonal", "correlated"):
            q += len(t.design_columns) + (1 if t.kind == "correlated" else 0)
        elif t.kind == "car":
            q += 1 + (1 if estimate_alpha else 0)
        else:
            q += 2
    return q


def fit_lmm(
    spec: ModelSpec,
    data: Dataset,
    objective: str = "reml",
    adjacency=None,
    opts: FitOptions | None = None,
) -> FittedModel:
    """Fit a Gaussian LMM by ML or REML profile optimization.

    Fixed effects are profiled out by generalized least squares at every
    covariance evaluation; the derivative-free search runs over the
    variance/correlation/structural parameters and log sigma.
    """
    if spec.family != "gaussian-identity":
        raise DataError("fit_lmm requires the gaussian-identity family (GLMMs use MCMC)")
    if objective not in ("ml", "reml"):
        raise DataError(f"objective must be 'ml' or 'reml', got {objective!r}")
    opts = opts or FitOptions()
    design = build_design(spec, data)
    term_infos = _attach_structures(design, adjacency)
    xp = _XProducts(design)
    if xp.n <= xp.p:
        raise DataError(f"need n_rows > n fixed effects, got n={xp.n}, p={xp.p}")
    if np.linalg.matrix_rank(design.X) < xp.p:
        raise FitError("rank-deficient fixed-effect design")

    flags = set()
    if not term_infos:
        ll, beta, _ = _marginal_loglik(xp, (), {}, 1.0, "ml")  # probe beta only
        resid = xp.yty - 2 * beta @ xp.Xty + beta @ xp.XtX @ beta
        dof = xp.n if objective == "ml" else xp.n - xp.p
        sigma2 = max(resid / dof, (VAR_FLOOR_REL * max(xp.sd_y, 1e-8)) ** 2)
        ll, beta, _ = _marginal_loglik(xp, (), {}, sigma2, objective)
        gammas = {}
    else:
        pmap = _ParamMap(term_infos, xp, opts)

        def deviance(x):
            g, s2 = pmap.unpack(x)
            ll, _, _ = _marginal_loglik(xp, term_infos, g, s2, objective)
            return -2.0 * ll

        xhat, dev, _ = _coordinate_descent(deviance, pmap.x0, pmap.bounds, opts)
        gammas, sigma2 = pmap.unpack(xhat)
        flags |= pmap.flags_at(xhat)
        ll, beta, _ = _marginal_loglik(xp, term_infos, gammas, sigma2, objective)

    phi = {name: float(b) for name, b in zip(design.fixed_names, beta)}
    phi["sigma2"] = float(sigma2)
    theta, omega = _blup(xp, term_infos, gammas, sigma2, beta)
    n_params = xp.p + 1 + _count_params(term_infos, opts.estimate_car_alpha)
    return FittedModel(
        method=objective,
        phi=phi,
        gamma=gammas,
        theta=theta,
        omega=omega,
        omega_is_diagonal=False,
        loglik=float(ll),
        flags=flags,
        spec=spec,
        terms=term_infos,
        fixed_names=design.fixed_names,
        n_obs=xp.n,
        n_params=n_params,
        var_floor=(VAR_FLOOR_REL * max(xp.sd_y, 1e-8)) ** 2,
        design=design,
    )


def _blup(xp, term_infos, gammas, sigma2, beta):
    q = xp.q
    if not q:
        return np.zeros(0), np.zeros((0, 0))
    M = xp.ZtZ / sigma2
    for t in term_infos:
        T.add_ginv(M, 0, t, gammas[t.label])
    try:
        cM, _ = _chol_logdet(M)
    except sla.LinAlgError as exc:
        raise NumericalError(
            "G is singular (a variance is exactly zero); drop the term instead"
        ) from exc
    omega = sla.cho_solve(cM, np.eye(q))
    omega = 0.5 * (omega + omega.T)
    resid_proj = (xp.Zty - xp.ZtX @ beta) / sigma2
    theta = omega @ resid_proj
    return theta, omega


def blup_with_covariance(fit: FittedModel, design: DesignMatrices):
    """Exact conditional mean/covariance of the random effects given
    the fitted (phi, gamma, sigma^2):  Omega = (Z'Z/s2 + G^{-1})^{-1},
    theta = Omega Z'(y - X phi)/s2."""
    xp = _XProducts(design)
    beta = np.array([fit.phi[name] for name in design.fixed_names])
    return _blup(xp, fit.terms, fit.gamma, fit.phi["sigma2"], beta)


def diagonal_omega_fallback(se) -> np.ndarray:
    """Omega = diag(se^2): the squared-standard-error approximation used when
    only per-coefficient uncertainties are available.  EBFs computed from it
    carry the diagonal-approx flag."""
    se = np.asarray(se, dtype=float)
    if se.ndim != 1 or se.size == 0:
        raise DataError("se must be a nonempty vector")
    if (se <= 0).any() or not np.all(np.isfinite(se)):
        raise DataError("standard errors must be positive and finite")
    return np.diag(se * se)


def with_diagonal_omega(fit: FittedModel) -> FittedModel:
    """Replace the full conditional covariance by its squared-SE diagonal."""
    omega = diagonal_omega_fallback(np.sqrt(np.diag(fit.omega)))
    return replace(
        fit,
        omega=np.diag(omega).copy(),
        omega_is_diagonal=True,
        flags=set(fit.flags) | {"diagonal-approx"},
    )


def profile_loglik(
    spec: ModelSpec,
    data: Dataset,
    gamma_fixed: dict,
    objective: str = "ml",
    adjacency=None,
) -> float:
    """Log-likelihood maximized over the fixed effects (and sigma^2) with the
    random-effect covariance parameters held fixed.

    Zero variances are allowed: the corresponding coefficients are dropped,
    so ``gamma_fixed`` of all zeros reduces to the independent-error model.
    """
    design = build_design(spec, data)
    term_infos = _attach_structures(design, adjacency)
    kept_terms = []
    kept_cols = []
    for t in term_infos:
        g = gamma_fixed.get(t.label)
        if g is None:
            raise DataError(f"gamma_fixed is missing term {t.label!r}")
        if t.kind in ("diagonal", "correlated"):
            live = [c for c in t.design_columns if g[f"tau2[{c}]"] > 0.0]
            if not live:
                continue
            d = len(t.design_columns)
            for j in range(t.n_levels):
                for c in live:
                    kept_cols.append(t.offset + j * d + t.design_columns.index(c))
            kind = "correlated" if (t.kind == "correlated" and len(live) == 2) else "diagonal"
            sub_g = {f"tau2[{c}]": g[f"tau2[{c}]"] for c in live}
            if kind == "correlated":
                sub_g["rho"] = g["rho"]
            kept_terms.append((replace(t, kind=kind, design_columns=tuple(live)), sub_g))
        else:
            key = "tau2" if t.kind == "car" else "tau"
            if g[key] <= 0.0:
                continue
            kept_cols.extend(range(t.offset, t.offset + t.n_coefs))
            kept_terms.append((t, dict(g)))

    # re-offset kept terms contiguously to match the column-selected Z
    running = 0
    sub_infos = []
    sub_gammas = {}
    for t, g in kept_terms:
        t = replace(t, offset=running)
        running += t.n_coefs
        sub_infos.append(t)
        sub_gammas[t.label] = g
    sub_infos = tuple(sub_infos)

    y = design.y if design.offset is None else design.y - design.offset
    Z = design.Z[:, kept_cols] if kept_cols else None

    xp = _XProducts.__new__(_XProducts)
    X = design.X
    xp.n, xp.p = X.shape
    xp.XtX = X.T @ X
    xp.Xty = X.T @ y
    xp.yty = float(y @ y)
    xp.sd_y = float(np.std(y))
    if Z is not None:
        xp.q = Z.shape[1]
        xp.ZtX = np.asarray(Z.T @ X)
        xp.Zty = np.asarray(Z.T @ y).ravel()
        xp.ZtZ = np.asarray((Z.T @ Z).todense())
    else:
        xp.q = 0
        xp.ZtX = np.zeros((0, xp.p))
        xp.Zty = np.zeros(0)
        xp.ZtZ = np.zeros((0, 0))

    sdy = max(xp.sd_y, 1e-8)
    lo, hi = np.log(VAR_FLOOR_REL * sdy), np.log(1e3 * sdy)

    def dev_of_logsigma(u):
        ll, _, _ = _marginal_loglik(xp, sub_infos, sub_gammas, float(np.exp(2.0 * u)), objective)
        return -2.0 * ll

    u, _ = _golden(dev_of_logsigma, lo, hi, 1e-11)
    ll, _, _ = _marginal_loglik(xp, sub_infos, sub_gammas, float(np.exp(2.0 * u)), objective)
    return float(ll)
