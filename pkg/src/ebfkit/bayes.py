"""MCMC fitting with flat variance priors.

``gibbs_lmm`` samples Gaussian LMMs: (phi, theta) jointly from their Gaussian
full conditional, sigma^2 and each tau^2 from their flat-prior conditionals
(scaled inverse-chi-square; an inverse-CDF draw on a log-spaced grid covers
the improper small-J shapes).  ``mwg_glmm`` replaces the Gaussian block with
single-site random-walk Metropolis on the linear predictor for
bernoulli-logit and poisson-log responses.

Priors follow the flat-noninformative recommendation: pi(tau^2) ∝ 1 on the
variance scale and flat improper priors on fixed effects.  For very small
numbers of levels (J*d <= 2) the variance conditionals are improper and the
grid sampler effectively truncates them to [1e-12, 1e6] * var(y); propriety
of the posterior in that regime is the caller's responsibility.

Correlations are updated by random-walk Metropolis on atanh(rho), CAR
propriety on logit(alpha) (when estimated), GP length-scales on log(lambda)
with a flat prior on (0, 10 * range(x)).  Every random-walk step size adapts
toward 0.44 acceptance in batches of 50 during burn-in, freezing for the
final ``adapt_window`` burn-in iterations.  A joint scale move on
(theta_c, tau_c^2) after each sweep breaks the critically slow mixing of
near-zero variance components.

Chains are independent and merged in chain order; draws are bit-reproducible
given (spec, data, config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.special import ndtri

from . import covstruct
from . import terms as T
from .classical import _attach_structures, _count_params
from .errors import DataError, FitError
from .model import Dataset, ModelSpec, build_design

ETA_CLAMP = 35.0
ADAPT_BATCH = 50
ADAPT_TARGET = 0.44
SCALE_MOVE_REPS = 3


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 4
    iterations: int = 5000
    burn_in: int = 2500
    thin: int = 1
    seed: int = 0
    adapt_window: int = 500

    def __post_init__(self):
        if self.chains < 1:
            raise DataError("chains must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise DataError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise DataError("thin must be >= 1")

    @property
    def retained_per_chain(self):
        return len(range(self.burn_in, self.iterations, self.thin))


@dataclass
class PosteriorFit:
    """Retained draws with named blocks plus cached Gaussian-approx moments."""

    draws: np.ndarray               # (chains * retained, n_params)
    columns: tuple
    chains: int
    spec: ModelSpec
    terms: tuple
    fixed_names: tuple
    config: McmcConfig
    flags: set
    p: int                          # number of fixed effects; theta starts here
    q: int
    theta_mean: np.ndarray = field(default=None, repr=False)
    theta_cov: np.ndarray = field(default=None, repr=False)
    phi_mean: dict = field(default=None, repr=False)
    gamma_mean: dict = field(default=None, repr=False)

    def __post_init__(self):
        if not np.all(np.isfinite(self.draws)):
            raise FitError("divergent chain: non-finite draws")
        if self.theta_mean is None:
            block = self.draws[:, self.p : self.p + self.q]
            self.theta_mean = block.mean(axis=0) if self.q else np.zeros(0)
            if self.draws.shape[0] > 1 and self.q:
                self.theta_cov = np.cov(block, rowvar=False, ddof=1).reshape(self.q, self.q)
            else:
                self.theta_cov = np.zeros((self.q, self.q))
        if self.phi_mean is None:
            out = {
                name.replace("phi:", ""): float(self.draws[:, i].mean())
                for i, name in enumerate(self.columns[: self.p])
            }
            if "sigma2" in self.columns:
                out["sigma2"] = float(self.draws[:, self.columns.index("sigma2")].mean())
            self.phi_mean = out
        if self.gamma_mean is None:
            gm = {}
            for t in self.terms:
                gm[t.label] = {
                    pname: float(self.draws[:, self.column_index(f"gamma:{t.label}:{pname}")].mean())
                    for pname in T.gamma_param_names(t)
                }
            self.gamma_mean = gm

    def term(self, label):
        for t in self.terms:
            if t.label == label:
                return t
        raise DataError(f"unknown random term {label!r}")

    def column_index(self, name):
        try:
            return self.columns.index(name)
        except ValueError:
            raise DataError(f"unknown parameter column {name!r}") from None

    @property
    def n_draws(self):
        return self.draws.shape[0]

    def by_chain(self):
        return self.draws.reshape(self.chains, -1, self.draws.shape[1])

    @property
    def phi(self):
        """Posterior means of the fixed effects + sigma2 (when present)."""
        return self.phi_mean

    @property
    def gamma(self):
        """Posterior means of every term's covariance parameters."""
        return self.gamma_mean

    def posterior_moments(self, idx):
        idx = np.asarray(idx)
        return self.theta_mean[idx].copy(), self.theta_cov[np.ix_(idx, idx)].copy()

    def summaries(self):
        qs = np.percentile(self.draws, [2.5, 50.0, 97.5], axis=0)
        return {
            name: {
                "mean": float(self.draws[:, i].mean()),
                "sd": float(self.draws[:, i].std(ddof=1)) if self.n_draws > 1 else 0.0,
                "q2.5": float(qs[0, i]),
                "median": float(qs[1, i]),
                "q97.5": float(qs[2, i]),
            }
            for i, name in enumerate(self.columns)
        }


def gaussian_approx(fit: PosteriorFit, block=None):
    """Gaussian approximation (theta_hat, omega_hat, gamma_hat, flags) of a
    theta block: column means, sample covariance (divisor n-1), and the
    posterior means of the owning term's covariance parameters.

    ``block`` is a term label, a "label:column" component, or None for the
    full stacked theta.
    """
    if fit.n_draws < 10:
        raise DataError(f"need >= 10 retained draws, have {fit.n_draws}")
    flags = set()
    if block is None:
        idx = np.arange(fit.q)
        gamma_hat = fit.gamma
    else:
        label, col = split_selector(fit, block)
        t = fit.term(label)
        idx = t.indices if col is None else t.column_indices(col)
        gamma_hat = fit.gamma[label]
    theta_hat, omega_hat = fit.posterior_moments(idx)
    if idx.size:
        try:
            np.linalg.cholesky(omega_hat)
        except np.linalg.LinAlgError:
            flags.add("singular")
    return theta_hat, omega_hat, gamma_hat, flags


def split_selector(fit, selector):
    """Resolve 'label' or 'label:column' against the fit's terms."""
    labels = {t.label for t in fit.terms}
    if selector in labels:
        return selector, None
    if ":" in selector:
        label, col = selector.rsplit(":", 1)
        if label in labels:
            return label, col
    raise DataError(
        f"unknown term {selector!r}; available: {sorted(labels)} "
        "(append ':column' to test one design column)"
    )


class _StepAdapter:
    """Per-parameter random-walk scales, tuned toward 0.44 acceptance."""

    def __init__(self, n, burn_in, adapt_window, init=0.5):
        self.log_step = np.full(n, math.log(init))
        self.acc = np.zeros(n)
        self.tries = np.zeros(n)
        self.post_acc = np.zeros(n)
        self.post_tries = np.zeros(n)
        self.freeze_at = max(0, burn_in - adapt_window)
        self.burn_in = burn_in

    @property
    def steps(self):
        return np.exp(self.log_step)

    def record(self, accepted, it, idx=None):
        sl = slice(None) if idx is None else idx
        if it < self.burn_in:
            self.acc[sl] += accepted
            self.tries[sl] += 1
        else:
            self.post_acc[sl] += accepted
            self.post_tries[sl] += 1

    def maybe_adapt(self, it):
        if it >= self.freeze_at or (it + 1) % ADAPT_BATCH:
            return
        rate = np.where(self.tries > 0, self.acc / np.maximum(self.tries, 1), ADAPT_TARGET)
        self.log_step += np.clip(2.0 * (rate - ADAPT_TARGET), -0.7, 0.7)
        np.clip(self.log_step, math.log(1e-6), math.log(50.0), out=self.log_step)
        self.acc[:] = 0.0
        self.tries[:] = 0.0

    def post_rate(self):
        with np.errstate(invalid="ignore"):
            return self.post_acc / np.maximum(self.post_tries, 1.0)


def _draw_variance_flat(rng, m, s, var_scale):
    """One draw from p(v) ∝ v^{-m/2} exp(-s/(2v)) (flat prior on the variance).

    Proper for m > 2 (inverse gamma); otherwise an inverse-CDF draw on a
    log-spaced grid over [1e-12, 1e6] * var_scale.
    """
    floor = 1e-12 * max(var_scale, 1e-12)
    shape = 0.5 * m - 1.0
    if shape > 0 and s > 0:
        u = rng.gamma(shape, 2.0 / s)
        if u > 0 and math.isfinite(u):
            return max(1.0 / u, floor)
    lo = math.log(floor)
    hi = math.log(1e6 * max(var_scale, 1e-12))
    grid = np.linspace(lo, hi, 512)
    v = np.exp(grid)
    logd = (1.0 - 0.5 * m) * grid - s / (2.0 * v)  # includes dv = v d(log v)
    logd -= logd.max()
    w = np.exp(logd)
    cdf = np.cumsum(w)
    total = cdf[-1]
    if not math.isfinite(total) or total <= 0:
        raise FitError(f"variance conditional is degenerate (m={m}, s={s})")
    u = rng.uniform(0.0, total)
    i = int(np.searchsorted(cdf, u))
    return float(v[min(i, len(v) - 1)])


class _GammaState:
    """Per-term covariance parameters plus cached structure-dependent pieces."""

    def __init__(self, term, init_scale, car_alpha, estimate_alpha, rng):
        self.term = term
        self.estimate_alpha = estimate_alpha
        k = term.kind
        if k in ("diagonal", "correlated"):
            self.g = {f"tau2[{c}]": init_scale**2 for c in term.design_columns}
            if k == "correlated":
                self.g["rho"] = 0.0
        elif k == "car":
            self.g = {"tau2": init_scale**2, "alpha": car_alpha}
            self._refresh_car()
        else:
            rng_x = float(np.ptp(term.gp_inputs)) or 1.0
            self.g = {"tau": init_scale, "lambda": rng_x / 4.0}
            self.lam_hi = 10.0 * rng_x
            self._refresh_gp()
        n_mh = {"diagonal": 0, "correlated": 3, "car": 1 if estimate_alpha else 0, "gp-se": 1}[k]
        self.n_mh = n_mh

    def _refresh_car(self):
        self.q_unit = covstruct.car_unit_precision(self.term.adjacency, self.g["alpha"])
        self.logdet_unit = covstruct.car_logdet_unit(self.term.adjacency, self.g["alpha"])

    def _refresh_gp(self):
        k_unit = covstruct.gp_se_kernel(
            1.0, self.g["lambda"], self.term.gp_inputs, jitter=covstruct.GP_JITTER
        )
        L, ld, _ = covstruct.psd_chol(k_unit)
        self.gp_chol = L
        self.logdet_unit = ld

    # -- precision pieces used by the MWG prior deltas ------------------
    def unit_precision(self):
        if self.term.kind == "car":
            return self.q_unit
        if self.term.kind == "gp-se":
            L = self.gp_chol
            inv = sla.cho_solve((L, True), np.eye(L.shape[0]))
            return 0.5 * (inv + inv.T)
        raise DataError("unit_precision is only defined for car/gp terms")

    def structured_tau2(self):
        return self.g["tau2"] if self.term.kind == "car" else self.g["tau"] ** 2

    def quad_structured(self, vec):
        """vec' Psi_unit^{-1} vec for the unit-variance structured matrix."""
        if self.term.kind == "car":
            return float(vec @ (self.q_unit @ vec))
        w = sla.solve_triangular(self.gp_chol, vec, lower=True)
        return float(w @ w)

    def update(self, rng, theta, fixed, adapter, adapter_base, it, var_scale):
        """Draw this term's covariance parameters given theta."""
        t = self.term
        fixed = fixed or {}
        V = T.level_view(theta, t)
        if t.kind == "diagonal":
            for ci, c in enumerate(t.design_columns):
                key = f"tau2[{c}]"
                if key in fixed:
                    self.g[key] = fixed[key]
                    continue
                s = float(V[:, ci] @ V[:, ci])
                self.g[key] = _draw_variance_flat(rng, t.n_levels, s, var_scale)
        elif t.kind == "correlated":
            self._update_correlated(rng, V, fixed, adapter, adapter_base, it, var_scale)
        elif t.kind == "car":
            if "tau2" in fixed:
                self.g["tau2"] = fixed["tau2"]
            else:
                s = float(V[:, 0] @ (self.q_unit @ V[:, 0]))
                self.g["tau2"] = _draw_variance_flat(rng, t.n_levels, s, var_scale)
            if self.estimate_alpha and "alpha" not in fixed:
                self._update_alpha(rng, V[:, 0], adapter, adapter_base, it)
        else:
            if "tau" in fixed:
                self.g["tau"] = fixed["tau"]
            else:
                w = sla.solve_triangular(self.gp_chol, V[:, 0], lower=True)
                s = float(w @ w)
                self.g["tau"] = math.sqrt(
                    _draw_variance_flat(rng, t.n_levels, s, var_scale)
                )
            if "lambda" not in fixed:
                self._update_lambda(rng, V[:, 0], adapter, adapter_base, it)

    def _update_correlated(self, rng, V, fixed, adapter, base, it, var_scale):
        J = self.term.n_levels
        c1, c2 = self.term.design_columns
        s11 = float(V[:, 0] @ V[:, 0])
        s22 = float(V[:, 1] @ V[:, 1])
        s12 = float(V[:, 0] @ V[:, 1])
        lo = math.log(1e-9 * max(math.sqrt(var_scale), 1e-9))
        hi = math.log(1e4 * max(math.sqrt(var_scale), 1e-9))

        def logpost(u1, u2, v):
            rho = math.tanh(v)
            t1, t2 = math.exp(u1), math.exp(u2)
            one = 1.0 - rho * rho
            quad = (s11 / t1**2 - 2.0 * rho * s12 / (t1 * t2) + s22 / t2**2) / one
            # flat prior on (tau1^2, tau2^2, rho) + transform jacobians
            return (
                -J * (u1 + u2)
                - 0.5 * J * math.log(one)
                - 0.5 * quad
                + 2.0 * (u1 + u2)
                + math.log(one)
            )

        u1 = 0.5 * math.log(self.g[f"tau2[{c1}]"])
        u2 = 0.5 * math.log(self.g[f"tau2[{c2}]"])
        v = math.atanh(min(max(self.g["rho"], -0.999999), 0.999999))
        cur = logpost(u1, u2, v)
        steps = adapter.steps
        for k, name in enumerate((f"tau2[{c1}]", f"tau2[{c2}]", "rho")):
            if name in fixed:
                if name == "rho":
                    v = math.atanh(min(max(fixed[name], -0.999999), 0.999999))
                elif k == 0:
                    u1 = 0.5 * math.log(fixed[name])
                else:
                    u2 = 0.5 * math.log(fixed[name])
                cur = logpost(u1, u2, v)
                continue
            prop = [u1, u2, v]
            prop[k] += rng.normal() * steps[base + k]
            if k < 2 and not lo <= prop[k] <= hi:
                adapter.record(0.0, it, base + k)
                continue
            new = logpost(*prop)
            if math.log(rng.uniform()) < new - cur:
                u1, u2, v = prop
                cur = new
                adapter.record(1.0, it, base + k)
            else:
                adapter.record(0.0, it, base + k)
        self.g[f"tau2[{c1}]"] = math.exp(2.0 * u1)
        self.g[f"tau2[{c2}]"] = math.exp(2.0 * u2)
        self.g["rho"] = math.tanh(v)

    def _update_alpha(self, rng, vec, adapter, base, it):
        tau2 = self.g["tau2"]
        alpha = self.g["alpha"]

        def logpost(a, q_unit, logdet_unit):
            quad = float(vec @ (q_unit @ vec)) / tau2
            # flat prior on alpha in (0, 0.999); logit jacobian
            return -0.5 * (logdet_unit + quad) + math.log(a) + math.log(1.0 - a)

        cur = logpost(alpha, self.q_unit, self.logdet_unit)
        z = math.log(alpha / (1.0 - alpha)) + rng.normal() * adapter.steps[base]
        a_new = 1.0 / (1.0 + math.exp(-z))
        if not a_new < 0.999:
            adapter.record(0.0, it, base)
            return
        q_new = covstruct.car_unit_precision(self.term.adjacency, a_new)
        ld_new = covstruct.car_logdet_unit(self.term.adjacency, a_new)
        if math.log(rng.uniform()) < logpost(a_new, q_new, ld_new) - cur:
            self.g["alpha"] = a_new
            self.q_unit, self.logdet_unit = q_new, ld_new
            adapter.record(1.0, it, base)
        else:
            adapter.record(0.0, it, base)

    def _update_lambda(self, rng, vec, adapter, base_idx, it):
        tau2 = self.g["tau"] ** 2

        def logpost(L, logdet_unit, u):
            w = sla.solve_triangular(L, vec, lower=True)
            # flat prior on lambda in (0, lam_hi); log jacobian = u
            return -0.5 * (logdet_unit + float(w @ w) / tau2) + u

        u_cur = math.log(self.g["lambda"])
        cur = logpost(self.gp_chol, self.logdet_unit, u_cur)
        u_new = u_cur + rng.normal() * adapter.steps[base_idx]
        if not u_new < math.log(self.lam_hi):
            adapter.record(0.0, it, base_idx)
            return
        try:
            k_unit = covstruct.gp_se_kernel(
                1.0, math.exp(u_new), self.term.gp_inputs, jitter=covstruct.GP_JITTER
            )
            L_new, ld_new, _ = covstruct.psd_chol(k_unit)
        except Exception:
            adapter.record(0.0, it, base_idx)
            return
        if math.log(rng.uniform()) < logpost(L_new, ld_new, u_new) - cur:
            self.g["lambda"] = math.exp(u_new)
            self.gp_chol, self.logdet_unit = L_new, ld_new
            adapter.record(1.0, it, base_idx)
        else:
            adapter.record(0.0, it, base_idx)


def _columns_for(design, term_infos, gaussian):
    cols = [f"phi:{n}" for n in design.fixed_names]
    for t in term_infos:
        cols.extend(f"theta:{n}" for n in t.coef_names())
    for t in term_infos:
        cols.extend(f"gamma:{t.label}:{p}" for p in T.gamma_param_names(t))
    if gaussian:
        cols.append("sigma2")
    return tuple(cols)


def _gamma_row(gstates):
    vals = []
    for gs in gstates:
        vals.extend(gs.g[p] for p in T.gamma_param_names(gs.term))
    return vals


def _scale_move_targets(term):
    """(key, column indices within the term, is_sd) per variance component."""
    out = []
    d = len(term.design_columns)
    if term.kind in ("diagonal", "correlated"):
        for ci, c in enumerate(term.design_columns):
            out.append((f"tau2[{c}]", np.arange(ci, term.n_coefs, d), False))
    elif term.kind == "car":
        out.append(("tau2", np.arange(term.n_coefs), False))
    else:
        out.append(("tau", np.arange(term.n_coefs), True))
    return out


def gibbs_lmm(
    spec: ModelSpec,
    data: Dataset,
    config: McmcConfig | None = None,
    adjacency=None,
    fixed_params: dict | None = None,
    car_alpha: float = 0.95,
    estimate_car_alpha: bool = False,
) -> PosteriorFit:
    """Gibbs sampler for Gaussian LMMs under flat variance priors.

    ``fixed_params`` pins parameters instead of sampling them, e.g.
    ``{"sigma2": 1.0, "g": {"tau2[1]": 2.0}}`` (used by conjugate checks).
    """
    if spec.family != "gaussian-identity":
        raise DataError("gibbs_lmm requires the gaussian-identity family")
    config = config or McmcConfig()
    fixed_params = fixed_params or {}
    design = build_design(spec, data)
    term_infos = _attach_structures(design, adjacency)
    y = design.y.astype(float)
    if design.offset is not None:
        y = y - design.offset
    X, Z = design.X, design.Z
    n, p = X.shape
    q = Z.shape[1]
    XtX, Xty = X.T @ X, X.T @ y
    if q:
        XtZ = np.asarray((Z.T @ X)).T
        ZtZ = np.asarray((Z.T @ Z).todense())
        Zty = np.asarray(Z.T @ y).ravel()
    else:
        XtZ = np.zeros((p, 0))
        ZtZ = np.zeros((0, 0))
        Zty = np.zeros(0)
    yty = float(y @ y)
    var_y = max(float(np.var(y)), 1e-12)
    sigma2_floor = 1e-12 * var_y

    columns = _columns_for(design, term_infos, gaussian=True)
    retained = config.retained_per_chain
    all_draws = np.empty((config.chains * retained, len(columns)))
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    flags = set()

    def ssr_of(phi, theta):
        v = (
            yty
            - 2.0 * phi @ Xty
            + phi @ (XtX @ phi)
        )
        if q:
            v += (
                -2.0 * theta @ Zty
                + 2.0 * phi @ (XtZ @ theta)
                + theta @ (ZtZ @ theta)
            )
        return max(float(v), 1e-12 * max(yty, 1e-12))

    # per-component cross-product slices for O(J q) scale-move deltas
    scale_slices = []
    for t in term_infos:
        for key, rel_idx, is_sd in _scale_move_targets(t):
            idx = t.offset + rel_idx
            scale_slices.append(
                (t.label, key, idx, is_sd, ZtZ[np.ix_(idx, idx)], ZtZ[idx, :],
                 Zty[idx], XtZ[:, idx])
            )

    for chain, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        gstates = [
            _GammaState(t, math.sqrt(var_y) * 0.5, car_alpha, estimate_car_alpha, rng)
            for t in term_infos
        ]
        gstate_of = {gs.term.label: gs for gs in gstates}
        n_mh = sum(gs.n_mh for gs in gstates)
        n_scale = len(scale_slices)
        adapter = _StepAdapter(n_mh + n_scale, config.burn_in, config.adapt_window)
        sigma2 = fixed_params.get("sigma2", var_y * 0.5 + sigma2_floor)
        phi = np.zeros(p)
        theta = np.zeros(q)
        A_base = np.empty((p + q, p + q))
        A_base[:p, :p] = XtX
        if q:
            A_base[:p, p:] = XtZ
            A_base[p:, :p] = XtZ.T
            A_base[p:, p:] = ZtZ
        b_base = np.concatenate([Xty, Zty])
        A = np.empty_like(A_base)
        row = chain * retained
        for it in range(config.iterations):
            # (phi, theta) | variances: joint Gaussian
            np.multiply(A_base, 1.0 / sigma2, out=A)
            for gs in gstates:
                T.add_ginv(A, p, gs.term, gs.g)
            b = b_base / sigma2
            try:
                cA = sla.cho_factor(A, lower=True, check_finite=False)
            except sla.LinAlgError as exc:
                raise FitError("divergent chain: conditional precision not PD") from exc
            mean = sla.cho_solve(cA, b, check_finite=False)
            z = rng.standard_normal(p + q)
            draw = mean + sla.solve_triangular(
                cA[0], z, lower=True, trans="T", check_finite=False
            )
            phi, theta = draw[:p], draw[p:]

            if "sigma2" in fixed_params:
                sigma2 = float(fixed_params["sigma2"])
            else:
                sigma2 = max(
                    _draw_variance_flat(rng, n, ssr_of(phi, theta), var_y), sigma2_floor
                )

            mh_base = 0
            for gs in gstates:
                gs.update(
                    rng, theta, fixed_params.get(gs.term.label), adapter, mh_base, it, var_y
                )
                mh_base += gs.n_mh

            # interweaving scale moves: propose (theta_c, tau2_c) -> (c theta_c, c^2 tau2_c);
            # repeated a few times -- they are cheap (O(J q) SSR deltas) and do the
            # heavy lifting for near-zero variance components, whose plain Gibbs
            # mixing is critically slow
            for _rep in range(SCALE_MOVE_REPS):
                for k, (label, key, idx, is_sd, zz_cc, zz_rows, zty_c, xtz_c) in enumerate(
                    scale_slices
                ):
                    if key in (fixed_params.get(label) or {}):
                        continue
                    sm = n_mh + k
                    eps = rng.normal() * adapter.steps[sm]
                    c = math.exp(eps)
                    u = theta[idx]
                    delta = (c - 1.0) * u
                    d_ssr = (
                        -2.0 * (delta @ zty_c)
                        + 2.0 * (delta @ (xtz_c.T @ phi))
                        + 2.0 * (delta @ (zz_rows @ theta))
                        + delta @ (zz_cc @ delta)
                    )
                    if math.log(rng.uniform()) < -d_ssr / (2.0 * sigma2) + 2.0 * eps:
                        theta[idx] = c * u
                        gs = gstate_of[label]
                        if is_sd:
                            gs.g[key] *= c
                        else:
                            gs.g[key] *= c * c
                        adapter.record(1.0, it, sm)
                    else:
                        adapter.record(0.0, it, sm)

            adapter.maybe_adapt(it)
            if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
                all_draws[row, :p] = phi
                all_draws[row, p : p + q] = theta
                all_draws[row, p + q : -1] = _gamma_row(gstates)
                all_draws[row, -1] = sigma2
                row += 1

    return PosteriorFit(
        draws=all_draws,
        columns=columns,
        chains=config.chains,
        spec=spec,
        terms=term_infos,
        fixed_names=design.fixed_names,
        config=config,
        flags=flags,
        p=p,
        q=q,
    )


def _pointwise_loglik(family, y, eta, clamp_flag):
    eta_c = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    if np.any(eta_c != eta):
        clamp_flag.add("clamped-linear-predictor")
    if family == "bernoulli-logit":
        return y * eta_c - np.logaddexp(0.0, eta_c)
    if family == "poisson-log":
        return y * eta_c - np.exp(eta_c)
    raise DataError(f"mwg_glmm does not support family {family!r}")


def _ll_scalar(family, yj, eta, clamp_flag):
    """Scalar pointwise log-likelihood for the sequential single-site sweeps."""
    if eta > ETA_CLAMP or eta < -ETA_CLAMP:
        clamp_flag.add("clamped-linear-predictor")
        eta = ETA_CLAMP if eta > 0 else -ETA_CLAMP
    if family == "bernoulli-logit":
        return yj * eta - math.log1p(math.exp(-abs(eta))) - max(eta, 0.0)
    return yj * eta - math.exp(eta)


def mwg_glmm(
    spec: ModelSpec,
    data: Dataset,
    config: McmcConfig | None = None,
    adjacency=None,
    fixed_params: dict | None = None,
    car_alpha: float = 0.95,
    estimate_car_alpha: bool = False,
) -> PosteriorFit:
    """Metropolis-within-Gibbs for bernoulli-logit / poisson-log GLMMs.

    theta and phi move by single-site random walks on the linear predictor
    (the offset enters additively); variance parameters update exactly as in
    :func:`gibbs_lmm`.  Proposals for all levels of one design column are
    evaluated simultaneously -- levels partition the rows, so the sites are
    conditionally independent and the sweep stays a valid single-site scan.
    """
    if spec.family not in ("bernoulli-logit", "poisson-log"):
        raise DataError("mwg_glmm requires bernoulli-logit or poisson-log")
    config = config or McmcConfig()
    fixed_params = fixed_params or {}
    design = build_design(spec, data)
    term_infos = _attach_structures(design, adjacency)
    y = design.y.astype(float)
    X = design.X
    n, p = X.shape
    q = design.q
    offset = design.offset if design.offset is not None else np.zeros(n)
    flags: set = set()

    # per-term column structure for vectorized level sweeps
    term_cols = []
    unit_flags = []
    for t, rt in zip(term_infos, spec.random_terms):
        cols = []
        if t.kind in ("diagonal", "correlated"):
            codes = _codes_for(design, spec, data, t)
            for ci, cname in enumerate(t.design_columns):
                zvals = np.ones(n) if cname == "1" else data.numeric(cname)
                cols.append((ci, codes, zvals))
        term_cols.append(cols)
        unit_flags.append(rt.group == "unit")

    columns = _columns_for(design, term_infos, gaussian=False)
    retained = config.retained_per_chain
    all_draws = np.empty((config.chains * retained, len(columns)))
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    var_scale = 1.0  # latent logit/log scale

    for chain, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        gstates = [
            _GammaState(t, 0.5, car_alpha, estimate_car_alpha, rng) for t in term_infos
        ]
        n_mh = sum(gs.n_mh for gs in gstates)
        n_scale = sum(len(_scale_move_targets(t)) for t in term_infos)
        n_site = p + q
        adapter = _StepAdapter(
            n_site + n_mh + n_scale, config.burn_in, config.adapt_window, init=0.4
        )
        phi = np.zeros(p)
        theta = np.zeros(q)
        eta = offset + X @ phi  # theta = 0
        ll = _pointwise_loglik(spec.family, y, eta, flags)
        row = chain * retained
        for it in range(config.iterations):
            steps = adapter.steps
            # fixed effects, one site at a time
            for i in range(p):
                delta = rng.normal() * steps[i]
                eta_new = eta + X[:, i] * delta
                ll_new = _pointwise_loglik(spec.family, y, eta_new, flags)
                if math.log(rng.uniform()) < float(ll_new.sum() - ll.sum()):
                    phi[i] += delta
                    eta, ll = eta_new, ll_new
                    adapter.record(1.0, it, i)
                else:
                    adapter.record(0.0, it, i)

            for t, gs, cols in zip(term_infos, gstates, term_cols):
                base = p + t.offset
                d = len(t.design_columns)
                if t.kind in ("diagonal", "correlated"):
                    V = T.level_view(theta, t)
                    if t.kind == "diagonal":
                        psi_inv = np.diag(
                            [1.0 / gs.g[f"tau2[{c}]"] for c in t.design_columns]
                        )
                    else:
                        psi = T.level_cov(t, gs.g)
                        psi_inv = np.linalg.inv(psi)
                    for ci, codes, zvals in cols:
                        site_idx = base + ci + d * np.arange(t.n_levels)
                        delta = rng.normal(size=t.n_levels) * steps[site_idx]
                        eta_new = eta + zvals * delta[codes]
                        ll_new = _pointwise_loglik(spec.family, y, eta_new, flags)
                        d_lev = np.bincount(codes, weights=ll_new - ll, minlength=t.n_levels)
                        cur = V[:, ci]
                        cross = V @ psi_inv[ci] - cur * psi_inv[ci, ci]
                        d_prior = -0.5 * psi_inv[ci, ci] * (
                            (cur + delta) ** 2 - cur**2
                        ) - delta * cross
                        acc = np.log(rng.uniform(size=t.n_levels)) < d_lev + d_prior
                        if acc.any():
                            V[:, ci] = np.where(acc, cur + delta, cur)
                            keep = np.where(acc[codes], delta[codes], 0.0)
                            eta = eta + zvals * keep
                            ll = _pointwise_loglik(spec.family, y, eta, flags)
                        adapter.record(acc.astype(float), it, site_idx)
                else:
                    # structured unit-level term: prior couples sites, go sequentially
                    prec_unit = gs.unit_precision()
                    tau2 = gs.structured_tau2()
                    vec = theta[t.offset : t.offset + t.n_coefs]
                    w = prec_unit @ vec
                    deltas = rng.normal(size=t.n_levels) * steps[base : base + t.n_levels]
                    logu = np.log(rng.uniform(size=t.n_levels))
                    for j in range(t.n_levels):
                        delta = deltas[j]
                        e_new = eta[j] + delta
                        d_ll = _ll_scalar(spec.family, y[j], e_new, flags) - _ll_scalar(
                            spec.family, y[j], eta[j], flags
                        )
                        d_prior = -(2.0 * delta * w[j] + delta * delta * prec_unit[j, j]) / (
                            2.0 * tau2
                        )
                        if logu[j] < d_ll + d_prior:
                            vec[j] += delta
                            w += prec_unit[:, j] * delta
                            eta[j] = e_new
                            adapter.record(1.0, it, base + j)
                        else:
                            adapter.record(0.0, it, base + j)
                    ll = _pointwise_loglik(spec.family, y, eta, flags)

            # exact likelihood-invariant reparameterization sweeps
            _centering_sweep(rng, phi, theta, gstates, list(design.fixed_names))
            if sum(unit_flags) >= 2:
                _unit_split_sweep(rng, theta, gstates, unit_flags)

            mh_base = p + q
            for gs in gstates:
                gs.update(
                    rng, theta, fixed_params.get(gs.term.label), adapter, mh_base, it, var_scale
                )
                mh_base += gs.n_mh

            # scale moves on (theta_c, tau_c)
            sm_base = p + q + n_mh
            for t, gs, cols in zip(term_infos, gstates, term_cols):
                tfixed = fixed_params.get(t.label) or {}
                for comp, (key, rel_idx, is_sd) in enumerate(_scale_move_targets(t)):
                    if key in tfixed:
                        sm_base += 1
                        continue
                    idx = t.offset + rel_idx
                    eps = rng.normal() * adapter.steps[sm_base]
                    c = math.exp(eps)
                    dvec = theta[idx] * (c - 1.0)
                    if t.kind in ("diagonal", "correlated"):
                        _, codes, zvals = cols[comp]
                        eta_new = eta + zvals * dvec[codes]
                    else:
                        eta_new = eta + dvec
                    ll_new = _pointwise_loglik(spec.family, y, eta_new, flags)
                    if math.log(rng.uniform()) < float(ll_new.sum() - ll.sum()) + 2.0 * eps:
                        theta[idx] *= c
                        if is_sd:
                            gs.g[key] *= c
                        else:
                            gs.g[key] *= c * c
                        eta, ll = eta_new, ll_new
                        adapter.record(1.0, it, sm_base)
                    else:
                        adapter.record(0.0, it, sm_base)
                    sm_base += 1

            adapter.maybe_adapt(it)
            if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
                all_draws[row, :p] = phi
                all_draws[row, p : p + q] = theta
                all_draws[row, p + q :] = _gamma_row(gstates)
                row += 1

        rates = adapter.post_rate()[: p + q]
        if np.any(rates < 0.05):
            flags.add("low-acceptance")

    return PosteriorFit(
        draws=all_draws,
        columns=columns,
        chains=config.chains,
        spec=spec,
        terms=term_infos,
        fixed_names=design.fixed_names,
        config=config,
        flags=flags,
        p=p,
        q=q,
    )


def _codes_for(design, spec, data, term_info):
    for rt in spec.random_terms:
        if rt.label == term_info.label:
            if rt.group == "unit":
                return np.arange(design.n, dtype=np.int64)
            return data.categorical(rt.group).codes
    raise DataError(f"term {term_info.label!r} not in spec")


def _term_full_precision(gs):
    """Precision of the whole term block at the current gamma."""
    t = gs.term
    if t.kind in ("diagonal", "correlated"):
        psi_inv = np.linalg.inv(T.level_cov(t, gs.g))
        return np.kron(np.eye(t.n_levels), psi_inv)
    return gs.unit_precision() / gs.structured_tau2()


def _centering_sweep(rng, phi, theta, gstates, fixed_names):
    """Exact Gibbs redraw of (fixed coefficient, matching random column).

    The linear predictor depends on u_j = phi_f + v_j only, so phi_f | u has
    a closed Gaussian conditional under the term's prior; eta never changes.
    Breaks the additive confounding that stalls single-site scans.
    """
    for gs in gstates:
        t = gs.term
        for ci, cname in enumerate(t.design_columns):
            fname = "(Intercept)" if cname == "1" else cname
            if fname not in fixed_names:
                continue
            fi = fixed_names.index(fname)
            V = T.level_view(theta, t)
            u = phi[fi] + V[:, ci]
            if t.kind in ("diagonal", "correlated"):
                psi = T.level_cov(t, gs.g)
                if psi.shape[0] == 1:
                    cond_mean = np.zeros(t.n_levels)
                    cond_var = psi[0, 0]
                else:
                    other = [k for k in range(psi.shape[0]) if k != ci]
                    s_nn = psi[np.ix_(other, other)]
                    s_cn = psi[ci, other]
                    coef = np.linalg.solve(s_nn, s_cn)
                    cond_mean = V[:, other] @ coef
                    cond_var = float(psi[ci, ci] - s_cn @ coef)
                prec = t.n_levels / max(cond_var, 1e-300)
                mean = float(np.mean(u - cond_mean))
            else:
                q = gs.unit_precision() / gs.structured_tau2()
                q1 = q.sum(axis=1)
                prec = float(q1.sum())
                mean = float(q1 @ u) / prec
            phi_new = mean + rng.normal() / math.sqrt(prec)
            phi[fi] = phi_new
            V[:, ci] = u - phi_new


def _unit_split_sweep(rng, theta, gstates, unit_flags):
    """Exact Gibbs redraw of the split between two unit-level random terms.

    Their sum enters the likelihood; conditional on it the split is Gaussian
    with precision Q_a + Q_b.  eta never changes.
    """
    units = [gs for gs, is_unit in zip(gstates, unit_flags) if is_unit]
    for i in range(len(units)):
        for j in range(i + 1, len(units)):
            ga, gb = units[i], units[j]
            ta, tb = ga.term, gb.term
            qa = _term_full_precision(ga)
            qb = _term_full_precision(gb)
            va = theta[ta.offset : ta.offset + ta.n_coefs]
            vb = theta[tb.offset : tb.offset + tb.n_coefs]
            s = va + vb
            try:
                cp = sla.cho_factor(qa + qb, lower=True)
            except sla.LinAlgError:
                continue
            mean = sla.cho_solve(cp, qb @ s)
            z = rng.standard_normal(s.shape[0])
            va_new = mean + sla.solve_triangular(cp[0], z, lower=True, trans="T")
            va[:] = va_new
            vb[:] = s - va_new


def diagnostics(fit: PosteriorFit):
    """Split R-hat and bulk effective sample size per parameter.

    Warnings fire at R-hat > 1.05 or ESS < 100; a single chain reports
    R-hat as nan (unavailable) but still estimates ESS.
    """
    by_chain = fit.by_chain()
    report = {}
    warnings = []
    for j, name in enumerate(fit.columns):
        series = by_chain[:, :, j]
        rhat = split_rhat(series) if fit.chains >= 2 else float("nan")
        ess = bulk_ess(series)
        report[name] = {"rhat": rhat, "ess": ess}
        if np.isfinite(rhat) and rhat > 1.05:
            warnings.append(f"{name}: R-hat {rhat:.3f} > 1.05")
        elif math.isinf(rhat):
            warnings.append(f"{name}: chains disagree (R-hat inf)")
        if ess < 100:
            warnings.append(f"{name}: ESS {ess:.0f} < 100")
    return {"parameters": report, "warnings": warnings}


def split_rhat(series) -> float:
    """Potential scale reduction on split chains; series is (chains, draws)."""
    m, l = series.shape
    half = l // 2
    if half < 2:
        return float("nan")
    splits = np.concatenate([series[:, :half], series[:, half : 2 * half]], axis=0)
    means = splits.mean(axis=1)
    within = splits.var(axis=1, ddof=1).mean()
    between = half * means.var(ddof=1)
    if within == 0.0:
        return 1.0 if between == 0.0 else float("inf")
    var_plus = (half - 1) / half * within + between / half
    return float(np.sqrt(var_plus / within))


def _rank_normalize(series):
    flat = series.ravel()
    ranks = np.argsort(np.argsort(flat, kind="stable"), kind="stable") + 1.0
    z = ndtri((ranks - 0.375) / (flat.size + 0.25))
    return z.reshape(series.shape)


def bulk_ess(series) -> float:
    """Rank-normalized effective sample size with Geyer's initial monotone
    positive sequence; series is (chains, draws)."""
    series = _rank_normalize(np.asarray(series, dtype=float))
    m, l = series.shape
    if l < 4:
        return float(m * l)
    centered = series - series.mean(axis=1, keepdims=True)
    nfft = int(2 ** np.ceil(np.log2(2 * l)))
    f = np.fft.rfft(centered, n=nfft, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=nfft, axis=1)[:, :l].real / l
    chain_var = series.var(axis=1, ddof=1)
    mean_var = chain_var.mean()
    var_plus = mean_var * (l - 1) / l
    if m > 1:
        var_plus += series.mean(axis=1).var(ddof=1)
    if var_plus == 0:
        return float(m * l)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    # Geyer pairs
    tail = 0.0
    prev_pair = float("inf")
    t = 1
    while t + 1 < l:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev_pair)  # enforce monotonicity
        tail += pair
        prev_pair = pair
        t += 2
    ess = m * l / (-1.0 + 2.0 * (rho[0] + tail)) if (rho[0] + tail) > 0 else m * l
    return float(min(max(ess, 1.0), m * l * 10.0))
