"""Empirical Bayes factors via the Savage-Dickey Gaussian density ratio.

For a random-effect block theta with estimated prior N(0, Psi(gamma_hat))
and Gaussian posterior approximation N(theta_hat, Omega_hat), the log Bayes
factor of "block = 0" against the unrestricted model is

    log EBF = 1/2 log|Psi| - 1/2 log|Omega| - 1/2 theta' Omega^{-1} theta

(the 2*pi normalizations cancel).  Negative values read as evidence for
keeping the random effect, positive for fixing it.  Everything runs through
triangular factorizations in log space; no explicit inverses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import terms as T
from .bayes import PosteriorFit, split_selector
from .covstruct import psd_chol
from .errors import DataError

LOG10E = np.log10(np.e)


@dataclass(frozen=True)
class EbfResult:
    log_ebf: float
    components: dict           # half_logdet_prior, neg_half_logdet_post, neg_half_quadform
    tested_terms: tuple
    flags: frozenset

    @property
    def log10_ebf(self):
        return self.log_ebf * LOG10E

    @property
    def reading(self):
        if "diagonal-approx" in self.flags or "unreliable-classical" in self.flags:
            caveat = " (interpret conservatively: classical/diagonal approximation)"
        else:
            caveat = ""
        if self.log_ebf < 0:
            return "evidence for including the random effect" + caveat
        return "evidence for fixing the random effect at zero" + caveat

    def as_dict(self):
        return {
            "tested_terms": list(self.tested_terms),
            "log_ebf": self.log_ebf,
            "log10_ebf": self.log10_ebf,
            "components": dict(self.components),
            "flags": sorted(self.flags),
            "reading": self.reading,
        }


def log_ebf(theta_hat, omega, psi):
    """Savage-Dickey log density ratio from explicit Gaussian moments.

    Returns ``(value, components, flags)``; value is bit-exactly the sum of
    the three components.  ``flags`` records any jitter retries.
    """
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    psi = np.atleast_2d(np.asarray(psi, dtype=float))
    j = theta_hat.shape[0]
    if omega.shape != (j, j) or psi.shape != (j, j):
        raise DataError(
            f"dimension mismatch: theta {theta_hat.shape}, omega {omega.shape}, psi {psi.shape}"
        )
    flags = set()
    l_psi, ld_psi, jit1 = psd_chol(psi)
    l_om, ld_om, jit2 = psd_chol(omega)
    if jit1 or jit2:
        flags.add("jittered")
    w = sla.solve_triangular(l_om, theta_hat, lower=True)
    quad = float(w @ w)
    components = {
        "half_logdet_prior": 0.5 * ld_psi,
        "neg_half_logdet_post": -0.5 * ld_om,
        "neg_half_quadform": -0.5 * quad,
    }
    value = (
        components["half_logdet_prior"]
        + components["neg_half_logdet_post"]
        + components["neg_half_quadform"]
    )
    return value, components, flags


def _term_variance_keys(t, col):
    if t.kind in ("diagonal", "correlated"):
        cols = [col] if col is not None else list(t.design_columns)
        return [f"tau2[{c}]" for c in cols]
    return ["tau2"] if t.kind == "car" else ["tau"]


def _moments_and_prior(fit, selector):
    """(theta_hat, omega_block, psi, flags, idx) for one term or component."""
    label, col = split_selector(fit, selector)
    t = fit.term(label)
    idx = t.indices if col is None else t.column_indices(col)
    gamma = fit.gamma[label]
    flags = set(fit.flags) - {"boundary", "singular"}  # re-derived per term below
    if not isinstance(fit, PosteriorFit):
        if fit.omega_is_diagonal:
            flags.add("diagonal-approx")
        floor = fit.var_floor
        tol = 1.0 + 1e-6
        for key in _term_variance_keys(t, col):
            bound = floor if key.startswith("tau2") else np.sqrt(floor)
            if gamma[key] <= bound * tol:
                flags |= {"boundary", "unreliable-classical"}
        if "singular" in fit.flags and t.kind == "correlated":
            flags |= {"boundary", "unreliable-classical"}
    theta_hat, omega = fit.posterior_moments(idx)
    psi = T.component_prior_cov(t, gamma, col)
    if t.kind == "car":
        flags.add(f"car-alpha={gamma['alpha']:g}")
    return theta_hat, omega, psi, flags, idx


def ebf_for_term(fit, term: str) -> EbfResult:
    """EBF for one random term (or one design column, "label:column").

    The posterior block is the marginal over that term's coefficients
    (everything else is nuisance); the prior is the term's structured
    covariance at the estimated gamma, Kronecker over levels for the
    diagonal/correlated kinds.
    """
    theta_hat, omega, psi, flags, _ = _moments_and_prior(fit, term)
    value, components, f2 = log_ebf(theta_hat, omega, psi)
    return EbfResult(
        log_ebf=value,
        components=components,
        tested_terms=(term,),
        flags=frozenset(flags | f2),
    )


def ebf_joint(fit, terms) -> EbfResult:
    """Joint EBF that all listed random-effect blocks are simultaneously zero.

    Requires the joint posterior covariance across blocks, so it refuses
    diagonal-approximation classical fits (their cross-term covariances were
    never computed).
    """
    terms = list(terms)
    if len(terms) < 2:
        raise DataError("ebf_joint needs at least two terms (use ebf_for_term otherwise)")
    if getattr(fit, "omega_is_diagonal", False):
        raise DataError(
            "joint EBF is unavailable for a diagonal-approximation classical fit: "
            "cross-term posterior covariances were discarded; refit with the full "
            "conditional covariance"
        )
    idx_all = []
    psis = []
    flags = set()
    for sel in terms:
        theta_hat, omega, psi, f, idx = _moments_and_prior(fit, sel)
        idx_all.append(idx)
        psis.append(psi)
        flags |= f
    idx = np.concatenate(idx_all)
    if len(np.unique(idx)) != len(idx):
        raise DataError("joint EBF selectors overlap")
    theta_hat, omega = fit.posterior_moments(idx)
    psi = sla.block_diag(*psis)
    value, components, f2 = log_ebf(theta_hat, omega, psi)
    return EbfResult(
        log_ebf=value,
        components=components,
        tested_terms=tuple(terms),
        flags=frozenset(flags | f2),
    )
