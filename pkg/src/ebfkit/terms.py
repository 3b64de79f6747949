"""Assembly of per-term covariance structure from fitted parameters.

Random-effect coefficients are stacked level-major within each term, so a
term with J levels and d design columns occupies a J*d block and its
covariance is kron(I_J, Psi_level) for the diagonal/correlated kinds.  CAR
and GP terms have one coefficient per data row and a full structured
matrix.  The ``gamma`` dict for a term uses the keys

    diagonal    tau2[<col>] per design column
    correlated  tau2[<col>] per design column, rho
    car         tau2, alpha
    gp-se       tau, lambda
"""

from __future__ import annotations

import numpy as np

from . import covstruct
from .errors import DataError


def level_cov(term, g) -> np.ndarray:
    """Per-level d x d covariance Psi for diagonal/correlated kinds."""
    if term.kind == "diagonal":
        return np.diag([g[f"tau2[{c}]"] for c in term.design_columns])
    if term.kind == "correlated":
        if len(term.design_columns) != 2:
            raise DataError("correlated terms support exactly 2 design columns")
        c1, c2 = term.design_columns
        return covstruct.intercept_slope_cov(
            np.sqrt(g[f"tau2[{c1}]"]), np.sqrt(g[f"tau2[{c2}]"]), g["rho"]
        )
    raise DataError(f"term kind {term.kind!r} has no per-level covariance")


def full_cov(term, g) -> np.ndarray:
    """The term's full covariance over all its stacked coefficients."""
    if term.kind in ("diagonal", "correlated"):
        return np.kron(np.eye(term.n_levels), level_cov(term, g))
    if term.kind == "car":
        return covstruct.car_cov(g["tau2"], term.adjacency, g["alpha"])
    if term.kind == "gp-se":
        return covstruct.gp_se_kernel(
            g["tau"], g["lambda"], term.gp_inputs, jitter=covstruct.GP_JITTER
        )
    raise DataError(f"unknown term kind {term.kind!r}")


def component_prior_cov(term, g, col=None) -> np.ndarray:
    """Prior covariance for one design column's coefficients (or the whole term).

    For diagonal/correlated kinds the marginal prior of column c is
    tau2_c * I_J; car/gp terms only have the implicit intercept column.
    """
    if col is None:
        return full_cov(term, g)
    if term.kind in ("car", "gp-se"):
        if col != "1":
            raise DataError(f"term {term.label!r} has no design column {col!r}")
        return full_cov(term, g)
    if col not in term.design_columns:
        raise DataError(f"term {term.label!r} has no design column {col!r}")
    return covstruct.diag_cov(g[f"tau2[{col}]"], term.n_levels)


def _level_inv_logdet(term, g):
    """(Psi^{-1}, log|Psi|) for one level of a diagonal/correlated term."""
    if term.kind == "diagonal":
        v = np.array([g[f"tau2[{c}]"] for c in term.design_columns])
        if (v <= 0).any():
            raise DataError(f"term {term.label!r} has a nonpositive variance")
        return np.diag(1.0 / v), float(np.log(v).sum())
    psi = level_cov(term, g)
    det = psi[0, 0] * psi[1, 1] - psi[0, 1] * psi[1, 0]
    if det <= 0 or psi[0, 0] <= 0:
        raise DataError(f"term {term.label!r} covariance is not positive definite")
    inv = np.array([[psi[1, 1], -psi[0, 1]], [-psi[1, 0], psi[0, 0]]]) / det
    return inv, float(np.log(det))


def ginv_logdet(term, g):
    """(G_k^{-1}, log|G_k|) for this term's stacked block."""
    if term.kind in ("diagonal", "correlated"):
        psi_inv, ld = _level_inv_logdet(term, g)
        if len(term.design_columns) == 1:
            block = np.diag(np.full(term.n_levels, psi_inv[0, 0]))
        else:
            block = np.kron(np.eye(term.n_levels), psi_inv)
        return block, term.n_levels * ld
    if term.kind == "car":
        tau2, alpha = g["tau2"], g["alpha"]
        q_unit = covstruct.car_unit_precision(term.adjacency, alpha)
        ld = term.n_levels * np.log(tau2) + covstruct.car_logdet_unit(term.adjacency, alpha)
        return q_unit / tau2, ld
    if term.kind == "gp-se":
        tau, lam = g["tau"], g["lambda"]
        k_unit = covstruct.gp_se_kernel(1.0, lam, term.gp_inputs, jitter=covstruct.GP_JITTER)
        L, ld_unit, _ = covstruct.psd_chol(k_unit)
        k_inv = np.linalg.inv(k_unit)
        k_inv = 0.5 * (k_inv + k_inv.T)
        tau2 = tau * tau
        return k_inv / tau2, term.n_levels * np.log(tau2) + ld_unit
    raise DataError(f"unknown term kind {term.kind!r}")


def add_ginv(A, base, term, g):
    """Add G_k^{-1} into the square matrix A at diagonal offset base+term.offset.

    Returns log|G_k| so callers can accumulate the determinant for free.
    Kronecker blocks are written as d^2 strided diagonals (no J*d x J*d
    temporaries; this sits on the samplers' per-iteration hot path).
    """
    i0 = base + term.offset
    if term.kind in ("diagonal", "correlated"):
        psi_inv, ld = _level_inv_logdet(term, g)
        d = len(term.design_columns)
        J = term.n_levels
        for a in range(d):
            rows = np.arange(i0 + a, i0 + J * d, d)
            for b in range(d):
                A[rows, rows + (b - a)] += psi_inv[a, b]
        return J * ld
    block, ld = ginv_logdet(term, g)
    i1 = i0 + term.n_coefs
    A[i0:i1, i0:i1] += block
    return ld


def level_view(theta, term):
    """View of the term's coefficients as an (n_levels, d) array."""
    return theta[term.offset : term.offset + term.n_coefs].reshape(
        term.n_levels, len(term.design_columns)
    )


def gamma_param_names(term):
    if term.kind in ("diagonal", "correlated"):
        names = [f"tau2[{c}]" for c in term.design_columns]
        if term.kind == "correlated":
            names.append("rho")
        return names
    if term.kind == "car":
        return ["tau2", "alpha"]
    return ["tau", "lambda"]
