"""Structured random-effect covariance matrices and their log-determinants.

Builders return plain dense arrays.  ``log_det_psd`` is the shared
factorization path: it retries once with a trace-scaled jitter and reports
whether the jitter was needed, so downstream results can carry the flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import DataError, NumericalError

#: relative diagonal jitter applied to GP kernels before factorization
GP_JITTER = 1e-8

#: smallest admissible eigenvalue (relative round-off tolerance) for PSD checks
PSD_EIG_TOL = -1e-8


@dataclass(frozen=True)
class Adjacency:
    """Symmetric neighbour structure for CAR terms (0-based internally)."""

    neighbors: tuple            # tuple of int tuples
    counts: np.ndarray          # L_j, neighbours per node

    def __post_init__(self):
        for j, nb in enumerate(self.neighbors):
            if j in nb:
                raise DataError(f"adjacency has a self-loop at node {j + 1}")
            if len(nb) == 0:
                raise DataError(f"isolated node {j + 1}: CAR needs L_j >= 1 everywhere")
            for ell in nb:
                if not 0 <= ell < self.J:
                    raise DataError(f"adjacency index {ell + 1} out of range at node {j + 1}")
                if j not in self.neighbors[ell]:
                    raise DataError(f"adjacency is asymmetric: {j + 1}~{ell + 1} but not back")

    @property
    def J(self):
        return len(self.neighbors)

    @classmethod
    def from_lists(cls, lists):
        neighbors = tuple(tuple(sorted(set(int(v) for v in nb))) for nb in lists)
        counts = np.array([len(nb) for nb in neighbors], dtype=float)
        return cls(neighbors=neighbors, counts=counts)

    @classmethod
    def from_file(cls, path):
        """Plain-text format: first line J, then one line of 1-based
        space-separated neighbour indices per node."""
        with open(path, encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
        if not lines:
            raise DataError(f"{path}: empty adjacency file")
        try:
            J = int(lines[0])
        except ValueError:
            raise DataError(f"{path}: first line must be the node count") from None
        if len(lines) != J + 1:
            raise DataError(f"{path}: expected {J} node lines, found {len(lines) - 1}")
        lists = []
        for ln in lines[1:]:
            try:
                lists.append([int(tok) - 1 for tok in ln.split()])
            except ValueError:
                raise DataError(f"{path}: non-integer neighbour index in {ln!r}") from None
        return cls.from_lists(lists)

    def to_lists(self):
        return [[v + 1 for v in nb] for nb in self.neighbors]

    def matrix(self):
        """0/1 adjacency matrix A."""
        A = np.zeros((self.J, self.J))
        for j, nb in enumerate(self.neighbors):
            A[j, list(nb)] = 1.0
        return A

    def row_normalized(self):
        """W = diag(1/L) A, the row-normalized weight matrix."""
        return self.matrix() / self.counts[:, None]


def diag_cov(tau2: float, J: int) -> np.ndarray:
    """tau^2 * I_J."""
    if tau2 < 0:
        raise DataError(f"negative variance {tau2}")
    if J < 1:
        raise DataError("J must be >= 1")
    return tau2 * np.eye(J)


def intercept_slope_cov(tau1: float, tau2: float, rho: float) -> np.ndarray:
    """2x2 covariance [[t1^2, r t1 t2], [r t1 t2, t2^2]] from SDs and correlation."""
    if tau1 < 0 or tau2 < 0:
        raise DataError("standard deviations must be nonnegative")
    if not abs(rho) < 1:
        raise DataError(f"|rho| must be < 1, got {rho}")
    off = rho * tau1 * tau2
    return np.array([[tau1 * tau1, off], [off, tau2 * tau2]])


def car_cov(tau2: float, adj: Adjacency, alpha: float) -> np.ndarray:
    """Proper-CAR covariance tau^2 (I - alpha W)^{-1} B (I - alpha W)^{-T}.

    W is the row-normalized adjacency and B = diag(1/L_j).  alpha < 1 keeps
    I - alpha W nonsingular (row-normalized W has spectral radius 1).
    """
    if tau2 < 0:
        raise DataError(f"negative variance {tau2}")
    if not 0.0 <= alpha < 1.0:
        raise DataError(f"alpha must be in [0, 1), got {alpha}")
    A = np.eye(adj.J) - alpha * adj.row_normalized()
    half = np.diag(np.sqrt(1.0 / adj.counts))
    try:
        S = sla.solve(A, half)
    except sla.LinAlgError as exc:
        raise NumericalError(f"(I - alpha W) singular at alpha={alpha}") from exc
    psi = tau2 * (S @ S.T)
    return 0.5 * (psi + psi.T)


def car_unit_precision(adj: Adjacency, alpha: float) -> np.ndarray:
    """Precision of the proper-CAR covariance at tau^2 = 1:
    (I - alpha W)^T B^{-1} (I - alpha W)."""
    A = np.eye(adj.J) - alpha * adj.row_normalized()
    return A.T @ (adj.counts[:, None] * A)


def car_logdet_unit(adj: Adjacency, alpha: float) -> float:
    """log |(I - alpha W)^{-1} B (I - alpha W)^{-T}|."""
    A = np.eye(adj.J) - alpha * adj.row_normalized()
    sign, ld = np.linalg.slogdet(A)
    if sign <= 0:
        raise NumericalError(f"(I - alpha W) singular at alpha={alpha}")
    return -2.0 * ld - np.sum(np.log(adj.counts))


def gp_se_kernel(tau: float, lam: float, x: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Squared-exponential kernel K_ij = tau^2 exp(-(x_i - x_j)^2 / (2 lam^2)).

    ``jitter`` is a relative diagonal stabilizer: jitter * tau^2 is added to
    the diagonal (pass :data:`GP_JITTER` before factorizing).
    """
    if lam <= 0:
        raise DataError(f"length-scale must be > 0, got {lam}")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DataError("gp inputs must be finite")
    d = x[:, None] - x[None, :]
    K = tau * tau * np.exp(-(d * d) / (2.0 * lam * lam))
    if jitter:
        K[np.diag_indices_from(K)] += jitter * tau * tau
    return K


def check_symmetric(M, tol=1e-10):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DataError(f"expected a square matrix, got shape {M.shape}")
    scale = max(1.0, np.abs(M).max())
    if np.abs(M - M.T).max() > tol * scale:
        raise DataError("matrix is not symmetric within 1e-10 relative")
    return 0.5 * (M + M.T)


def psd_chol(M, jitter_rel=1e-8):
    """Cholesky of a symmetric PSD matrix with a single jitter retry.

    Returns ``(L, logdet, jittered)`` with L lower-triangular.  The retry adds
    jitter_rel * trace(M)/J to the diagonal; failure after that is an error,
    reported rather than silently patched.
    """
    M = check_symmetric(M)
    try:
        L = np.linalg.cholesky(M)
        return L, 2.0 * np.sum(np.log(np.diag(L))), False
    except np.linalg.LinAlgError:
        pass
    J = M.shape[0]
    bump = jitter_rel * max(np.trace(M) / J, np.finfo(float).tiny)
    try:
        L = np.linalg.cholesky(M + bump * np.eye(J))
        return L, 2.0 * np.sum(np.log(np.diag(L))), True
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"matrix is not positive definite even after jitter {bump:.3e}"
        ) from exc


def log_det_psd(M) -> tuple[float, bool]:
    """log|M| via triangular factorization; returns (value, jittered_flag)."""
    _, ld, jittered = psd_chol(M)
    return ld, jittered
