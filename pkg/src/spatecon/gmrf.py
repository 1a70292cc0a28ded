"""Sparse GMRF representation of the spatial-lag random effect.

The latent effect is x = (I - rho W)^{-1} (X beta + eps) with
eps ~ N(0, (1/tau) I) and beta ~ N(0, Q^{-1}). Jointly, (x, beta) is a
zero-mean Gaussian Markov random field whose precision has the block form

    [ tau (I - rho W')(I - rho W)    -tau (I - rho W') X ]
    [ -tau X' (I - rho W)             Q + tau X'X        ]

which is sparse and symmetric. This module builds that matrix, factors it
(sparse LDL^T via SuperLU in symmetric mode), and exposes the conditional
distribution of x given beta. The autocorrelation parameter lives on an
internal (0, 1) scale mapped affinely onto (rho_min, rho_max).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidInputError, InvalidParameterError, NumericFailureError
from .weights import WeightsMatrix

# Internal rho is clamped strictly inside (0, 1): the precision loses
# positive definiteness exactly at the spectral bounds.
RHO_INTERNAL_EPS = 1e-6

DEFAULT_Q_BETA_DIAG = 1e-3
DEFAULT_RHO_PRIOR = (0.0, 10.0)  # Gaussian (mean, precision) on logit(internal rho)
DEFAULT_TAU_PRIOR = (1.0, 5e-5)  # log-gamma (shape, rate) on tau


def rho_to_internal(external: float, bounds: tuple[float, float]) -> float:
    """Map an external rho in (rho_min, rho_max) onto the internal (0, 1) scale."""
    lo, hi = bounds
    if not lo < external < hi:
        raise InvalidParameterError(
            f"rho = {external} is not strictly inside ({lo}, {hi})"
        )
    return (external - lo) / (hi - lo)


def rho_to_external(internal: float, bounds: tuple[float, float]) -> float:
    """Inverse of rho_to_internal."""
    lo, hi = bounds
    if not 0.0 < internal < 1.0:
        raise InvalidParameterError(
            f"internal rho = {internal} is not strictly inside (0, 1)"
        )
    return lo + internal * (hi - lo)


@dataclass(frozen=True)
class RhoParam:
    """Autocorrelation parameter on both scales."""

    internal: float
    external: float
    bounds: tuple[float, float]

    @classmethod
    def from_internal(cls, internal: float, bounds: tuple[float, float]) -> "RhoParam":
        return cls(internal, rho_to_external(internal, bounds), bounds)

    @classmethod
    def from_external(cls, external: float, bounds: tuple[float, float]) -> "RhoParam":
        return cls(rho_to_internal(external, bounds), external, bounds)


@dataclass(frozen=True)
class SlmSpec:
    """Definition of one spatial-lag latent effect.

    x_design may have zero columns (the pure autoregressive-error case).
    q_beta is the fixed prior precision of the coefficients inside the
    effect; the default is a vague diagonal.
    """

    w: WeightsMatrix
    x_design: np.ndarray
    q_beta: np.ndarray | None = None
    rho_prior: tuple[float, float] = DEFAULT_RHO_PRIOR
    tau_prior: tuple[float, float] = DEFAULT_TAU_PRIOR
    tau_fixed: float | None = None

    def __post_init__(self):
        x = np.asarray(self.x_design, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != self.w.n:
            raise InvalidInputError(
                f"design has {x.shape[0]} rows for a {self.w.n}-region weights matrix"
            )
        object.__setattr__(self, "x_design", x)
        q = self.q_beta
        if q is None:
            q = DEFAULT_Q_BETA_DIAG * np.eye(x.shape[1])
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if q.shape != (x.shape[1], x.shape[1]):
            raise InvalidInputError(
                f"q_beta must be {x.shape[1]} x {x.shape[1]}, got {q.shape}"
            )
        if x.shape[1] and not np.allclose(q, q.T, atol=1e-12):
            raise InvalidInputError("q_beta must be symmetric")
        if x.shape[1]:
            try:
                np.linalg.cholesky(q)
            except np.linalg.LinAlgError as exc:
                raise InvalidInputError("q_beta must be positive definite") from exc
        object.__setattr__(self, "q_beta", q)
        _warn_on_bad_scaling(x)

    @property
    def n(self) -> int:
        return self.w.n

    @property
    def p(self) -> int:
        return self.x_design.shape[1]

    def bounds(self) -> tuple[float, float]:
        return self.w.rho_range()


def _warn_on_bad_scaling(x: np.ndarray) -> None:
    # Columns on wildly different scales destabilize the factorization;
    # warn, never rescale silently.
    if x.shape[1] < 2:
        return
    sds = x.std(axis=0)
    sds = sds[sds > 0]
    if sds.size >= 2 and sds.max() / sds.min() > 1e4:
        warnings.warn(
            "covariate columns differ in scale by more than 1e4; consider rescaling",
            stacklevel=3,
        )


@dataclass(frozen=True)
class JointPrecision:
    """The assembled (n+p) x (n+p) precision of (x, beta), plus its exact
    log determinant (the Schur complement of the x block is q_beta, so
    log|P| = n log tau + 2 log|det(I - rho W)| + log|q_beta|)."""

    p_mat: sp.csc_matrix
    n: int
    p: int
    logdet: float


def joint_precision(spec: SlmSpec, rho: RhoParam | float, tau: float) -> JointPrecision:
    """Assemble the joint precision of (x, beta) at given (rho, tau).

    rho may be a RhoParam or an external-scale float.
    """
    if not np.isfinite(tau) or tau <= 0:
        raise InvalidParameterError(f"tau must be a positive finite number, got {tau}")
    bounds = spec.bounds()
    if isinstance(rho, RhoParam):
        rho_ext = rho.external
    else:
        rho_ext = float(rho)
    if not bounds[0] < rho_ext < bounds[1]:
        raise InvalidParameterError(
            f"rho = {rho_ext} is at or outside the admissible range {bounds}"
        )
    n, p = spec.n, spec.p
    a = sp.identity(n, format="csr") - rho_ext * spec.w.mat
    logdet_a = _logabsdet_sparse(a.tocsc())
    top_left = tau * (a.T @ a)
    if p == 0:
        p_mat = top_left.tocsc()
        logdet = n * np.log(tau) + 2.0 * logdet_a
    else:
        x = spec.x_design
        atx = a.T @ x
        top_right = sp.csr_matrix(-tau * atx)
        bottom_right = sp.csr_matrix(spec.q_beta + tau * (x.T @ x))
        p_mat = sp.bmat(
            [[top_left, top_right], [top_right.T, bottom_right]], format="csc"
        )
        sign, logdet_q = np.linalg.slogdet(spec.q_beta)
        logdet = n * np.log(tau) + 2.0 * logdet_a + logdet_q
    p_mat.eliminate_zeros()
    return JointPrecision(p_mat=p_mat, n=n, p=p, logdet=float(logdet))


class CholeskyHandle:
    """Sparse symmetric factorization of an SPD matrix.

    Wraps SuperLU in symmetric mode (minimum-degree ordering on A'A,
    no partial pivoting), which for an SPD input is an LDL^T
    factorization: positive pivots, log-determinant from the U diagonal.
    """

    def __init__(self, mat: sp.csc_matrix, context: str = ""):
        mat = sp.csc_matrix(mat)
        try:
            self._lu = spla.splu(
                mat,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise NumericFailureError(
                f"factorization failed ({context or 'singular matrix'}): {exc}"
            ) from exc
        diag = self._lu.U.diagonal()
        if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
            raise NumericFailureError(
                f"matrix is not positive definite ({context or 'non-SPD input'})"
            )
        self._logdet = float(np.sum(np.log(diag)))
        self.shape = mat.shape

    def logdet(self) -> float:
        return self._logdet

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))

    def inverse_dense(self) -> np.ndarray:
        """Dense inverse (for marginal variances; intended for moderate n)."""
        return self._lu.solve(np.eye(self.shape[0]))

    def marginal_variances(self, indices) -> np.ndarray:
        """Diagonal entries of the inverse at the requested coordinates."""
        indices = np.atleast_1d(np.asarray(indices, dtype=int))
        rhs = np.zeros((self.shape[0], indices.size))
        rhs[indices, np.arange(indices.size)] = 1.0
        sol = self._lu.solve(rhs)
        return sol[indices, np.arange(indices.size)]


def factorize(p: JointPrecision | sp.spmatrix, context: str = "") -> CholeskyHandle:
    """Factor an SPD precision matrix; raises NumericFailureError otherwise."""
    mat = p.p_mat if isinstance(p, JointPrecision) else p
    return CholeskyHandle(mat, context=context)


def conditional_latent(
    spec: SlmSpec, rho: RhoParam | float, tau: float, beta: np.ndarray
) -> tuple[np.ndarray, sp.csc_matrix]:
    """Mean and precision of x given beta.

    mean solves (I - rho W) m = X beta; precision is
    tau (I - rho W')(I - rho W).
    """
    if not np.isfinite(tau) or tau <= 0:
        raise InvalidParameterError(f"tau must be a positive finite number, got {tau}")
    rho_ext = rho.external if isinstance(rho, RhoParam) else float(rho)
    bounds = spec.bounds()
    if not bounds[0] < rho_ext < bounds[1]:
        raise InvalidParameterError(
            f"rho = {rho_ext} is at or outside the admissible range {bounds}"
        )
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.shape != (spec.p,):
        raise InvalidInputError(f"beta must have length {spec.p}, got {beta.shape}")
    n = spec.n
    a = (sp.identity(n, format="csr") - rho_ext * spec.w.mat).tocsc()
    if spec.p == 0 or not np.any(beta):
        mean = np.zeros(n)
    else:
        try:
            mean = spla.splu(a).solve(spec.x_design @ beta)
        except RuntimeError as exc:
            raise NumericFailureError(
                f"(I - rho W) is singular at rho = {rho_ext}: {exc}"
            ) from exc
    prec = (tau * (a.T @ a)).tocsc()
    return mean, prec


def _logabsdet_sparse(a: sp.csc_matrix) -> float:
    """log |det A| of a general sparse matrix via sparse LU."""
    try:
        lu = spla.splu(a)
    except RuntimeError as exc:
        raise NumericFailureError(f"sparse LU failed (singular matrix?): {exc}") from exc
    diag_u = lu.U.diagonal()
    diag_l = lu.L.diagonal()
    if np.any(diag_u == 0):
        raise NumericFailureError("matrix is singular to working precision")
    return float(np.sum(np.log(np.abs(diag_u))) + np.sum(np.log(np.abs(diag_l))))
