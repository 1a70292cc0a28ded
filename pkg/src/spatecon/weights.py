"""Sparse spatial weight matrices.

Construction (k nearest neighbours, file ingestion), row standardization,
admissible range of the spatial autocorrelation parameter, and covariate
lagging. Matrices are stored in compressed sparse row form and treated as
immutable after construction: every operation returns a new object.

The admissible range (rho_min, rho_max) of the autocorrelation parameter
is determined by the real eigenvalues of the standardized matrix:
rho_max = 1 / max(lambda), rho_min = 1 / min(lambda). For a
row-standardized matrix rho_max is exactly 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidInputError, InvalidParameterError, NumericFailureError

# Dense eigendecomposition below this size; iterative above.
_DENSE_EIG_LIMIT = 2000


@dataclass(frozen=True)
class WeightsMatrix:
    """A sparse n x n spatial weights matrix.

    Attributes
    ----------
    mat : scipy.sparse.csr_matrix
        The weights, zero diagonal, finite entries.
    standardized : bool
        True once rows have been scaled to sum to one.
    has_islands : bool
        True if some rows are entirely zero (flagged, not an error).
    """

    mat: sp.csr_matrix
    standardized: bool = False
    has_islands: bool = False
    _rho_bounds: tuple[float, float] | None = field(default=None, compare=False)

    def __post_init__(self):
        m = self.mat
        if m.shape[0] != m.shape[1]:
            raise InvalidInputError(f"weights matrix must be square, got {m.shape}")
        if m.nnz and not np.all(np.isfinite(m.data)):
            raise InvalidInputError("weights matrix contains non-finite entries")
        if np.any(m.diagonal() != 0.0):
            raise InvalidInputError("weights matrix must have a zero diagonal")

    @property
    def n(self) -> int:
        return self.mat.shape[0]

    @property
    def rho_min(self) -> float:
        return self.rho_range()[0]

    @property
    def rho_max(self) -> float:
        return self.rho_range()[1]

    def is_structurally_symmetric(self, verify: bool = True) -> bool:
        """Check whether the nonzero pattern is symmetric."""
        pattern = self.mat.copy()
        pattern.data = np.ones_like(pattern.data)
        diff = pattern - pattern.T
        return diff.nnz == 0

    def rho_range(self) -> tuple[float, float]:
        """Admissible open interval for the autocorrelation parameter.

        Requires a standardized matrix. The result is cached on the
        instance (idempotent, safe under concurrent readers).
        """
        if not self.standardized:
            raise InvalidParameterError(
                "rho_range requires a row-standardized weights matrix"
            )
        if self._rho_bounds is None:
            bounds = _eigen_rho_bounds(self.mat)
            object.__setattr__(self, "_rho_bounds", bounds)
        return self._rho_bounds

    def toarray(self) -> np.ndarray:
        return self.mat.toarray()


def from_dense(a: np.ndarray, standardized: bool = False) -> WeightsMatrix:
    """Wrap a dense array as a WeightsMatrix (mainly for tests)."""
    a = np.asarray(a, dtype=float)
    mat = sp.csr_matrix(a)
    mat.eliminate_zeros()
    islands = bool(np.any(np.asarray(abs(mat).sum(axis=1)).ravel() == 0.0))
    return WeightsMatrix(mat=mat, standardized=standardized, has_islands=islands)


def knn_adjacency(coords: np.ndarray, k: int) -> WeightsMatrix:
    """Binary k-nearest-neighbour adjacency from 2D point coordinates.

    Each row gets exactly k ones (zero diagonal, not standardized).
    Distance ties are broken by the smaller point index so results are
    reproducible; exact duplicate points are reported through the warning
    channel and resolved the same way.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise InvalidInputError(f"expected (n, 2) coordinates, got {coords.shape}")
    n = coords.shape[0]
    if k < 1:
        raise InvalidParameterError(f"k must be >= 1, got {k}")
    if k >= n:
        raise InvalidParameterError(f"k must be < n = {n}, got {k}")
    if not np.all(np.isfinite(coords)):
        raise InvalidInputError("coordinates must be finite")

    uniq, counts = np.unique(coords, axis=0, return_counts=True)
    if np.any(counts > 1):
        warnings.warn(
            "duplicate points in kNN input; ties resolved by lowest index",
            stacklevel=2,
        )

    # Pairwise distances with a stable per-row sort: equal distances keep
    # index order, which implements smallest-index tie breaking.
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]

    rows = np.repeat(np.arange(n), k)
    cols = order.ravel()
    data = np.ones(n * k)
    mat = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    return WeightsMatrix(mat=mat, standardized=False)


def row_standardize(w: WeightsMatrix) -> WeightsMatrix:
    """Scale each nonempty row to sum to one.

    Empty rows (islands) are allowed but flagged with a warning; an
    all-zero matrix is rejected.
    """
    mat = w.mat.tocsr(copy=True)
    sums = np.asarray(mat.sum(axis=1)).ravel()
    nonzero = sums != 0.0
    if not np.any(nonzero):
        raise InvalidInputError("cannot standardize an all-zero weights matrix")
    if not np.all(nonzero):
        warnings.warn(
            f"{int(np.count_nonzero(~nonzero))} empty row(s) (islands) left as zero",
            stacklevel=2,
        )
    scale = np.ones_like(sums)
    scale[nonzero] = 1.0 / sums[nonzero]
    mat = sp.diags(scale) @ mat
    return WeightsMatrix(
        mat=mat.tocsr(), standardized=True, has_islands=bool(np.any(~nonzero))
    )


def rho_range(w: WeightsMatrix) -> tuple[float, float]:
    """(rho_min, rho_max) for a standardized matrix. See WeightsMatrix.rho_range."""
    return w.rho_range()


def lag_covariates(x: np.ndarray, w: WeightsMatrix) -> np.ndarray:
    """Spatially lagged covariates W @ X, column-wise.

    The caller is responsible for excluding the intercept column; lagging
    a constant under a row-standardized W just reproduces it.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != w.n:
        raise InvalidInputError(
            f"design matrix has {x.shape[0]} rows, weights are {w.n} x {w.n}"
        )
    return w.mat @ x


def _eigen_rho_bounds(mat: sp.csr_matrix) -> tuple[float, float]:
    n = mat.shape[0]
    if n <= _DENSE_EIG_LIMIT:
        eigs = np.linalg.eigvals(mat.toarray())
    else:
        eigs = _iterative_extreme_eigs(mat)
    # Keep eigenvalues that are real to numerical tolerance.
    real = eigs.real[np.abs(eigs.imag) <= 1e-9 * np.maximum(1.0, np.abs(eigs))]
    pos = real[real > 1e-12]
    neg = real[real < -1e-12]
    if pos.size == 0 or neg.size == 0:
        raise NumericFailureError(
            "weights matrix has no usable real eigenvalue pair for rho bounds"
        )
    rho_max = 1.0 / float(pos.max())
    rho_min = 1.0 / float(neg.min())
    return rho_min, rho_max


def _iterative_extreme_eigs(mat: sp.csr_matrix) -> np.ndarray:
    """Extreme real eigenvalues of a large standardized matrix.

    If the matrix came from a symmetric adjacency, D^{1/2} W D^{-1/2} is
    symmetric and a shifted Lanczos/power scheme on that similarity
    transform is reliable. Otherwise fall back to sparse Arnoldi on W.
    """
    pattern = mat.copy()
    pattern.data = np.ones_like(pattern.data)
    symmetric_pattern = (pattern - pattern.T).nnz == 0
    if symmetric_pattern:
        # Recover the similarity scaling from the entries: rows scaled by
        # s_i make s_i w_ij / s_j symmetric iff s_i^2 w_ij = s_j^2 w_ji.
        # For binary-origin rows w_ij = 1/d_i, so s_i = sqrt(d_i).
        with np.errstate(divide="ignore"):
            row_min = np.array(
                [mat.data[mat.indptr[i]:mat.indptr[i + 1]].min()
                 if mat.indptr[i + 1] > mat.indptr[i] else 1.0
                 for i in range(mat.shape[0])]
            )
        d = 1.0 / row_min
        s = sp.diags(np.sqrt(d))
        s_inv = sp.diags(1.0 / np.sqrt(d))
        sym = s @ mat @ s_inv
        asym = sp.csr_matrix(abs(sym - sym.T))
        scale = max(abs(sym).max(), 1.0)
        if asym.nnz == 0 or asym.max() <= 1e-10 * scale:
            sym = (sym + sym.T) * 0.5
            try:
                top = spla.eigsh(sym, k=1, which="LA", return_eigenvectors=False)
                bot = spla.eigsh(sym, k=1, which="SA", return_eigenvectors=False)
            except spla.ArpackNoConvergence as exc:  # pragma: no cover
                raise NumericFailureError(
                    f"eigen solver did not converge: {exc}"
                ) from exc
            return np.concatenate([top, bot]).astype(complex)
        # weighted rows: the binary-origin scaling does not symmetrize;
        # fall through to general Arnoldi
    try:
        top = spla.eigs(mat, k=2, which="LR", return_eigenvectors=False)
        bot = spla.eigs(mat, k=2, which="SR", return_eigenvectors=False)
    except spla.ArpackNoConvergence as exc:  # pragma: no cover
        raise NumericFailureError(f"eigen solver did not converge: {exc}") from exc
    return np.concatenate([top, bot])
