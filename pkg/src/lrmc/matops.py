"""Masked matrix containers and the linear-algebra kernels used by the solvers.

Dense matrices are plain 2-D ``numpy`` arrays. Partially observed matrices
are :class:`MaskedMatrix` objects: a shared :class:`IndexSet` (coordinate
list in row-major order) plus one value per index.
"""
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import _backend
from .errors import (
    InvalidParameterError,
    InvalidRankError,
    InvalidShapeError,
    NumericalFailureError,
    SingularFactorError,
)

GRAM_COND_CAP = 1e12
DENSE_SVD_THRESHOLD = 400


def _kern():
    return _backend.kernels


@dataclass(frozen=True, eq=False)
class IndexSet:
    """Deduplicated coordinate list sorted row-major.

    Use :meth:`from_coords` or :meth:`from_mask` to build one from unsorted
    input; the constructor trusts its arguments.
    """

    shape: tuple
    rows: np.ndarray
    cols: np.ndarray

    @classmethod
    def from_coords(cls, shape, rows, cols):
        n1, n2 = (int(s) for s in shape)
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        if rows.shape != cols.shape:
            raise InvalidShapeError("row and column index arrays differ in length")
        if rows.size and (rows.min() < 0 or rows.max() >= n1 or cols.min() < 0 or cols.max() >= n2):
            raise InvalidShapeError(f"index out of bounds for shape {(n1, n2)}")
        lin = np.unique(rows * n2 + cols)
        return cls((n1, n2), lin // n2, lin % n2)

    @classmethod
    def from_mask(cls, mask):
        mask = np.asarray(mask, dtype=bool)
        rows, cols = np.nonzero(mask)
        return cls(mask.shape, rows.astype(np.int64), cols.astype(np.int64))

    @classmethod
    def full(cls, n1, n2):
        return cls.from_mask(np.ones((n1, n2), dtype=bool))

    def __len__(self):
        return self.rows.shape[0]

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, IndexSet):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.rows, other.rows)
                and np.array_equal(self.cols, other.cols))

    __hash__ = object.__hash__

    @cached_property
    def linear(self):
        return self.rows * self.shape[1] + self.cols

    @cached_property
    def row_ptr(self):
        return np.searchsorted(self.rows, np.arange(self.shape[0] + 1)).astype(np.int64)

    @cached_property
    def col_order(self):
        """Permutation putting the entries in column-major order."""
        return np.lexsort((self.rows, self.cols)).astype(np.int64)

    @cached_property
    def col_ptr(self):
        return np.searchsorted(self.cols[self.col_order], np.arange(self.shape[1] + 1)).astype(np.int64)

    def mask(self):
        m = np.zeros(self.shape, dtype=bool)
        m[self.rows, self.cols] = True
        return m

    def locate(self, other):
        """Positions of ``other``'s entries inside this set (must be a subset)."""
        pos = np.searchsorted(self.linear, other.linear)
        if np.any(pos >= len(self)) or not np.array_equal(self.linear[np.minimum(pos, len(self) - 1)], other.linear):
            raise InvalidShapeError("index set is not a subset of the observed set")
        return pos


@dataclass(frozen=True, eq=False)
class MaskedMatrix:
    """``values`` placed on ``index``; zero everywhere else (that is, Pi_Omega(M))."""

    index: IndexSet
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.shape != (len(self.index),):
            raise InvalidShapeError(
                f"expected {len(self.index)} values, got array of shape {vals.shape}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_dense(cls, M, index):
        M = np.asarray(M, dtype=np.float64)
        if M.shape != index.shape:
            raise InvalidShapeError(f"matrix shape {M.shape} != index shape {index.shape}")
        return cls(index, M[index.rows, index.cols])

    @property
    def shape(self):
        return self.index.shape

    def with_values(self, values):
        return MaskedMatrix(self.index, values)

    def to_dense(self):
        out = np.zeros(self.shape)
        out[self.index.rows, self.index.cols] = self.values
        return out

    def to_csr(self):
        idx = self.index
        return sp.csr_matrix((self.values, idx.cols, idx.row_ptr), shape=idx.shape)

    @property
    def nnz(self):
        return int(np.count_nonzero(self.values))

    def support(self):
        """IndexSet of the nonzero entries."""
        keep = self.values != 0
        return IndexSet(self.shape, self.index.rows[keep], self.index.cols[keep])

    def matmul(self, B):
        """``M @ B`` in O(|support| r)."""
        B = np.ascontiguousarray(B, dtype=np.float64)
        return _kern().masked_matmul(self.index.rows, self.index.cols, self.values, B, self.shape[0])

    def rmatmul_t(self, B):
        """``M.T @ B`` in O(|support| r)."""
        B = np.ascontiguousarray(B, dtype=np.float64)
        return _kern().masked_matmul(self.index.cols, self.index.rows, self.values, B, self.shape[1])


@dataclass(frozen=True)
class SVDTriple:
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self):
        return (self.U * self.sigma) @ self.V.T


def _check_finite_param(name, value, low=None, high=None):
    value = float(value)
    if not np.isfinite(value):
        raise InvalidParameterError(f"{name} must be finite, got {value}")
    if low is not None and value < low:
        raise InvalidParameterError(f"{name} must be >= {low}, got {value}")
    if high is not None and value > high:
        raise InvalidParameterError(f"{name} must be <= {high}, got {value}")
    return value


def _shrink(x, zeta):
    return np.sign(x) * np.maximum(np.abs(x) - zeta, 0.0)


def soft_threshold(M, zeta):
    """Entrywise ``sign(m) * max(0, |m| - zeta)``; entries with ``|m| <= zeta`` become 0."""
    zeta = _check_finite_param("zeta", zeta, low=0.0)
    if isinstance(M, MaskedMatrix):
        return M.with_values(_shrink(M.values, zeta))
    return _shrink(np.asarray(M, dtype=np.float64), zeta)


def _keep_counts(alpha_tilde, n1, n2):
    # ceil, with a guard so that e.g. 0.3 * 10 is not rounded up to 4
    kr = int(np.ceil(alpha_tilde * n2 - 1e-9))
    kc = int(np.ceil(alpha_tilde * n1 - 1e-9))
    return max(kr, 0), max(kc, 0)


def sparsify_top_fraction(M, alpha_tilde):
    """Keep entries among the top ``ceil(alpha_tilde * n)`` magnitudes of both their row and column.

    Ties at the cutoff are kept. Unobserved entries of a masked matrix count
    as zeros when ranking.
    """
    alpha_tilde = _check_finite_param("alpha_tilde", alpha_tilde, 0.0, 1.0)
    kern = _kern()
    if isinstance(M, MaskedMatrix):
        idx = M.index
        n1, n2 = idx.shape
        kr, kc = _keep_counts(alpha_tilde, n1, n2)
        a = np.abs(M.values)
        row_cut = kern.segment_kth_largest(a, idx.row_ptr, kr)
        col_cut = kern.segment_kth_largest(np.ascontiguousarray(a[idx.col_order]), idx.col_ptr, kc)
        keep = (a >= row_cut[idx.rows]) & (a >= col_cut[idx.cols])
        return M.with_values(np.where(keep, M.values, 0.0))
    M = np.asarray(M, dtype=np.float64)
    n1, n2 = M.shape
    kr, kc = _keep_counts(alpha_tilde, n1, n2)
    a = np.abs(M)
    row_cut = kern.segment_kth_largest(a.ravel(), np.arange(0, n1 * n2 + 1, n2, dtype=np.int64), kr)
    col_cut = kern.segment_kth_largest(
        np.ascontiguousarray(a.T).ravel(), np.arange(0, n1 * n2 + 1, n1, dtype=np.int64), kc)
    keep = (a >= row_cut[:, None]) & (a >= col_cut[None, :])
    return np.where(keep, M, 0.0)


def _as_operator(M):
    if isinstance(M, MaskedMatrix):
        return M.to_csr()
    return np.asarray(M, dtype=np.float64)


def _orth(Y):
    Q, _ = np.linalg.qr(Y)
    return Q


def truncated_svd(M, r, *, seed=0, oversample=8, n_power=8,
                  dense_threshold=DENSE_SVD_THRESHOLD):
    """Top-``r`` singular triple of a dense or masked matrix.

    Small problems (``min(n1, n2) <= dense_threshold``) use an exact dense
    decomposition; larger ones use seeded randomized subspace iteration.
    """
    n1, n2 = M.shape
    r = int(r)
    if r < 1 or r > min(n1, n2):
        raise InvalidRankError(f"rank {r} outside [1, {min(n1, n2)}]")
    try:
        if min(n1, n2) <= dense_threshold:
            dense = M.to_dense() if isinstance(M, MaskedMatrix) else np.asarray(M, dtype=np.float64)
            U, s, Vt = np.linalg.svd(dense, full_matrices=False)
            U, s, V = U[:, :r], s[:r], Vt[:r].T
        else:
            A = _as_operator(M)
            ell = min(r + oversample, min(n1, n2))
            rng = np.random.Generator(np.random.Philox(seed))
            Q = _orth(A @ rng.standard_normal((n2, ell)))
            for _ in range(n_power):
                Q = _orth(A.T @ Q)
                Q = _orth(A @ Q)
            B = np.asarray((A.T @ Q).T)
            Ub, s, Vt = np.linalg.svd(B, full_matrices=False)
            U, s, V = Q @ Ub[:, :r], s[:r], Vt[:r].T
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(f"truncated SVD failed: {exc}") from exc
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
        raise NumericalFailureError("truncated SVD produced non-finite output")
    return SVDTriple(np.ascontiguousarray(U), s.copy(), np.ascontiguousarray(V))


def _factor(A, name, n, r):
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != n or (r is not None and A.shape[1] != r):
        raise InvalidShapeError(f"factor {name} has shape {A.shape}, expected ({n}, {r})")
    return A


def masked_residual(L, R, S, Y):
    """``Pi_Omega(L R^T + S - Y)`` evaluated entrywise on the observed set.

    ``Y`` is an ObservedMatrix or MaskedMatrix; ``S`` a MaskedMatrix whose
    support lies inside Y's index set (or ``None`` for no outliers).
    """
    Ym = getattr(Y, "data", Y)
    idx = Ym.index
    n1, n2 = idx.shape
    L = _factor(L, "L", n1, None)
    R = _factor(R, "R", n2, L.shape[1])
    x = _kern().masked_dot(L, R, idx.rows, idx.cols)
    res = x - Ym.values
    if S is not None:
        if S.shape != idx.shape:
            raise InvalidShapeError(f"S shape {S.shape} != Y shape {idx.shape}")
        if S.index is idx or S.index == idx:
            res = res + S.values
        else:
            res[idx.locate(S.index)] += S.values
    return MaskedMatrix(idx, res)


def _gram_solve(G, B, side):
    """Solve ``X @ G = B`` for symmetric positive-definite ``G``."""
    cond = np.linalg.cond(G) if np.all(np.isfinite(G)) else np.inf
    if not np.isfinite(cond) or cond > GRAM_COND_CAP:
        raise SingularFactorError(side, cond)
    try:
        c = sla.cho_factor(G)
    except np.linalg.LinAlgError as exc:
        raise SingularFactorError(side, cond) from exc
    return sla.cho_solve(c, B.T).T


def scaled_grad_step(L, R, residual, eta, p):
    """One simultaneous scaled-gradient update of both factors.

    ``L' = L - (eta/p) res R (R^T R)^{-1}`` and
    ``R' = R - (eta/p) res^T L (L^T L)^{-1}``, both from the pre-update factors.
    """
    eta = _check_finite_param("eta", eta, low=0.0)
    p = _check_finite_param("p", p, low=0.0, high=1.0)
    if eta <= 0 or p <= 0:
        raise InvalidParameterError("eta and p must be positive")
    n1, n2 = residual.shape
    L = _factor(L, "L", n1, None)
    R = _factor(R, "R", n2, L.shape[1])
    gL = residual.matmul(R)
    gR = residual.rmatmul_t(L)
    dL = _gram_solve(R.T @ R, gL, "R")
    dR = _gram_solve(L.T @ L, gR, "L")
    c = eta / p
    return L - c * dL, R - c * dR


def fro_norm(M):
    if isinstance(M, MaskedMatrix):
        return float(np.sqrt(np.sum(M.values ** 2)))
    return float(np.sqrt(np.sum(np.asarray(M, dtype=np.float64) ** 2)))


def inf_norm(M):
    vals = M.values if isinstance(M, MaskedMatrix) else np.asarray(M, dtype=np.float64)
    return float(np.max(np.abs(vals))) if vals.size else 0.0


def spectral_norm_est(M, tol=1e-6, max_iter=1000, seed=0):
    """Largest singular value by power iteration on ``M^T M``."""
    A = _as_operator(M)
    n2 = A.shape[1]
    data = A.data if sp.issparse(A) else A
    if not np.all(np.isfinite(data)):
        raise NumericalFailureError("non-finite matrix entries")
    v = np.random.Generator(np.random.Philox(seed)).standard_normal(n2)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = A @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        w = A.T @ (u / nu)
        new = float(np.linalg.norm(w))
        v = w / new
        if abs(new - sigma) <= tol * new:
            return new
        sigma = new
    return sigma


def factored_fro_dist(L1, R1, L2, R2):
    """``||L1 R1^T - L2 R2^T||_F`` without forming either product.

    The difference is ``[L1, -L2] [R1, R2]^T``; thin QR of both stacks
    reduces it to a small ``2r x 2r`` product.
    """
    _, Ra = np.linalg.qr(np.hstack([L1, -L2]))
    _, Rb = np.linalg.qr(np.hstack([R1, R2]))
    return float(np.linalg.norm(Ra @ Rb.T))


def factored_fro_norm(L, R):
    _, Ra = np.linalg.qr(L)
    _, Rb = np.linalg.qr(R)
    return float(np.linalg.norm(Ra @ Rb.T))
