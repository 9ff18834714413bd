"""Sparse symmetric matrices and their Cholesky factorization.

Every GMRF computation in the package (log-determinants, solves, marginal
variances, Kronecker-structured precisions) goes through this module.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import _envelope as _env


class NotPositiveDefinite(np.linalg.LinAlgError):
    """A non-positive pivot was met while factorizing."""

    def __init__(self, row):
        super().__init__(f"matrix is not positive definite (pivot at row {row})")
        self.row = row


@dataclass(frozen=True, eq=False)
class SparseSymMatrix:
    """Symmetric matrix stored as its lower triangle in coordinate form.

    Entries are deduplicated and sorted column-major; the upper triangle is
    implied.  Use :func:`build_from_triplets` or :meth:`from_scipy` rather than
    the raw constructor.
    """

    dim: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    @classmethod
    def from_scipy(cls, M):
        """Wrap a symmetric scipy/numpy matrix (only its lower triangle is read)."""
        M = sp.coo_matrix(M)
        if M.shape[0] != M.shape[1]:
            raise ValueError(f"matrix must be square, got {M.shape}")
        low = sp.tril(M).tocsc()
        low.sum_duplicates()
        low.sort_indices()
        coo = low.tocoo()
        return cls(M.shape[0], coo.row.astype(np.int64), coo.col.astype(np.int64),
                   coo.data.astype(float))

    @classmethod
    def identity(cls, n):
        return cls.from_scipy(sp.identity(n, format="csc"))

    @classmethod
    def diag(cls, d):
        return cls.from_scipy(sp.diags(np.asarray(d, dtype=float)))

    @cached_property
    def csr(self):
        """Full symmetric matrix as a scipy CSR matrix."""
        low = sp.coo_matrix((self.vals, (self.rows, self.cols)), shape=(self.dim, self.dim))
        strict = sp.coo_matrix(
            (self.vals[self.rows != self.cols],
             (self.cols[self.rows != self.cols], self.rows[self.rows != self.cols])),
            shape=(self.dim, self.dim))
        full = (low + strict).tocsr()
        full.sort_indices()
        return full

    @property
    def nnz(self):
        return len(self.vals)

    def toarray(self):
        return self.csr.toarray()

    def diagonal(self):
        return self.csr.diagonal()

    def __matmul__(self, x):
        return self.csr @ x

    def __add__(self, other):
        if not isinstance(other, SparseSymMatrix):
            return NotImplemented
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return SparseSymMatrix.from_scipy(self.csr + other.csr)

    def __mul__(self, scalar):
        return SparseSymMatrix(self.dim, self.rows, self.cols, self.vals * float(scalar))

    __rmul__ = __mul__

    def permute(self, perm):
        """Relabel rows/cols so that entry (i, j) of the result is (perm[i], perm[j])."""
        perm = np.asarray(perm)
        return SparseSymMatrix.from_scipy(self.csr[perm][:, perm])

    def __repr__(self):
        return f"SparseSymMatrix(dim={self.dim}, nnz_lower={self.nnz})"


def build_from_triplets(triplets, dim):
    """Assemble a :class:`SparseSymMatrix` from ``(row, col, value)`` triplets.

    Duplicates are summed and entries given above the diagonal are mirrored
    into the lower triangle before summation.
    """
    if dim <= 0:
        raise ValueError(f"dim must be positive, got {dim}")
    if len(triplets) == 0:
        return SparseSymMatrix.from_scipy(sp.csc_matrix((dim, dim)))
    arr = np.asarray(triplets, dtype=float).reshape(-1, 3)
    r = arr[:, 0].astype(np.int64)
    c = arr[:, 1].astype(np.int64)
    if np.any(r != arr[:, 0]) or np.any(c != arr[:, 1]):
        raise ValueError("triplet indices must be integers")
    bad = (r < 0) | (r >= dim) | (c < 0) | (c >= dim)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise IndexError(f"triplet {k} index ({r[k]}, {c[k]}) out of range for dim {dim}")
    lo = np.maximum(r, c)
    hi = np.minimum(r, c)
    M = sp.coo_matrix((arr[:, 2], (lo, hi)), shape=(dim, dim))
    return SparseSymMatrix.from_scipy(M)


def fill_reducing_order(Q):
    """Reverse Cuthill-McKee on the sparse part, dense rows appended last.

    Rows with very high degree (fixed effects coupled to every observation)
    would otherwise widen the envelope of the whole factor.
    """
    A = Q.csr if isinstance(Q, SparseSymMatrix) else sp.csr_matrix(Q)
    n = A.shape[0]
    deg = np.diff(A.indptr)
    dense = deg > max(64, 8 * np.sqrt(n))
    if not dense.any():
        return np.asarray(reverse_cuthill_mckee(A, symmetric_mode=True), dtype=np.int64)
    keep = np.flatnonzero(~dense)
    sub = A[keep][:, keep]
    order = keep[np.asarray(reverse_cuthill_mckee(sub.tocsr(), symmetric_mode=True))]
    return np.concatenate([order, np.flatnonzero(dense)]).astype(np.int64)


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """Envelope Cholesky factor with ``P Q P^T = L L^T``.

    ``perm[i]`` is the original index placed at position ``i``.
    """

    matrix: SparseSymMatrix
    perm: np.ndarray
    first: np.ndarray = field(repr=False)
    ptr: np.ndarray = field(repr=False)
    env: np.ndarray = field(repr=False)

    @property
    def dim(self):
        return self.matrix.dim

    @cached_property
    def iperm(self):
        ip = np.empty_like(self.perm)
        ip[self.perm] = np.arange(len(self.perm))
        return ip

    @cached_property
    def L(self):
        """Lower-triangular factor as a scipy CSR matrix (permuted basis)."""
        n = self.dim
        lengths = np.diff(self.ptr)
        rows = np.repeat(np.arange(n), lengths)
        cols = np.concatenate([np.arange(self.first[i], i + 1) for i in range(n)]) if n else rows
        return sp.csr_matrix((self.env, (rows, cols)), shape=(n, n))

    def solve(self, b):
        return solve(self, b)

    def log_det(self):
        return log_det(self)

    @cached_property
    def _selinv(self):
        return _env.envelope_selected_inverse(self.first, self.ptr, self.env)

    def inverse_entries(self, i, j):
        """Entries (Q^{-1})_{ij} for index arrays in the original labelling.

        Entries whose positions fall outside the factor envelope are computed
        by column solves.
        """
        i = np.atleast_1d(np.asarray(i, dtype=np.int64))
        j = np.atleast_1d(np.asarray(j, dtype=np.int64))
        ip = self.iperm
        out = _env.envelope_lookup(self.first, self.ptr, self._selinv, ip[i], ip[j])
        miss = np.isnan(out)
        if miss.any():
            cols = np.unique(j[miss])
            E = np.zeros((self.dim, len(cols)))
            E[cols, np.arange(len(cols))] = 1.0
            X = solve(self, E)
            where = np.searchsorted(cols, j[miss])
            out[miss] = X[i[miss], where]
        return out

    def lower_solve(self, B):
        """``L^{-1} P B``; column norms give quadratic forms ``b^T Q^{-1} b``."""
        B = np.asarray(B, dtype=float)
        if B.ndim == 1:
            return _env.envelope_forward(self.first, self.ptr, self.env, B[self.perm].copy())
        out = np.empty_like(B)
        Bp = np.ascontiguousarray(B[self.perm])
        for c in range(B.shape[1]):
            out[:, c] = _env.envelope_forward(self.first, self.ptr, self.env,
                                              np.ascontiguousarray(Bp[:, c]))
        return out


def cholesky(Q, perm=None):
    """Factorize a symmetric positive-definite :class:`SparseSymMatrix`.

    ``perm`` may be supplied to reuse an ordering computed for a matrix with
    the same sparsity pattern.  Raises :class:`NotPositiveDefinite` on a
    non-positive pivot (intrinsic or singular precisions).
    """
    if perm is None:
        perm = fill_reducing_order(Q)
    A = Q.csr[perm][:, perm]
    A = sp.tril(A, format="csr")
    A.sort_indices()
    indptr = A.indptr.astype(np.int64)
    indices = A.indices.astype(np.int64)
    first, ptr = _env.envelope_structure(indptr, indices, Q.dim)
    env, failed = _env.envelope_factor(indptr, indices, A.data.astype(float), first, ptr)
    if failed >= 0:
        raise NotPositiveDefinite(int(perm[failed]))
    return CholeskyFactor(Q, np.asarray(perm, dtype=np.int64), first, ptr, env)


def solve(factor, b):
    """Solve ``Q x = b`` for a vector or a matrix of right-hand sides."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != factor.dim:
        raise ValueError(f"dimension mismatch: factor has dim {factor.dim}, rhs has {b.shape[0]}")
    if b.ndim == 1:
        z = _env.envelope_forward(factor.first, factor.ptr, factor.env, b[factor.perm].copy())
        xp = _env.envelope_backward(factor.first, factor.ptr, factor.env, z)
        x = np.empty_like(xp)
        x[factor.perm] = xp
        return x
    Xp = _env.envelope_solve_many(factor.first, factor.ptr, factor.env,
                                  np.ascontiguousarray(b[factor.perm]))
    X = np.empty_like(Xp)
    X[factor.perm] = Xp
    return X


def log_det(factor):
    """``log|Q| = 2 sum(log L_ii)``."""
    diag = factor.env[factor.ptr[1:] - 1]
    return 2.0 * float(np.sum(np.log(diag)))


def marginal_variances(factor):
    """Diagonal of ``Q^{-1}`` via selected (Takahashi) inversion."""
    diag_perm = factor._selinv[factor.ptr[1:] - 1]
    out = np.empty(factor.dim)
    out[factor.perm] = diag_perm
    return out


def kron(A, B):
    """Kronecker product; entry ``(i*dimB + k, j*dimB + l) = A_ij * B_kl``."""
    return SparseSymMatrix.from_scipy(sp.kron(A.csr, B.csr, format="csr"))


def trace_product(Q1, factor0):
    """``tr(Q1 Q0^{-1})`` using inverse entries on the sparsity pattern of Q1."""
    low = Q1
    vals = factor0.inverse_entries(low.rows, low.cols)
    off = low.rows != low.cols
    return float(np.sum(low.vals * vals) + np.sum(low.vals[off] * vals[off]))


class PatternFactorizer:
    """Repeated factorization of ``sum_k c_k B_k`` on one fixed sparsity pattern.

    The ordering, the envelope structure and the scatter of every term onto
    the permuted lower triangle are computed once, so each new coefficient
    vector costs one sparse mat-vec plus the numeric factorization.  Terms are
    given as coordinate entries ``(row, col, value, term)`` covering both
    triangles of each symmetric term.
    """

    def __init__(self, dim, rows, cols, vals, terms, n_terms, perm=None):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        terms = np.asarray(terms, dtype=np.int64)
        self.dim = int(dim)
        self.n_terms = int(n_terms)
        if perm is None:
            pattern = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(dim, dim))
            perm = fill_reducing_order(pattern)
        self.perm = np.asarray(perm, dtype=np.int64)
        ip = np.empty_like(self.perm)
        ip[self.perm] = np.arange(dim)
        pr, pc = ip[rows], ip[cols]
        keep = pr >= pc
        keys, pos = np.unique(pr[keep] * dim + pc[keep], return_inverse=True)
        urow, ucol = keys // dim, keys % dim
        self.indptr = np.searchsorted(urow, np.arange(dim + 1)).astype(np.int64)
        self.indices = ucol.astype(np.int64)
        self.scatter = sp.csr_matrix((vals[keep], (pos, terms[keep])), shape=(len(keys), self.n_terms))
        self.first, self.ptr = _env.envelope_structure(self.indptr, self.indices, dim)
        a, b = self.perm[urow], self.perm[ucol]
        self._lo_rows, self._lo_cols = np.maximum(a, b), np.minimum(a, b)
        self._order = np.lexsort((self._lo_rows, self._lo_cols))

    @classmethod
    def from_terms(cls, mats, perm=None):
        """Factorizer for ``sum_k c_k mats[k]`` (square symmetric scipy matrices)."""
        parts = [sp.coo_matrix(M) for M in mats]
        dim = parts[0].shape[0]
        return cls(dim, np.concatenate([p.row for p in parts]), np.concatenate([p.col for p in parts]),
                   np.concatenate([p.data for p in parts]),
                   np.concatenate([np.full(p.nnz, k) for k, p in enumerate(parts)]), len(parts), perm)

    def matrix(self, coefs):
        data = self.scatter @ np.asarray(coefs, dtype=float)
        o = self._order
        return SparseSymMatrix(self.dim, self._lo_rows[o], self._lo_cols[o], data[o])

    def factor(self, coefs):
        data = self.scatter @ np.asarray(coefs, dtype=float)
        env, failed = _env.envelope_factor(self.indptr, self.indices, data, self.first, self.ptr)
        if failed >= 0:
            raise NotPositiveDefinite(int(self.perm[failed]))
        o = self._order
        Q = SparseSymMatrix(self.dim, self._lo_rows[o], self._lo_cols[o], data[o])
        return CholeskyFactor(Q, self.perm, self.first, self.ptr, env)
