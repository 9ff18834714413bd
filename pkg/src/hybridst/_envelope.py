"""Numba kernels for profile (envelope) Cholesky factorization.

Row ``i`` of the lower factor is stored densely from column ``first[i]`` up to
the diagonal, at offsets ``ptr[i] .. ptr[i + 1]``.  Fill-in of a Cholesky
factor never leaves the row profile of the input, so the storage is exact once
``first`` is known.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def envelope_structure(indptr, indices, n):
    first = np.empty(n, dtype=np.int64)
    for i in range(n):
        f = i
        for p in range(indptr[i], indptr[i + 1]):
            c = indices[p]
            if c < f:
                f = c
        first[i] = f
    ptr = np.empty(n + 1, dtype=np.int64)
    ptr[0] = 0
    for i in range(n):
        ptr[i + 1] = ptr[i] + (i - first[i] + 1)
    return first, ptr


@njit(cache=True, nogil=True)
def envelope_factor(indptr, indices, data, first, ptr):
    """Returns (values, failed_row); failed_row is -1 on success."""
    n = first.shape[0]
    env = np.zeros(ptr[n])
    for i in range(n):
        for p in range(indptr[i], indptr[i + 1]):
            c = indices[p]
            if c <= i:
                env[ptr[i] + c - first[i]] += data[p]
    for i in range(n):
        fi = first[i]
        bi = ptr[i] - fi
        for j in range(fi, i):
            fj = first[j]
            bj = ptr[j] - fj
            lo = fi if fi > fj else fj
            s = env[bi + j]
            for k in range(lo, j):
                s -= env[bi + k] * env[bj + k]
            env[bi + j] = s / env[bj + j]
        s = env[bi + i]
        for k in range(fi, i):
            s -= env[bi + k] * env[bi + k]
        if not s > 0.0:
            return env, i
        env[bi + i] = np.sqrt(s)
    return env, -1


@njit(cache=True, nogil=True)
def envelope_forward(first, ptr, env, b):
    n = first.shape[0]
    z = b.copy()
    for i in range(n):
        fi = first[i]
        bi = ptr[i] - fi
        s = z[i]
        for k in range(fi, i):
            s -= env[bi + k] * z[k]
        z[i] = s / env[bi + i]
    return z


@njit(cache=True, nogil=True)
def envelope_backward(first, ptr, env, z):
    n = first.shape[0]
    x = z.copy()
    for i in range(n - 1, -1, -1):
        fi = first[i]
        bi = ptr[i] - fi
        xi = x[i] / env[bi + i]
        x[i] = xi
        for k in range(fi, i):
            x[k] -= env[bi + k] * xi
    return x


@njit(cache=True, nogil=True)
def envelope_solve_many(first, ptr, env, B):
    out = np.empty_like(B)
    for c in range(B.shape[1]):
        z = envelope_forward(first, ptr, env, np.ascontiguousarray(B[:, c]))
        out[:, c] = envelope_backward(first, ptr, env, z)
    return out


@njit(cache=True, nogil=True)
def envelope_selected_inverse(first, ptr, env):
    """Takahashi recursions restricted to the envelope.

    Returns the entries of Q^{-1} at every envelope position, stored with the
    same layout as the factor.
    """
    n = first.shape[0]
    # column structure of L below the diagonal: rows k > i with first[k] <= i
    count = np.zeros(n + 1, dtype=np.int64)
    for k in range(n):
        for i in range(first[k], k):
            count[i + 1] += 1
    colptr = np.cumsum(count)
    rows = np.empty(colptr[n], dtype=np.int64)
    fill = colptr[:n].copy()
    for k in range(n):
        for i in range(first[k], k):
            rows[fill[i]] = k
            fill[i] += 1

    sig = np.zeros(ptr[n])
    for i in range(n - 1, -1, -1):
        lii = env[ptr[i] + i - first[i]]
        c0 = colptr[i]
        c1 = colptr[i + 1]
        for a in range(c0, c1):
            j = rows[a]
            s = 0.0
            for b in range(c0, c1):
                k = rows[b]
                lki = env[ptr[k] + i - first[k]]
                if k >= j:
                    skj = sig[ptr[k] + j - first[k]]
                else:
                    skj = sig[ptr[j] + k - first[j]]
                s += lki * skj
            sig[ptr[j] + i - first[j]] = -s / lii
        s = 0.0
        for b in range(c0, c1):
            k = rows[b]
            s += env[ptr[k] + i - first[k]] * sig[ptr[k] + i - first[k]]
        sig[ptr[i] + i - first[i]] = 1.0 / (lii * lii) - s / lii
    return sig


@njit(cache=True)
def envelope_lookup(first, ptr, vals, r, c):
    """Entries at permuted positions (r, c); NaN where outside the envelope."""
    out = np.empty(r.shape[0])
    for p in range(r.shape[0]):
        i = r[p]
        j = c[p]
        if j > i:
            i, j = j, i
        if j < first[i]:
            out[p] = np.nan
        else:
            out[p] = vals[ptr[i] + j - first[i]]
    return out
