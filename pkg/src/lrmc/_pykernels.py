"""Pure-Python (numpy/scipy) twins of the compiled kernels in ``_ckernels``."""
import numpy as np
import scipy.sparse as sp

_CHUNK = 1 << 20


def masked_dot(L, R, rows, cols):
    m = rows.shape[0]
    out = np.empty(m)
    for a in range(0, m, _CHUNK):
        i = rows[a:a + _CHUNK]
        j = cols[a:a + _CHUNK]
        acc = np.zeros(i.shape[0])
        # column-at-a-time keeps the accumulation order of the compiled loop
        for q in range(L.shape[1]):
            acc += L[i, q] * R[j, q]
        out[a:a + _CHUNK] = acc
    return out


def full_dot(L, R):
    n1, n2 = L.shape[0], R.shape[0]
    out = np.zeros((n1, n2))
    for q in range(L.shape[1]):
        out += np.multiply.outer(L[:, q], R[:, q])
    return out


def masked_matmul(out_idx, in_idx, vals, B, n_out):
    M = sp.csr_matrix((vals, (out_idx, in_idx)), shape=(n_out, B.shape[0]))
    return np.asarray(M @ B)


def segment_kth_largest(vals, ptr, k):
    nseg = ptr.shape[0] - 1
    if k == 0:
        return np.full(nseg, np.inf)
    counts = np.diff(ptr)
    seg = np.repeat(np.arange(nseg), counts)
    order = np.lexsort((-np.abs(vals), seg))
    ranked = np.abs(vals)[order]
    out = np.zeros(nseg)
    full = counts >= k
    out[full] = ranked[ptr[:-1][full] + k - 1]
    return out
