"""Brute-force reference implementations used as independent test oracles."""
import math

import numpy as np


def soft_threshold_loop(M, zeta):
    out = np.zeros_like(M, dtype=float)
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            m = M[i, j]
            mag = max(0.0, abs(m) - zeta)
            out[i, j] = math.copysign(mag, m) if mag > 0 else 0.0
    return out


def kth_largest_padded(values, length, k):
    """k-th largest magnitude of ``values`` padded with zeros to ``length``."""
    if k == 0:
        return math.inf
    mags = sorted((abs(v) for v in values), reverse=True)
    mags += [0.0] * (length - len(mags))
    return mags[k - 1]


def sparsify_loop(M, alpha_tilde, mask=None):
    """Keep-top-fraction by explicit per-row / per-column sorting."""
    n1, n2 = M.shape
    if mask is None:
        mask = np.ones(M.shape, dtype=bool)
    kr = math.ceil(round(alpha_tilde * n2, 9))
    kc = math.ceil(round(alpha_tilde * n1, 9))
    out = np.zeros_like(M, dtype=float)
    for i in range(n1):
        row = [M[i, j] for j in range(n2) if mask[i, j]]
        rc = kth_largest_padded(row, n2, kr)
        for j in range(n2):
            if not mask[i, j]:
                continue
            col = [M[a, j] for a in range(n1) if mask[a, j]]
            cc = kth_largest_padded(col, n1, kc)
            if abs(M[i, j]) >= rc and abs(M[i, j]) >= cc:
                out[i, j] = M[i, j]
    return out


def dense_residual(L, R, S_dense, Y_dense, mask):
    return np.where(mask, L @ R.T + S_dense - Y_dense, 0.0)
