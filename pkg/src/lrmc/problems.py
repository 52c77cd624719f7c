"""Synthetic robust-matrix-completion instances, observation masks and matrix files.

Random draws come from counter-based Philox generators; each artifact
(factors, mask, outlier support, outlier magnitudes) has its own stream
spawned from the instance seed, so changing ``alpha`` never moves the mask.
"""
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidParameterError, InvalidRankError, InvalidShapeError
from .matops import IndexSet, MaskedMatrix

MAGIC = b"LRMCMAT1"
_HEADER = struct.Struct("<8sII")
_STREAMS = ("factors", "mask", "support", "magnitudes")


def _streams(seed):
    children = np.random.SeedSequence(int(seed)).spawn(len(_STREAMS))
    return {name: np.random.Generator(np.random.Philox(ss)) for name, ss in zip(_STREAMS, children)}


@dataclass(frozen=True, eq=False)
class ObservedMatrix:
    """Observed entries ``Pi_Omega(Y)`` and the sampling rate ``p = |Omega| / (n1 n2)``."""

    data: MaskedMatrix
    p: float

    @classmethod
    def from_masked(cls, data):
        n1, n2 = data.shape
        if len(data.index) == 0:
            raise InvalidParameterError("no observed entries")
        if not np.all(np.isfinite(data.values)):
            raise InvalidParameterError("observed values must be finite")
        return cls(data, len(data.index) / (n1 * n2))

    @property
    def shape(self):
        return self.data.shape

    @property
    def index(self):
        return self.data.index

    @property
    def values(self):
        return self.data.values

    def scaled(self, c):
        return ObservedMatrix(self.data.with_values(c * self.data.values), self.p)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    Lstar: np.ndarray
    Rstar: np.ndarray
    Sstar: MaskedMatrix
    alpha: float
    sigma_r: float
    kappa: float
    mu: float

    @cached_property
    def xstar(self):
        return self.Lstar @ self.Rstar.T

    @cached_property
    def xstar_fro(self):
        return float(np.linalg.norm(self.xstar))

    @property
    def rank(self):
        return self.Lstar.shape[1]

    def outlier_row_col_fraction(self):
        """Largest realized fraction of outliers in any row or column."""
        supp = self.Sstar.support()
        n1, n2 = self.Sstar.shape
        if len(supp) == 0:
            return 0.0
        row = np.bincount(supp.rows, minlength=n1).max() / n2
        col = np.bincount(supp.cols, minlength=n2).max() / n1
        return float(max(row, col))


@dataclass(frozen=True, eq=False)
class SyntheticInstance:
    observed: ObservedMatrix
    truth: GroundTruth
    seed: int


def _check_p(p):
    p = float(p)
    if not (np.isfinite(p) and 0.0 < p <= 1.0):
        raise InvalidParameterError(f"sampling rate p must lie in (0, 1], got {p}")
    return p


def _mask_from_stream(rng, n1, n2, p):
    if p == 1.0:
        return IndexSet.full(n1, n2)
    return IndexSet.from_mask(rng.random((n1, n2)) < p)


def bernoulli_mask(n1, n2, p, seed):
    """Each ``(i, j)`` is observed independently with probability ``p``."""
    p = _check_p(p)
    return _mask_from_stream(_streams(seed)["mask"], int(n1), int(n2), p)


def incoherence(L, R):
    """Return ``(mu, kappa, sigma_r)`` of ``L R^T`` using QR of the factors."""
    L = np.asarray(L, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    n1, r = L.shape
    n2 = R.shape[0]
    Ql, Rl = np.linalg.qr(L)
    Qr, Rr = np.linalg.qr(R)
    u, s, vt = np.linalg.svd(Rl @ Rr.T)
    if s.size < r or s[r - 1] <= 1e-12 * max(s[0], np.finfo(float).tiny):
        raise InvalidRankError("L R^T is rank deficient")
    U = Ql @ u[:, :r]
    V = Qr @ vt[:r].T
    mu = max(n1 * np.max(np.sum(U ** 2, axis=1)), n2 * np.max(np.sum(V ** 2, axis=1))) / r
    return float(mu), float(s[0] / s[r - 1]), float(s[r - 1])


def generate_synthetic(n1, n2, r, p, alpha, seed):
    """Gaussian-factor low-rank matrix plus uniform outliers planted on the observed set."""
    n1, n2, r = int(n1), int(n2), int(r)
    if n1 < 1 or n2 < 1:
        raise InvalidParameterError("dimensions must be positive")
    if r < 1 or r > min(n1, n2):
        raise InvalidParameterError(f"rank {r} outside [1, {min(n1, n2)}]")
    p = _check_p(p)
    alpha = float(alpha)
    if not (0.0 <= alpha < 1.0):
        raise InvalidParameterError(f"alpha must lie in [0, 1), got {alpha}")
    rngs = _streams(seed)
    Lstar = rngs["factors"].standard_normal((n1, r))
    Rstar = rngs["factors"].standard_normal((n2, r))
    xstar = Lstar @ Rstar.T
    omega = _mask_from_stream(rngs["mask"], n1, n2, p)
    m = len(omega)
    count = int(np.floor(alpha * m))
    bound = float(np.mean(np.abs(xstar)))
    pos = np.sort(rngs["support"].choice(m, size=count, replace=False)) if count else np.empty(0, dtype=np.int64)
    svals = np.zeros(m)
    svals[pos] = rngs["magnitudes"].uniform(-bound, bound, size=count)
    Sstar = MaskedMatrix(omega, svals)
    Y = MaskedMatrix(omega, xstar[omega.rows, omega.cols] + svals)
    mu, kappa, sigma_r = incoherence(Lstar, Rstar)
    truth = GroundTruth(Lstar, Rstar, Sstar, alpha, sigma_r, kappa, mu)
    truth.__dict__["xstar"] = xstar
    return SyntheticInstance(ObservedMatrix.from_masked(Y), truth, int(seed))


def subsample(M, p, seed):
    """Observe a dense matrix on a Bernoulli(p) mask."""
    M = np.asarray(M, dtype=np.float64)
    omega = bernoulli_mask(M.shape[0], M.shape[1], p, seed)
    return ObservedMatrix.from_masked(MaskedMatrix.from_dense(M, omega))


# -- matrix files -----------------------------------------------------------

def _parse_csv(text, allow_nan):
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = [float(tok) for tok in line.split(",")]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise FormatError(f"line {lineno}: expected {width} fields, got {len(row)}")
        rows.append(row)
    if not rows:
        raise FormatError("line 1: empty matrix file")
    M = np.array(rows, dtype=np.float64)
    _check_values(M, allow_nan)
    return M


def _check_values(M, allow_nan):
    bad = ~np.isfinite(M)
    if allow_nan:
        bad &= ~np.isnan(M)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise FormatError(f"line {i + 1}: non-finite value in column {j + 1}")


def _parse_bin(raw, allow_nan):
    if len(raw) < _HEADER.size:
        raise FormatError(f"offset {len(raw)}: truncated header")
    magic, n1, n2 = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError("offset 0: bad magic")
    expected = _HEADER.size + 8 * n1 * n2
    if len(raw) != expected:
        raise FormatError(f"offset {len(raw)}: expected {expected} bytes for {n1}x{n2}")
    M = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n1, n2).astype(np.float64)
    _check_values(M, allow_nan)
    return M


def _read(path, allow_nan):
    raw = Path(path).read_bytes()
    if raw.startswith(MAGIC):
        return _parse_bin(raw, allow_nan)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"offset {exc.start}: not UTF-8 text or binary matrix") from None
    return _parse_csv(text, allow_nan)


def load_dense(path):
    """Read a matrix from CSV or the ``LRMCMAT1`` binary format (sniffed by magic)."""
    return _read(path, allow_nan=False)


def save_dense(M, path, fmt=None):
    """Write a matrix; ``fmt`` is ``"csv"`` or ``"bin"`` (default: from the suffix)."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise InvalidShapeError("only 2-D matrices can be saved")
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "bin")
    if fmt == "csv":
        lines = (",".join(repr(float(v)) for v in row) for row in M)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    elif fmt == "bin":
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, M.shape[0], M.shape[1]))
            fh.write(M.astype("<f8").tobytes(order="C"))
    else:
        raise InvalidParameterError(f"unknown matrix format {fmt!r}")


def save_observed(Y, path, fmt=None):
    """Observed matrix as a dense file with NaN at unobserved positions."""
    dense = np.full(Y.shape, np.nan)
    dense[Y.index.rows, Y.index.cols] = Y.values
    save_dense(dense, path, fmt)


def load_observed(path):
    M = _read(path, allow_nan=True)
    omega = IndexSet.from_mask(~np.isnan(M))
    return ObservedMatrix.from_masked(MaskedMatrix.from_dense(M, omega))


def save_truth(truth, directory, fmt="bin"):
    """Write ``factors`` ((n1+n2) x r, L stacked over R) and ``sparse.csv`` (i,j,value)."""
    directory = Path(directory)
    ext = "csv" if fmt == "csv" else "bin"
    save_dense(np.vstack([truth.Lstar, truth.Rstar]), directory / f"factors.{ext}", fmt)
    supp = truth.Sstar.values != 0
    idx = truth.Sstar.index
    with open(directory / "sparse.csv", "w", encoding="utf-8") as fh:
        fh.write("i,j,value\n")
        for i, j, v in zip(idx.rows[supp], idx.cols[supp], truth.Sstar.values[supp]):
            fh.write(f"{i},{j},{float(v)!r}\n")


def load_truth(directory, observed, alpha=None):
    """Rebuild a GroundTruth from :func:`save_truth` output and its observed matrix."""
    directory = Path(directory)
    fpath = next((directory / f"factors.{e}" for e in ("bin", "csv") if (directory / f"factors.{e}").exists()), None)
    if fpath is None:
        raise FormatError(f"no factors file in {directory}")
    F = load_dense(fpath)
    n1, n2 = observed.shape
    if F.shape[0] != n1 + n2:
        raise FormatError(f"factors file has {F.shape[0]} rows, expected {n1 + n2}")
    Lstar, Rstar = F[:n1].copy(), F[n1:].copy()
    svals = np.zeros(len(observed.index))
    spath = directory / "sparse.csv"
    if spath.exists():
        lines = spath.read_text(encoding="utf-8").splitlines()[1:]
        if lines:
            try:
                tri = np.array([[float(t) for t in ln.split(",")] for ln in lines if ln.strip()])
            except ValueError as exc:
                raise FormatError(f"{spath}: {exc}") from None
            sub = IndexSet.from_coords(observed.shape, tri[:, 0].astype(np.int64), tri[:, 1].astype(np.int64))
            order = np.lexsort((tri[:, 1], tri[:, 0]))
            svals[observed.index.locate(sub)] = tri[order, 2]
    mu, kappa, sigma_r = incoherence(Lstar, Rstar)
    if alpha is None:
        alpha = np.count_nonzero(svals) / len(svals)
    return GroundTruth(Lstar, Rstar, MaskedMatrix(observed.index, svals), float(alpha), sigma_r, kappa, mu)
