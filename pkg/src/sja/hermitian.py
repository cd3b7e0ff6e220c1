"""Dense Hermitian matrices and the classical (largest-pivot) Jacobi algorithm.

Every rotation is logged so that the statistics of decimated elements can be
studied afterwards.  The hot loop is compiled with numba; it is dtype generic,
so real-symmetric input takes a float64 fast path while complex input is
handled with the full phase bookkeeping.  Both produce the same log.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numba
import numpy as np

__all__ = [
    "HermitianMatrix",
    "TwoByTwoRotation",
    "DecimationRecord",
    "DecimationLog",
    "SpectralDecomposition",
    "NoConvergenceError",
    "PivotCache",
    "pivot_select",
    "decimate_step",
    "jacobi_diagonalize",
    "offdiag_flow_time",
    "rotation_cap",
    "default_stop_threshold",
]


class NoConvergenceError(RuntimeError):
    """Raised when the rotation cap is hit; carries the partial log."""

    def __init__(self, message: str, log: "DecimationLog"):
        super().__init__(message)
        self.log = log


class HermitianMatrix:
    """Dense N x N Hermitian operator stored in full.

    The constructor symmetrises its input: the upper triangle and the real part
    of the diagonal are kept, the lower triangle is overwritten with the
    conjugate.  Real input stays real (float64), anything else becomes
    complex128.
    """

    def __init__(self, entries, *, check: bool = True, tol: float = 1e-10):
        h = np.array(entries, copy=True)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {h.shape}")
        if h.shape[0] < 2:
            raise ValueError("dimension must be at least 2")
        if np.iscomplexobj(h):
            if not np.any(h.imag):
                h = h.real.astype(np.float64)
            else:
                h = h.astype(np.complex128)
        else:
            h = h.astype(np.float64)
        if check:
            scale = max(np.abs(h).max(), 1.0)
            if np.abs(h - h.conj().T).max() > tol * scale:
                raise ValueError("matrix is not Hermitian within tolerance")
        iu = np.triu_indices(h.shape[0], 1)
        h[(iu[1], iu[0])] = np.conj(h[iu])
        if np.iscomplexobj(h):
            h[np.diag_indices_from(h)] = h.diagonal().real
        self.entries = h

    @classmethod
    def wrap(cls, entries: np.ndarray) -> "HermitianMatrix":
        """Adopt an array already known to be exactly Hermitian (no copy)."""
        out = object.__new__(cls)
        out.entries = entries
        return out

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.entries)

    def copy(self) -> "HermitianMatrix":
        return HermitianMatrix.wrap(self.entries.copy())

    def frobenius_norm(self) -> float:
        return float(np.linalg.norm(self.entries))

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def __repr__(self) -> str:
        kind = "real" if self.is_real else "complex"
        return f"HermitianMatrix(dim={self.dim}, {kind})"


@dataclass(frozen=True)
class TwoByTwoRotation:
    a: int
    b: int
    eta: float
    phi: float


@dataclass(frozen=True)
class DecimationRecord:
    step: int
    w: float
    E_a: float
    E_b: float
    eta: float
    phi: float

    @property
    def omega(self) -> float:
        return self.E_a - self.E_b


@dataclass
class DecimationLog:
    """Column-oriented record of every Jacobi rotation of one run.

    ``a`` and ``b`` hold the pivot indices.  ``beta_inv_sq`` is the off-diagonal
    flow time *before* each step, so ``beta_inv_sq[n]`` is beta_n^-2; the value
    after the last step is ``residual_beta_inv_sq``.
    """

    dim: int
    beta0_inv_sq: float
    w: np.ndarray
    E_a: np.ndarray
    E_b: np.ndarray
    eta: np.ndarray
    phi: np.ndarray
    a: np.ndarray
    b: np.ndarray
    beta_inv_sq: np.ndarray
    residual_beta_inv_sq: float
    final_offdiag: float
    converged: bool = True

    def __len__(self) -> int:
        return len(self.w)

    @property
    def steps(self) -> np.ndarray:
        return np.arange(len(self.w))

    @property
    def omega(self) -> np.ndarray:
        return self.E_a - self.E_b

    @property
    def records(self) -> Iterator[DecimationRecord]:
        for n in range(len(self.w)):
            yield self[n]

    def __getitem__(self, n: int) -> DecimationRecord:
        return DecimationRecord(
            int(n), float(self.w[n]), float(self.E_a[n]), float(self.E_b[n]),
            float(self.eta[n]), float(self.phi[n]),
        )

    def decimated_norm(self) -> float:
        """Sum of squared decimated elements."""
        return float(np.sum(self.w ** 2))

    def bookkeeping_residual(self) -> float:
        """Relative violation of ``2 sum w^2 + N beta^-2 = N beta0^-2``."""
        lhs = 2.0 * self.decimated_norm() + self.dim * self.residual_beta_inv_sq
        rhs = self.dim * self.beta0_inv_sq
        if rhs == 0.0:
            return abs(lhs)
        return abs(lhs - rhs) / rhs


@dataclass
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: Optional[np.ndarray] = field(default=None, repr=False)

    def residual(self, h: HermitianMatrix) -> float:
        """max_j ||H v_j - E_j v_j||."""
        if self.eigenvectors is None:
            raise ValueError("decomposition was computed without eigenvectors")
        v = self.eigenvectors
        r = np.asarray(h) @ v - v * self.eigenvalues
        return float(np.linalg.norm(r, axis=0).max())


def offdiag_flow_time(h) -> float:
    """Mean squared off-diagonal Frobenius norm of a row, 1/beta^2."""
    m = np.asarray(h)
    n = m.shape[0]
    total = np.sum(np.abs(m) ** 2) - np.sum(np.abs(np.diagonal(m)) ** 2)
    return float(max(total, 0.0) / n)


def default_stop_threshold(h) -> float:
    m = np.asarray(h)
    return 1e-13 * float(np.linalg.norm(m)) / m.shape[0]


def rotation_cap(h, stop_threshold: float) -> int:
    """Hard cap 10 N^2 ln(N beta0^-1 / stop), at least 10 N^2.

    Since w_max^2 <= N beta^-2 / 2 and beta_n^-1 <= exp(-n/N^2) beta0^-1, the
    largest-pivot loop must terminate well before this many rotations.
    """
    m = np.asarray(h)
    n = m.shape[0]
    binv = math.sqrt(offdiag_flow_time(m))
    if binv == 0.0:
        return 10 * n * n
    arg = n * binv / stop_threshold
    return int(10 * n * n * max(math.log(max(arg, 1.0)), 1.0))


# --------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _abs_max(x, lo, hi):
    # eight independent accumulators break the max dependency chain
    a0 = a1 = a2 = a3 = a4 = a5 = a6 = a7 = -1.0
    j = lo
    while j + 8 <= hi:
        a0 = max(a0, abs(x[j]))
        a1 = max(a1, abs(x[j + 1]))
        a2 = max(a2, abs(x[j + 2]))
        a3 = max(a3, abs(x[j + 3]))
        a4 = max(a4, abs(x[j + 4]))
        a5 = max(a5, abs(x[j + 5]))
        a6 = max(a6, abs(x[j + 6]))
        a7 = max(a7, abs(x[j + 7]))
        j += 8
    best = max(max(max(a0, a1), max(a2, a3)), max(max(a4, a5), max(a6, a7)))
    while j < hi:
        best = max(best, abs(x[j]))
        j += 1
    return best


@numba.njit(cache=True)
def _scan_row(h, i, n):
    """(first argmax, max) of |h[i, j]| over j > i; (-1, -1) for the last row."""
    row = h[i]
    best = _abs_max(row, i + 1, n)
    arg = -1
    for j in range(i + 1, n):
        if abs(row[j]) == best:
            arg = j
            break
    return arg, best


@numba.njit(cache=True)
def _plain_max(x):
    n = x.shape[0]
    a0 = a1 = a2 = a3 = -np.inf
    j = 0
    while j + 4 <= n:
        a0 = max(a0, x[j])
        a1 = max(a1, x[j + 1])
        a2 = max(a2, x[j + 2])
        a3 = max(a3, x[j + 3])
        j += 4
    best = max(max(a0, a1), max(a2, a3))
    while j < n:
        best = max(best, x[j])
        j += 1
    return best


@numba.njit(cache=True)
def _argmax(x):
    best = _plain_max(x)
    for j in range(x.shape[0]):
        if x[j] == best:
            return j
    return 0


@numba.njit(cache=True)
def _build_cache(h, row_arg, row_val):
    n = h.shape[0]
    for i in range(n):
        arg, best = _scan_row(h, i, n)
        row_arg[i] = arg
        row_val[i] = best


@numba.njit(cache=True)
def _global_max(row_arg, row_val):
    best = -1.0
    arg = -1
    for i in range(row_val.shape[0]):
        if row_val[i] > best:
            best = row_val[i]
            arg = i
    if arg < 0:
        return -1, -1, 0.0
    return arg, row_arg[arg], best


@numba.njit(cache=True)
def _rotate(h, u, a, b, use_u):
    """Zero h[a, b] with the 2x2 rotation; returns (w, E_a, E_b, eta, phi)."""
    n = h.shape[0]
    hab = h[a, b]
    w = abs(hab)
    ea = h[a, a].real
    eb = h[b, b].real
    om = ea - eb
    # H_ab = w e^{-i phi}; ph = e^{i phi} = conj(H_ab) / w
    ph = np.conj(hab) / w
    phi = -np.angle(hab)
    if phi <= -np.pi:
        phi += 2.0 * np.pi
    if om == 0.0:
        eta = 0.5 * np.pi
    else:
        eta = math.atan(2.0 * w / om)
    c = math.cos(0.5 * eta)
    s = math.sin(0.5 * eta)
    # E_a' = Ebar + sgn(omega) sqrt((omega/2)^2 + w^2), sgn(0) = +1
    half = 0.5 * (ea + eb)
    rad = math.hypot(0.5 * om, w)
    if om >= 0.0:
        new_a = half + rad
        new_b = half - rad
    else:
        new_a = half - rad
        new_b = half + rad
    sph = s * ph
    sphc = s * np.conj(ph)
    # rows a, b are contiguous; columns follow by Hermiticity
    ra = h[a]
    rb = h[b]
    for i in range(n):
        hai = ra[i]
        hbi = rb[i]
        ra[i] = c * hai + sphc * hbi
        rb[i] = c * hbi - sph * hai
    for i in range(n):
        h[i, a] = np.conj(ra[i])
        h[i, b] = np.conj(rb[i])
    h[a, a] = new_a
    h[b, b] = new_b
    h[a, b] = 0.0
    h[b, a] = 0.0
    if use_u:
        # rows of u are the Jacobi basis vectors (conjugated columns of U)
        for k in range(u.shape[1]):
            ua = u[a, k]
            ub = u[b, k]
            u[a, k] = c * ua + sphc * ub
            u[b, k] = c * ub - sph * ua
    return w, ea, eb, eta, phi


@numba.njit(cache=True)
def _refresh_cache(h, row_arg, row_val, a, b):
    n = h.shape[0]
    for i in range(b + 1):
        if i == a or i == b:
            arg, best = _scan_row(h, i, n)
            row_arg[i] = arg
            row_val[i] = best
            continue
        r = row_arg[i]
        if r == a or r == b:
            arg, best = _scan_row(h, i, n)
            row_arg[i] = arg
            row_val[i] = best
            continue
        # only columns a (if i < a) and b changed in this row
        best = row_val[i]
        arg = r
        if i < a:
            v = abs(h[a, i])
            if v > best or (v == best and a < arg):
                best = v
                arg = a
        v = abs(h[b, i])
        if v > best or (v == best and b < arg):
            best = v
            arg = b
        row_arg[i] = arg
        row_val[i] = best


@numba.njit(cache=True)
def _sync_row(h, i, ver, hist_p, hist_q, hist_c, hist_s, upto):
    # replay the rotations row i has missed; each touches two entries
    row = h[i]
    for k in range(ver[i], upto):
        p = hist_p[k]
        q = hist_q[k]
        c = hist_c[k]
        sph = hist_s[k]
        x = row[p]
        y = row[q]
        row[p] = c * x + sph * y
        row[q] = c * y - np.conj(sph) * x
    ver[i] = upto


@numba.njit(cache=True)
def _rotate_rows(h, u, a, b, use_u):
    """Row-only version of :func:`_rotate`; columns a, b are left stale."""
    n = h.shape[0]
    hab = h[a, b]
    w = abs(hab)
    ea = h[a, a].real
    eb = h[b, b].real
    om = ea - eb
    ph = np.conj(hab) / w
    phi = -np.angle(hab)
    if phi <= -np.pi:
        phi += 2.0 * np.pi
    if om == 0.0:
        eta = 0.5 * np.pi
    else:
        eta = math.atan(2.0 * w / om)
    c = math.cos(0.5 * eta)
    s = math.sin(0.5 * eta)
    half = 0.5 * (ea + eb)
    rad = math.hypot(0.5 * om, w)
    if om >= 0.0:
        new_a = half + rad
        new_b = half - rad
    else:
        new_a = half - rad
        new_b = half + rad
    sph = s * ph
    sphc = s * np.conj(ph)
    ra = h[a]
    rb = h[b]
    for i in range(n):
        hai = ra[i]
        hbi = rb[i]
        ra[i] = c * hai + sphc * hbi
        rb[i] = c * hbi - sph * hai
    ra[a] = new_a
    rb[b] = new_b
    ra[b] = 0.0
    rb[a] = 0.0
    if use_u:
        for k in range(u.shape[1]):
            ua = u[a, k]
            ub = u[b, k]
            u[a, k] = c * ua + sphc * ub
            u[b, k] = c * ub - sph * ua
    return w, ea, eb, eta, phi, c, sph


@numba.njit(cache=True)
def _jacobi_loop(h, u, use_u, stop, cap, binv0, w_out, ea_out, eb_out, eta_out,
                 phi_out, a_out, b_out, beta_out, c_out, s_out):
    """Largest-pivot loop with lazily synchronised rows.

    Row i holds the true matrix row once rotations ``ver[i]:count`` have been
    replayed into it; diagonal entries are always current.  ``row_val`` is an
    upper bound on each row's largest upper-triangle magnitude, exact unless
    the row is flagged dirty.  A dirty row is rescanned only when it reaches
    the top, so the selected pivot is always the true largest element.
    """
    n = h.shape[0]
    ver = np.zeros(n, dtype=np.int64)
    dirty = np.zeros(n, dtype=np.bool_)
    row_arg = np.empty(n, dtype=np.int64)
    row_val = np.empty(n, dtype=np.float64)
    _build_cache(h, row_arg, row_val)
    binv = binv0
    count = 0
    converged = False
    while True:
        while True:
            a = _argmax(row_val)
            if not dirty[a]:
                break
            _sync_row(h, a, ver, a_out, b_out, c_out, s_out, count)
            row_arg[a], row_val[a] = _scan_row(h, a, n)
            dirty[a] = False
        b = row_arg[a]
        w = row_val[a]
        if b < 0 or w < stop:
            converged = True
            break
        if count >= cap:
            break
        beta_out[count] = binv
        _sync_row(h, a, ver, a_out, b_out, c_out, s_out, count)
        _sync_row(h, b, ver, a_out, b_out, c_out, s_out, count)
        w, ea, eb, eta, phi, c, sph = _rotate_rows(h, u, a, b, use_u)
        w_out[count] = w
        ea_out[count] = ea
        eb_out[count] = eb
        eta_out[count] = eta
        phi_out[count] = phi
        a_out[count] = a
        b_out[count] = b
        c_out[count] = c
        s_out[count] = sph
        binv = binv - 2.0 * w * w / n
        count += 1
        ver[a] = count
        ver[b] = count
        row_arg[a], row_val[a] = _scan_row(h, a, n)
        row_arg[b], row_val[b] = _scan_row(h, b, n)
        dirty[a] = False
        dirty[b] = False
        # H[i, a] = conj(h[a, i]) with row a current
        for i in range(b):
            if i == a:
                continue
            r = row_arg[i]
            best = row_val[i]
            if i < a:
                v = abs(h[a, i])
                if v > best or (v == best and a < r):
                    best = v
                    r = a
                    dirty[i] = False
                elif r == a:
                    dirty[i] = True
            v = abs(h[b, i])
            if v > best or (v == best and b < r):
                best = v
                r = b
                dirty[i] = False
            elif r == b:
                dirty[i] = True
            row_arg[i] = r
            row_val[i] = best
    for i in range(n):
        _sync_row(h, i, ver, a_out, b_out, c_out, s_out, count)
    return count, converged, binv


# --------------------------------------------------------------------------
# public operations


class PivotCache:
    """Per-row (argmax, |value|) over the strict upper triangle."""

    def __init__(self, h: HermitianMatrix):
        n = h.dim
        self.row_arg = np.empty(n, dtype=np.int64)
        self.row_val = np.empty(n, dtype=np.float64)
        _build_cache(h.entries, self.row_arg, self.row_val)

    def refresh(self, h: HermitianMatrix, a: int, b: int) -> None:
        _refresh_cache(h.entries, self.row_arg, self.row_val, a, b)


def pivot_select(h: HermitianMatrix, cache: Optional[PivotCache] = None):
    """Largest off-diagonal element as ``(a, b, w)`` with ``a < b``.

    Returns ``None`` when every off-diagonal entry is exactly zero.  Ties go
    to the lexicographically smallest ``(a, b)``.
    """
    if cache is None:
        cache = PivotCache(h)
    a, b, w = _global_max(cache.row_arg, cache.row_val)
    if a < 0 or w == 0.0:
        return None
    return int(a), int(b), float(w)


def decimate_step(h: HermitianMatrix, basis: Optional[np.ndarray], a: int, b: int,
                  step: int = 0) -> DecimationRecord:
    """Apply one Jacobi rotation in place, zeroing ``h[a, b]``.

    ``basis`` holds the Jacobi basis vectors as *columns* (``U``); it is
    right-multiplied by the rotation.  Pass ``None`` to skip accumulation.
    """
    if a == b:
        raise ValueError("pivot indices must differ")
    if a > b:
        a, b = b, a
    if abs(h.entries[a, b]) == 0.0:
        raise ValueError("pivot element is zero")
    if basis is not None:
        ut = np.ascontiguousarray(basis.T.conj())
        w, ea, eb, eta, phi = _rotate(h.entries, ut, a, b, True)
        basis[...] = ut.T.conj()
    else:
        dummy = np.empty((0, 0), dtype=h.entries.dtype)
        w, ea, eb, eta, phi = _rotate(h.entries, dummy, a, b, False)
    return DecimationRecord(step, float(w), float(ea), float(eb), float(eta), float(phi))


def jacobi_diagonalize(h, stop_threshold: Optional[float] = None, *,
                       vectors: bool = True, max_rotations: Optional[int] = None):
    """Diagonalise ``h`` by classical Jacobi, returning ``(decomposition, log)``.

    The input is not modified.  ``vectors=False`` skips the basis
    accumulation, which is all the decimation statistics need.
    """
    if not isinstance(h, HermitianMatrix):
        h = HermitianMatrix(h)
    work = h.entries.copy()
    n = work.shape[0]
    if stop_threshold is None:
        stop_threshold = default_stop_threshold(work)
    if not stop_threshold > 0:
        raise ValueError("stop_threshold must be positive")
    cap = rotation_cap(work, stop_threshold) if max_rotations is None else int(max_rotations)
    binv0 = offdiag_flow_time(work)

    if vectors:
        u = np.eye(n, dtype=work.dtype)
    else:
        u = np.empty((0, 0), dtype=work.dtype)

    chunks = []
    binv = binv0
    done = 0
    converged = False
    chunk = max(2 * n * n, 64)
    while True:
        size = min(chunk, cap - done)
        bufs = _alloc(size, work.dtype)
        count, converged, binv = _jacobi_loop(
            work, u, vectors, stop_threshold, size, binv, *bufs)
        chunks.append(tuple(x[:count] for x in bufs[:8]))
        done += count
        if converged or done >= cap:
            break
    w, ea, eb, eta, phi, a, b, beta = (np.concatenate(cols) for cols in zip(*chunks))

    final = math.sqrt(max(np.sum(np.abs(work) ** 2) - np.sum(np.abs(np.diagonal(work)) ** 2), 0.0))
    log = DecimationLog(
        dim=n, beta0_inv_sq=binv0, w=w, E_a=ea, E_b=eb, eta=eta, phi=phi, a=a, b=b,
        beta_inv_sq=beta, residual_beta_inv_sq=final * final / n,
        final_offdiag=final, converged=converged,
    )
    if not converged:
        raise NoConvergenceError(f"Jacobi did not converge within {cap} rotations", log)

    evals = np.diagonal(work).real.copy()
    order = np.argsort(evals, kind="stable")
    vecs = None
    if vectors:
        vecs = u.conj().T[:, order]
    return SpectralDecomposition(evals[order], vecs), log


def _alloc(size, dtype):
    return (
        np.empty(size), np.empty(size), np.empty(size), np.empty(size), np.empty(size),
        np.empty(size, dtype=np.int64), np.empty(size, dtype=np.int64), np.empty(size),
        np.empty(size), np.empty(size, dtype=dtype),
    )
