"""Continuum flow of the local density of states under Jacobi rotations.

A rotation of angle eta moves a fraction sin^2(eta/2) of the weight on one
pivot level onto the other, an energy distance omega away.  Integrating over
the decimation density from w0 down to w = 0 gives the final LDOS, whose
Fourier transform is the fidelity amplitude.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate
from scipy.signal import fftconvolve

from .hermitian import DecimationLog
from .stats import DecimationHistogram, JacobiCorrelator, kick

__all__ = [
    "struve_difference",
    "struve_kernel",
    "rotation_weight",
    "FlowKernel",
    "LdosGrid",
    "LdosResult",
    "evolve_ldos",
    "frozen_kernel_log_amplitude",
    "analytic_log_amplitude",
    "level_trajectories",
    "energy_motion",
    "leading_correction",
    "BoundaryFluxError",
]

_SERIES_MAX = 2.0
_ASYMPTOTIC_MIN = 32.0


class BoundaryFluxError(RuntimeError):
    """Probability leaked through the edges of the energy grid."""


# --------------------------------------------------------------------------
# Fourier transform of sin^2(eta/2)


def _f_series(x: float) -> float:
    # (pi/2)(L_{-1}(x) - I_1(x)) from the two power series
    h = 0.5 * x
    h2 = h * h
    lt = 1.0 / (math.gamma(1.5) * math.gamma(0.5))
    it = h
    total = lt - it
    k = 0
    while True:
        k += 1
        lt *= h2 / ((k + 0.5) * (k - 0.5))
        it *= h2 / (k * (k + 1))
        total += lt - it
        if abs(lt) + abs(it) < 1e-18 * abs(total):
            break
    return 0.5 * math.pi * total


def _f_integral(x: float) -> float:
    # L_{-1} = L_1 + 2/pi with the Poisson integrals for L_1 and I_1, then one
    # integration by parts: F(x) = int_0^{pi/2} exp(-x cos t) cos t dt
    val, _ = integrate.quad(lambda th: math.exp(-x * math.cos(th)) * math.cos(th),
                            0.0, 0.5 * math.pi, epsabs=0.0, epsrel=1e-13, limit=200)
    return val


def _f_asymptotic(x: float) -> float:
    # sum_k c_k / x^(2k+2), c_k = (2k)! prod_{j<=k} (j + 1/2) / k!
    inv2 = 1.0 / (x * x)
    term = inv2
    total = term
    k = 0
    while True:
        k += 1
        nxt = term * (2 * k - 1) * (2 * k) * (k + 0.5) / k * inv2
        if nxt >= term or nxt < 1e-18 * total:
            break
        term = nxt
        total += term
    return total


def struve_difference(x) -> np.ndarray:
    """F(x) = (pi/2)[L_{-1}(x) - I_1(x)] = int_0^inf (1 - u/sqrt(1+u^2)) cos(xu) du.

    Power series for x <= 2, a non-oscillatory Poisson-type integral up to
    x = 32, and the large-argument expansion beyond, where its smallest term
    is below 1e-12 relative.
    """
    x = np.abs(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise ValueError("struve kernel argument must be finite")
    out = np.empty_like(x)
    flat = x.ravel()
    res = out.ravel()
    for i, v in enumerate(flat):
        if v == 0.0:
            res[i] = 1.0
        elif v <= _SERIES_MAX:
            res[i] = _f_series(v)
        elif v < _ASYMPTOTIC_MIN:
            res[i] = _f_integral(v)
        else:
            res[i] = _f_asymptotic(v)
    return out


def struve_kernel(w, tau) -> np.ndarray:
    """k(w, tau) = int d omega sin^2(eta/2) exp(-i omega tau), tan eta = 2w/omega.

    Equals pi w [L_{-1}(2w tau) - I_1(2w|tau|)]; real, with k(w, 0) = 2w.
    """
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("w must be non-negative")
    tau = np.asarray(tau, dtype=float)
    return 2.0 * w * struve_difference(2.0 * w * tau)


def rotation_weight(w, omega) -> np.ndarray:
    """sin^2(eta/2) = (1 - |omega|/sqrt(omega^2 + 4w^2))/2, 1/2 at omega = 0."""
    w = np.asarray(w, dtype=float)
    om = np.abs(np.asarray(omega, dtype=float))
    r = np.sqrt(om * om + 4.0 * w * w)
    with np.errstate(invalid="ignore", divide="ignore"):
        # 2 w^2 / (r (r + |omega|)) avoids cancellation for small w/omega
        out = np.where(r > 0, 2.0 * w * w / (r * (r + om)), 0.0)
    return out


# --------------------------------------------------------------------------
# kernels and grids


@dataclass
class FlowKernel:
    """Rotation counts per initial state on w slices and omega bins.

    ``counts[k, m]`` is the expected number of rotations with w in
    [w_edges[k], w_edges[k+1]) and omega = (m - M) * d_omega.  In full-DOS
    mode ``counts`` carries an extra energy axis, ``counts[k, i, m]``.
    """

    w_edges: np.ndarray
    d_omega: float
    counts: np.ndarray

    @property
    def half_span(self) -> int:
        return (self.counts.shape[-1] - 1) // 2

    @property
    def omegas(self) -> np.ndarray:
        M = self.half_span
        return self.d_omega * np.arange(-M, M + 1)

    @property
    def energy_resolved(self) -> bool:
        return self.counts.ndim == 3

    @classmethod
    def from_correlator(cls, corr: JacobiCorrelator, w_edges, d_omega: float,
                        omega_max: float) -> "FlowKernel":
        w_edges = np.asarray(w_edges, dtype=float)
        M = int(math.ceil(omega_max / d_omega))
        m = np.rint(corr.omegas / d_omega).astype(np.int64) + M
        k = np.searchsorted(w_edges, corr.w, side="right") - 1
        ok = (m >= 0) & (m <= 2 * M) & (k >= 0) & (k < len(w_edges) - 1)
        counts = np.zeros((len(w_edges) - 1, 2 * M + 1))
        np.add.at(counts, (k[ok], m[ok]), 1.0)
        return cls(w_edges, d_omega, counts / corr.norm)

    @classmethod
    def from_density(cls, density: Callable, w_edges, d_omega: float, omega_max: float) -> "FlowKernel":
        """Discretise a smooth density rho(w, omega) (rotations per unit w per unit omega)."""
        w_edges = np.asarray(w_edges, dtype=float)
        M = int(math.ceil(omega_max / d_omega))
        om = d_omega * np.arange(-M, M + 1)
        rows = []
        for lo, hi in zip(w_edges[:-1], w_edges[1:]):
            x, wq = np.polynomial.legendre.leggauss(8)
            ws = 0.5 * (hi - lo) * (x + 1) + lo
            rows.append(sum(q * density(wv, om) for q, wv in zip(wq, ws)) * 0.5 * (hi - lo) * d_omega)
        return cls(w_edges, d_omega, np.array(rows))


@dataclass
class LdosGrid:
    E_min: float
    E_max: float
    n: int

    def __post_init__(self):
        if self.n < 3 or not self.E_max > self.E_min:
            raise ValueError("invalid energy grid")

    @property
    def energies(self) -> np.ndarray:
        return np.linspace(self.E_min, self.E_max, self.n)

    @property
    def dE(self) -> float:
        return (self.E_max - self.E_min) / (self.n - 1)

    @classmethod
    def centred(cls, E0: float, half_span: float, dE: float) -> "LdosGrid":
        m = int(math.ceil(half_span / dE))
        return cls(E0 - m * dE, E0 + m * dE, 2 * m + 1)


@dataclass
class LdosResult:
    grid: LdosGrid
    p: np.ndarray
    mass_lost: float
    substeps: np.ndarray

    def amplitude(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        E = self.grid.energies
        return np.exp(-1j * np.outer(t, E)) @ self.p * self.grid.dE

    def log_fidelity(self, t) -> np.ndarray:
        return 2.0 * np.log(np.abs(self.amplitude(t)))


def _rhs_broad(p, rates, total):
    # sum_m rate_m p(E - omega_m) - p(E) sum_m rate_m, truncated to the grid
    M = (len(rates) - 1) // 2
    full = fftconvolve(p, rates) if len(p) * len(rates) > 4096 else np.convolve(p, rates)
    return full[M:M + len(p)] - total * p


def _rhs_full(p, rates, ratio_shift):
    # rates[i, m] at E_i; gain p(E_i - omega_m) nu(E_i)/nu(E_i - omega_m)
    n, width = rates.shape
    M = (width - 1) // 2
    out = -p * rates.sum(axis=1)
    for m in range(width):
        s = m - M
        if s >= 0:
            src = slice(0, n - s)
            dst = slice(s, n)
        else:
            src = slice(-s, n)
            dst = slice(0, n + s)
        out[dst] += rates[dst, m] * p[src] * ratio_shift[m][dst]
    return out


def evolve_ldos(kernel: FlowKernel, grid: LdosGrid, E0: float, *, mode: str = "broad_dos",
                nu: Optional[np.ndarray] = None, p0: Optional[np.ndarray] = None,
                rtol: float = 1e-9, max_halvings: int = 12, flux_tol: float = 1e-6) -> LdosResult:
    """Integrate the LDOS from the top w slice down to w = 0 with RK4.

    Each slice starts with one RK4 step and halves the step until two half
    steps agree with one full step to ``rtol`` (relative to max p).  The
    rotation angle varies continuously inside a slice.  Raises
    :class:`BoundaryFluxError` if more than ``flux_tol`` of the probability
    leaves the grid.
    """
    if not math.isclose(grid.dE, kernel.d_omega, rel_tol=1e-9):
        raise ValueError("energy grid spacing must equal the kernel omega spacing")
    if mode not in ("broad_dos", "full_dos"):
        raise ValueError(f"unknown mode {mode!r}")
    E = grid.energies
    if p0 is None:
        p = np.zeros(grid.n)
        p[int(np.argmin(np.abs(E - E0)))] = 1.0 / grid.dE
    else:
        p = np.asarray(p0, dtype=float).copy()
    mass0 = p.sum() * grid.dE
    om = kernel.omegas
    M = kernel.half_span
    if mode == "full_dos":
        if nu is None or not kernel.energy_resolved:
            raise ValueError("full_dos mode needs nu(E) and an energy-resolved kernel")
        nu = np.asarray(nu, dtype=float)
        if np.any(nu <= 0):
            raise ValueError("nu must be positive on the grid")
        ratio = []
        for m in range(2 * M + 1):
            s = m - M
            r = np.ones(grid.n)
            if s >= 0:
                r[s:] = nu[s:] / nu[:grid.n - s]
            else:
                r[:grid.n + s] = nu[:grid.n + s] / nu[-s:]
            ratio.append(r)
    elif kernel.energy_resolved:
        raise ValueError("broad_dos mode takes an energy-independent kernel")

    def rhs(state, w, k):
        width = kernel.w_edges[k + 1] - kernel.w_edges[k]
        sw = rotation_weight(w, om)
        if mode == "broad_dos":
            rates = kernel.counts[k] * sw / width
            return _rhs_broad(state, rates, rates.sum())
        rates = kernel.counts[k] * sw[None, :] / width
        return _rhs_full(state, rates, ratio)

    def rk4(state, w_hi, w_lo, k, n):
        h = (w_hi - w_lo) / n
        w = w_hi
        for _ in range(n):
            k1 = rhs(state, w, k)
            k2 = rhs(state + 0.5 * h * k1, w - 0.5 * h, k)
            k3 = rhs(state + 0.5 * h * k2, w - 0.5 * h, k)
            k4 = rhs(state + h * k3, w - h, k)
            state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            w -= h
        return state

    nsl = len(kernel.w_edges) - 1
    subs = np.zeros(nsl, dtype=np.int64)
    for k in range(nsl - 1, -1, -1):
        if not np.any(kernel.counts[k]):
            subs[k] = 0
            continue
        lo, hi = kernel.w_edges[k], kernel.w_edges[k + 1]
        n = 1
        coarse = rk4(p, hi, lo, k, n)
        for _ in range(max_halvings):
            fine = rk4(p, hi, lo, k, 2 * n)
            n *= 2
            if np.max(np.abs(fine - coarse)) <= rtol * max(np.max(np.abs(fine)), 1e-300):
                break
            coarse = fine
        p = fine
        subs[k] = n
    lost = float(abs(mass0 - p.sum() * grid.dE) / mass0)
    if lost > flux_tol:
        raise BoundaryFluxError(f"{lost:.3g} of the probability left the energy grid; widen it")
    return LdosResult(grid, p, lost, subs)


def frozen_kernel_log_amplitude(kernel: FlowKernel, t) -> np.ndarray:
    """Exact log amplitude for an energy-independent kernel, ignoring grid edges.

    log p(t) = sum_k int_slice dw sum_m rate_km sin^2(eta/2) (exp(-i omega_m t) - 1),
    with the w integral done by adaptive quadrature.
    """
    if kernel.energy_resolved:
        raise ValueError("needs an energy-independent kernel")
    t = np.asarray(t, dtype=float)
    om = kernel.omegas
    phase = np.exp(-1j * np.outer(t, om)) - 1.0
    out = np.zeros(len(t), dtype=complex)
    for k in range(len(kernel.w_edges) - 1):
        lo, hi = kernel.w_edges[k], kernel.w_edges[k + 1]
        if not np.any(kernel.counts[k]):
            continue
        avg = np.array([
            integrate.quad(lambda w, o=o: rotation_weight(w, o), lo, hi, epsabs=0, epsrel=1e-12)[0]
            for o in om
        ]) / (hi - lo)
        out += phase @ (kernel.counts[k] * avg)
    return out


# --------------------------------------------------------------------------
# analytic log amplitude and corrections


def _pair_terms(weights, omegas, t):
    # w^2 [(exp(i omega t) - 1)/omega^2 - i t/omega], finite as omega -> 0
    t = np.asarray(t, dtype=float)
    out = np.zeros(len(t), dtype=complex)
    for lo in range(0, len(weights), 1 << 16):
        w2 = weights[lo:lo + (1 << 16)]
        om = omegas[lo:lo + (1 << 16)]
        x = np.outer(t, om)
        half = 0.5 * x
        re = -0.5 * np.square(t[:, None] * np.sinc(half / np.pi))
        with np.errstate(invalid="ignore", divide="ignore"):
            # (sin x - x)/omega^2 = t^2 (sin x - x)/x^2, series for small x
            small = np.abs(x) < 1e-3
            xs = np.where(small, 1.0, x)
            im = np.where(small, -x / 6.0 + x ** 3 / 120.0,
                          (np.sin(xs) - xs) / (xs * xs)) * (t[:, None] ** 2)
        out += (re + 1j * im) @ w2
    return out


def analytic_log_amplitude(corr: JacobiCorrelator, t, E0: float = 0.0) -> np.ndarray:
    """l0(t) = -i E0 t + (1/norm) sum w^2 [(exp(i omega t) - 1)/omega^2 - i t/omega].

    The real part is exactly half the Jacobi log-fidelity; the imaginary part
    carries the phase, whose small-t slope is -E0 since V has no diagonal.
    """
    t = np.asarray(t, dtype=float)
    return -1j * E0 * t + _pair_terms(corr.weights, corr.omegas, t) / corr.norm


def _pair_dt_terms(weights, omegas, t):
    # d/dt of _pair_terms: i w^2 (exp(i omega t) - 1)/omega, -> -w^2 t at omega = 0
    t = np.asarray(t, dtype=float)
    x = np.outer(t, omegas)
    with np.errstate(invalid="ignore", divide="ignore"):
        small = np.abs(x) < 1e-8
        xs = np.where(small, 1.0, x)
        g = np.where(small, -1.0 - 0.5j * x, 1j * (np.exp(1j * xs) - 1.0) / xs)
    return (g * t[:, None]) @ weights


def leading_correction(correlators: Sequence[JacobiCorrelator], energies: Sequence[float],
                       t, w_edges, *, E0: Optional[float] = None,
                       sigma_E: float = 1.0) -> np.ndarray:
    """First correction Delta l1(t) from the energy dependence of the kernel.

    Delta l1 = -i eps int_0^w0 dw d_{E0/sigma_E} K(w, E0, t) int_w^w0 dw' d_{Jt} K(w', E0, t),
    with eps = J/sigma_E.  In physical units this is
    -i int dw dK/dE0 int_w dw' dK/dt, evaluated on w slices.  ``correlators``
    are pair lists for windows centred at ``energies`` (at least three,
    ascending); the E0 derivative is the finite-difference slope at ``E0``
    (default: the middle window).
    """
    if len(correlators) != len(energies) or len(energies) < 3:
        raise ValueError("need at least three windows with their centre energies")
    E = np.asarray(energies, dtype=float)
    if np.any(np.diff(E) <= 0):
        raise ValueError("window energies must be ascending")
    if E0 is None:
        E0 = float(E[len(E) // 2])
    t = np.asarray(t, dtype=float)
    w_edges = np.asarray(w_edges, dtype=float)
    nsl = len(w_edges) - 1

    def sliced(corr, fn):
        k = np.searchsorted(w_edges, corr.w, side="right") - 1
        rows = np.zeros((nsl, len(t)), dtype=complex)
        for s in range(nsl):
            sel = k == s
            if np.any(sel):
                rows[s] = fn(corr.weights[sel], corr.omegas[sel], t) / corr.norm
        return rows

    K = np.array([sliced(c, _pair_terms) for c in correlators])
    i = int(np.argmin(np.abs(E - E0)))
    i = min(max(i, 1), len(E) - 2)
    dK_dE = (K[i + 1] - K[i - 1]) / (E[i + 1] - E[i - 1])
    dK_dt = sliced(correlators[i], _pair_dt_terms)
    # inner integral over w' >= w: slices above plus half of the current one
    above = np.cumsum(dK_dt[::-1], axis=0)[::-1] - 0.5 * dK_dt
    return -1j * np.sum(dK_dE * above, axis=0)


# --------------------------------------------------------------------------
# energy motion


def level_trajectories(log: DecimationLog, initial_diag) -> np.ndarray:
    """Diagonal energies after every rotation, replayed from the log.

    Row n holds the energies after n rotations; the last row equals the
    Jacobi eigenvalues in their original (unsorted) slots.
    """
    E = np.asarray(initial_diag, dtype=float).copy()
    out = np.empty((len(log) + 1, len(E)))
    out[0] = E
    dk = kick(log.w, log.E_a - log.E_b)
    for n in range(len(log)):
        a, b = log.a[n], log.b[n]
        E[a] = log.E_a[n] + dk[n]
        E[b] = log.E_b[n] - dk[n]
        out[n + 1] = E
    return out


def energy_motion(hist: DecimationHistogram, nu_initial, E_start) -> np.ndarray:
    """Mean trajectory E(w) of a level from the slice-resolved level flux.

    Solves -dE/dw = c(w, E) = D(w, E)/nu(w, E) downward over the histogram's w
    slices (midpoint rule, linear interpolation in E).  Returns E at each
    w edge, index 0 being w -> 0.
    """
    from .stats import dos_flow

    table = dos_flow(hist, nu_initial)
    ec = hist.E_centers
    dE = np.diff(hist.E_edges)[0]
    omega = ec[:, None] - ec[None, :]
    nsl = hist.counts.shape[0]
    E_start = np.atleast_1d(np.asarray(E_start, dtype=float))
    path = np.empty((nsl + 1, len(E_start)))
    cur = E_start.copy()
    path[nsl] = cur
    for k in range(nsl - 1, -1, -1):
        wc = 10.0 ** hist.log_w_centers[k]
        flux = (kick(wc, omega) * hist.counts[k]).sum(axis=1) / (hist.n_samples * dE)
        nu_mid = 0.5 * (table.nu[k] + table.nu[k + 1])
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.where(nu_mid > 0, flux / nu_mid, 0.0)
        half = cur + 0.5 * np.interp(cur, ec, c)
        cur = cur + np.interp(half, ec, c)
        path[k] = cur
    return path
