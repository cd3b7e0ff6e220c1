"""Return probability after a quench: exact, perturbative and Jacobi estimates.

All curves are log P0(t) = log |<psi0| exp(-iHt) |psi0>|^2.  The perturbative
and Jacobi estimates share one evaluator,

    log P0(t) = -(4/norm) sum_p w_p^2 sin^2(omega_p t / 2) / omega_p^2,

applied to the bare matrix elements or to the decimated ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numba
import numpy as np
from scipy import special

from .hermitian import SpectralDecomposition
from .io import write_columns
from .models import QuenchInstance
from .stats import JacobiCorrelator

__all__ = [
    "FidelityCurve",
    "FitResult",
    "RateReport",
    "pair_log_fidelity",
    "exact_log_fidelity",
    "exact_log_fidelities",
    "tdpt_log_fidelity",
    "bare_correlator",
    "sja_log_fidelity",
    "closed_form_double_gaussian",
    "early_time_coefficients",
    "fit_early_time",
    "cutoff_time",
    "fit_decay_rate",
    "decay_rates",
    "AMPLITUDE_FLOOR",
    "BEYOND_GRID",
]

AMPLITUDE_FLOOR = 1e-150
BEYOND_GRID = math.inf


@dataclass
class FidelityCurve:
    t: np.ndarray
    values: np.ndarray
    valid: Optional[np.ndarray] = None
    label: str = ""
    stderr: Optional[np.ndarray] = None
    count: Optional[np.ndarray] = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.valid is None:
            self.valid = np.isfinite(self.values)
        if self.t.shape != self.values.shape:
            raise ValueError("t and values must have equal shape")

    def __len__(self) -> int:
        return len(self.t)

    def restrict(self, t_max: float) -> "FidelityCurve":
        sel = self.t <= t_max
        se = None if self.stderr is None else self.stderr[sel]
        cn = None if self.count is None else self.count[sel]
        return FidelityCurve(self.t[sel], self.values[sel], self.valid[sel], self.label, se, cn)

    def per_site(self, volume: int) -> "FidelityCurve":
        se = None if self.stderr is None else self.stderr / volume
        return FidelityCurve(self.t, self.values / volume, self.valid, self.label, se, self.count)

    def to_csv(self, path) -> Path:
        cols = [self.t, self.values, self.valid.astype(int)]
        header = ["t", "log_fidelity", "valid"]
        if self.stderr is not None:
            cols.append(self.stderr)
            header.append("stderr")
        return write_columns(path, header, cols)


# --------------------------------------------------------------------------
# shared pair evaluator


@numba.njit(cache=True)
def _pair_sum_direct(wt, om, t):
    out = np.zeros(t.shape[0])
    for k in range(t.shape[0]):
        tk = t[k]
        acc = 0.0
        for p in range(wt.shape[0]):
            x = 0.5 * om[p] * tk
            if x == 0.0:
                acc += wt[p]
            else:
                s = math.sin(x) / x
                acc += wt[p] * s * s
        out[k] = -tk * tk * acc
    return out


@numba.njit(cache=True)
def _pair_sum_uniform(wt, om, t0, dt, nt):
    # sin(omega t_k / 2) by complex rotation, re-seeded every 32 steps
    out = np.zeros(nt)
    t_max = max(abs(t0), abs(t0 + (nt - 1) * dt))
    for p in range(wt.shape[0]):
        half = 0.5 * om[p]
        # below this the sinc factor is 1 to double precision
        if abs(half) * t_max < 1e-9:
            for k in range(nt):
                tk = t0 + k * dt
                out[k] -= wt[p] * tk * tk
            continue
        scale = wt[p] / (half * half)
        cr = math.cos(half * dt)
        sr = math.sin(half * dt)
        zc = 1.0
        zs = 0.0
        for k in range(nt):
            if k % 32 == 0:
                x = half * (t0 + k * dt)
                zc = math.cos(x)
                zs = math.sin(x)
            out[k] -= scale * zs * zs
            nc = zc * cr - zs * sr
            zs = zs * cr + zc * sr
            zc = nc
    return out


def _uniform_step(t: np.ndarray):
    if len(t) < 8:
        return None
    d = np.diff(t)
    dt = (t[-1] - t[0]) / (len(t) - 1)
    if dt > 0 and np.all(np.abs(d - dt) <= 1e-9 * dt):
        return dt
    return None


def pair_log_fidelity(weights, omegas, t, norm: float = 1.0) -> np.ndarray:
    """-(4/norm) sum w sin^2(omega t/2)/omega^2, with the omega -> 0 limit -w t^2."""
    wt = np.ascontiguousarray(weights, dtype=float)
    om = np.ascontiguousarray(omegas, dtype=float)
    t = np.ascontiguousarray(t, dtype=float)
    dt = _uniform_step(t)
    if dt is None:
        out = _pair_sum_direct(wt, om, t)
    else:
        out = _pair_sum_uniform(wt, om, float(t[0]), dt, len(t))
    return out / norm


# --------------------------------------------------------------------------
# exact dynamics


def exact_log_fidelities(eigenvalues, overlaps, t) -> Tuple[np.ndarray, np.ndarray]:
    """log P0 for each row of ``overlaps`` (|<E_j|psi0>|^2) at times ``t``.

    Returns (values, valid); points with |amplitude| < 1e-150 are invalid.
    """
    E = np.asarray(eigenvalues, dtype=float)
    W = np.atleast_2d(np.asarray(overlaps, dtype=float))
    t = np.asarray(t, dtype=float)
    W = W / W.sum(axis=1, keepdims=True)
    amp = np.empty((W.shape[0], len(t)), dtype=complex)
    step = max(1, 2 ** 22 // max(len(E), 1))
    for lo in range(0, len(t), step):
        ph = np.exp(-1j * np.outer(E, t[lo:lo + step]))
        amp[:, lo:lo + step] = W @ ph
    mod = np.abs(amp)
    valid = mod >= AMPLITUDE_FLOOR
    with np.errstate(divide="ignore"):
        vals = np.where(valid, 2.0 * np.log(np.where(valid, mod, 1.0)), -np.inf)
    vals[:, t == 0] = 0.0
    valid[:, t == 0] = True
    return vals, valid


def exact_log_fidelity(decomposition: SpectralDecomposition, psi0, t, label: str = "exact") -> FidelityCurve:
    """Exact curve for an initial basis state (int) or state vector."""
    U = decomposition.eigenvectors
    if U is None:
        raise ValueError("exact dynamics needs eigenvectors")
    if np.ndim(psi0) == 0:
        ov = np.abs(U[int(psi0), :]) ** 2
    else:
        psi = np.asarray(psi0)
        ov = np.abs(U.conj().T @ psi) ** 2
    vals, valid = exact_log_fidelities(decomposition.eigenvalues, ov, t)
    return FidelityCurve(t, vals[0], valid[0], label)


# --------------------------------------------------------------------------
# perturbative and Jacobi estimates


def bare_correlator(instance: QuenchInstance, psi0_indices=None) -> JacobiCorrelator:
    """Pair list (J^2 |V_j0|^2, E0 - E_j) of the bare perturbation.

    With several initial states the pairs are pooled and normalised by their
    number, which averages the resulting curves.
    """
    idx = instance.psi0_indices if psi0_indices is None else np.atleast_1d(psi0_indices)
    V = instance.V.entries
    E = instance.H0_diag
    ws, oms = [], []
    for i in idx:
        row = np.abs(V[i]) ** 2
        mask = np.ones(len(E), dtype=bool)
        mask[i] = False
        ws.append(instance.J ** 2 * row[mask])
        oms.append(E[i] - E[mask])
    return JacobiCorrelator(np.concatenate(ws), np.concatenate(oms), float(len(idx)), instance.J)


def tdpt_log_fidelity(instance: QuenchInstance, t, psi0_index: Optional[int] = None,
                      label: str = "tdpt") -> FidelityCurve:
    """Second-order perturbation theory, -4 J^2 sum |V_j0|^2 sin^2((E_j - E0)t/2)/(E_j - E0)^2."""
    idx = instance.psi0_index if psi0_index is None else psi0_index
    c = bare_correlator(instance, idx)
    return FidelityCurve(t, pair_log_fidelity(c.weights, c.omegas, t, c.norm), label=label)


def _quadrature_log_fidelity(corr: JacobiCorrelator, t, nodes: int = 96) -> np.ndarray:
    # log P0 = -2 int_0^t (t - tau) J^2 C+(tau) d tau, since C+ is even
    x, wq = np.polynomial.legendre.leggauss(nodes)
    out = np.empty(len(t))
    for k, tk in enumerate(t):
        if tk == 0:
            out[k] = 0.0
            continue
        tau = 0.5 * tk * (x + 1.0)
        c = corr.scaled_plus(tau)
        out[k] = -2.0 * 0.5 * tk * np.sum(wq * (tk - tau) * c)
    return out


def sja_log_fidelity(corr: JacobiCorrelator, t, *, quadrature: bool = False,
                     label: str = "sja") -> FidelityCurve:
    """Jacobi estimate from a correlator pair list.

    ``quadrature=True`` integrates the correlator numerically instead of using
    the closed form; it is slower and only meant as a cross-check.
    """
    t = np.asarray(t, dtype=float)
    if quadrature:
        vals = _quadrature_log_fidelity(corr, t)
    else:
        vals = pair_log_fidelity(corr.weights, corr.omegas, t, corr.norm)
    return FidelityCurve(t, vals, label=label)


def closed_form_double_gaussian(J: float, sigma_omega: float, omega0: float, t) -> np.ndarray:
    """log P0 for C+(tau) = exp(-sigma^2 tau^2/2) cos(omega0 tau).

    The complex error functions are evaluated through the Faddeeva function,
    erf(z) = 1 - exp(-z^2) w(iz), with the Gaussian prefactors folded in
    analytically so nothing overflows for large omega0/sigma.
    """
    t = np.asarray(t, dtype=float)
    s = float(sigma_omega)
    if not s > 0:
        raise ValueError("sigma_omega must be positive")
    g0 = math.sqrt(2 * math.pi) * J * J / s
    a = s * t / math.sqrt(2.0)
    b = omega0 / (s * math.sqrt(2.0))
    with np.errstate(over="raise", invalid="raise"):
        try:
            wp = special.wofz(-b + 1j * a)
            wm = special.wofz(b + 1j * a)
            ea = np.exp(-a * a)
            rot = np.exp(-2j * a * b)
            # Gamma_GR * [erf(z+) + erf(z-)] and Gamma_GR * [erf(z+) - erf(z-)]
            gr = g0 * math.exp(-b * b)
            sum_erf = 2.0 * gr - g0 * ea * (rot * wp + np.conj(rot) * wm)
            diff_erf = -g0 * ea * (rot * wp - np.conj(rot) * wm)
            term1 = 0.5 * t * sum_erf
            term2 = (2.0 * J * J / (s * s)) * (np.exp(-0.5 * (s * t) ** 2) * np.cos(omega0 * t) - 1.0)
            term3 = 1j * omega0 / (2 * s * s) * diff_erf
            term3 = term3 + g0 * omega0 / (s * s) * (2.0 / math.sqrt(math.pi)) * special.dawsn(b)
        except FloatingPointError as exc:
            raise OverflowError(
                f"closed form overflowed for J={J}, sigma_omega={sigma_omega}, omega0={omega0}"
            ) from exc
    total = term1 + term2 + term3
    scale = np.maximum(np.abs(total.real), 1e-300)
    if np.any(np.abs(total.imag) > 1e-10 * np.maximum(scale, np.abs(term1))):
        raise ArithmeticError("closed form left a non-negligible imaginary part")
    if not np.all(np.isfinite(total.real)):
        raise OverflowError(
            f"closed form is not finite for J={J}, sigma_omega={sigma_omega}, omega0={omega0}"
        )
    return -total.real


def early_time_coefficients(corr: JacobiCorrelator) -> Tuple[float, float]:
    """(c2, c4) with log P0 = -c2 t^2 + c4 t^4 + O(t^6)."""
    return corr.variance(), corr.second_moment() / 12.0


def fit_early_time(curve: FidelityCurve, t_max: float) -> Tuple[float, float]:
    """Least-squares fit of -c2 t^2 + c4 t^4 over valid points with t <= t_max."""
    sel = curve.valid & (curve.t <= t_max) & (curve.t > 0)
    if np.count_nonzero(sel) < 3:
        raise ValueError("need at least 3 points for the early-time fit")
    t = curve.t[sel]
    A = np.column_stack([-t ** 2, t ** 4])
    (c2, c4), *_ = np.linalg.lstsq(A, curve.values[sel], rcond=None)
    return float(c2), float(c4)


def cutoff_time(curve: FidelityCurve, entropy: float) -> float:
    """First time log P0 reaches -entropy (linear interpolation between grid
    points), or ``BEYOND_GRID`` if it never does on the grid."""
    v = np.where(curve.valid, curve.values, -np.inf)
    hit = np.flatnonzero(v <= -entropy)
    if hit.size == 0:
        return BEYOND_GRID
    k = int(hit[0])
    if k == 0:
        return float(curve.t[0])
    v0, v1 = curve.values[k - 1], v[k]
    if not np.isfinite(v1) or v1 == v0:
        return float(curve.t[k])
    frac = (-entropy - v0) / (v1 - v0)
    return float(curve.t[k - 1] + frac * (curve.t[k] - curve.t[k - 1]))


@dataclass(frozen=True)
class FitResult:
    rate: float
    intercept: float
    rms_residual: float
    n_points: int


def fit_decay_rate(curve: FidelityCurve, window: Tuple[float, float]) -> FitResult:
    """Linear fit log P0 = intercept - rate * t over valid points in ``window``."""
    lo, hi = window
    sel = curve.valid & (curve.t >= lo) & (curve.t <= hi)
    n = int(np.count_nonzero(sel))
    if n < 3:
        raise ValueError(f"only {n} valid points in fit window {window}; need 3")
    slope, intercept = np.polyfit(curve.t[sel], curve.values[sel], 1)
    resid = curve.values[sel] - (slope * curve.t[sel] + intercept)
    return FitResult(float(-slope), float(intercept), float(np.sqrt(np.mean(resid ** 2))), n)


@dataclass(frozen=True)
class RateReport:
    gamma_gr: float
    gamma_jac: float
    gamma_fit: Optional[float] = None
    fit: Optional[FitResult] = None


def decay_rates(jacobi: JacobiCorrelator, bare: Union[JacobiCorrelator, float], half_width: float,
                curve: Optional[FidelityCurve] = None,
                fit_window: Optional[Tuple[float, float]] = None) -> RateReport:
    """Golden-rule and Jacobi rates from |f(0)|^2 averaged over |omega| <= half_width.

    ``bare`` is either the bare correlator or an analytic golden-rule rate.
    """
    g_jac = jacobi.decay_rate(half_width)
    g_gr = float(bare) if np.isscalar(bare) else bare.decay_rate(half_width)
    fit = None
    if curve is not None and fit_window is not None:
        fit = fit_decay_rate(curve, fit_window)
    return RateReport(g_gr, g_jac, None if fit is None else fit.rate, fit)
