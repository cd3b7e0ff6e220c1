"""Statistics of decimated matrix elements.

A rotation with pivot (a, b) and magnitude w contributes to the decimation
density at (w, E_a, E_b) and, symmetrically, at (w, E_b, E_a).  Restricting
to records with an endpoint in an energy window gives the Jacobi correlator,
whose exact pair list (w^2, omega) drives the fidelity estimate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .hermitian import DecimationLog
from .io import write_columns

__all__ = [
    "EnergyWindow",
    "DecimationHistogram",
    "default_log_w_edges",
    "bin_decimations",
    "JacobiCorrelator",
    "jacobi_correlator",
    "jacobi_spectral_function",
    "RegimeScaling",
    "regime_scaling",
    "monotone_smooth",
    "DosFlowTable",
    "dos_flow",
    "kick",
]

LogLike = Union[DecimationLog, Sequence[DecimationLog]]


def _as_logs(logs: LogLike):
    if isinstance(logs, DecimationLog):
        return [logs]
    return list(logs)


def kick(w, omega):
    """Energy shift (omega/2)(sec eta - 1) of the pivot level, tan eta = 2w/omega.

    Written as 2 w^2 / (|omega| + sqrt(omega^2 + 4 w^2)) * sign(omega) to avoid
    cancellation; zero when omega == 0.
    """
    w = np.asarray(w, dtype=float)
    om = np.asarray(omega, dtype=float)
    root = np.sqrt(om * om + 4.0 * w * w)
    denom = np.abs(om) + root
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, 2.0 * w * w / denom, 0.0) * np.sign(om)
    return out


@dataclass(frozen=True)
class EnergyWindow:
    """Closed interval [center - half_width, center + half_width]."""

    center: float
    half_width: float

    def __post_init__(self):
        if not self.half_width > 0:
            raise ValueError("window half-width must be positive")

    @property
    def width(self) -> float:
        return 2.0 * self.half_width

    def contains(self, E) -> np.ndarray:
        return np.abs(np.asarray(E, dtype=float) - self.center) <= self.half_width

    def count(self, E) -> int:
        return int(np.count_nonzero(self.contains(E)))

    @classmethod
    def around(cls, energies, center: float, n_states: int) -> "EnergyWindow":
        """Smallest window about ``center`` holding the ``n_states`` nearest levels."""
        d = np.sort(np.abs(np.asarray(energies, dtype=float) - center))
        if n_states > len(d):
            raise ValueError("not enough levels for the requested window")
        hw = d[n_states - 1]
        if n_states < len(d):
            hw = 0.5 * (d[n_states - 1] + d[n_states])
        return cls(center, hw)


# --------------------------------------------------------------------------
# histogram


@dataclass
class DecimationHistogram:
    """Counts on a (log10 w, E, E') grid, summed over ``n_samples`` runs.

    Each record is entered twice, once per ordering of its endpoints.  Records
    below the smallest w edge go to ``underflow``; records outside the grid
    otherwise go to ``outside``.
    """

    log_w_edges: np.ndarray
    E_edges: np.ndarray
    Eprime_edges: np.ndarray
    counts: np.ndarray
    n_samples: int
    n_records: int
    underflow: int = 0
    outside: int = 0

    @property
    def log_w_centers(self) -> np.ndarray:
        return 0.5 * (self.log_w_edges[1:] + self.log_w_edges[:-1])

    @property
    def E_centers(self) -> np.ndarray:
        return 0.5 * (self.E_edges[1:] + self.E_edges[:-1])

    @property
    def Eprime_centers(self) -> np.ndarray:
        return 0.5 * (self.Eprime_edges[1:] + self.Eprime_edges[:-1])

    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.outside

    def merge(self, other: "DecimationHistogram") -> "DecimationHistogram":
        for name in ("log_w_edges", "E_edges", "Eprime_edges"):
            if not np.array_equal(getattr(self, name), getattr(other, name)):
                raise ValueError(f"histograms have different {name}")
        return DecimationHistogram(
            self.log_w_edges, self.E_edges, self.Eprime_edges, self.counts + other.counts,
            self.n_samples + other.n_samples, self.n_records + other.n_records,
            self.underflow + other.underflow, self.outside + other.outside,
        )

    def log_w_density(self) -> np.ndarray:
        """Records per sample per unit log10 w (endpoint orderings not double counted)."""
        per_bin = self.counts.sum(axis=(1, 2)) / 2.0
        return per_bin / (self.n_samples * np.diff(self.log_w_edges))

    def to_csv(self, path) -> Path:
        i, j, k = np.nonzero(self.counts)
        return write_columns(
            path, ["log10_w", "E", "E_prime", "count"],
            [self.log_w_centers[i], self.E_centers[j], self.Eprime_centers[k], self.counts[i, j, k]],
        )


def default_log_w_edges(logs: LogLike, n_bins: int = 64, floor: Optional[float] = None) -> np.ndarray:
    """n_bins logarithmic bins from ``floor`` (or the smallest w) to the largest w."""
    logs = _as_logs(logs)
    ws = np.concatenate([lg.w for lg in logs if len(lg)])
    if ws.size == 0:
        raise ValueError("logs contain no records")
    lo = np.log10(floor if floor is not None else ws.min())
    hi = np.log10(ws.max())
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, np.nextafter(hi, np.inf), n_bins + 1)


def _bin_index(x, edges):
    idx = np.searchsorted(edges, x, side="right") - 1
    last = x == edges[-1]
    idx[last] = len(edges) - 2
    return idx


def bin_decimations(logs: LogLike, log_w_edges, E_edges, Eprime_edges=None) -> DecimationHistogram:
    logs = _as_logs(logs)
    lw = np.asarray(log_w_edges, dtype=float)
    ee = np.asarray(E_edges, dtype=float)
    ep = ee if Eprime_edges is None else np.asarray(Eprime_edges, dtype=float)
    for edges in (lw, ee, ep):
        if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
    shape = (len(lw) - 1, len(ee) - 1, len(ep) - 1)
    counts = np.zeros(shape, dtype=np.int64)
    under = outside = nrec = 0
    for lg in logs:
        nrec += len(lg)
        if not len(lg):
            continue
        with np.errstate(divide="ignore"):
            x = np.log10(lg.w)
        x = np.concatenate([x, x])
        e1 = np.concatenate([lg.E_a, lg.E_b])
        e2 = np.concatenate([lg.E_b, lg.E_a])
        low = x < lw[0]
        under += int(np.count_nonzero(low))
        i = _bin_index(x, lw)
        j = _bin_index(e1, ee)
        k = _bin_index(e2, ep)
        ok = (~low) & (i >= 0) & (i < shape[0]) & (j >= 0) & (j < shape[1]) & (k >= 0) & (k < shape[2])
        outside += int(np.count_nonzero(~ok & ~low))
        flat = np.ravel_multi_index((i[ok], j[ok], k[ok]), shape)
        counts += np.bincount(flat, minlength=counts.size).reshape(shape)
    return DecimationHistogram(lw, ee, ep, counts, len(logs), nrec, under, outside)


# --------------------------------------------------------------------------
# correlator


@dataclass
class JacobiCorrelator:
    """Exact pair list of a (possibly pooled) correlator.

    ``weights`` are squared matrix elements w^2 (already including J^2) and
    ``omegas`` the energy differences E_window - E_other.  ``norm`` is the
    number of window states summed over samples, so that

        J^2 C+(tau) = sum w^2 cos(omega tau) / norm
        J^2 C-(tau) = sum w^2 sin(omega tau) / norm
    """

    weights: np.ndarray
    omegas: np.ndarray
    norm: float
    J: float
    window: Optional[EnergyWindow] = None
    n_samples: int = 1

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=float)
        self.omegas = np.ascontiguousarray(self.omegas, dtype=float)
        if self.weights.shape != self.omegas.shape:
            raise ValueError("weights and omegas must have equal length")
        if not self.norm > 0:
            raise ValueError("empty window: no states to normalise by")
        if not self.J > 0:
            raise ValueError("J must be positive")

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def w(self) -> np.ndarray:
        return np.sqrt(self.weights)

    def _trig_sum(self, fn, tau):
        tau = np.asarray(tau, dtype=float)
        out = np.array([np.sum(self.weights * fn(self.omegas * t)) for t in tau.ravel()])
        return (out / self.norm).reshape(tau.shape)

    def scaled_plus(self, tau):
        """J^2 C+(tau)."""
        return self._trig_sum(np.cos, tau)

    def scaled_minus(self, tau):
        """J^2 C-(tau)."""
        return self._trig_sum(np.sin, tau)

    def plus(self, tau):
        return self.scaled_plus(tau) / self.J ** 2

    def minus(self, tau):
        return self.scaled_minus(tau) / self.J ** 2

    def variance(self) -> float:
        """J^2 C+(0): mean decimated weight per window state."""
        return float(np.sum(self.weights) / self.norm)

    def second_moment(self) -> float:
        """sum w^2 omega^2 / norm = -J^2 C+''(0)."""
        return float(np.sum(self.weights * self.omegas ** 2) / self.norm)

    def spectral_function(self, omega_edges) -> Tuple[np.ndarray, np.ndarray]:
        """Bin centers and |f|^2 on them; integrates to C+(0) over the full range."""
        edges = np.asarray(omega_edges, dtype=float)
        hist, _ = np.histogram(self.omegas, bins=edges, weights=self.weights)
        dens = hist / (self.norm * self.J ** 2 * np.diff(edges))
        return 0.5 * (edges[1:] + edges[:-1]), dens

    def density_at_zero(self, half_width: float) -> float:
        """|f(0)|^2 estimated from pairs with |omega| <= half_width."""
        sel = np.abs(self.omegas) <= half_width
        return float(np.sum(self.weights[sel]) / (self.norm * self.J ** 2 * 2.0 * half_width))

    def decay_rate(self, half_width: float) -> float:
        return 2.0 * np.pi * self.J ** 2 * self.density_at_zero(half_width)

    def merge(self, other: "JacobiCorrelator") -> "JacobiCorrelator":
        if self.J != other.J:
            raise ValueError("cannot pool correlators with different J")
        return JacobiCorrelator(
            np.concatenate([self.weights, other.weights]),
            np.concatenate([self.omegas, other.omegas]),
            self.norm + other.norm, self.J, self.window, self.n_samples + other.n_samples,
        )

    @staticmethod
    def pool(items: Sequence["JacobiCorrelator"]) -> "JacobiCorrelator":
        items = list(items)
        if not items:
            raise ValueError("nothing to pool")
        Js = {c.J for c in items}
        if len(Js) != 1:
            raise ValueError("cannot pool correlators with different J")
        return JacobiCorrelator(
            np.concatenate([c.weights for c in items]),
            np.concatenate([c.omegas for c in items]),
            float(sum(c.norm for c in items)), items[0].J, items[0].window,
            sum(c.n_samples for c in items),
        )

    def to_csv(self, path) -> Path:
        return write_columns(path, ["w_sq", "omega"], [self.weights, self.omegas])


def _window_count(window, energies, counts):
    if counts is not None:
        return counts
    if energies is None:
        raise ValueError("need either reference energies or state counts for the window")
    return [window.count(E) for E in energies]


def jacobi_correlator(logs: LogLike, window: EnergyWindow, J: float, *,
                      reference_energies: Optional[Sequence[np.ndarray]] = None,
                      state_counts: Optional[Sequence[int]] = None) -> JacobiCorrelator:
    """Pair list of all records with an endpoint in ``window``.

    The normalisation is the number of H0 levels in the window, counted from
    ``reference_energies`` (one array per log) or given as ``state_counts``.
    """
    logs = _as_logs(logs)
    if isinstance(reference_energies, np.ndarray) and reference_energies.ndim == 1:
        reference_energies = [reference_energies]
    if state_counts is not None and np.ndim(state_counts) == 0:
        state_counts = [int(state_counts)]
    counts = _window_count(window, reference_energies, state_counts)
    if len(counts) != len(logs):
        raise ValueError("one reference spectrum (or count) is needed per log")
    ws, oms = [], []
    for lg in logs:
        w2 = lg.w ** 2
        om = lg.E_a - lg.E_b
        in_a = window.contains(lg.E_a)
        in_b = window.contains(lg.E_b)
        ws += [w2[in_a], w2[in_b]]
        oms += [om[in_a], -om[in_b]]
    norm = float(np.sum(counts))
    if norm == 0:
        raise ValueError("empty window: no H0 levels inside")
    if sum(len(x) for x in ws) == 0:
        raise ValueError("no decimation records have an endpoint in the window")
    return JacobiCorrelator(np.concatenate(ws), np.concatenate(oms), norm, J, window, len(logs))


def jacobi_spectral_function(logs: LogLike, window: EnergyWindow, omega_edges, J: float, **kw):
    """|f_Jac(E0, omega)|^2 on ``omega_edges`` (see :func:`jacobi_correlator`)."""
    return jacobi_correlator(logs, window, J, **kw).spectral_function(omega_edges)


# --------------------------------------------------------------------------
# regime scaling


@dataclass
class RegimeScaling:
    log_w_centers: np.ndarray
    densities: Dict[int, np.ndarray]

    def scaled(self, power: float) -> Dict[int, np.ndarray]:
        return {N: d / float(N) ** power for N, d in self.densities.items()}

    def spread(self, lo: float, hi: float, power: float) -> float:
        """Largest relative spread (max - min)/mean across N of rho/N^power in [lo, hi]."""
        sel = (self.log_w_centers >= lo) & (self.log_w_centers <= hi)
        if not np.any(sel):
            raise ValueError("no bins inside the requested log w range")
        stack = np.array([v[sel] for v in self.scaled(power).values()])
        mean = stack.mean(axis=0)
        if np.any(mean <= 0):
            raise ValueError("empty bins inside the requested range")
        return float(np.max((stack.max(axis=0) - stack.min(axis=0)) / mean))


def regime_scaling(histograms: Mapping[int, DecimationHistogram],
                   ranges: Optional[Sequence[Tuple[float, float, float]]] = None):
    """Densities of log10 w per N; with ``ranges`` also the collapse spreads.

    Each range is (log10 w low, log10 w high, power of N).
    """
    hs = dict(histograms)
    if len(hs) < 2:
        raise ValueError("collapse needs histograms for at least two sizes")
    ref = next(iter(hs.values()))
    for h in hs.values():
        if not np.array_equal(h.log_w_edges, ref.log_w_edges):
            raise ValueError("histograms must share log w edges")
    rs = RegimeScaling(ref.log_w_centers, {N: h.log_w_density() for N, h in sorted(hs.items())})
    if ranges is None:
        return rs
    return rs, [rs.spread(lo, hi, p) for lo, hi, p in ranges]


# --------------------------------------------------------------------------
# smoothing


def monotone_smooth(values, mode: str = "sort-desc", window: int = 1) -> np.ndarray:
    """Smooth a sequence of decimated magnitudes.

    ``sort-desc`` returns the nonincreasing rearrangement; ``moving-average``
    returns the centred boxcar mean of width ``window``, truncated at the ends
    so every output point averages only the entries that exist.
    """
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("empty sequence")
    if window < 1:
        raise ValueError("window must be >= 1")
    if mode == "sort-desc":
        return np.sort(x)[::-1]
    if mode == "moving-average":
        half = window // 2
        csum = np.concatenate([[0.0], np.cumsum(x)])
        idx = np.arange(len(x))
        lo = np.maximum(idx - half, 0)
        hi = np.minimum(idx + (window - 1 - half), len(x) - 1) + 1
        return (csum[hi] - csum[lo]) / (hi - lo)
    raise ValueError(f"unknown mode {mode!r}")


# --------------------------------------------------------------------------
# density-of-states flow


@dataclass
class DosFlowTable:
    """nu(w, E) on the histogram's w edges (row k is at 10**log_w_edges[k])."""

    log_w_edges: np.ndarray
    E_centers: np.ndarray
    nu: np.ndarray

    @property
    def dE(self) -> float:
        return float(self.E_centers[1] - self.E_centers[0])

    def level_count(self) -> np.ndarray:
        return self.nu.sum(axis=1) * self.dE

    def conservation_error(self) -> float:
        c = self.level_count()
        return float(np.max(np.abs(c - c[-1])) / abs(c[-1]))

    def at_zero(self) -> np.ndarray:
        return self.nu[0]

    def to_csv(self, path) -> Path:
        k, j = np.meshgrid(np.arange(self.nu.shape[0]), np.arange(self.nu.shape[1]), indexing="ij")
        return write_columns(path, ["log10_w", "E", "nu"],
                             [self.log_w_edges[k], self.E_centers[j], self.nu])


def dos_flow(hist: DecimationHistogram, nu_initial) -> DosFlowTable:
    """Flow the density of states down in w by level-number conservation.

    Each record moves its level by ``kick(w, omega)``, so the level flux at E
    is D(E) = int d omega (omega/2)(sec eta - 1) rho_dec(w, E, E - omega) and
    nu(w - dw) = nu(w) - dw dD/dE.  Explicit Euler from the largest w slice
    down.  The flux is averaged onto bin faces and the outer faces carry none,
    so the update is a central difference inside the grid and conserves the
    level count exactly.  ``nu_initial`` is nu at the top of the flow on the
    histogram's E bins (levels per unit energy per sample).
    """
    if not np.array_equal(hist.E_edges, hist.Eprime_edges):
        raise ValueError("dos flow needs identical E and E' grids")
    dEs = np.diff(hist.E_edges)
    dE = dEs[0]
    if not np.allclose(dEs, dE, rtol=1e-9, atol=0):
        raise ValueError("dos flow needs a uniform energy grid")
    nE = len(dEs)
    nu = np.asarray(nu_initial, dtype=float)
    if nu.shape != (nE,):
        raise ValueError("nu_initial must have one value per energy bin")
    ec = hist.E_centers
    omega = ec[:, None] - ec[None, :]
    nslice = hist.counts.shape[0]
    out = np.empty((nslice + 1, nE))
    out[nslice] = nu
    cur = nu.copy()
    for k in range(nslice - 1, -1, -1):
        wc = 10.0 ** hist.log_w_centers[k]
        flux = (kick(wc, omega) * hist.counts[k]).sum(axis=1) / (hist.n_samples * dE)
        faces = np.concatenate([[0.0], 0.5 * (flux[1:] + flux[:-1]), [0.0]])
        cur = cur - (faces[1:] - faces[:-1]) / dE
        out[k] = cur
    return DosFlowTable(hist.log_w_edges, ec, out)
