"""Periodic spin-1/2 chains in the zero-momentum sector.

Bit ``i`` of a basis integer is the z-projection of site ``i`` (1 = up,
sigma^z = +1).  Operators are assembled from diagonal and spin-flip terms and
can be written either in the full 2^L space (for checks) or in the
translation-invariant k = 0 sector.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .hermitian import HermitianMatrix
from .models import QuenchInstance

__all__ = [
    "SectorBasis",
    "SpinChainSpec",
    "momentum_sector_basis",
    "ising_terms",
    "xxz_terms",
    "perturbation_terms",
    "sector_operator",
    "full_operator",
    "translation_matrix",
    "build_spin_chain",
    "burnside_count",
]

MAX_L = 16


def _rotate_bits(states: np.ndarray, L: int, m: int = 1) -> np.ndarray:
    mask = (1 << L) - 1
    return ((states << m) | (states >> (L - m))) & mask


@dataclass
class SectorBasis:
    L: int
    k: int
    representatives: np.ndarray
    periods: np.ndarray
    rep_of: np.ndarray = field(repr=False)
    index_of: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.representatives)

    @property
    def norms(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.periods)

    def embed(self) -> np.ndarray:
        """2^L x dim isometry whose columns are the sector states."""
        full = np.zeros((1 << self.L, self.dim))
        states = np.arange(1 << self.L)
        idx = self.index_of[self.rep_of[states]]
        full[states, idx] = 1.0 / np.sqrt(self.periods[idx])
        return full


def burnside_count(L: int) -> int:
    """Number of translation orbits of L-bit strings."""
    from math import gcd

    return sum(2 ** gcd(m, L) for m in range(L)) // L


def momentum_sector_basis(L: int, k: int = 0) -> SectorBasis:
    if not 4 <= L <= MAX_L:
        raise ValueError(f"L must lie in [4, {MAX_L}]")
    if k != 0:
        raise NotImplementedError("only the k = 0 sector is supported")
    states = np.arange(1 << L, dtype=np.int64)
    rep = states.copy()
    period = np.zeros(1 << L, dtype=np.int64)
    cur = states.copy()
    for m in range(1, L + 1):
        cur = _rotate_bits(cur, L)
        rep = np.minimum(rep, cur)
        newly = (period == 0) & (cur == states)
        period[newly] = m
    reps = np.flatnonzero(rep == states)
    index_of = np.full(1 << L, -1, dtype=np.int64)
    index_of[reps] = np.arange(len(reps))
    return SectorBasis(L, k, reps, period[reps], rep, index_of)


# an operator is a list of terms; each term is (flip_mask, coefficient(states))
Term = Tuple[int, Callable[[np.ndarray], np.ndarray]]


def _spin(states, i):
    return 2.0 * ((states >> i) & 1) - 1.0


def _zz(i, j, c=1.0) -> Term:
    return 0, lambda s: c * _spin(s, i) * _spin(s, j)


def _z(i, c=1.0) -> Term:
    return 0, lambda s: c * _spin(s, i)


def _x(i, c=1.0) -> Term:
    return 1 << i, lambda s: np.full(s.shape, c)


def _xx_yy(i, j, sign, c=1.0) -> Term:
    # sigma^y sigma^y = -1 on parallel pairs, +1 on antiparallel pairs
    def coef(s):
        parallel = _spin(s, i) == _spin(s, j)
        return c * np.where(parallel, 1.0 - sign, 1.0 + sign)

    return (1 << i) | (1 << j), coef


def ising_terms(L: int, g_x: float, h_z: float, K: float = 1.0) -> List[Term]:
    terms = []
    for i in range(L):
        terms.append(_zz(i, (i + 1) % L, K))
        if g_x:
            terms.append(_x(i, K * g_x))
        if h_z:
            terms.append(_z(i, K * h_z))
    return terms


def xxz_terms(L: int, delta: float, K: float = 1.0) -> List[Term]:
    terms = []
    for i in range(L):
        j = (i + 1) % L
        terms.append(_xx_yy(i, j, +1, K))
        if delta:
            terms.append(_zz(i, j, K * delta))
    return terms


def perturbation_terms(L: int, kind: str) -> List[Term]:
    """V_alpha = sum xx - yy (nn), V_beta = sum xx + yy (nnn), V_gamma = sum x."""
    if kind == "alpha":
        return [_xx_yy(i, (i + 1) % L, -1) for i in range(L)]
    if kind == "beta":
        return [_xx_yy(i, (i + 2) % L, +1) for i in range(L)]
    if kind == "gamma":
        return [_x(i) for i in range(L)]
    raise ValueError(f"unknown perturbation {kind!r}")


def full_operator(terms: List[Term], L: int) -> np.ndarray:
    n = 1 << L
    states = np.arange(n, dtype=np.int64)
    out = np.zeros((n, n))
    for mask, coef in terms:
        c = coef(states)
        np.add.at(out, (states ^ mask, states), c)
    return out


def sector_operator(terms: List[Term], basis: SectorBasis) -> np.ndarray:
    """Matrix of a translation-invariant operator in the k = 0 sector.

    <R'|O|R> = sum_{s -> R'} c_s sqrt(p_R / p_R').
    """
    reps = basis.representatives
    cols = np.arange(basis.dim)
    out = np.zeros((basis.dim, basis.dim))
    for mask, coef in terms:
        c = coef(reps)
        target = reps ^ mask
        rows = basis.index_of[basis.rep_of[target]]
        vals = c * np.sqrt(basis.periods / basis.periods[rows])
        np.add.at(out, (rows, cols), vals)
    return out


def translation_matrix(L: int) -> np.ndarray:
    n = 1 << L
    states = np.arange(n, dtype=np.int64)
    T = np.zeros((n, n))
    T[_rotate_bits(states, L), states] = 1.0
    return T


@dataclass(frozen=True)
class SpinChainSpec:
    """Quench of a periodic chain: H = H_model + J V.

    ``model`` is ``"ising"`` (uses g_x, h_z) or ``"xxz"`` (uses delta);
    ``perturbation`` is ``"alpha"``, ``"beta"`` or ``"gamma"``.
    """

    L: int
    model: str = "ising"
    perturbation: str = "beta"
    J: float = 0.2
    K: float = 1.0
    g_x: float = 0.9045
    h_z: float = 0.8090
    delta: float = 0.5
    momentum: int = 0

    def __post_init__(self):
        if self.L < 4:
            raise ValueError("L must be at least 4")
        if self.model not in ("ising", "xxz"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.perturbation not in ("alpha", "beta", "gamma"):
            raise ValueError(f"unknown perturbation {self.perturbation!r}")

    def model_terms(self) -> List[Term]:
        if self.model == "ising":
            return ising_terms(self.L, self.g_x, self.h_z, self.K)
        return xxz_terms(self.L, self.delta, self.K)

    def perturbation_terms(self) -> List[Term]:
        return perturbation_terms(self.L, self.perturbation)


def build_spin_chain(spec: SpinChainSpec, basis: Optional[SectorBasis] = None,
                     n_states: int = 200, eigensolver: str = "lapack") -> QuenchInstance:
    """Build the quench in the eigenbasis of the unperturbed chain.

    The diagonal of V in that basis is absorbed into H0, so ``V`` is purely
    off diagonal and ``diag(H0_diag) + J V`` equals the full Hamiltonian.  The
    initial states are the ``n_states`` eigenstates nearest the median energy.
    """
    if basis is None:
        basis = momentum_sector_basis(spec.L, spec.momentum)
    if basis.dim < n_states:
        raise ValueError(f"sector dimension {basis.dim} is smaller than n_states={n_states}")
    h0 = sector_operator(spec.model_terms(), basis)
    v = sector_operator(spec.perturbation_terms(), basis)
    if eigensolver == "jacobi":
        from .hermitian import jacobi_diagonalize

        dec, _ = jacobi_diagonalize(h0)
        evals, q = dec.eigenvalues, dec.eigenvectors.real
    elif eigensolver == "lapack":
        evals, q = np.linalg.eigh(h0)
    else:
        raise ValueError(f"unknown eigensolver {eigensolver!r}")
    vrot = q.T @ v @ q
    vrot = 0.5 * (vrot + vrot.T)
    shift = np.diagonal(vrot).copy()
    np.fill_diagonal(vrot, 0.0)
    vm = HermitianMatrix.wrap(vrot)
    median = np.median(evals)
    order = np.argsort(np.abs(evals - median), kind="stable")
    chosen = np.sort(order[:n_states])
    return QuenchInstance(
        evals + spec.J * shift, vm, chosen, spec.J, volume=spec.L,
        meta={"model": spec.model, "perturbation": spec.perturbation, "L": spec.L,
              "h0_eigenvalues": evals},
    )
