"""Random-matrix quench models.

The ETH-style ensemble draws H0 energies from a density of states and builds
an off-diagonal perturbation whose squared elements follow a target spectral
function.  The GOE-plus-sparse ensemble illustrates the two regimes of the
decimation density.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .hermitian import HermitianMatrix

__all__ = [
    "UniformDos",
    "GaussianDos",
    "DoubleGaussianProfile",
    "SechProfile",
    "double_gaussian_profile",
    "RandomMatrixSpec",
    "QuenchInstance",
    "build_random_matrix",
    "build_goe_plus_sparse",
    "dos_from_name",
    "profile_from_name",
]

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class UniformDos:
    """nu(E)/N uniform on [center - width/2, center + width/2]."""

    width: float = 1.0
    center: float = 0.0
    name: str = field(default="uniform", init=False)

    def pdf(self, E):
        E = np.asarray(E, dtype=float)
        inside = np.abs(E - self.center) <= 0.5 * self.width
        return np.where(inside, 1.0 / self.width, 0.0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.center + self.width * (rng.random(n) - 0.5)

    def params(self) -> dict:
        return {"dos_width": self.width, "dos_center": self.center}


@dataclass(frozen=True)
class GaussianDos:
    sigma: float = 1.0
    center: float = 0.0
    name: str = field(default="gaussian", init=False)

    def pdf(self, E):
        x = (np.asarray(E, dtype=float) - self.center) / self.sigma
        return np.exp(-0.5 * x * x) / (_SQRT_2PI * self.sigma)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.center + self.sigma * rng.standard_normal(n)

    def params(self) -> dict:
        return {"dos_sigma": self.sigma, "dos_center": self.center}


@dataclass(frozen=True)
class DoubleGaussianProfile:
    """E-independent |f_V(omega)|^2: two normalised Gaussians at +-omega0."""

    sigma_omega: float
    omega0: float = 0.0
    name: str = field(default="double_gaussian", init=False)

    def __post_init__(self):
        if not self.sigma_omega > 0:
            raise ValueError("sigma_omega must be positive")
        if self.omega0 < 0:
            raise ValueError("omega0 must be non-negative")

    def __call__(self, E, omega):
        s2 = self.sigma_omega ** 2
        om = np.asarray(omega, dtype=float)
        g = np.exp(-((om - self.omega0) ** 2) / (2 * s2)) + np.exp(-((om + self.omega0) ** 2) / (2 * s2))
        return g / (2.0 * np.sqrt(2.0 * np.pi * s2)) + 0.0 * np.asarray(E, dtype=float)

    def correlator(self, tau):
        tau = np.asarray(tau, dtype=float)
        return np.exp(-0.5 * (self.sigma_omega * tau) ** 2) * np.cos(self.omega0 * tau)

    def at_zero(self, E: float = 0.0) -> float:
        return float(self(E, 0.0))

    def fgr_rate(self, J: float) -> float:
        """2 pi J^2 |f_V(0)|^2 = sqrt(2 pi) J^2/sigma exp(-omega0^2 / 2 sigma^2)."""
        s = self.sigma_omega
        return float(_SQRT_2PI * J * J / s * np.exp(-self.omega0 ** 2 / (2 * s * s)))

    def params(self) -> dict:
        return {"sigma_omega": self.sigma_omega, "omega0": self.omega0}


@dataclass(frozen=True)
class SechProfile:
    """|f_V(E, omega)|^2 = cosh^-2(E/sigma_E) cosh^-2(omega/sigma_omega) / (2 sigma_omega)."""

    sigma_omega: float
    sigma_E: float = 1.0
    name: str = field(default="sech", init=False)

    def __call__(self, E, omega):
        E = np.asarray(E, dtype=float)
        om = np.asarray(omega, dtype=float)
        return 1.0 / (2.0 * self.sigma_omega * np.cosh(E / self.sigma_E) ** 2 * np.cosh(om / self.sigma_omega) ** 2)

    def at_zero(self, E: float = 0.0) -> float:
        return float(self(E, 0.0))

    def fgr_rate(self, J: float, E: float = 0.0) -> float:
        return 2 * np.pi * J * J * self.at_zero(E)

    def params(self) -> dict:
        return {"sigma_omega": self.sigma_omega, "sigma_E": self.sigma_E}


def double_gaussian_profile(sigma_omega: float, omega0: float) -> DoubleGaussianProfile:
    return DoubleGaussianProfile(sigma_omega, omega0)


def dos_from_name(name: str, **params):
    if name == "uniform":
        return UniformDos(params.get("dos_width", 1.0), params.get("dos_center", 0.0))
    if name == "gaussian":
        return GaussianDos(params.get("dos_sigma", 1.0), params.get("dos_center", 0.0))
    raise ValueError(f"unknown dos profile {name!r}")


def profile_from_name(name: str, **params):
    if name == "double_gaussian":
        return DoubleGaussianProfile(params["sigma_omega"], params.get("omega0", 0.0))
    if name == "sech":
        return SechProfile(params["sigma_omega"], params.get("sigma_E", 1.0))
    raise ValueError(f"unknown spectral profile {name!r}")


@dataclass(frozen=True)
class RandomMatrixSpec:
    N: int
    J: float
    dos: Union[UniformDos, GaussianDos] = UniformDos()
    profile: Union[DoubleGaussianProfile, SechProfile] = DoubleGaussianProfile(0.06, 0.14)
    seed: int = 0

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if not self.J > 0:
            raise ValueError("J must be positive")


@dataclass
class QuenchInstance:
    """H = diag(H0_diag) + J V, written in the eigenbasis of H0.

    ``V`` has an exactly zero diagonal.  ``psi0_indices`` lists the initial
    states (one for the random-matrix model, many mid-spectrum states for spin
    chains).  ``volume`` is the system size used for per-site densities.
    """

    H0_diag: np.ndarray
    V: HermitianMatrix
    psi0_indices: np.ndarray
    J: float
    volume: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.H0_diag = np.asarray(self.H0_diag, dtype=float)
        self.psi0_indices = np.atleast_1d(np.asarray(self.psi0_indices, dtype=np.int64))
        if np.any(np.diagonal(self.V.entries) != 0):
            raise ValueError("perturbation must have a zero diagonal")

    @property
    def dim(self) -> int:
        return len(self.H0_diag)

    @property
    def psi0_index(self) -> int:
        return int(self.psi0_indices[0])

    @property
    def E0(self) -> float:
        return float(self.H0_diag[self.psi0_index])

    @property
    def initial_energies(self) -> np.ndarray:
        return self.H0_diag[self.psi0_indices]

    def hamiltonian(self) -> HermitianMatrix:
        h = self.J * self.V.entries
        h[np.diag_indices_from(h)] = self.H0_diag
        return HermitianMatrix.wrap(h)


def build_random_matrix(spec: RandomMatrixSpec) -> QuenchInstance:
    """Sample one member of the ETH random-matrix ensemble.

    State 0 has its energy pinned to exactly zero and is the initial state.
    """
    rng = np.random.default_rng(spec.seed)
    N = spec.N
    E = spec.dos.sample(rng, N)
    E[0] = 0.0
    X = rng.standard_normal((N, N))
    X = np.triu(X, 1)
    X = X + X.T
    Ebar = 0.5 * (E[:, None] + E[None, :])
    omega = E[:, None] - E[None, :]
    nu = N * spec.dos.pdf(Ebar)
    off = ~np.eye(N, dtype=bool)
    if np.any(nu[off] <= 0):
        raise ValueError("density of states vanishes at a pair midpoint; profile and DOS domains disagree")
    nu[~off] = 1.0
    amp = np.sqrt(spec.profile(Ebar, omega) / nu)
    V = amp * X
    np.fill_diagonal(V, 0.0)
    vm = HermitianMatrix.wrap(V)
    return QuenchInstance(E, vm, np.array([0]), spec.J, meta={"seed": spec.seed, "model": "rmt"})


def build_goe_plus_sparse(N: int, nnz_per_row: int = 20, seed: int = 0) -> HermitianMatrix:
    """GOE (off-diagonal variance 1/N, diagonal 2/N) plus a sparse symmetric matrix.

    The sparse part has ``N * nnz_per_row / 2`` distinct off-diagonal pairs
    placed uniformly, so each row holds ``nnz_per_row`` nonzeros on average,
    with magnitudes uniform in [0.5, 1.5] and random signs.
    """
    if not nnz_per_row < N:
        raise ValueError("nnz_per_row must be smaller than N")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((N, N))
    G = (A + A.T) / np.sqrt(2.0 * N)
    npairs = N * (N - 1) // 2
    k = (N * nnz_per_row) // 2
    flat = rng.choice(npairs, size=k, replace=False)
    iu, ju = np.triu_indices(N, 1)
    i, j = iu[flat], ju[flat]
    mag = rng.uniform(0.5, 1.5, size=k) * rng.choice([-1.0, 1.0], size=k)
    G[i, j] += mag
    G[j, i] += mag
    return HermitianMatrix.wrap(G)
