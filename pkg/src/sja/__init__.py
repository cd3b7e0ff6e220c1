"""Fidelity decay from the statistics of Jacobi rotations."""
from .hermitian import (
    DecimationLog,
    HermitianMatrix,
    NoConvergenceError,
    SpectralDecomposition,
    jacobi_diagonalize,
)
from .models import QuenchInstance, RandomMatrixSpec, build_goe_plus_sparse, build_random_matrix
from .stats import EnergyWindow, JacobiCorrelator, bin_decimations, jacobi_correlator
from .fidelity import (
    FidelityCurve,
    exact_log_fidelity,
    sja_log_fidelity,
    tdpt_log_fidelity,
)

__version__ = "0.1.0"

__all__ = [
    "DecimationLog",
    "HermitianMatrix",
    "NoConvergenceError",
    "SpectralDecomposition",
    "jacobi_diagonalize",
    "QuenchInstance",
    "RandomMatrixSpec",
    "build_goe_plus_sparse",
    "build_random_matrix",
    "EnergyWindow",
    "JacobiCorrelator",
    "bin_decimations",
    "jacobi_correlator",
    "FidelityCurve",
    "exact_log_fidelity",
    "sja_log_fidelity",
    "tdpt_log_fidelity",
]
