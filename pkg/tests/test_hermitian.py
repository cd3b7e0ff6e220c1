import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sja.hermitian import (
    DecimationLog,
    HermitianMatrix,
    NoConvergenceError,
    PivotCache,
    decimate_step,
    default_stop_threshold,
    jacobi_diagonalize,
    offdiag_flow_time,
    pivot_select,
    rotation_cap,
)


def goe(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    return (a + a.T) / math.sqrt(2 * n)


def gue(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return (a + a.conj().T) / (2 * math.sqrt(n))


# --------------------------------------------------------------------------
# construction


def test_constructor_enforces_exact_hermiticity():
    h = HermitianMatrix(gue(6, 1))
    assert np.array_equal(h.entries, h.entries.conj().T)
    assert np.all(h.entries.diagonal().imag == 0)


def test_constructor_rejects_non_square_and_tiny():
    with pytest.raises(ValueError):
        HermitianMatrix(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        HermitianMatrix(np.zeros((1, 1)))


def test_constructor_rejects_non_hermitian():
    with pytest.raises(ValueError):
        HermitianMatrix([[0.0, 1.0], [2.0, 0.0]])


def test_real_input_stays_real():
    assert HermitianMatrix(goe(4, 0)).is_real
    assert HermitianMatrix(goe(4, 0) + 0j).is_real
    assert not HermitianMatrix(gue(4, 0)).is_real


# --------------------------------------------------------------------------
# pivot selection


def test_pivot_two_by_two():
    assert pivot_select(HermitianMatrix([[0, 1], [1, 0]])) == (0, 1, 1.0)


def test_pivot_three_by_three():
    h = HermitianMatrix([[0, 0.2, 0.5], [0.2, 0, 0.1], [0.5, 0.1, 0]])
    assert pivot_select(h) == (0, 2, 0.5)


def test_pivot_diagonal_is_none():
    assert pivot_select(HermitianMatrix(np.diag([1.0, 2.0, 3.0]))) is None


def test_pivot_tie_breaks_lexicographically():
    h = HermitianMatrix([[0, 0, 1, 0], [0, 0, 1, 1], [1, 1, 0, 1], [0, 1, 1, 0]])
    assert pivot_select(h)[:2] == (0, 2)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (7, 7), elements=st.floats(-3, 3, allow_nan=False)))
def test_pivot_matches_brute_force(m):
    h = HermitianMatrix(np.triu(m) + np.triu(m, 1).T)
    iu = np.triu_indices(7, 1)
    vals = np.abs(h.entries[iu])
    got = pivot_select(h)
    if vals.max() == 0:
        assert got is None
        return
    k = int(np.argmax(vals))  # first maximum in row-major order
    assert got == (int(iu[0][k]), int(iu[1][k]), float(vals[k]))


def test_cache_refresh_tracks_rotations():
    h = HermitianMatrix(goe(12, 3))
    cache = PivotCache(h)
    for _ in range(30):
        a, b, _ = pivot_select(h, cache)
        decimate_step(h, None, a, b)
        cache.refresh(h, a, b)
        assert pivot_select(h, cache) == pivot_select(h)


# --------------------------------------------------------------------------
# single rotations


def test_decimate_symmetric_two_by_two():
    h = HermitianMatrix([[0.0, 1.0], [1.0, 0.0]])
    rec = decimate_step(h, None, 0, 1)
    assert rec.eta == pytest.approx(math.pi / 2)
    assert h.entries[0, 1] == 0.0 and h.entries[1, 0] == 0.0
    assert h.entries[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert h.entries[1, 1] == pytest.approx(-1.0, abs=1e-15)


def test_decimate_closed_form_two_by_two():
    h = HermitianMatrix([[1.0, 0.5], [0.5, -1.0]])
    decimate_step(h, None, 0, 1)
    assert sorted(np.diagonal(h.entries)) == pytest.approx([-math.sqrt(1.25), math.sqrt(1.25)], abs=1e-15)


def test_level_kick():
    h = HermitianMatrix([[1.0, 1.0], [1.0, -1.0]])
    rec = decimate_step(h, None, 0, 1)
    assert (rec.E_a, rec.E_b, rec.w) == (1.0, -1.0, 1.0)
    assert h.entries[0, 0] - 1.0 == pytest.approx(math.sqrt(2) - 1, abs=1e-15)


def test_decimate_rejects_bad_pivots():
    h = HermitianMatrix(np.diag([1.0, 2.0]))
    with pytest.raises(ValueError):
        decimate_step(h, None, 0, 0)
    with pytest.raises(ValueError):
        decimate_step(h, None, 0, 1)


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-6, 5), st.floats(-math.pi, math.pi))
def test_two_by_two_against_closed_form(ea, eb, w, phase):
    z = w * complex(math.cos(phase), math.sin(phase))
    h = HermitianMatrix(np.array([[ea, z], [np.conj(z), eb]]))
    rec = decimate_step(h, None, 0, 1)
    centre, half = 0.5 * (ea + eb), math.hypot(0.5 * (ea - eb), w)
    assert sorted(np.diagonal(h.entries).real) == pytest.approx([centre - half, centre + half], abs=1e-12)
    assert -math.pi / 2 <= rec.eta <= math.pi / 2
    assert -math.pi < rec.phi <= math.pi
    assert rec.w == pytest.approx(w, rel=1e-15)
    # tan(eta) = 2w/omega, written without dividing
    om = ea - eb
    assert abs(math.sin(rec.eta) * om - 2 * w * math.cos(rec.eta)) <= 1e-12 * math.hypot(om, 2 * w)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 9), st.integers(0, 10_000), st.booleans())
def test_rotation_preserves_trace_and_norm(n, seed, complex_):
    h = HermitianMatrix(gue(n, seed) if complex_ else goe(n, seed))
    trace0, fro0 = np.trace(h.entries).real, h.frobenius_norm()
    u = np.eye(n, dtype=h.entries.dtype)
    h0 = h.entries.copy()
    a, b, _ = pivot_select(h)
    decimate_step(h, u, a, b)
    assert np.trace(h.entries).real == pytest.approx(trace0, rel=1e-12, abs=1e-12)
    assert h.frobenius_norm() == pytest.approx(fro0, rel=1e-12)
    assert h.entries[a, b] == 0 and h.entries[b, a] == 0
    assert np.allclose(u.conj().T @ h0 @ u, h.entries, atol=1e-12)


# --------------------------------------------------------------------------
# full runs


def test_diagonal_input_needs_no_rotations():
    dec, log = jacobi_diagonalize(np.diag([3.0, -1.0, 2.0]))
    assert len(log) == 0
    assert np.array_equal(dec.eigenvalues, [-1.0, 2.0, 3.0])


def test_single_rotation_sum_rule():
    _, log = jacobi_diagonalize([[0.0, 0.5], [0.5, 0.0]])
    assert len(log) == 1 and log.w[0] == 0.5
    assert log.decimated_norm() == pytest.approx(0.25, rel=1e-15)


def test_offdiag_flow_time_examples():
    assert offdiag_flow_time(np.diag([1.0, 2.0])) == 0.0
    assert offdiag_flow_time(np.array([[0.0, 1.0], [1.0, 0.0]])) == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_eigenvalues_match_qr_oracle(seed):
    h = goe(64, seed)
    dec, _ = jacobi_diagonalize(h)
    oracle = scipy.linalg.eigh(h, eigvals_only=True, driver="ev")
    assert np.max(np.abs(dec.eigenvalues - oracle)) < 1e-10


def test_complex_run_matches_oracle_and_is_unitary():
    h = HermitianMatrix(gue(48, 5))
    dec, log = jacobi_diagonalize(h)
    oracle = scipy.linalg.eigh(h.entries, eigvals_only=True, driver="ev")
    assert np.max(np.abs(dec.eigenvalues - oracle)) < 1e-10
    u = dec.eigenvectors
    assert np.max(np.abs(u.conj().T @ u - np.eye(48))) < 1e-10
    assert dec.residual(h) < 1e-8 * h.frobenius_norm()
    assert log.bookkeeping_residual() < 1e-10


def test_unitarity_and_residual_at_256():
    h = HermitianMatrix(goe(256, 7))
    dec, _ = jacobi_diagonalize(h)
    u = dec.eigenvectors
    assert np.max(np.abs(u.T @ u - np.eye(256))) < 1e-10
    assert dec.residual(h) < 1e-8 * h.frobenius_norm()
    assert np.all(np.diff(dec.eigenvalues) >= 0)


def test_log_bookkeeping_along_the_run():
    n = 40
    _, log = jacobi_diagonalize(goe(n, 11), vectors=False)
    decimated = np.concatenate([[0.0], np.cumsum(log.w ** 2)])[:-1]
    lhs = 2 * decimated + n * log.beta_inv_sq
    assert np.max(np.abs(lhs - n * log.beta0_inv_sq)) < 1e-10 * n * log.beta0_inv_sq
    steps = np.diff(log.beta_inv_sq)
    assert np.allclose(steps, -(2.0 / n) * log.w[:-1] ** 2, rtol=1e-8, atol=1e-14)


def test_convergence_bound_holds_on_every_step():
    n = 32
    _, log = jacobi_diagonalize(goe(n, 2), vectors=False)
    binv = np.sqrt(np.maximum(log.beta_inv_sq, 0))
    bound = np.exp(-np.arange(len(log)) / n ** 2) * math.sqrt(log.beta0_inv_sq)
    assert np.all(binv <= bound * (1 + 1e-12))


def test_real_and_complex_paths_log_the_same_rotations():
    h = goe(20, 4)
    _, lr = jacobi_diagonalize(h, vectors=False)
    hc = HermitianMatrix.wrap(h.astype(np.complex128))
    _, lc = jacobi_diagonalize(hc, vectors=False)
    assert len(lr) == len(lc)
    assert np.array_equal(lr.a, lc.a) and np.array_equal(lr.b, lc.b)
    assert np.allclose(lr.w, lc.w, rtol=1e-12, atol=1e-300)


def test_input_is_not_modified():
    h = goe(10, 9)
    before = h.copy()
    jacobi_diagonalize(h)
    assert np.array_equal(h, before)


def test_rotation_cap_raises_with_partial_log():
    with pytest.raises(NoConvergenceError) as info:
        jacobi_diagonalize(goe(16, 0), max_rotations=5)
    assert isinstance(info.value.log, DecimationLog)
    assert len(info.value.log) == 5
    assert not info.value.log.converged


def test_stop_threshold_is_respected():
    h = goe(30, 6)
    stop = 1e-3
    dec, log = jacobi_diagonalize(h, stop, vectors=False)
    assert np.all(log.w >= stop)
    assert len(log) <= rotation_cap(h, stop)
    with pytest.raises(ValueError):
        jacobi_diagonalize(h, 0.0)


def test_default_stop_threshold_scale():
    h = goe(8, 0)
    assert default_stop_threshold(h) == pytest.approx(1e-13 * np.linalg.norm(h) / 8)
