"""Experiment runner: build ensembles, reduce them in sample order, write artifacts.

Every sample is independent and seeded by :func:`sja.config.sample_seed`.
Samples may run in a process pool; results are always reduced in sample
index order, so outputs do not depend on the number of workers.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, sample_seed
from .fidelity import (
    FidelityCurve,
    bare_correlator,
    closed_form_double_gaussian,
    cutoff_time,
    early_time_coefficients,
    exact_log_fidelities,
    fit_decay_rate,
    fit_early_time,
    sja_log_fidelity,
)
from .flow import BoundaryFluxError, FlowKernel, LdosGrid, evolve_ldos
from .hermitian import jacobi_diagonalize
from .io import write_columns
from .models import (
    DoubleGaussianProfile,
    RandomMatrixSpec,
    build_goe_plus_sparse,
    build_random_matrix,
    dos_from_name,
    profile_from_name,
)
from .spin import SpinChainSpec, build_spin_chain
from .stats import (
    DecimationHistogram,
    EnergyWindow,
    JacobiCorrelator,
    bin_decimations,
    jacobi_correlator,
    regime_scaling,
)

__all__ = [
    "WORKERS_ENV",
    "MAX_FAILURE_FRACTION",
    "RunAborted",
    "SampleResult",
    "RunManifest",
    "RunResult",
    "average_ensemble",
    "emit_csv",
    "run_experiment",
    "run_samples",
    "worker_count",
]

log = logging.getLogger(__name__)

WORKERS_ENV = "SJA_WORKERS"
MAX_FAILURE_FRACTION = 0.2
_ALL_ENERGIES = np.array([-1e6, 1e6])
_TIME_UNITS = "t in inverse energy units of H0; log fidelity is dimensionless"


class RunAborted(RuntimeError):
    """Too many samples failed for the ensemble to be trusted."""


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    if not raw.strip():
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1")
    return n


# --------------------------------------------------------------------------
# ensemble averaging


def average_ensemble(curves: Sequence[FidelityCurve], mode: str = "mean_of_logs",
                     label: str = "exact") -> FidelityCurve:
    """Pointwise average over valid points, with standard error and counts.

    ``mode="mean_of_logs"`` averages log P0; ``"log_of_means"`` takes the log
    of the averaged P0.  Points with no valid sample are marked invalid.
    The standard error uses the sample standard deviation and is zero where
    only one sample is valid.
    """
    curves = list(curves)
    if not curves:
        raise ValueError("no curves to average")
    t = curves[0].t
    for c in curves[1:]:
        if c.t.shape != t.shape or np.any(c.t != t):
            raise ValueError("curves must share one time grid")
    vals = np.array([c.values for c in curves])
    ok = np.array([c.valid for c in curves])
    if mode == "log_of_means":
        vals = np.exp(np.where(ok, vals, -np.inf))
    elif mode != "mean_of_logs":
        raise ValueError(f"unknown averaging mode {mode!r}")
    x = np.where(ok, vals, 0.0)
    count = ok.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = x.sum(axis=0) / count
        dev = np.where(ok, vals - mean, 0.0)
        var = (dev ** 2).sum(axis=0) / np.maximum(count - 1, 1)
        stderr = np.where(count > 1, np.sqrt(var / count), 0.0)
        if mode == "log_of_means":
            stderr = stderr / mean
            mean = np.log(mean)
    valid = (count > 0) & np.isfinite(mean)
    mean = np.where(valid, mean, np.nan)
    stderr = np.where(valid, stderr, np.nan)
    return FidelityCurve(t, mean, valid, label, stderr, count)


# --------------------------------------------------------------------------
# per-sample work


@dataclass
class SampleResult:
    index: int
    seed: int
    exact: List[FidelityCurve] = field(default_factory=list)
    jacobi: Optional[JacobiCorrelator] = None
    bare: Optional[JacobiCorrelator] = None
    histogram: Optional[DecimationHistogram] = None
    size: int = 0
    window_states: int = 0
    window_half: float = 0.0
    volume: int = 1
    E0: float = 0.0
    n_rotations: int = 0
    error: Optional[str] = None


def _stop_threshold(cfg: ExperimentConfig, h: np.ndarray) -> float:
    return cfg.stop_threshold_rel * float(np.linalg.norm(h)) / h.shape[0]


def _exact_curves(h: np.ndarray, psi0_indices, t) -> List[FidelityCurve]:
    evals, vecs = np.linalg.eigh(h)
    vals, valid = exact_log_fidelities(evals, np.abs(vecs[np.asarray(psi0_indices)]) ** 2, t)
    return [FidelityCurve(t, v, ok, "exact") for v, ok in zip(vals, valid)]


def _rmt_sample(cfg: ExperimentConfig, res: SampleResult) -> None:
    dos = dos_from_name(cfg.dos, dos_width=cfg.dos_width, dos_sigma=cfg.dos_width)
    profile = profile_from_name(cfg.profile, sigma_omega=cfg.sigma_omega, omega0=cfg.omega0)
    inst = build_random_matrix(RandomMatrixSpec(cfg.N, cfg.J, dos, profile, res.seed))
    h = inst.hamiltonian().entries
    t = cfg.time_grid()
    res.size = inst.dim
    res.E0 = inst.E0
    window = EnergyWindow(cfg.E0, cfg.eps_E)
    res.window_states = window.count(inst.H0_diag)
    res.window_half = window.half_width
    if cfg.exact:
        res.exact = _exact_curves(h, inst.psi0_indices, t)
    if cfg.sja or cfg.flow_solver_check:
        _, lg = jacobi_diagonalize(h, _stop_threshold(cfg, h), vectors=False)
        res.n_rotations = len(lg)
        res.jacobi = jacobi_correlator(lg, window, cfg.J, reference_energies=[inst.H0_diag])
    if cfg.tdpt:
        res.bare = bare_correlator(inst)


def _spin_sample(cfg: ExperimentConfig, res: SampleResult) -> None:
    spec = SpinChainSpec(cfg.L, cfg.chain, cfg.perturbation, cfg.coupling, cfg.K,
                         cfg.g_x, cfg.h_z, cfg.delta)
    inst = build_spin_chain(spec, n_states=cfg.n_states)
    h = inst.hamiltonian().entries
    t = cfg.time_grid()
    res.size = inst.dim
    res.volume = inst.volume
    centre = float(np.median(inst.H0_diag))
    res.E0 = centre
    window = EnergyWindow.around(inst.H0_diag, centre, cfg.window_states)
    res.window_states = window.count(inst.H0_diag)
    res.window_half = window.half_width
    if cfg.exact:
        res.exact = _exact_curves(h, inst.psi0_indices, t)
    if cfg.sja:
        _, lg = jacobi_diagonalize(h, _stop_threshold(cfg, h), vectors=False)
        res.n_rotations = len(lg)
        res.jacobi = jacobi_correlator(lg, window, cfg.coupling, reference_energies=[inst.H0_diag])
    if cfg.tdpt:
        res.bare = bare_correlator(inst)


def _regime_plan(cfg: ExperimentConfig):
    plan = []
    for N, count in zip(cfg.sizes, cfg.samples_per_size):
        plan += [N] * count
    return plan


def _goe_sample(cfg: ExperimentConfig, res: SampleResult) -> None:
    N = _regime_plan(cfg)[res.index]
    h = build_goe_plus_sparse(N, cfg.nnz_per_row, res.seed).entries
    stop = min(_stop_threshold(cfg, h), 10.0 ** cfg.log_w_min)
    _, lg = jacobi_diagonalize(h, stop, vectors=False)
    res.size = N
    res.n_rotations = len(lg)
    edges = np.linspace(cfg.log_w_min, cfg.log_w_max, cfg.log_w_bins + 1)
    res.histogram = bin_decimations(lg, edges, _ALL_ENERGIES)


def _run_one(cfg: ExperimentConfig, index: int) -> SampleResult:
    res = SampleResult(index, sample_seed(cfg.master_seed, index))
    work = {"rmt": _rmt_sample, "spin": _spin_sample, "goe_sparse": _goe_sample}[cfg.model]
    try:
        work(cfg, res)
    except Exception as exc:  # any module error only aborts this sample
        res.error = f"{type(exc).__name__}: {exc}"
        res.exact, res.jacobi, res.bare, res.histogram = [], None, None, None
    return res


def _n_samples(cfg: ExperimentConfig) -> int:
    return len(_regime_plan(cfg)) if cfg.model == "goe_sparse" else cfg.n_samples


def run_samples(cfg: ExperimentConfig, workers: Optional[int] = None) -> List[SampleResult]:
    """All samples of ``cfg`` in index order."""
    n = _n_samples(cfg)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or n == 1:
        return [_run_one(cfg, i) for i in range(n)]
    with ProcessPoolExecutor(max_workers=min(workers, n)) as pool:
        return list(pool.map(_run_one, [cfg] * n, range(n)))


# --------------------------------------------------------------------------
# reduction


@dataclass
class RunResult:
    """In-memory outcome of a run, before anything is written."""

    config: ExperimentConfig
    samples: List[SampleResult]
    curves: Dict[str, FidelityCurve] = field(default_factory=dict)
    jacobi: Optional[JacobiCorrelator] = None
    bare: Optional[JacobiCorrelator] = None
    summary: dict = field(default_factory=dict)
    regime: Optional[dict] = None
    warnings: List[str] = field(default_factory=list)

    @property
    def failures(self) -> List[SampleResult]:
        return [s for s in self.samples if s.error is not None]


def _finite(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")


def _flow_check(cfg: ExperimentConfig, corr: JacobiCorrelator, t, reference: FidelityCurve) -> dict:
    d = cfg.flow_d_omega
    w = corr.w
    w = w[w > 0]
    w_edges = np.concatenate([[0.0], np.geomspace(w.min(), w.max() * (1 + 1e-9), 48)])
    om_max = float(np.max(np.abs(corr.omegas))) + d
    kernel = FlowKernel.from_correlator(corr, w_edges, d, om_max)
    grid = LdosGrid.centred(0.0, 3.0 * om_max, d)
    result = evolve_ldos(kernel, grid, 0.0, mode="broad_dos", flux_tol=1e-8)
    values = result.log_fidelity(t)
    sel = cfg.coupling * t <= 3.0
    diff = float(np.max(np.abs(values[sel] - reference.values[sel])))
    curve = FidelityCurve(t, values, label="flow")
    return {"curve": curve, "max_abs_diff_Jt3": diff, "mass_lost": result.mass_lost}


def reduce_samples(cfg: ExperimentConfig, samples: List[SampleResult]) -> RunResult:
    """Average curves and pool correlators in sample order; compute rates and t*."""
    run = RunResult(cfg, samples)
    failed = run.failures
    if len(failed) > MAX_FAILURE_FRACTION * len(samples):
        raise RunAborted(
            f"{len(failed)} of {len(samples)} samples failed; first error: {failed[0].error}")
    good = [s for s in samples if s.error is None]
    summary = run.summary
    summary.update(name=cfg.name, model=cfg.model, config_hash=cfg.digest(),
                   n_samples=len(samples), n_failed=len(failed),
                   rotations_mean=_finite(np.mean([s.n_rotations for s in good])))
    if cfg.model == "goe_sparse":
        hists = {}
        for s in good:
            hists[s.size] = s.histogram if s.size not in hists else hists[s.size].merge(s.histogram)
        if len(hists) < 2:
            raise RunAborted("regime scaling needs at least two sizes with surviving samples")
        rs, spreads = regime_scaling(hists, [(*cfg.sparse_range, 1.0), (*cfg.dense_range, 2.0)])
        run.regime = {"scaling": rs, "histograms": hists}
        summary["regime"] = {"spread_sparse_over_N": spreads[0], "spread_dense_over_N2": spreads[1],
                             "sparse_range": list(cfg.sparse_range),
                             "dense_range": list(cfg.dense_range)}
        return run

    t = cfg.time_grid()
    J = cfg.coupling
    volume = good[0].volume
    summary["volume"] = volume
    if cfg.exact:
        per = [c for s in good for c in s.exact]
        run.curves["exact"] = average_ensemble(per, cfg.average, "exact")
    if cfg.sja:
        run.jacobi = JacobiCorrelator.pool([s.jacobi for s in good])
        curve = sja_log_fidelity(run.jacobi, t)
        curve.count = np.full(len(t), len(good))
        run.curves["sja"] = curve
    if cfg.tdpt:
        run.bare = JacobiCorrelator.pool([s.bare for s in good])
        curve = sja_log_fidelity(run.bare, t, label="tdpt")
        curve.count = np.full(len(t), len(good))
        run.curves["tdpt"] = curve
    if cfg.closed_form and cfg.model == "rmt" and cfg.profile == "double_gaussian":
        vals = closed_form_double_gaussian(J, cfg.sigma_omega, cfg.omega0, t)
        run.curves["closed_form"] = FidelityCurve(t, vals, label="closed_form")

    # rates
    rates = {}
    if cfg.model == "rmt" and cfg.profile == "double_gaussian":
        rates["gamma_gr"] = DoubleGaussianProfile(cfg.sigma_omega, cfg.omega0).fgr_rate(J)
    elif run.bare is not None:
        rates["gamma_gr"] = run.bare.decay_rate(cfg.rate_half_width)
    if run.jacobi is not None:
        rates["gamma_jac"] = run.jacobi.decay_rate(cfg.rate_half_width)
    lo, hi = cfg.rate_window
    if hi > lo:
        for name in ("exact", "sja", "tdpt"):
            if name in run.curves:
                try:
                    fit = fit_decay_rate(run.curves[name], (lo, hi))
                except ValueError as exc:
                    run.warnings.append(f"rate fit of {name} skipped: {exc}")
                    continue
                rates[f"gamma_fit_{name}"] = fit.rate
                rates[f"fit_rms_{name}"] = fit.rms_residual
    summary["rates"] = {k: _finite(v) for k, v in rates.items()}

    # entropy S = log(J nu(E0)), with nu counted in the correlator window
    nu = np.mean([s.window_states / (2.0 * s.window_half) for s in good])
    entropy = math.log(J * nu) if J * nu > 1 else float("nan")
    summary["entropy"] = _finite(entropy)
    summary["t_star"] = {name: _finite(cutoff_time(c, entropy)) for name, c in run.curves.items()
                         if math.isfinite(entropy)}

    # early-time law
    early = {}
    if run.jacobi is not None:
        early["c2_jacobi"], early["c4_jacobi"] = early_time_coefficients(run.jacobi)
    if run.bare is not None:
        early["c2_bare"] = early_time_coefficients(run.bare)[0]
    if "exact" in run.curves:
        try:
            early["c2_fit"], early["c4_fit"] = fit_early_time(run.curves["exact"], cfg.early_time_max / J)
        except ValueError as exc:
            run.warnings.append(f"early-time fit skipped: {exc}")
    summary["early_time"] = {k: _finite(v) for k, v in early.items()}

    if cfg.flow_solver_check and run.jacobi is not None:
        ref = run.curves.get("sja") or sja_log_fidelity(run.jacobi, t)
        try:
            chk = _flow_check(cfg, run.jacobi, t, ref)
        except BoundaryFluxError as exc:
            run.warnings.append(f"flow solver check failed: {exc}")
        else:
            run.curves["flow"] = chk.pop("curve")
            summary["flow_check"] = {k: _finite(v) for k, v in chk.items()}
    return run


# --------------------------------------------------------------------------
# artifacts


@dataclass
class RunManifest:
    config_hash: str
    seeds: List[int]
    code_version: str
    wall_clock: float
    outputs: List[str]
    failures: List[dict] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"config_hash: {self.config_hash}",
            f"code_version: {self.code_version}",
            f"wall_clock_seconds: {self.wall_clock:.3f}",
            f"n_samples: {len(self.seeds)}",
            f"n_failed: {len(self.failures)}",
            "outputs:",
            *[f"  {p}" for p in self.outputs],
            "failures:",
            *[f"  sample {f['index']} (seed {f['seed']}): {f['error']}" for f in self.failures],
            "warnings:",
            *[f"  {w}" for w in self.warnings],
            "seeds:",
            *[f"  {i} {s}" for i, s in enumerate(self.seeds)],
        ]
        return "\n".join(lines) + "\n"

    def write(self, directory: Path, prefix: str) -> Path:
        path = Path(directory) / f"{prefix}_manifest.txt"
        try:
            path.write_text(self.to_text())
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        return path


def emit_csv(curves: Sequence[FidelityCurve], directory, prefix: str,
             warnings_out: Optional[List[str]] = None) -> List[Path]:
    """One ``<prefix>_<label>.csv`` per curve with columns
    t, mean_logP0, stderr, count, label.  Missing stderr is written as nan and
    missing counts as 1.  An empty list writes nothing and adds a warning."""
    directory = Path(directory)
    if not curves:
        if warnings_out is not None:
            warnings_out.append("no curves to write")
        return []
    paths = []
    for c in curves:
        n = len(c.t)
        se = c.stderr if c.stderr is not None else np.full(n, np.nan)
        cnt = c.count if c.count is not None else np.ones(n, dtype=np.int64)
        vals = np.where(c.valid, c.values, np.nan)
        path = directory / f"{prefix}_{c.label}.csv"
        try:
            write_columns(path, ["t", "mean_logP0", "stderr", "count", "label"],
                          [c.t, vals, se, np.asarray(cnt, dtype=np.int64), np.full(n, c.label)],
                          comment=_TIME_UNITS)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        paths.append(path)
    return paths


def _json_dump(obj, path: Path) -> Path:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def write_outputs(run: RunResult, directory) -> List[Path]:
    cfg = run.config
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    prefix = f"{cfg.digest()[:10]}_{cfg.name}"
    paths = emit_csv(list(run.curves.values()), directory, prefix,
                     None if cfg.model == "goe_sparse" else run.warnings)
    vol = run.summary.get("volume", 1)
    if vol > 1:
        per_site = [c.per_site(vol) for c in run.curves.values()]
        for c in per_site:
            c.label = f"{c.label}_per_site"
        paths += emit_csv(per_site, directory, prefix)
    if run.jacobi is not None:
        edges = np.linspace(-1.0, 1.0, 401) * max(float(np.max(np.abs(run.jacobi.omegas))), 1e-12)
        centers, dens = run.jacobi.spectral_function(edges)
        cols = [centers, dens]
        header = ["omega", "f_jac_sq"]
        if run.bare is not None:
            cols.append(run.bare.spectral_function(edges)[1])
            header.append("f_bare_sq")
        p = directory / f"{prefix}_spectral.csv"
        paths.append(write_columns(p, header, cols, comment="omega in energy units of H0"))
    if run.regime is not None:
        rs = run.regime["scaling"]
        sizes = sorted(rs.densities)
        p = directory / f"{prefix}_regime.csv"
        paths.append(write_columns(
            p, ["log10_w"] + [f"density_N{N}" for N in sizes],
            [rs.log_w_centers] + [rs.densities[N] for N in sizes],
            comment="records per sample per unit log10 w"))
    summary = dict(run.summary, warnings=list(run.warnings))
    paths.append(_json_dump(summary, directory / f"{prefix}_summary.json"))
    (directory / f"{prefix}_config.ini").write_text(cfg.to_ini())
    paths.append(directory / f"{prefix}_config.ini")
    return paths


def run_experiment(cfg: ExperimentConfig, output_dir=None, workers: Optional[int] = None):
    """Run ``cfg`` end to end and write its artifacts.

    Returns ``(manifest, run)``.  Raises :class:`RunAborted` when more than
    20% of the samples fail.
    """
    start = time.perf_counter()
    samples = run_samples(cfg, workers)
    run = reduce_samples(cfg, samples)
    directory = Path(cfg.output_dir if output_dir is None else output_dir)
    paths = write_outputs(run, directory)
    prefix = f"{cfg.digest()[:10]}_{cfg.name}"
    manifest = RunManifest(
        cfg.digest(), [s.seed for s in samples], __version__, time.perf_counter() - start,
        [p.name for p in paths],
        [{"index": s.index, "seed": s.seed, "error": s.error} for s in run.failures],
        list(run.warnings),
    )
    manifest.outputs.append(f"{prefix}_manifest.txt")
    manifest.write(directory, prefix)
    for w in run.warnings:
        log.warning(w)
    return manifest, run
