"""Experiment configuration: INI text with fixed sections, presets, seeds.

Grammar
-------
A config file is read by :mod:`configparser` with interpolation disabled and
case-sensitive keys.  Every key belongs to exactly one section::

    [experiment]  name, model (rmt | spin | goe_sparse), master_seed,
                  n_samples, output_dir, average (mean_of_logs | log_of_means)
    [rmt]         N, J, dos (uniform | gaussian), dos_width, profile
                  (double_gaussian | sech), sigma_omega, omega0
    [spin]        L, chain (ising | xxz), perturbation (alpha | beta | gamma),
                  K, g_x, h_z, delta, n_states, window_states, allow_large_L
    [regime]      sizes, samples_per_size, nnz_per_row, log_w_min, log_w_max,
                  log_w_bins, sparse_range, dense_range
    [window]      E0, eps_E
    [time]        t_start, t_stop, t_points, spacing (linear)
    [analysis]    stop_threshold_rel, rate_window, rate_half_width,
                  early_time_max, flow_d_omega
    [toggles]     exact, tdpt, sja, closed_form, flow_solver_check,
                  regime_scaling

Values: integers and floats in Python syntax, booleans ``true``/``false``,
pairs and lists comma separated.  Missing keys take their defaults; unknown
sections or keys are errors.  The quench strength is ``[rmt] J`` for random
matrices and ``J_over_K * K`` for spin chains.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Tuple

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PRESETS",
    "preset",
    "splitmix64",
    "sample_seed",
]

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class ConfigError(ValueError):
    """Invalid or unparsable experiment configuration."""


def splitmix64(x: int) -> int:
    """The SplitMix64 output mix of a 64-bit integer."""
    z = x & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def sample_seed(master_seed: int, index: int) -> int:
    """Seed of sample ``index``: output ``index`` of a SplitMix64 stream
    started at ``master_seed``.  This mapping is part of the reproducibility
    contract and must not change."""
    if index < 0:
        raise ValueError("sample index must be non-negative")
    return splitmix64((master_seed + (index + 1) * _GAMMA) & _MASK)


def _opt(section: str, default, **kw):
    return field(default=default, metadata={"section": section, **kw})


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = _opt("experiment", "experiment")
    model: str = _opt("experiment", "rmt")
    master_seed: int = _opt("experiment", 0)
    n_samples: int = _opt("experiment", 200)
    output_dir: str = _opt("experiment", "results")
    average: str = _opt("experiment", "mean_of_logs")

    N: int = _opt("rmt", 512)
    J: float = _opt("rmt", 0.02)
    dos: str = _opt("rmt", "uniform")
    dos_width: float = _opt("rmt", 1.0)
    profile: str = _opt("rmt", "double_gaussian")
    sigma_omega: float = _opt("rmt", 0.06)
    omega0: float = _opt("rmt", 0.14)

    L: int = _opt("spin", 12)
    chain: str = _opt("spin", "ising")
    perturbation: str = _opt("spin", "beta")
    K: float = _opt("spin", 1.0)
    J_over_K: float = _opt("spin", 0.2)
    g_x: float = _opt("spin", 0.9045)
    h_z: float = _opt("spin", 0.8090)
    delta: float = _opt("spin", 0.5)
    n_states: int = _opt("spin", 100)
    window_states: int = _opt("spin", 200)
    allow_large_L: bool = _opt("spin", False)

    sizes: Tuple[int, ...] = _opt("regime", (256, 512, 1024))
    samples_per_size: Tuple[int, ...] = _opt("regime", (8, 4, 2))
    nnz_per_row: int = _opt("regime", 20)
    log_w_min: float = _opt("regime", -6.0)
    log_w_max: float = _opt("regime", 1.0)
    log_w_bins: int = _opt("regime", 56)
    sparse_range: Tuple[float, float] = _opt("regime", (0.0, 0.3))
    dense_range: Tuple[float, float] = _opt("regime", (-6.0, -5.0))

    E0: float = _opt("window", 0.0)
    eps_E: float = _opt("window", 0.05)

    t_start: float = _opt("time", 0.0)
    t_stop: float = _opt("time", 150.0)
    t_points: int = _opt("time", 601)
    spacing: str = _opt("time", "linear")

    stop_threshold_rel: float = _opt("analysis", 1e-13)
    rate_window: Tuple[float, float] = _opt("analysis", (0.0, 0.0))
    rate_half_width: float = _opt("analysis", 0.015)
    early_time_max: float = _opt("analysis", 0.05)
    flow_d_omega: float = _opt("analysis", 0.0025)

    exact: bool = _opt("toggles", True)
    tdpt: bool = _opt("toggles", True)
    sja: bool = _opt("toggles", True)
    closed_form: bool = _opt("toggles", True)
    flow_solver_check: bool = _opt("toggles", False)
    regime_scaling: bool = _opt("toggles", False)

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    # validation

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.model in ("rmt", "spin", "goe_sparse"), f"unknown model {self.model!r}")
        need(self.average in ("mean_of_logs", "log_of_means"), f"unknown average {self.average!r}")
        need(self.n_samples >= 1, "n_samples must be at least 1")
        need(0 <= self.master_seed <= _MASK, "master_seed must fit in 64 bits")
        need(self.spacing == "linear", "only linear time grids are supported")
        need(self.t_start == 0.0, "the time grid must start at 0")
        need(self.t_points >= 2 and self.t_stop > self.t_start,
             "the time grid must be strictly increasing")
        need(self.eps_E > 0, "eps_E must be positive")
        need(self.stop_threshold_rel > 0, "stop_threshold_rel must be positive")
        need(self.rate_half_width > 0, "rate_half_width must be positive")
        need(self.early_time_max > 0, "early_time_max must be positive")
        lo, hi = self.rate_window
        need(hi >= lo >= 0, "rate_window must be (lo, hi) with 0 <= lo <= hi")
        if self.model == "rmt":
            need(self.N >= 2, "N must be at least 2")
            need(self.J > 0, "J must be positive")
            need(self.dos in ("uniform", "gaussian"), f"unknown dos {self.dos!r}")
            need(self.profile in ("double_gaussian", "sech"), f"unknown profile {self.profile!r}")
            need(self.sigma_omega > 0 and self.dos_width > 0, "widths must be positive")
        if self.model == "spin":
            need(self.chain in ("ising", "xxz"), f"unknown chain {self.chain!r}")
            need(self.perturbation in ("alpha", "beta", "gamma"),
                 f"unknown perturbation {self.perturbation!r}")
            need(4 <= self.L <= 16, "L must lie in [4, 16]")
            need(self.L <= 12 or (self.L <= 14 and self.allow_large_L),
                 "L > 12 needs allow_large_L = true, and L is capped at 14")
            need(self.K > 0 and self.J_over_K > 0, "K and J_over_K must be positive")
            need(self.n_samples == 1, "spin chains are deterministic: n_samples must be 1")
            need(1 <= self.n_states <= self.window_states, "need 1 <= n_states <= window_states")
        if self.model == "goe_sparse":
            need(len(self.sizes) >= 2, "regime scaling needs at least two sizes")
            need(len(self.sizes) == len(self.samples_per_size),
                 "sizes and samples_per_size must have equal length")
            need(all(s >= 4 for s in self.sizes) and all(c >= 1 for c in self.samples_per_size),
                 "sizes must be >= 4 and sample counts >= 1")
            need(self.log_w_max > self.log_w_min and self.log_w_bins >= 2, "invalid log-w binning")
            need(self.nnz_per_row >= 1, "nnz_per_row must be positive")

    # ------------------------------------------------------------------
    # derived quantities

    @property
    def coupling(self) -> float:
        """The perturbation strength J of the quench."""
        return self.J_over_K * self.K if self.model == "spin" else self.J

    def time_grid(self):
        import numpy as np

        return np.linspace(self.t_start, self.t_stop, self.t_points)

    def seeds(self) -> List[int]:
        return [sample_seed(self.master_seed, i) for i in range(self.n_samples)]

    # ------------------------------------------------------------------
    # text round trip

    def to_ini(self) -> str:
        sections: Dict[str, List[str]] = {}
        for f in fields(self):
            sections.setdefault(f.metadata["section"], []).append(
                f"{f.name} = {_format_value(getattr(self, f.name))}")
        out = io.StringIO()
        for name, lines in sections.items():
            out.write(f"[{name}]\n")
            out.write("\n".join(lines))
            out.write("\n\n")
        return out.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        by_section: Dict[str, Dict[str, dataclasses.Field]] = {}
        for f in fields(cls):
            by_section.setdefault(f.metadata["section"], {})[f.name] = f
        values = {}
        for section in parser.sections():
            if section not in by_section:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                f = by_section[section].get(key)
                if f is None:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = _parse_value(f, raw)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text)

    def with_overrides(self, overrides: Dict[str, str]) -> "ExperimentConfig":
        by_name = {f.name: f for f in fields(self)}
        values = {}
        for key, raw in overrides.items():
            if key not in by_name:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(by_name[key], raw)
        return replace(self, **values)

    def digest(self) -> str:
        """SHA-256 of the canonical text, independent of ``output_dir``."""
        canon = replace(self, output_dir="").to_ini()
        return hashlib.sha256(canon.encode()).hexdigest()


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _scalar(kind, raw: str, name: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


_KINDS = {
    "int": int, "float": float, "bool": bool, "str": str,
    "Tuple[int, ...]": (int, None), "Tuple[float, float]": (float, 2),
}


def _parse_value(f: dataclasses.Field, raw: str):
    kind = _KINDS[f.type if isinstance(f.type, str) else f.type.__name__]
    if isinstance(kind, tuple):
        elem, length = kind
        parts = [p for p in raw.split(",") if p.strip()]
        if length is not None and len(parts) != length:
            raise ConfigError(f"{f.name} needs {length} comma-separated values")
        return tuple(_scalar(elem, p, f.name) for p in parts)
    return _scalar(kind, raw, f.name)


# ----------------------------------------------------------------------
# presets

_FIG4 = dict(model="rmt", N=512, n_samples=200, sigma_omega=0.06, omega0=0.14,
             stop_threshold_rel=1e-4, E0=0.0, eps_E=0.05)

_FIG5 = dict(model="spin", J_over_K=0.2, g_x=0.9045, h_z=0.8090, delta=0.5, L=12,
             n_samples=1, n_states=100, window_states=200, t_stop=40.0, t_points=401,
             closed_form=False)

PRESETS: Dict[str, ExperimentConfig] = {
    "fig4a": ExperimentConfig(name="fig4a", J=0.02, t_stop=150.0, t_points=601,
                              flow_solver_check=True, **_FIG4),
    "fig4b": ExperimentConfig(name="fig4b", J=0.08, t_stop=200.0, t_points=401,
                              rate_window=(40.0, 80.0), **_FIG4),
    **{
        f"fig5{tag}": ExperimentConfig(name=f"fig5{tag}", chain=chain, perturbation=pert, **_FIG5)
        for tag, chain, pert in (("a", "ising", "alpha"), ("b", "ising", "beta"),
                                 ("c", "xxz", "alpha"), ("d", "xxz", "beta"))
    },
    "fig6": ExperimentConfig(name="fig6", model="spin", chain="ising", perturbation="gamma",
                             J_over_K=0.1, g_x=0.3, h_z=0.8090, L=12, n_samples=1,
                             n_states=100, window_states=200, t_stop=80.0, t_points=401,
                             closed_form=False),
    "fig2": ExperimentConfig(name="fig2", model="goe_sparse", n_samples=1, regime_scaling=True,
                             exact=False, tdpt=False, sja=False, closed_form=False),
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None
