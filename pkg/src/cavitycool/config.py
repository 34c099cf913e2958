"""Run configuration: YAML parsing, validation, and normalized round trips.

All user-facing quantities are dimensionless ratios: rates in units of the
atomic linewidth (``gamma``, normally left at 1), momenta in units of
``hbar * k_a`` and lengths in units of the cavity wavelength.  Unknown keys
are rejected so that typos fail loudly rather than silently falling back to
defaults.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .couplings import CouplingParams
from .dynamics import SystemParams
from .sweep import ScanGrid, MomentumSampler

MODES = ("trajectory", "spectrum", "scan", "comparison", "stability", "steady")

#: Reference operating point used when a config omits the system section:
#: three atoms, blue-detuned lossy cavity, strong incoherent pumping.
DEFAULT_SYSTEM = {
    "n_atoms": 3,
    "gamma": 1.0,
    "g0": 5.0,
    "kappa": 10.0,
    "delta": 10.0,
    "pump_rate": 8.0,
    "omega_r": 0.1,
    "theta": math.pi / 2,
    "k_a": 1.0,
    "k_c": None,
    "fock_cutoff": 5,
    "independent_atoms": False,
    "collective_force_decay_term": False,
}

DEFAULT_RUN = {
    "mode": "trajectory",
    "t_final": 500.0,
    "n_samples": 2000,
    "seed": 0,
    "threads": max(1, os.cpu_count() or 1),
    "output_dir": "runs/out",
}

DEFAULT_SAMPLER = {"p_bar0_ref": 2.0, "omega_r_ref": 0.1}

DEFAULT_SPECTRUM = {"tau_max": 50.0, "n_tau": 4096, "fixed_positions": False,
                    "checkpoint": None}

DEFAULT_COMPARISON = {"samples": 20, "t_final": 20000.0}

DEFAULT_GRID = {
    "axis1": {"name": "delta", "values": [-10.0, -5.0, 0.0, 5.0, 10.0, 20.0]},
    "axis2": {"name": "pump_rate", "values": [1.0, 4.0, 8.0, 12.0, 16.0, 20.0]},
    "samples_per_point": 20,
}

# the stability preset spans far into the blue-detuned side by default
DEFAULT_STABILITY_GRID = {
    "axis1": {"name": "delta", "values": [-10.0, -5.0, 0.0, 5.0, 10.0, 20.0, 35.0, 50.0]},
    "axis2": {"name": "pump_rate", "values": [1.0, 4.0, 8.0, 12.0, 16.0, 20.0]},
    "samples_per_point": 20,
}


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class RunConfig:
    """Fully validated description of one CLI run."""

    params: SystemParams
    mode: str
    seed: int
    threads: int
    t_final: float
    n_samples: int
    output_dir: str
    sampler: MomentumSampler
    momenta: "tuple[float, ...] | None"
    positions_lambda: "tuple[float, ...] | None"
    grid: "ScanGrid | None"
    tau_max: float
    n_tau: int
    spectrum_fixed: bool
    spectrum_checkpoint: "str | None"
    comparison_samples: int
    comparison_t_final: float


def _section(raw: dict, key: str, defaults: dict) -> dict:
    data = dict(defaults)
    given = raw.pop(key, {}) or {}
    if not isinstance(given, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in section {key!r}: {sorted(unknown)}")
    data.update(given)
    return data


def parse_config_data(raw: "dict | None") -> RunConfig:
    raw = dict(raw or {})
    system = _section(raw, "system", DEFAULT_SYSTEM)
    run = _section(raw, "run", DEFAULT_RUN)
    sampler_kw = _section(raw, "sampler", DEFAULT_SAMPLER)
    spectrum = _section(raw, "spectrum", DEFAULT_SPECTRUM)
    comparison = _section(raw, "comparison", DEFAULT_COMPARISON)
    grid_raw = raw.pop("grid", None)
    momenta = raw.pop("momenta", None)
    positions = raw.pop("positions", None)
    if raw:
        raise ConfigError(f"unknown top-level keys: {sorted(raw)}")

    mode = run["mode"]
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")

    try:
        coupling = CouplingParams(
            gamma=float(system["gamma"]),
            g0=float(system["g0"]),
            k_a=float(system["k_a"]),
            k_c=None if system["k_c"] is None else float(system["k_c"]),
            theta=float(system["theta"]),
        )
        params = SystemParams(
            coupling=coupling,
            delta=float(system["delta"]),
            pump_rate=float(system["pump_rate"]),
            kappa=float(system["kappa"]),
            omega_r=float(system["omega_r"]),
            n_atoms=int(system["n_atoms"]),
            fock_cutoff=int(system["fock_cutoff"]),
            independent_atoms=bool(system["independent_atoms"]),
            collective_force_decay_term=bool(system["collective_force_decay_term"]),
        )
    except ValueError as err:
        raise ConfigError(f"invalid system parameters: {err}") from None

    seed = int(run["seed"])
    sampler = MomentumSampler(
        p_bar0_ref=float(sampler_kw["p_bar0_ref"]),
        omega_r_ref=float(sampler_kw["omega_r_ref"]),
        seed=seed,
    )

    grid = None
    if mode == "scan":
        grid_raw = grid_raw or DEFAULT_GRID
    elif mode == "stability":
        grid_raw = grid_raw or DEFAULT_STABILITY_GRID
    if grid_raw is not None:
        grid_data = dict(grid_raw)
        unknown = set(grid_data) - {"axis1", "axis2", "samples_per_point"}
        if unknown:
            raise ConfigError(f"unknown keys in section 'grid': {sorted(unknown)}")
        try:
            axis1 = grid_data.get("axis1", DEFAULT_GRID["axis1"])
            axis2 = grid_data.get("axis2", DEFAULT_GRID["axis2"])
            grid = ScanGrid(
                axis1_name=str(axis1["name"]),
                axis1_values=tuple(float(v) for v in axis1["values"]),
                axis2_name=str(axis2["name"]),
                axis2_values=tuple(float(v) for v in axis2["values"]),
                fixed=params,
                samples_per_point=int(grid_data.get("samples_per_point", 20)),
                seed=seed,
            )
        except (KeyError, TypeError) as err:
            raise ConfigError(f"invalid grid section: {err}") from None
        except ValueError as err:
            raise ConfigError(str(err)) from None

    if momenta is not None:
        momenta = tuple(float(v) for v in momenta)
        if len(momenta) != params.n_atoms:
            raise ConfigError(f"need {params.n_atoms} momenta, got {len(momenta)}")
    if positions is not None:
        positions = tuple(float(v) for v in positions)
        if len(positions) != params.n_atoms:
            raise ConfigError(f"need {params.n_atoms} positions, got {len(positions)}")

    return RunConfig(
        params=params,
        mode=mode,
        seed=seed,
        threads=int(run["threads"]),
        t_final=float(run["t_final"]),
        n_samples=int(run["n_samples"]),
        output_dir=str(run["output_dir"]),
        sampler=sampler,
        momenta=momenta,
        positions_lambda=positions,
        grid=grid,
        tau_max=float(spectrum["tau_max"]),
        n_tau=int(spectrum["n_tau"]),
        spectrum_fixed=bool(spectrum["fixed_positions"]),
        spectrum_checkpoint=(
            None if spectrum["checkpoint"] is None else str(spectrum["checkpoint"])
        ),
        comparison_samples=int(comparison["samples"]),
        comparison_t_final=float(comparison["t_final"]),
    )


def parse_config(path: "str | Path | None" = None, text: "str | None" = None) -> RunConfig:
    """Parse a YAML config file (or literal text) into a validated RunConfig."""
    if text is None:
        text = Path(path).read_text() if path else ""
    try:
        raw = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as err:
        raise ConfigError(f"config is not valid YAML: {err}") from None
    return parse_config_data(raw)


def config_to_dict(config: RunConfig) -> dict:
    cp = config.params.coupling
    data = {
        "system": {
            "n_atoms": config.params.n_atoms,
            "gamma": cp.gamma,
            "g0": cp.g0,
            "kappa": config.params.kappa,
            "delta": config.params.delta,
            "pump_rate": config.params.pump_rate,
            "omega_r": config.params.omega_r,
            "theta": cp.theta,
            "k_a": cp.k_a,
            "k_c": cp.k_c,
            "fock_cutoff": config.params.fock_cutoff,
            "independent_atoms": config.params.independent_atoms,
            "collective_force_decay_term": config.params.collective_force_decay_term,
        },
        "run": {
            "mode": config.mode,
            "t_final": config.t_final,
            "n_samples": config.n_samples,
            "seed": config.seed,
            "threads": config.threads,
            "output_dir": config.output_dir,
        },
        "sampler": {
            "p_bar0_ref": config.sampler.p_bar0_ref,
            "omega_r_ref": config.sampler.omega_r_ref,
        },
        "spectrum": {
            "tau_max": config.tau_max,
            "n_tau": config.n_tau,
            "fixed_positions": config.spectrum_fixed,
            "checkpoint": config.spectrum_checkpoint,
        },
        "comparison": {
            "samples": config.comparison_samples,
            "t_final": config.comparison_t_final,
        },
    }
    if config.grid is not None:
        data["grid"] = {
            "axis1": {"name": config.grid.axis1_name, "values": list(config.grid.axis1_values)},
            "axis2": {"name": config.grid.axis2_name, "values": list(config.grid.axis2_values)},
            "samples_per_point": config.grid.samples_per_point,
        }
    if config.momenta is not None:
        data["momenta"] = list(config.momenta)
    if config.positions_lambda is not None:
        data["positions"] = list(config.positions_lambda)
    return data


def serialize_config(config: RunConfig) -> str:
    """Normalized YAML text; ``parse_config(text=...)`` restores it exactly."""
    return yaml.safe_dump(config_to_dict(config), sort_keys=True)
