"""Parameter-scan harness with reproducible seeding, plus the independent
steady-state oracle.

Initial momenta are drawn from a zero-mean normal distribution whose width
follows the kinetic-energy-preserving rule: scaling the recoil frequency
by ``c`` scales the width by ``1/sqrt(c)``, so ensembles at different
recoil frequencies start with the same average kinetic energy.  Every
sample of every grid cell draws from its own deterministic substream, so
results are independent of execution order and worker count.

Cell statistics follow the stable-trajectory protocol: only runs in which
every atom stays within its initial well enter the averages, and the
relative kinetic energy is clamped at 1.0 in aggregated output (heating
cells are of no further interest).
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from .couplings import NearFieldError
from .dynamics import (
    IntegrationError,
    PositivityError,
    Recorder,
    SystemParams,
    build_superoperator,
    evolve,
    initial_state,
)
from .hilbert import QuantumState
from .observables import (
    cycle_averaged_energy,
    g2_zero,
    inversion,
    photon_number,
)

SCAN_AXES = ("delta", "pump_rate", "g0", "omega_r")


class DegenerateSteadyStateError(RuntimeError):
    """The generator has more than one stationary state at these parameters."""


@dataclass(frozen=True)
class MomentumSampler:
    """Normal momentum draws with the recoil-scaled width.

    ``sigma(omega_r) = p_bar0_ref * sqrt(omega_r_ref / omega_r)`` keeps the
    ensemble's mean kinetic energy independent of the recoil frequency.
    """

    p_bar0_ref: float = 2.0
    omega_r_ref: float = 0.1
    seed: int = 0

    def sigma(self, omega_r: float) -> float:
        if omega_r <= 0:
            raise ValueError("omega_r must be > 0")
        return self.p_bar0_ref * math.sqrt(self.omega_r_ref / omega_r)


def sample_momenta(
    sampler: MomentumSampler,
    params: SystemParams,
    n_atoms: int,
    substream: "tuple[int, ...]" = (),
) -> np.ndarray:
    """Deterministic draw for one run; ``substream`` isolates scan samples."""
    seq = np.random.SeedSequence(entropy=sampler.seed, spawn_key=substream)
    rng = np.random.default_rng(seq)
    return rng.normal(0.0, sampler.sigma(params.omega_r), size=n_atoms)


@dataclass(frozen=True)
class ScanGrid:
    """Two scan axes over a fixed baseline parameter set."""

    axis1_name: str
    axis1_values: "tuple[float, ...]"
    axis2_name: str
    axis2_values: "tuple[float, ...]"
    fixed: SystemParams
    samples_per_point: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        for name in (self.axis1_name, self.axis2_name):
            if name not in SCAN_AXES:
                raise ValueError(f"unknown scan axis {name!r}; choose from {SCAN_AXES}")
        if self.samples_per_point < 1:
            raise ValueError("samples_per_point must be >= 1")
        object.__setattr__(self, "axis1_values", tuple(float(v) for v in self.axis1_values))
        object.__setattr__(self, "axis2_values", tuple(float(v) for v in self.axis2_values))


@dataclass
class ScanCell:
    """Stable-ensemble averages for one grid point.

    ``e_kin_rel_final`` is clamped at 1.0; cells without a single stable
    trajectory carry NaN aggregates and ``n_stable = 0`` and serialize as
    explicit nulls.
    """

    e_kin_rel_final: float
    stable_fraction: float
    n_mean: float
    g2_mean: float
    p_e_mean: float
    gamma_mean: float
    delta0_mean: float
    n_stable: int
    n_failed: int = 0

    @property
    def empty(self) -> bool:
        return self.n_stable == 0


def apply_axis(params: SystemParams, name: str, value: float) -> SystemParams:
    """Baseline parameters with one named scan axis replaced."""
    if name == "g0":
        return replace(params, coupling=replace(params.coupling, g0=value))
    if name in ("delta", "pump_rate", "omega_r"):
        return replace(params, **{name: value})
    raise ValueError(f"unknown scan axis {name!r}; choose from {SCAN_AXES}")


#: Scan runs are integrated in windows of this length so that a trajectory
#: that has already left its well can be abandoned: the verdict is monotone
#: (an atom outside the quarter-wavelength bound never becomes stable again)
#: and only completely stable runs enter any cell statistic.
STABILITY_CHUNK = 50.0
SAMPLES_PER_CHUNK = 200


def _stability_limited_run(params: SystemParams, momenta: np.ndarray, t_final: float):
    """Evolve until ``t_final`` or until the trajectory turns unstable.

    Returns ``(stable, times, e_kin, final_trajectory_or_None)``; the series
    cover only the integrated window when the run is abandoned early.
    """
    lam4 = params.coupling.lambda_c / 4.0
    state = initial_state(params, momenta)
    r0 = state.motion.positions.copy()
    n_chunks = max(1, int(math.ceil(t_final / STABILITY_CHUNK)))
    edges = np.linspace(0.0, t_final, n_chunks + 1)
    times_parts = []
    e_kin_parts = []
    traj = None
    for k in range(n_chunks):
        traj = evolve(state, params, edges[k + 1], Recorder(n_samples=SAMPLES_PER_CHUNK))
        sl = slice(1, None) if k else slice(None)
        times_parts.append(traj.times[sl])
        e_kin_parts.append(traj.series["e_kin"][sl])
        if np.abs(traj.positions - r0).max() >= lam4:
            return False, np.concatenate(times_parts), np.concatenate(e_kin_parts), None
        state = traj.final_state
    return True, np.concatenate(times_parts), np.concatenate(e_kin_parts), traj


def _sample_record(
    params: SystemParams,
    sampler: MomentumSampler,
    substream: "tuple[int, ...]",
    t_final: float,
    with_spectrum: bool,
) -> dict:
    """Evolve one sampled run and reduce it to the per-sample statistics."""
    momenta = sample_momenta(sampler, params, params.n_atoms, substream)
    try:
        stable, times, e_kin, traj = _stability_limited_run(params, momenta, t_final)
    except (IntegrationError, PositivityError, NearFieldError) as err:
        # heated atoms can race through the lattice and collide, tripping
        # the near-field guard; such runs are counted, never silently kept
        return {"failed": True, "error": str(err)}
    if not stable:
        return {"failed": False, "stable": False}
    smoothed = cycle_averaged_energy(times, e_kin)
    if smoothed.values[0] > 0 and not smoothed.degenerate:
        e_rel = float(smoothed.values[-1] / smoothed.values[0])
        degenerate = False
    else:
        # flagged fallback: nothing oscillates (or nothing moves), so a
        # relative energy is not defined and the sample is excluded from
        # the cell mean
        e_rel = math.nan
        degenerate = True
    final = traj.final_state.quantum
    n_mean = photon_number(final)
    try:
        g2 = g2_zero(final)
    except ValueError:
        g2 = math.nan
    rec = {
        "failed": False,
        "stable": True,
        "e_rel": e_rel,
        "degenerate_energy": degenerate,
        "n": n_mean,
        "g2": g2,
        "p_e": inversion(final),
        "gamma_fit": math.nan,
        "delta0_fit": math.nan,
    }
    if with_spectrum:
        from .spectrum import spectrum_of

        _, spec = spectrum_of(params, traj.final_state)
        rec["gamma_fit"] = spec.fit_gamma
        rec["delta0_fit"] = spec.fit_delta0
    return rec


def _aggregate(records: "list[dict]", samples_per_point: int) -> ScanCell:
    n_failed = sum(1 for r in records if r.get("failed"))
    stable = [r for r in records if not r.get("failed") and r["stable"]]
    n_stable = len(stable)
    if n_stable == 0:
        nan = math.nan
        return ScanCell(nan, 0.0, nan, nan, nan, nan, nan, 0, n_failed)

    def nanmean(key: str) -> float:
        vals = np.array([r[key] for r in stable], dtype=float)
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else math.nan

    e_rel = nanmean("e_rel")
    if np.isfinite(e_rel):
        e_rel = min(e_rel, 1.0)
    return ScanCell(
        e_kin_rel_final=e_rel,
        stable_fraction=n_stable / samples_per_point,
        n_mean=nanmean("n"),
        g2_mean=nanmean("g2"),
        p_e_mean=nanmean("p_e"),
        gamma_mean=nanmean("gamma_fit"),
        delta0_mean=nanmean("delta0_fit"),
        n_stable=n_stable,
        n_failed=n_failed,
    )


def run_cell(
    params: SystemParams,
    sampler: MomentumSampler,
    samples: int,
    t_final: float = 500.0,
    with_spectrum: bool = False,
    substream_prefix: "tuple[int, ...]" = (),
) -> ScanCell:
    """Evolve ``samples`` seeded runs at fixed parameters and aggregate them."""
    records = [
        _sample_record(params, sampler, substream_prefix + (k,), t_final, with_spectrum)
        for k in range(samples)
    ]
    return _aggregate(records, samples)


def _scan_task(payload) -> "tuple[tuple[int, int, int], dict]":
    (i, j, k), params, sampler, t_final, with_spectrum = payload
    return (i, j, k), _sample_record(params, sampler, (i, j, k), t_final, with_spectrum)


@dataclass
class ScanTable:
    grid: ScanGrid
    cells: "list[list[ScanCell]]"
    t_final: float

    def cell(self, i: int, j: int) -> ScanCell:
        return self.cells[i][j]


def run_scan(
    grid: ScanGrid,
    t_final: float = 500.0,
    threads: int = 1,
    with_spectrum: bool = False,
) -> ScanTable:
    """Full 2D scan; deterministic for a fixed seed regardless of ``threads``."""
    sampler = MomentumSampler(seed=grid.seed)
    tasks = []
    for i, v1 in enumerate(grid.axis1_values):
        for j, v2 in enumerate(grid.axis2_values):
            params = apply_axis(apply_axis(grid.fixed, grid.axis1_name, v1), grid.axis2_name, v2)
            for k in range(grid.samples_per_point):
                tasks.append(((i, j, k), params, sampler, t_final, with_spectrum))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(_scan_task, tasks, chunksize=4))
    else:
        results = dict(map(_scan_task, tasks))
    cells: "list[list[ScanCell]]" = []
    for i in range(len(grid.axis1_values)):
        row = []
        for j in range(len(grid.axis2_values)):
            records = [results[(i, j, k)] for k in range(grid.samples_per_point)]
            row.append(_aggregate(records, grid.samples_per_point))
        cells.append(row)
    return ScanTable(grid=grid, cells=cells, t_final=t_final)


# ---------------------------------------------------------------------------
# Long-time collective-vs-independent comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonResult:
    """Stable-ensemble averaged relative-energy curves for the two modes."""

    times: np.ndarray
    collective: np.ndarray
    independent: np.ndarray
    n_stable_collective: int
    n_stable_independent: int
    samples: int


def _comparison_task(payload):
    (mode, k), params, momenta, t_final, n_curve = payload
    times = np.linspace(0.0, t_final, n_curve)
    try:
        stable, times_run, e_kin, _ = _stability_limited_run(params, momenta, t_final)
    except (IntegrationError, PositivityError, NearFieldError):
        stable = False
    if not stable:
        return (mode, k), {"stable": False, "curve": np.full(n_curve, math.nan)}
    smoothed = cycle_averaged_energy(times_run, e_kin)
    if smoothed.values[0] > 0 and not smoothed.degenerate:
        rel = smoothed.values / smoothed.values[0]
        curve = np.interp(times, smoothed.times, rel)
    else:
        curve = np.full(n_curve, math.nan)
    return (mode, k), {"stable": True, "curve": curve}


def long_time_comparison(
    params: SystemParams,
    sampler: "MomentumSampler | None" = None,
    t_final: float = 20000.0,
    samples: int = 20,
    threads: int = 1,
    n_curve: int = 400,
) -> ComparisonResult:
    """Collective vs independent cooling from identical initial conditions.

    Each mode averages its cycle-averaged relative kinetic energy over its
    own completely stable subset, interpolated onto a common uniform grid.
    """
    sampler = sampler or MomentumSampler()
    momenta = [sample_momenta(sampler, params, params.n_atoms, (k,)) for k in range(samples)]
    tasks = []
    for mode, independent in (("collective", False), ("independent", True)):
        mode_params = replace(params, independent_atoms=independent)
        for k in range(samples):
            tasks.append(((mode, k), mode_params, momenta[k], t_final, n_curve))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(_comparison_task, tasks, chunksize=1))
    else:
        results = dict(map(_comparison_task, tasks))
    times = np.linspace(0.0, t_final, n_curve)
    curves = {}
    counts = {}
    for mode in ("collective", "independent"):
        stack = [
            results[(mode, k)]["curve"]
            for k in range(samples)
            if results[(mode, k)]["stable"] and np.isfinite(results[(mode, k)]["curve"]).all()
        ]
        counts[mode] = len(stack)
        curves[mode] = np.mean(stack, axis=0) if stack else np.full(n_curve, math.nan)
    return ComparisonResult(
        times=times,
        collective=curves["collective"],
        independent=curves["independent"],
        n_stable_collective=counts["collective"],
        n_stable_independent=counts["independent"],
        samples=samples,
    )


# ---------------------------------------------------------------------------
# Steady-state oracle
# ---------------------------------------------------------------------------

def steady_state_oracle(params: SystemParams, fixed_positions: np.ndarray) -> QuantumState:
    """Stationary state from the null space of the frozen-position generator.

    Completely independent of the time integrator: the same sparse
    superoperator is collapsed at the given positions and its kernel is
    computed by singular value decomposition.  A null space of dimension
    other than one raises :class:`DegenerateSteadyStateError`.
    """
    positions = np.asarray(fixed_positions, dtype=float)
    lmat = build_superoperator(params, positions).toarray()
    null = scipy.linalg.null_space(lmat)
    if null.shape[1] != 1:
        raise DegenerateSteadyStateError(
            f"null space has dimension {null.shape[1]}; the stationary state is not unique"
        )
    dim = params.layout.total_dim
    rho = null[:, 0].reshape(dim, dim)
    trace = np.trace(rho)
    if abs(trace) < 1e-12:
        raise DegenerateSteadyStateError("null vector is traceless; cannot normalize")
    rho = rho / trace
    rho = 0.5 * (rho + rho.conj().T)
    rho = rho / np.trace(rho).real
    return QuantumState(params.layout, rho)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def export_scan(
    table: ScanTable, csv_path: "str | Path", meta_path: "str | Path | None" = None
) -> None:
    """One row per cell; empty cells write empty fields (explicit nulls)."""
    csv_path = Path(csv_path)
    grid = table.grid
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [grid.axis1_name, grid.axis2_name, "e_kin_rel", "stable_fraction", "n",
             "g2", "p_e", "gamma", "delta0", "n_stable"]
        )
        for i, v1 in enumerate(grid.axis1_values):
            for j, v2 in enumerate(grid.axis2_values):
                c = table.cells[i][j]
                writer.writerow(
                    [format(v1, ".17g"), format(v2, ".17g")]
                    + [_csv_num(x) for x in (
                        c.e_kin_rel_final, c.stable_fraction, c.n_mean, c.g2_mean,
                        c.p_e_mean, c.gamma_mean, c.delta0_mean,
                    )]
                    + [str(c.n_stable)]
                )
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
    from . import __version__

    meta = {
        "axis1": {"name": grid.axis1_name, "values": list(grid.axis1_values)},
        "axis2": {"name": grid.axis2_name, "values": list(grid.axis2_values)},
        "samples_per_point": grid.samples_per_point,
        "seed": grid.seed,
        "t_final": table.t_final,
        "code_version": __version__,
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def export_comparison(
    result: ComparisonResult, csv_path: "str | Path", meta_path: "str | Path | None" = None
) -> None:
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_gamma", "e_rel_collective", "e_rel_independent"])
        for k in range(result.times.size):
            writer.writerow(
                [format(result.times[k], ".17g"),
                 _csv_num(result.collective[k]), _csv_num(result.independent[k])]
            )
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
    meta = {
        "samples": result.samples,
        "n_stable_collective": result.n_stable_collective,
        "n_stable_independent": result.n_stable_independent,
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _csv_num(x: float) -> str:
    return "" if (x is None or not np.isfinite(x)) else format(float(x), ".17g")
