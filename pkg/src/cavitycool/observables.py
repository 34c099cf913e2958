"""Derived quantities over trajectories and states: kinetic energy and its
cycle-averaged relative form, trap-stability classification, photon number,
zero-delay second-order correlation and atomic inversion.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .hilbert import (
    HilbertLayout,
    QuantumState,
    atom_lowering,
    field_annihilation,
)

if TYPE_CHECKING:  # imported for annotations only; dynamics imports this module
    from .dynamics import CoupledState, MotionState, SystemParams

#: Relative plateau tolerance for extremum detection on sampled series.
EXTREMUM_PLATEAU_RTOL = 1e-9


@dataclass
class StabilityVerdict:
    """Per-atom trap residency over a full trajectory."""

    per_atom: "list[bool]"

    @property
    def overall(self) -> bool:
        return all(self.per_atom)


@dataclass
class Trajectory:
    """Time series of one coupled evolution on a uniform recording grid.

    ``positions``/``momenta`` have shape (samples, atoms); named series in
    ``series`` share the grid length.  ``pair_index`` orders the cross
    coherence columns.  ``final_state`` is the snapshot at the last sample,
    usable as the starting point of continuation runs.
    """

    times: np.ndarray
    positions: np.ndarray
    momenta: np.ndarray
    series: "dict[str, np.ndarray]"
    pair_index: "list[tuple[int, int]]"
    params: "SystemParams"
    initial_momenta: np.ndarray
    final_state: "CoupledState"
    meta: dict = field(default_factory=dict)
    stability: "StabilityVerdict | None" = None

    def motion_at(self, k: int) -> "MotionState":
        from .dynamics import MotionState

        return MotionState(self.positions[k].copy(), self.momenta[k].copy())


@dataclass
class SmoothedSeries:
    """Midpoint-averaged series; ``degenerate`` flags the plain-mean fallback."""

    times: np.ndarray
    values: np.ndarray
    degenerate: bool = False


def kinetic_energy(motion: "MotionState", params: "SystemParams") -> float:
    """Total kinetic energy, in units of hbar*gamma for rates in gamma.

    With momenta ``q`` in units of ``hbar k_a`` and mass expressed through
    the recoil frequency, ``sum p^2 / (2m) = omega_r * sum q^2``.
    """
    q = motion.momenta
    return float(params.omega_r * np.sum(q * q))


def _local_extrema(values: np.ndarray) -> np.ndarray:
    """Indices of strict turning points with a relative plateau tolerance.

    A candidate only counts as an extremum once the series has moved against
    the current trend by more than the tolerance, which suppresses spurious
    extrema from floating-point ripple and keeps working when the sampling
    is much finer than the oscillation (where naive three-point comparisons
    see only sub-tolerance differences).  Endpoints are never extrema.
    """
    scale = float(np.abs(values).max()) or 1.0
    tol = EXTREMUM_PLATEAU_RTOL * scale
    ext: "list[int]" = []
    trend = 0
    cand = 0
    for k in range(1, values.size):
        v = values[k]
        if trend == 0:
            if v > values[cand] + tol:
                trend = 1
                cand = k
            elif v < values[cand] - tol:
                trend = -1
                cand = k
        elif trend == 1:
            if v >= values[cand]:
                cand = k
            elif values[cand] - v > tol:
                ext.append(cand)
                trend = -1
                cand = k
        else:
            if v <= values[cand]:
                cand = k
            elif v - values[cand] > tol:
                ext.append(cand)
                trend = 1
                cand = k
    return np.array(ext, dtype=int)


def cycle_averaged_energy(times: np.ndarray, values: np.ndarray) -> SmoothedSeries:
    """Midpoints between adjacent extrema of a rapidly oscillating series.

    Every adjacent extremum pair contributes ``(v1 + v2) / 2`` stamped at
    the midpoint time, which tracks the centre of the oscillation envelope.
    Series with fewer than two detected extrema degrade to the flagged
    plain mean.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.shape != values.shape:
        raise ValueError("times and values must have equal length")
    if values.size < 3:
        raise ValueError("need at least 3 samples")
    ext = _local_extrema(values)
    if ext.size < 2:
        return SmoothedSeries(
            times=np.array([times.mean()]),
            values=np.array([values.mean()]),
            degenerate=True,
        )
    mid_t = 0.5 * (times[ext[:-1]] + times[ext[1:]])
    mid_v = 0.5 * (values[ext[:-1]] + values[ext[1:]])
    return SmoothedSeries(times=mid_t, values=mid_v)


def relative_energy(smoothed: SmoothedSeries) -> SmoothedSeries:
    """Normalize a smoothed energy series to its initial value."""
    if smoothed.values[0] <= 0:
        raise ValueError("cannot normalize: initial smoothed energy is not positive")
    return SmoothedSeries(
        times=smoothed.times.copy(),
        values=smoothed.values / smoothed.values[0],
        degenerate=smoothed.degenerate,
    )


def classify_stability(traj: Trajectory) -> StabilityVerdict:
    """An atom is stable iff it never strays a quarter wavelength from its start.

    The quarter wavelength is the distance from an antinode to the nearest
    node: an atom trapped at high field must cross a node to change wells.
    """
    lam = traj.params.coupling.lambda_c
    excursion = np.abs(traj.positions - traj.positions[0]).max(axis=0)
    return StabilityVerdict(per_atom=[bool(e < lam / 4) for e in excursion])


@lru_cache(maxsize=16)
def _cached_ops(layout: HilbertLayout):
    a = field_annihilation(layout).entries
    ad = a.conj().T
    n_op = ad @ a
    n2_op = ad @ ad @ a @ a
    e_stack = []
    for i in range(layout.n_atoms):
        sm = atom_lowering(layout, i).entries
        e_stack.append(sm.conj().T @ sm)
    return n_op, n2_op, np.stack(e_stack)


def photon_number(state: QuantumState) -> float:
    """Mean intra-cavity photon number ``<a^dag a>``."""
    n_op, _, _ = _cached_ops(state.layout)
    return float(np.einsum("ij,ji->", n_op, state.rho).real)


def g2_zero(state: QuantumState) -> float:
    """Zero-delay second-order field correlation ``<adag adag a a> / <adag a>^2``."""
    n_op, n2_op, _ = _cached_ops(state.layout)
    n = np.einsum("ij,ji->", n_op, state.rho).real
    if n <= 1e-12:
        raise ValueError("g2(0) is undefined for a (numerically) empty cavity")
    n2 = np.einsum("ij,ji->", n2_op, state.rho).real
    return float(n2 / n**2)


def inversion(state: QuantumState) -> float:
    """Total excited-state population ``sum_i <sig_i^+ sig_i^->`` in [0, N]."""
    _, _, e_stack = _cached_ops(state.layout)
    return float(np.einsum("kij,ji->", e_stack, state.rho).real)


# ---------------------------------------------------------------------------
# Trajectory export
# ---------------------------------------------------------------------------

def export_trajectory(traj: Trajectory, csv_path: "str | Path", meta_path: "str | Path | None" = None) -> None:
    """Write the sample table as delimited text plus a metadata sidecar.

    Columns: time (1/gamma), positions (cavity wavelengths), momenta
    (hbar*k_a), kinetic energy (hbar*gamma), photon number, total
    excitation.  The sidecar carries the stability verdict and run
    diagnostics as JSON.
    """
    csv_path = Path(csv_path)
    lam = traj.params.coupling.lambda_c
    n = traj.positions.shape[1]
    header = (
        ["t_gamma"]
        + [f"r{i + 1}_lambda_c" for i in range(n)]
        + [f"p{i + 1}_hbar_ka" for i in range(n)]
        + ["e_kin_hbar_gamma", "photon_number", "excitation_total"]
    )
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(traj.times.size):
            row = (
                [traj.times[k]]
                + list(traj.positions[k] / lam)
                + list(traj.momenta[k])
                + [
                    traj.series["e_kin"][k],
                    traj.series["photon_number"][k],
                    traj.series["excitation_total"][k],
                ]
            )
            writer.writerow([_fmt(v) for v in row])
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
    meta = {
        "stability_per_atom": traj.stability.per_atom if traj.stability else None,
        "stability_overall": traj.stability.overall if traj.stability else None,
        "initial_momenta_hbar_ka": list(traj.initial_momenta),
        "samples": int(traj.times.size),
        "diagnostics": {
            k: traj.meta[k]
            for k in ("trace_drift_max", "hermiticity_max", "max_abs_cross_im", "rtol", "atol")
            if k in traj.meta
        },
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _fmt(value: float) -> str:
    return format(float(value), ".17g")
