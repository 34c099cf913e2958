"""Emitted-light spectrum from a two-track regression calculation.

The first-order field correlation at delay tau is obtained by propagating
the modified operator ``a rho`` under the same master-equation generator as
the physical state, with one crucial twist for moving atoms: the classical
positions entering the generator are replayed from a separately continued
physical evolution, never computed from the modified operator (which is
not a state and exerts no forces).  The spectrum is the one-sided Fourier
transform of the correlation; the sign convention is fixed so that a
component rotating above the atomic frequency appears at positive
frequency (an empty detuned cavity peaks at its own detuning).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import RK45
from scipy.interpolate import CubicSpline
from scipy.optimize import least_squares
from scipy.signal import find_peaks

from .dynamics import (
    DEFAULT_ATOL,
    DEFAULT_RTOL,
    CoupledState,
    IntegrationError,
    MotionState,
    Recorder,
    SystemParams,
    _get_engine,
    antinode_positions,
    evolve,
)
from .hilbert import QuantumState
from .observables import Trajectory, photon_number

DEFAULT_TAU_MAX = 50.0
DEFAULT_N_TAU = 4096
ZERO_PAD_FACTOR = 4


@dataclass
class CorrelationSeries:
    """Sampled field correlation ``<a^dag(t+tau) a(t)>`` on a uniform delay grid."""

    taus: np.ndarray
    g1: np.ndarray
    steady_photon_number: float
    meta: dict = field(default_factory=dict)


@dataclass
class SecondaryPeak:
    """Cavity-side spectral maximum accompanying the main emission line."""

    omega: float
    delta_c: float
    rel_height: float


@dataclass
class LorentzianFit:
    gamma: float
    delta0: float
    amplitude: float
    residual: float
    converged: bool


@dataclass
class SpectrumResult:
    """Spectral density on a frequency grid relative to the atomic resonance."""

    omegas: np.ndarray
    s: np.ndarray
    fit_gamma: float = math.nan
    fit_delta0: float = math.nan
    fit_amplitude: float = math.nan
    fit_residual: float = math.nan
    fit_converged: bool = False
    secondary_peak: "SecondaryPeak | None" = None
    meta: dict = field(default_factory=dict)


def correlation(
    params: SystemParams,
    steady: CoupledState,
    tau_max: float = DEFAULT_TAU_MAX,
    n_tau: int = DEFAULT_N_TAU,
    freeze_motion: bool = False,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> CorrelationSeries:
    """Two-track correlation from a quasi-steady snapshot.

    Track one continues the physical coupled evolution over the delay
    window and records the positions.  Track two propagates ``a rho`` under
    the identical generator with those positions replayed, and samples
    ``trace(a^dag .)`` on the uniform delay grid.
    """
    eng = _get_engine(params)
    forward = evolve(
        steady,
        params,
        steady.time + tau_max,
        Recorder(n_samples=n_tau),
        freeze_motion=freeze_motion,
        rtol=rtol,
        atol=atol,
    )
    taus = forward.times - steady.time
    if freeze_motion:
        frozen = steady.motion.positions.copy()

        def positions_of(t: float) -> np.ndarray:
            return frozen

    else:
        spline = CubicSpline(forward.times, forward.positions, axis=0)

        def positions_of(t: float) -> np.ndarray:
            return spline(t)

    n_steady = photon_number(steady.quantum)
    rho_bar = eng.a @ steady.quantum.rho
    rhs = eng.make_replay_rhs(positions_of)

    ad_idx, ad_val = _adjoint_field_table(eng)
    g1 = np.empty(n_tau, dtype=complex)
    y0 = rho_bar.ravel().astype(complex)
    g1[0] = np.dot(ad_val, y0[ad_idx])

    solver = RK45(rhs, steady.time, y0, t_bound=steady.time + tau_max, rtol=rtol, atol=atol)
    next_k = 1
    grid = forward.times
    while solver.status == "running":
        msg = solver.step()
        if solver.status == "failed":
            raise IntegrationError(f"correlation replay failed at t={solver.t:.6g}: {msg}")
        if next_k < n_tau and grid[next_k] <= solver.t:
            dense = solver.dense_output()
            while next_k < n_tau and grid[next_k] <= solver.t:
                ys = dense(grid[next_k])
                g1[next_k] = np.dot(ad_val, ys[ad_idx])
                next_k += 1
    while next_k < n_tau:
        g1[next_k] = np.dot(ad_val, solver.y[ad_idx])
        next_k += 1

    meta = {"tau_max": tau_max, "n_tau": n_tau, "freeze_motion": freeze_motion}
    if abs(g1[0] - n_steady) > 1e-10 * max(1.0, abs(n_steady)):
        meta["g1_zero_mismatch"] = abs(g1[0] - n_steady)
    if abs(g1[-1]) > 0.01 * abs(g1[0]):
        warnings.warn(
            f"|g1(tau_max)| = {abs(g1[-1]):.3e} exceeds 1% of |g1(0)| = {abs(g1[0]):.3e}; "
            "the delay window is too short for a clean transform",
            RuntimeWarning,
            stacklevel=2,
        )
        meta["window_too_short"] = True
    tol = abs(g1[0]) * (1.0 + 1e-6)
    if np.abs(g1).max() > tol:
        meta["cauchy_schwarz_excess"] = float(np.abs(g1).max() - abs(g1[0]))
    return CorrelationSeries(taus=taus, g1=g1, steady_photon_number=n_steady, meta=meta)


def _adjoint_field_table(eng):
    """Gather table for trace(a^dag rho_bar) in the flattened state."""
    ad = eng.ad
    rows, cols = np.nonzero(ad)
    return cols * eng.dim + rows, ad[rows, cols]


def transform(series: CorrelationSeries, window: "str | None" = None) -> SpectrumResult:
    """One-sided discrete Fourier transform with zero padding.

    ``S(omega) = 2 Re integral_0^inf exp(-i omega tau) g1(tau) dtau``
    evaluated with trapezoid end weights and a fourfold zero pad; the
    frequency axis is relative to the atomic resonance.  ``window="hann"``
    applies a decaying half-window for short delay windows.
    """
    taus = series.taus
    dt = taus[1] - taus[0]
    if not np.allclose(np.diff(taus), dt, rtol=1e-9, atol=1e-12):
        raise ValueError("correlation grid must be uniform for the discrete transform")
    y = series.g1.astype(complex).copy()
    if window == "hann":
        y *= np.cos(0.5 * math.pi * np.arange(y.size) / (y.size - 1)) ** 2
    elif window is not None:
        raise ValueError(f"unknown window {window!r}")
    y[0] *= 0.5
    y[-1] *= 0.5
    n_pad = ZERO_PAD_FACTOR * y.size
    f = np.fft.fft(y, n=n_pad)
    omegas = 2.0 * math.pi * np.fft.fftfreq(n_pad, dt)
    order = np.argsort(omegas)
    return SpectrumResult(
        omegas=omegas[order],
        s=2.0 * dt * f.real[order],
        meta={"window": window, "dt": dt, "zero_pad": ZERO_PAD_FACTOR},
    )


def _lorentzian(omega: np.ndarray, amplitude: float, gamma: float, delta0: float) -> np.ndarray:
    half = 0.5 * gamma
    return amplitude * half**2 / ((omega - delta0) ** 2 + half**2)


def fit_lorentzian(
    spec: SpectrumResult, window: "tuple[float, float] | None" = None
) -> LorentzianFit:
    """Three-parameter Lorentzian least squares on (a window of) the spectrum.

    Initialized from the discrete peak and its half-maximum crossings.  A
    non-converged fit returns the discrete estimates flagged accordingly.
    """
    omegas, s = spec.omegas, spec.s
    if window is not None:
        mask = (omegas >= window[0]) & (omegas <= window[1])
        if mask.sum() < 8:
            raise ValueError("fit window contains too few points")
        omegas, s = omegas[mask], s[mask]
    k = int(np.argmax(s))
    a0 = s[k]
    if a0 <= 0:
        raise ValueError("spectrum has no positive maximum to fit")
    d0 = omegas[k]
    half = a0 / 2.0
    right = k
    while right < s.size - 1 and s[right] > half:
        right += 1
    left = k
    while left > 0 and s[left] > half:
        left -= 1
    dw = omegas[1] - omegas[0]
    g0 = max(omegas[right] - omegas[left], 2 * dw)

    def resid(p):
        return _lorentzian(omegas, p[0], p[1], p[2]) - s

    res = least_squares(
        resid,
        x0=[a0, g0, d0],
        bounds=([0.0, 1e-9 * g0, omegas[0]], [np.inf, np.inf, omegas[-1]]),
        max_nfev=2000,
        xtol=1e-14,
        ftol=1e-14,
        gtol=1e-14,
    )
    if res.success and np.isfinite(res.x).all():
        amplitude, gamma, delta0 = res.x
        residual = float(np.sqrt(np.mean(res.fun**2)) / a0)
        return LorentzianFit(gamma, delta0, amplitude, residual, converged=True)
    return LorentzianFit(g0, d0, a0, math.inf, converged=False)


def detect_second_peak(spec: SpectrumResult, params: SystemParams) -> "SecondaryPeak | None":
    """Cavity-side companion maximum, if one rises above 5% of the main peak.

    The main peak is the global maximum; a companion must be a distinct
    local maximum lying nearer to the cavity detuning than to the main peak
    and at least 5% as high.
    """
    s, omegas = spec.s, spec.omegas
    peak_idx, _ = find_peaks(s, height=0.05 * s.max())
    if peak_idx.size == 0:
        return None
    primary = peak_idx[int(np.argmax(s[peak_idx]))]
    w_primary = omegas[primary]
    delta = params.delta
    best = None
    for idx in peak_idx:
        if idx == primary:
            continue
        w = omegas[idx]
        if abs(w - delta) < abs(w - w_primary):
            if best is None or s[idx] > s[best]:
                best = idx
    if best is None:
        return None
    return SecondaryPeak(
        omega=float(omegas[best]),
        delta_c=float(omegas[best] - delta),
        rel_height=float(s[best] / s[primary]),
    )


def analyze(spec: SpectrumResult, params: SystemParams) -> SpectrumResult:
    """Fit the main line and handle peak splitting in place.

    When a cavity-side companion is present, the Lorentzian fit is
    restricted to the half-plane around the peak closer to the atomic
    resonance, so that the reported offset refers to the emission line near
    the atoms rather than the cavity remnant.
    """
    fit = fit_lorentzian(spec)
    spec.fit_gamma = fit.gamma
    spec.fit_delta0 = fit.delta0
    spec.fit_amplitude = fit.amplitude
    spec.fit_residual = fit.residual
    spec.fit_converged = fit.converged
    sec = detect_second_peak(spec, params)
    spec.secondary_peak = sec
    if sec is not None:
        k = int(np.argmax(spec.s))
        w_primary = spec.omegas[k]
        atomic_w = w_primary if abs(w_primary) <= abs(sec.omega) else sec.omega
        other_w = sec.omega if atomic_w == w_primary else w_primary
        split = 0.5 * (atomic_w + other_w)
        lo, hi = (spec.omegas[0], split) if atomic_w < other_w else (split, spec.omegas[-1])
        try:
            refit = fit_lorentzian(spec, window=(lo, hi))
        except ValueError:
            refit = None
        if refit is not None and refit.converged:
            spec.fit_gamma = refit.gamma
            spec.fit_delta0 = refit.delta0
            spec.fit_amplitude = refit.amplitude
            spec.fit_residual = refit.residual
            spec.fit_converged = refit.converged
            spec.meta["fit_window"] = (float(lo), float(hi))
    return spec


def spectrum_of(
    params: SystemParams,
    steady: CoupledState,
    tau_max: float = DEFAULT_TAU_MAX,
    n_tau: int = DEFAULT_N_TAU,
    freeze_motion: bool = False,
    window: "str | None" = None,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> "tuple[CorrelationSeries, SpectrumResult]":
    """Correlation, transform and line analysis from a quasi-steady snapshot."""
    corr = correlation(
        params, steady, tau_max=tau_max, n_tau=n_tau, freeze_motion=freeze_motion,
        rtol=rtol, atol=atol,
    )
    spec = analyze(transform(corr, window=window), params)
    spec.meta.update(corr.meta)
    return corr, spec


def fixed_position_spectrum(
    params: SystemParams,
    positions: "np.ndarray | None" = None,
    t_steady: float = 500.0,
    tau_max: float = DEFAULT_TAU_MAX,
    n_tau: int = DEFAULT_N_TAU,
    window: "str | None" = None,
) -> "tuple[CorrelationSeries, SpectrumResult]":
    """Full pipeline with the atoms pinned (default: the antinode ladder)."""
    if positions is None:
        positions = antinode_positions(params)
    positions = np.asarray(positions, dtype=float)
    initial = CoupledState(
        QuantumState.ground_vacuum(params.layout),
        MotionState(positions, np.zeros_like(positions)),
    )
    settle = evolve(initial, params, t_steady, Recorder(n_samples=200), freeze_motion=True)
    return spectrum_of(params, settle.final_state, tau_max, n_tau, freeze_motion=True, window=window)


def moving_spectrum(
    params: SystemParams,
    momenta: np.ndarray,
    t_steady: float = 500.0,
    tau_max: float = DEFAULT_TAU_MAX,
    n_tau: int = DEFAULT_N_TAU,
    window: "str | None" = None,
) -> "tuple[Trajectory, CorrelationSeries, SpectrumResult]":
    """Settle a moving run into quasi-steady state, then take its spectrum."""
    from .dynamics import initial_state

    traj = evolve(initial_state(params, momenta), params, t_steady)
    corr, spec = spectrum_of(params, traj.final_state, tau_max, n_tau, window=window)
    return traj, corr, spec


def export_spectrum(
    spec: SpectrumResult, csv_path: "str | Path", meta_path: "str | Path | None" = None
) -> None:
    """Write (omega, S) pairs as delimited text plus fit metadata as JSON."""
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["omega_gamma", "s"])
        for w, v in zip(spec.omegas, spec.s):
            writer.writerow([format(w, ".17g"), format(v, ".17g")])
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
    meta = {
        "fit": {
            "gamma": _num(spec.fit_gamma),
            "delta0": _num(spec.fit_delta0),
            "amplitude": _num(spec.fit_amplitude),
            "residual": _num(spec.fit_residual),
            "converged": spec.fit_converged,
        },
        "secondary_peak": (
            None
            if spec.secondary_peak is None
            else {
                "omega": spec.secondary_peak.omega,
                "delta_c": spec.secondary_peak.delta_c,
                "rel_height": spec.secondary_peak.rel_height,
            }
        ),
        "window": spec.meta.get("window"),
        "tau_max": spec.meta.get("tau_max"),
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _num(x: float):
    return None if (x is None or not np.isfinite(x)) else float(x)
