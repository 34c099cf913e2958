"""Semiclassical dynamics of dipole-interacting two-level atoms in a lossy cavity.

The package couples a dense Lindblad master equation for the internal
atomic states and one truncated cavity mode to classical equations of
motion for the atomic positions along the cavity axis.  On top of the
integrator it provides lasing observables, the emitted-light spectrum via
a two-track regression calculation, and a reproducible parameter-scan
harness with a steady-state cross-check oracle.

All quantities are expressed in natural units: rates in units of the
atomic linewidth (set ``gamma = 1``), momenta in units of ``hbar * k_a``,
positions in units of ``1 / k_a`` and, at the CLI surface, lengths in
units of the cavity wavelength.
"""

from .hilbert import (
    DenseOperator,
    HilbertLayout,
    QuantumState,
    atom_lowering,
    atom_raising,
    build_layout,
    expectation,
    field_annihilation,
    field_creation,
    number_operator,
)
from .couplings import (
    CouplingMatrices,
    CouplingParams,
    NearFieldError,
    build_coupling_matrices,
    collective_decay,
    collective_decay_gradient,
    dipole_shift,
    dipole_shift_gradient,
    mode_amplitude,
)
from .dynamics import (
    CoupledState,
    MotionState,
    SystemParams,
    evolve,
    force,
    hamiltonian,
    liouvillian_apply,
    step,
)
from .observables import (
    StabilityVerdict,
    Trajectory,
    classify_stability,
    cycle_averaged_energy,
    g2_zero,
    inversion,
    kinetic_energy,
    photon_number,
    relative_energy,
)
from .spectrum import (
    CorrelationSeries,
    SpectrumResult,
    correlation,
    detect_second_peak,
    fit_lorentzian,
    fixed_position_spectrum,
    transform,
)
from .sweep import (
    MomentumSampler,
    ScanCell,
    ScanGrid,
    long_time_comparison,
    run_cell,
    run_scan,
    sample_momenta,
    steady_state_oracle,
)

__version__ = "0.1.0"
