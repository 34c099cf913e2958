"""Coupled time evolution: dense master equation for the internal state and
one cavity mode, integrated jointly with classical positions and momenta.

The quantum state obeys a Lindblad equation with three dissipation channels
(individual incoherent pumping at rate ``R``, cavity photon loss at rate
``kappa`` with field-energy decay ``2 kappa``, and collective free-space
emission with the pair kernel from :mod:`cavitycool.couplings`).  The
classical positions enter through the cavity mode function and the pairwise
couplings, which are rebuilt from the instantaneous positions at every
right-hand-side evaluation; velocity-dependent corrections are neglected.

Positions are stored in units of ``1 / k_a`` and momenta in units of
``hbar * k_a``.  With the recoil frequency ``omega_r = hbar k_a^2 / (2 m)``
the equations of motion read::

    dr_i/dt = 2 omega_r q_i / k_a
    dq_i/dt = g0 (k_c / k_a) sin(k_c r_i) <a sig_i^+ + a^dag sig_i^-> + dipole terms

where ``q_i`` is the momentum in ``hbar k_a``.  Expectation values feeding
the forces always come from the physical density matrix.

Everything is integrated with an adaptive embedded Runge-Kutta 5(4) pair
(Dormand-Prince) on the concatenated state vector.  The generator is
decomposed into a constant part plus blocks weighted by the
position-dependent scalars: the scipy-based reference path applies it as
one stacked sparse superoperator product, and the compiled production path
(:mod:`cavitycool._fastpath`, selected automatically when numba is
available) applies the identical generator through precomputed index
tables fused into the stepper.

One evolution is strictly sequential.  Independent evolutions parallelize
across processes (the scan harness does exactly that); engines are cached
per parameter set within a process and the reference path reuses scratch
buffers, so do not share one process between concurrently evolving
threads.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sparse
from scipy.integrate import RK45

try:
    from . import _fastpath
except ImportError:  # numba unavailable: the scipy path covers everything
    _fastpath = None

from . import observables as _obs
from .couplings import (
    CouplingParams,
    build_coupling_matrices,
    collective_decay,
    collective_decay_gradient,
    dipole_shift,
    dipole_shift_gradient,
    mode_amplitude,
)
from .hilbert import (
    DenseOperator,
    HilbertLayout,
    QuantumState,
    atom_lowering,
    build_layout,
    field_annihilation,
    load_state,
    save_state,
)

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10

#: Diagonal entries of rho below this abort the run.
POSITIVITY_ABORT = 1e-6

#: Population in the top Fock level above this triggers a cutoff warning.
TOP_FOCK_WARN = 1e-6


class IntegrationError(RuntimeError):
    """Integrator failure (step-size underflow, non-finite state)."""


class PositivityError(RuntimeError):
    """Density-matrix positivity guard exceeded; the run is aborted."""


@dataclass(frozen=True)
class SystemParams:
    """All physical constants and switches of one model instance.

    Rates (``delta``, ``pump_rate``, ``kappa``, ``omega_r``) share the unit
    of ``coupling.gamma``.  ``collective_force_decay_term`` enables the
    usually negligible dissipative pair force proportional to the gradient
    of the collective decay kernel; ``independent_atoms`` switches off all
    direct dipole-dipole coupling; ``spontaneous_decay_off`` removes the
    free-space decay channel entirely (diagnostic switch for closed-system
    energy checks, leaving the coherent pair shifts in place).
    """

    coupling: CouplingParams
    delta: float
    pump_rate: float
    kappa: float
    omega_r: float
    n_atoms: int = 3
    fock_cutoff: int = 5
    collective_force_decay_term: bool = False
    independent_atoms: bool = False
    spontaneous_decay_off: bool = False

    def __post_init__(self) -> None:
        if self.pump_rate < 0:
            raise ValueError(f"pump_rate must be >= 0, got {self.pump_rate}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if self.omega_r <= 0:
            raise ValueError(f"omega_r must be > 0 (finite mass), got {self.omega_r}")

    @property
    def layout(self) -> HilbertLayout:
        return build_layout(self.n_atoms, self.fock_cutoff)


@dataclass
class MotionState:
    """Classical 1D positions (units 1/k_a) and momenta (units hbar*k_a)."""

    positions: np.ndarray
    momenta: np.ndarray

    def __post_init__(self) -> None:
        self.positions = np.atleast_1d(np.asarray(self.positions, dtype=float))
        self.momenta = np.atleast_1d(np.asarray(self.momenta, dtype=float))
        if self.positions.shape != self.momenta.shape:
            raise ValueError("positions and momenta must have the same length")
        if not (np.isfinite(self.positions).all() and np.isfinite(self.momenta).all()):
            raise ValueError("motion state contains non-finite entries")

    def copy(self) -> "MotionState":
        return MotionState(self.positions.copy(), self.momenta.copy())


@dataclass
class CoupledState:
    """Joint quantum/classical state at one instant."""

    quantum: QuantumState
    motion: MotionState
    time: float = 0.0

    def __post_init__(self) -> None:
        if self.motion.positions.size != self.quantum.layout.n_atoms:
            raise ValueError("motion vector length does not match the number of atoms")

    def copy(self) -> "CoupledState":
        return CoupledState(self.quantum.copy(), self.motion.copy(), self.time)


def antinode_positions(params: SystemParams) -> np.ndarray:
    """Default initial configuration: atoms half a wavelength apart on antinodes."""
    lam = params.coupling.lambda_c
    return np.arange(params.n_atoms) * lam / 2.0


def initial_state(params: SystemParams, momenta: "np.ndarray | Iterable[float]") -> CoupledState:
    """Ground-state atoms, empty cavity, antinode positions, given momenta."""
    momenta = np.asarray(tuple(momenta), dtype=float)
    if momenta.size != params.n_atoms:
        raise ValueError(f"need {params.n_atoms} momenta, got {momenta.size}")
    return CoupledState(
        QuantumState.ground_vacuum(params.layout),
        MotionState(antinode_positions(params), momenta),
        time=0.0,
    )


# ---------------------------------------------------------------------------
# Public operators
# ---------------------------------------------------------------------------

def hamiltonian(params: SystemParams, positions: np.ndarray) -> DenseOperator:
    """Coherent part: detuned field + position-dependent exchange couplings.

    ``H = delta a^dag a + sum_i g(r_i) (a sig_i^+ + a^dag sig_i^-)
    + sum_{i<j} omega_ij (sig_i^+ sig_j^- + sig_j^+ sig_i^-)`` with hbar = 1.
    """
    eng = _get_engine(params)
    positions = np.asarray(positions, dtype=float)
    gvec = mode_amplitude(params.coupling, positions)
    mats = build_coupling_matrices(params.coupling, positions, params.independent_atoms)
    h = params.delta * eng.n_op.copy()
    h += np.tensordot(gvec, eng.x_stack, axes=1)
    if eng.pairs:
        w = np.array([mats.omega[i, j] for i, j in eng.pairs])
        h += np.tensordot(w, eng.p_stack, axes=1)
    return DenseOperator(params.layout, h, hermitian=True)


def liouvillian_apply(
    params: SystemParams, positions: np.ndarray, rho: "np.ndarray | QuantumState"
) -> np.ndarray:
    """Dissipative part of ``d rho / dt``: pump, cavity loss, collective decay.

    Written directly from the three Lindblad forms; serves as the readable
    cross-check for the optimized right-hand side used by the integrator.
    The cavity term carries the factor 2 inside (``kappa (2 a rho a^dag -
    a^dag a rho - rho a^dag a)``), so field energy decays at rate
    ``2 kappa``.  The returned matrix is traceless.
    """
    if isinstance(rho, QuantumState):
        rho = rho.rho
    eng = _get_engine(params)
    out = np.zeros_like(rho)
    r_pump = params.pump_rate
    if r_pump > 0:
        for i in range(params.n_atoms):
            sp, sm = eng.sp[i], eng.sm[i]
            out += 0.5 * r_pump * (
                2.0 * sp @ rho @ sm - sm @ sp @ rho - rho @ sm @ sp
            )
    if params.kappa > 0:
        a, ad = eng.a, eng.ad
        out += params.kappa * (2.0 * a @ rho @ ad - eng.n_op @ rho - rho @ eng.n_op)
    if not params.spontaneous_decay_off:
        mats = build_coupling_matrices(
            params.coupling, np.asarray(positions, dtype=float), params.independent_atoms
        )
        for i in range(params.n_atoms):
            for j in range(params.n_atoms):
                gij = mats.gamma_mat[i, j]
                if gij == 0.0:
                    continue
                out += 0.5 * gij * (
                    2.0 * eng.sm[i] @ rho @ eng.sp[j]
                    - eng.sp[i] @ eng.sm[j] @ rho
                    - rho @ eng.sp[i] @ eng.sm[j]
                )
    return out


def master_rhs(params: SystemParams, positions: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Full ``d rho / dt`` at fixed positions (coherent + dissipative parts)."""
    h = hamiltonian(params, positions).entries
    return -1j * (h @ rho - rho @ h) + liouvillian_apply(params, positions, rho)


def force(params: SystemParams, positions: np.ndarray, quantum: QuantumState) -> np.ndarray:
    """Semiclassical momentum derivative for each atom, in hbar*k_a per time.

    Cavity gradient force plus the coherent dipole pair force; when
    ``collective_force_decay_term`` is set, the dissipative pair force
    proportional to the decay-kernel gradient is added as well.
    """
    eng = _get_engine(params)
    v = np.ascontiguousarray(quantum.rho).ravel()
    e_x = eng.trace_with(eng.x_flat, v).real
    s_pairs = eng.trace_with(eng.spm_flat, v)
    return eng.forces(np.asarray(positions, dtype=float), e_x, s_pairs)


# ---------------------------------------------------------------------------
# Right-hand-side engine
# ---------------------------------------------------------------------------

def _commutator_block(op: np.ndarray) -> sparse.csr_matrix:
    """Superoperator of -i [op, .] acting on a row-major vectorized matrix."""
    d = op.shape[0]
    eye = sparse.identity(d, dtype=complex, format="csr")
    s = sparse.csr_matrix(op)
    return (-1j * (sparse.kron(s, eye) - sparse.kron(eye, s.T))).tocsr()


def _dissipator_block(left: np.ndarray, right: np.ndarray) -> sparse.csr_matrix:
    """Superoperator of L . R^dag - (R^dag L . + . R^dag L)/2, vectorized row-major."""
    d = left.shape[0]
    eye = sparse.identity(d, dtype=complex, format="csr")
    ls = sparse.csr_matrix(left)
    rd = sparse.csr_matrix(right.conj().T)
    anti = rd @ ls
    out = sparse.kron(ls, rd.T) - 0.5 * (sparse.kron(anti, eye) + sparse.kron(eye, anti.T))
    return out.tocsr()


def _trace_table(op: np.ndarray) -> "tuple[np.ndarray, np.ndarray]":
    """Flat gather table so that trace(op @ rho) = vals . vec(rho)[idx]."""
    d = op.shape[0]
    rows, cols = np.nonzero(op)
    vals = op[rows, cols]
    return cols * d + rows, vals


class _Generator:
    """Precomputed superoperator blocks and index tables for fast evaluation.

    The Liouvillian is split into a constant block plus blocks multiplied by
    the position-dependent scalars (one per atom for the cavity coupling,
    one per pair each for the coherent shift and the collective decay).  The
    blocks are stacked vertically into a single sparse matrix so that one
    sparse matvec per evaluation yields every block's action; the scalar
    coefficients then combine them.
    """

    def __init__(self, params: SystemParams):
        self.params = params
        layout = params.layout
        self.layout = layout
        n = params.n_atoms
        d = layout.total_dim
        self.dim = d
        self.n_atoms = n
        self.quantum_size = d * d
        self.n_motion = n

        self.sm = np.stack([atom_lowering(layout, i).entries for i in range(n)])
        self.sp = self.sm.conj().transpose(0, 2, 1).copy()
        self.a = field_annihilation(layout).entries
        self.ad = self.a.conj().T.copy()
        self.n_op = self.ad @ self.a
        self.x_stack = np.stack([self.a @ self.sp[i] + self.ad @ self.sm[i] for i in range(n)])
        self.e_stack = np.stack([self.sp[i] @ self.sm[i] for i in range(n)])
        self.pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        if self.pairs:
            self.spm_pairs = np.stack([self.sp[i] @ self.sm[j] for i, j in self.pairs])
            self.p_stack = self.spm_pairs + self.spm_pairs.conj().transpose(0, 2, 1)
        else:
            self.spm_pairs = np.zeros((0, d, d), dtype=complex)
            self.p_stack = np.zeros((0, d, d), dtype=complex)

        gamma = params.coupling.gamma
        decay_on = not params.spontaneous_decay_off
        pair_coupling = bool(self.pairs) and not params.independent_atoms

        # constant block: detuning, pump, cavity loss, single-atom decay
        l0 = _commutator_block(params.delta * self.n_op)
        if params.pump_rate > 0:
            for i in range(n):
                l0 = l0 + params.pump_rate * _dissipator_block(self.sp[i], self.sp[i])
        if params.kappa > 0:
            l0 = l0 + 2.0 * params.kappa * _dissipator_block(self.a, self.a)
        if decay_on and gamma > 0:
            for i in range(n):
                l0 = l0 + gamma * _dissipator_block(self.sm[i], self.sm[i])

        blocks = [l0.tocsr()]
        self.coeff_size = 1
        self.g_slice = slice(0, 0)
        self.omega_slice = slice(0, 0)
        self.gamma_slice = slice(0, 0)

        if params.coupling.g0 > 0:
            start = self.coeff_size
            blocks.extend(_commutator_block(self.x_stack[i]) for i in range(n))
            self.coeff_size += n
            self.g_slice = slice(start, self.coeff_size)
        if pair_coupling:
            start = self.coeff_size
            blocks.extend(_commutator_block(self.p_stack[p]) for p in range(len(self.pairs)))
            self.coeff_size += len(self.pairs)
            self.omega_slice = slice(start, self.coeff_size)
            if decay_on:
                start = self.coeff_size
                for p, (i, j) in enumerate(self.pairs):
                    blk = _dissipator_block(self.sm[i], self.sm[j]) + _dissipator_block(
                        self.sm[j], self.sm[i]
                    )
                    blocks.append(blk.tocsr())
                self.coeff_size += len(self.pairs)
                self.gamma_slice = slice(start, self.coeff_size)

        self.blocks = blocks
        self.l_stack = sparse.vstack(blocks, format="csr")
        self.coeffs = np.zeros(self.coeff_size)
        self.coeffs[0] = 1.0

        # gather tables for expectation values in the flattened state
        self.x_flat = [_trace_table(self.x_stack[i]) for i in range(n)]
        self.spm_flat = [_trace_table(self.spm_pairs[p]) for p in range(len(self.pairs))]
        self.e_flat = [_trace_table(self.e_stack[i]) for i in range(n)]
        self.n_flat = _trace_table(self.n_op)

        self.diag_idx = np.arange(d) * d + np.arange(d)
        self.top_fock_idx = self.diag_idx[np.arange(d) % layout.field_dim == layout.fock_cutoff]

    # -- couplings -------------------------------------------------------------

    def pair_data(self, x: np.ndarray, with_gradients: bool):
        """Pairwise couplings (and gradients) at configuration ``x``."""
        cp = self.params.coupling
        npair = len(self.pairs)
        omega = np.zeros(npair)
        gam = np.zeros(npair)
        domega = np.zeros(npair) if with_gradients else None
        dgamma = (
            np.zeros(npair)
            if with_gradients and self.params.collective_force_decay_term
            else None
        )
        sign = np.zeros(npair)
        if self.params.independent_atoms:
            return omega, gam, domega, dgamma, sign
        for p, (i, j) in enumerate(self.pairs):
            diff = x[i] - x[j]
            r = abs(diff)
            sign[p] = 1.0 if diff >= 0 else -1.0
            omega[p] = dipole_shift(cp, r)
            gam[p] = collective_decay(cp, r)
            if domega is not None:
                domega[p] = dipole_shift_gradient(cp, r)
            if dgamma is not None:
                dgamma[p] = collective_decay_gradient(cp, r)
        return omega, gam, domega, dgamma, sign

    def fill_coeffs(self, x: np.ndarray, omega: np.ndarray, gam: np.ndarray) -> np.ndarray:
        cp = self.params.coupling
        c = self.coeffs
        if self.g_slice.stop > self.g_slice.start:
            c[self.g_slice] = cp.g0 * np.cos(cp.k_c * x)
        if self.omega_slice.stop > self.omega_slice.start:
            c[self.omega_slice] = omega
        if self.gamma_slice.stop > self.gamma_slice.start:
            c[self.gamma_slice] = gam
        return c

    # -- expectations and forces -------------------------------------------------

    @staticmethod
    def trace_with(tables, v: np.ndarray) -> np.ndarray:
        return np.array([np.dot(vals, v[idx]) for idx, vals in tables])

    def forces(
        self,
        x: np.ndarray,
        e_x: np.ndarray,
        s_pairs: np.ndarray,
        pair_grads=None,
    ) -> np.ndarray:
        cp = self.params.coupling
        dq = cp.g0 * (cp.k_c / cp.k_a) * np.sin(cp.k_c * x) * e_x
        if self.params.independent_atoms or not self.pairs:
            return dq
        if pair_grads is None:
            _, _, domega, dgamma, sign = self.pair_data(x, with_gradients=True)
        else:
            domega, dgamma, sign = pair_grads
        inv_ka = 1.0 / cp.k_a
        for p, (i, j) in enumerate(self.pairs):
            fc = -2.0 * inv_ka * s_pairs[p].real * domega[p] * sign[p]
            dq[i] += fc
            dq[j] -= fc
        if dgamma is not None:
            for p, (i, j) in enumerate(self.pairs):
                fd = -inv_ka * s_pairs[p].imag * dgamma[p] * sign[p]
                dq[i] += fd
                dq[j] += fd  # dissipative pair force is symmetric, not Newtonian
        return dq

    # -- packed right-hand sides ---------------------------------------------------

    def pack(self, state: CoupledState) -> np.ndarray:
        y = np.empty(self.quantum_size + 2 * self.n_motion, dtype=complex)
        y[: self.quantum_size] = state.quantum.rho.ravel()
        y[self.quantum_size : self.quantum_size + self.n_motion] = state.motion.positions
        y[self.quantum_size + self.n_motion :] = state.motion.momenta
        return y

    def unpack(self, t: float, y: np.ndarray) -> CoupledState:
        d = self.dim
        rho = y[: self.quantum_size].reshape(d, d).copy()
        x = y[self.quantum_size : self.quantum_size + self.n_motion].real.copy()
        q = y[self.quantum_size + self.n_motion :].real.copy()
        return CoupledState(QuantumState(self.layout, rho), MotionState(x, q), t)

    def apply_liouvillian(self, v: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
        u = self.l_stack.dot(v)
        return coeffs @ u.reshape(self.coeff_size, self.quantum_size)

    def rhs_moving(self, t: float, y: np.ndarray) -> np.ndarray:
        p = self.params
        cp = p.coupling
        nq = self.quantum_size
        v = y[:nq]
        x = y[nq : nq + self.n_motion].real
        q = y[nq + self.n_motion :].real

        omega, gam, domega, dgamma, sign = self.pair_data(x, with_gradients=True)
        coeffs = self.fill_coeffs(x, omega, gam)

        dy = np.empty_like(y)
        dy[:nq] = self.apply_liouvillian(v, coeffs)

        e_x = self.trace_with(self.x_flat, v).real
        s_pairs = self.trace_with(self.spm_flat, v)
        dy[nq : nq + self.n_motion] = 2.0 * p.omega_r * q / cp.k_a
        dy[nq + self.n_motion :] = self.forces(x, e_x, s_pairs, (domega, dgamma, sign))
        return dy

    def frozen_operator(self, positions: np.ndarray) -> sparse.csr_matrix:
        """Collapsed single-matrix Liouvillian at fixed positions."""
        omega, gam, _, _, _ = self.pair_data(positions, with_gradients=False)
        coeffs = self.fill_coeffs(positions, omega, gam).copy()
        total = coeffs[0] * self.blocks[0]
        for c, blk in zip(coeffs[1:], self.blocks[1:]):
            if c != 0.0:
                total = total + c * blk
        return total.tocsr()

    def make_frozen_rhs(self, positions: np.ndarray) -> Callable[[float, np.ndarray], np.ndarray]:
        """RHS with motion pinned at ``positions``; generator collapsed once."""
        l_frozen = self.frozen_operator(positions)
        nq = self.quantum_size

        def rhs(t: float, y: np.ndarray) -> np.ndarray:
            dy = np.zeros_like(y)
            dy[:nq] = l_frozen.dot(y[:nq])
            return dy

        return rhs

    def make_replay_rhs(
        self, positions_of_t: Callable[[float], np.ndarray]
    ) -> Callable[[float, np.ndarray], np.ndarray]:
        """Quantum-only RHS with positions replayed from a recorded trajectory.

        Used to propagate the modified (non-Hermitian) operator in the
        two-time correlation calculation: the generator is identical, but no
        forces are evaluated and the state vector holds only the operator.
        """

        def rhs(t: float, y: np.ndarray) -> np.ndarray:
            x = positions_of_t(t)
            omega, gam, _, _, _ = self.pair_data(x, with_gradients=False)
            coeffs = self.fill_coeffs(x, omega, gam)
            return self.apply_liouvillian(y, coeffs)

        return rhs

    # -- recorded observables --------------------------------------------------------

    def observables_from(self, v: np.ndarray, q: np.ndarray) -> dict:
        idx, vals = self.n_flat
        exc = self.trace_with(self.e_flat, v).real
        s_pairs = self.trace_with(self.spm_flat, v)
        return {
            "e_kin": float(self.params.omega_r * np.sum(q * q)),
            "photon_number": float(np.dot(vals, v[idx]).real),
            "excitation_atoms": exc,
            "excitation_total": float(exc.sum()),
            "cross_re": s_pairs.real,
            "cross_im": s_pairs.imag,
        }

    # -- compiled-path argument tables ------------------------------------------

    def _sandwich_entries(self, left: np.ndarray, right: np.ndarray, weight: float):
        """Flat gather/scatter table of rho -> left @ rho @ right."""
        d = self.dim
        la, lc = np.nonzero(left)
        rd_, rb = np.nonzero(right)
        lv = left[la, lc]
        rv = right[rd_, rb]
        dst = (la[:, None] * d + rb[None, :]).ravel()
        src = (lc[:, None] * d + rd_[None, :]).ravel()
        val = weight * (lv[:, None] * rv[None, :]).ravel()
        return dst.astype(np.int64), src.astype(np.int64), val.astype(complex)

    @staticmethod
    def _coo(op: np.ndarray):
        rows, cols = np.nonzero(op)
        return rows.astype(np.int64), cols.astype(np.int64), op[rows, cols].astype(complex)

    @staticmethod
    def _concat_tables(tables):
        """Concatenate (idx, val) pairs into flat arrays with a pointer vector."""
        ptr = np.zeros(len(tables) + 1, dtype=np.int64)
        idxs, vals = [], []
        for k, (idx, val) in enumerate(tables):
            idxs.append(idx)
            vals.append(val)
            ptr[k + 1] = ptr[k] + idx.size
        idx = np.concatenate(idxs) if idxs else np.zeros(0, dtype=np.int64)
        val = np.concatenate(vals) if vals else np.zeros(0, dtype=complex)
        return idx.astype(np.int64), val, ptr

    @cached_property
    def fast_tables(self) -> dict:
        """Precomputed index tables for the compiled integrator."""
        p = self.params
        cp = p.coupling
        n = self.n_atoms
        gamma = cp.gamma
        decay_on = not p.spontaneous_decay_off
        pair_active = bool(self.pairs) and not p.independent_atoms
        pair_decay = pair_active and decay_on and gamma > 0

        heff_c0 = (p.delta - 1j * p.kappa) * self.n_op.astype(complex)
        heff_c0 += -0.5j * p.pump_rate * np.einsum("kab->ab", self.sm @ self.sp)
        gamma_eff = gamma if decay_on else 0.0
        heff_c0 += -0.5j * gamma_eff * np.einsum("kab->ab", self.e_stack)

        if cp.g0 > 0:
            xb = [self._coo(self.x_stack[i]) for i in range(n)]
        else:
            xb = [(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, complex))] * n
        xb_ptr = np.zeros(n + 1, dtype=np.int64)
        for i, (r, _, _) in enumerate(xb):
            xb_ptr[i + 1] = xb_ptr[i] + r.size
        xb_row = np.concatenate([r for r, _, _ in xb]) if n else np.zeros(0, np.int64)
        xb_col = np.concatenate([c for _, c, _ in xb]) if n else np.zeros(0, np.int64)
        xb_val = np.concatenate([v for _, _, v in xb]) if n else np.zeros(0, complex)

        pair_list = self.pairs if pair_active else []
        pb = [self._coo(self.p_stack[q]) for q in range(len(pair_list))]
        pb_ptr = np.zeros(len(pair_list) + 1, dtype=np.int64)
        for q, (r, _, _) in enumerate(pb):
            pb_ptr[q + 1] = pb_ptr[q] + r.size
        pb_row = np.concatenate([r for r, _, _ in pb]) if pb else np.zeros(0, np.int64)
        pb_col = np.concatenate([c for _, c, _ in pb]) if pb else np.zeros(0, np.int64)
        pb_val = np.concatenate([v for _, _, v in pb]) if pb else np.zeros(0, complex)

        fixed = []
        if p.pump_rate > 0:
            for i in range(n):
                fixed.append(self._sandwich_entries(self.sp[i], self.sm[i], p.pump_rate))
        if p.kappa > 0:
            fixed.append(self._sandwich_entries(self.a, self.ad, 2.0 * p.kappa))
        if decay_on and gamma > 0:
            for i in range(n):
                fixed.append(self._sandwich_entries(self.sm[i], self.sp[i], gamma))
        if fixed:
            swf_dst = np.concatenate([f[0] for f in fixed])
            swf_src = np.concatenate([f[1] for f in fixed])
            swf_val = np.concatenate([f[2] for f in fixed])
        else:
            swf_dst = np.zeros(0, np.int64)
            swf_src = np.zeros(0, np.int64)
            swf_val = np.zeros(0, complex)

        swp_tables = []
        for (i, j) in pair_list if pair_decay else []:
            d1, s1, v1 = self._sandwich_entries(self.sm[i], self.sp[j], 1.0)
            d2, s2, v2 = self._sandwich_entries(self.sm[j], self.sp[i], 1.0)
            swp_tables.append(
                (np.concatenate([d1, d2]), np.concatenate([s1, s2]), np.concatenate([v1, v2]))
            )
        swp_ptr = np.zeros(len(swp_tables) + 1, dtype=np.int64)
        for q, (d_, _, _) in enumerate(swp_tables):
            swp_ptr[q + 1] = swp_ptr[q] + d_.size
        swp_dst = (
            np.concatenate([t[0] for t in swp_tables]) if swp_tables else np.zeros(0, np.int64)
        )
        swp_src = (
            np.concatenate([t[1] for t in swp_tables]) if swp_tables else np.zeros(0, np.int64)
        )
        swp_val = (
            np.concatenate([t[2] for t in swp_tables]) if swp_tables else np.zeros(0, complex)
        )

        if pair_active:
            pair_i = np.array([i for i, _ in self.pairs], dtype=np.int64)
            pair_j = np.array([j for _, j in self.pairs], dtype=np.int64)
        else:
            pair_i = np.zeros(0, dtype=np.int64)
            pair_j = np.zeros(0, dtype=np.int64)

        ex_idx, ex_val, ex_ptr = self._concat_tables(self.x_flat)
        # cross coherences are recorded for every pair even when the pair
        # coupling is switched off (they still build up through the cavity)
        sp_idx, sp_val, sp_ptr = self._concat_tables(list(self.spm_flat))
        ee_idx, ee_val, ee_ptr = self._concat_tables(self.e_flat)
        nn_idx, nn_val = self.n_flat
        theta = cp.theta
        c2 = math.cos(theta) ** 2

        # union sparsity pattern of every matrix that can enter H_eff
        mask = np.abs(heff_c0) > 0
        mask |= np.abs(self.n_op) > 0
        for i in range(n):
            mask |= np.abs(self.x_stack[i]) > 0
            mask |= np.abs(self.e_stack[i]) > 0
            mask |= np.abs(self.sm[i] @ self.sp[i]) > 0
        for q in range(len(self.pairs)):
            mask |= np.abs(self.p_stack[q]) > 0
        hb_rows, hb_cols = np.nonzero(mask)
        hb_ptr = np.zeros(self.dim + 1, dtype=np.int64)
        np.add.at(hb_ptr, hb_rows + 1, 1)
        hb_ptr = np.cumsum(hb_ptr)

        return {
            "heff_c0": heff_c0,
            "hpattern": (hb_ptr.astype(np.int64), hb_cols.astype(np.int64)),
            "xb": (xb_row, xb_col, xb_val, xb_ptr),
            "pb": (pb_row, pb_col, pb_val, pb_ptr),
            "swf": (swf_dst, swf_src, swf_val),
            "swp": (swp_dst, swp_src, swp_val, swp_ptr),
            "pair_ij": (pair_i, pair_j),
            "ex": (ex_idx, ex_val, ex_ptr),
            "sp": (sp_idx, sp_val, sp_ptr),
            "ee": (ee_idx, ee_val, ee_ptr),
            "nn": (nn_idx.astype(np.int64), nn_val.astype(complex)),
            "top_idx": self.top_fock_idx.astype(np.int64),
            "weights": (1.0 - c2, 1.0 - 3.0 * c2),
        }

    def frozen_fast_tables(self, positions: np.ndarray) -> dict:
        """Tables with the generator collapsed at fixed ``positions``."""
        tabs = dict(self.fast_tables)
        p = self.params
        cp = p.coupling
        omega, gam, _, _, _ = self.pair_data(positions, with_gradients=False)
        heff = tabs["heff_c0"].copy()
        gvec = cp.g0 * np.cos(cp.k_c * np.asarray(positions, dtype=float))
        heff += np.tensordot(gvec, self.x_stack, axes=1)
        decay_on = not p.spontaneous_decay_off
        pair_active = bool(self.pairs) and not p.independent_atoms
        if pair_active:
            coeff = omega - (0.5j * gam if decay_on else 0.0)
            heff += np.tensordot(coeff, self.p_stack, axes=1)
        empty_i = np.zeros(0, np.int64)
        empty_c = np.zeros(0, complex)
        swf_dst, swf_src, swf_val = tabs["swf"]
        if pair_active and decay_on:
            swp_dst, swp_src, swp_val, swp_ptr = tabs["swp"]
            weights = np.repeat(gam, np.diff(swp_ptr))
            swf_dst = np.concatenate([swf_dst, swp_dst])
            swf_src = np.concatenate([swf_src, swp_src])
            swf_val = np.concatenate([swf_val, weights * swp_val])
        tabs["heff_c0"] = heff
        tabs["xb"] = (empty_i, empty_i, empty_c, np.zeros(self.n_atoms + 1, np.int64))
        tabs["pb"] = (empty_i, empty_i, empty_c, np.zeros(1, np.int64))
        tabs["swf"] = (swf_dst, swf_src, swf_val)
        tabs["swp"] = (empty_i, empty_i, empty_c, np.zeros(1, np.int64))
        tabs["pair_ij"] = (empty_i, empty_i)
        return tabs

    def run_fast(
        self,
        initial: CoupledState,
        t_final: float,
        grid: np.ndarray,
        rtol: float,
        atol: float,
        freeze: bool,
    ):
        """Integrate with the compiled stepper; returns (y_final, records, stats)."""
        p = self.params
        cp = p.coupling
        tabs = self.frozen_fast_tables(initial.motion.positions) if freeze else self.fast_tables
        n = self.n_atoms
        npair = len(self.pairs)
        s = grid.size
        rec_pos = np.empty((s, n))
        rec_mom = np.empty((s, n))
        rec_scalar = np.empty((s, 3))
        rec_exc = np.empty((s, n))
        rec_cross_re = np.empty((s, max(npair, 0)))
        rec_cross_im = np.empty((s, max(npair, 0)))
        stats = np.zeros(8)
        y = self.pack(initial)

        status = self._call_fast(y, initial.time, t_final, rtol, atol, grid, tabs,
                                 rec_pos, rec_mom, rec_scalar, rec_exc,
                                 rec_cross_re, rec_cross_im, freeze, stats)
        if status == _fastpath.STATUS_UNDERFLOW:
            raise IntegrationError(
                f"step-size underflow at t={stats[_fastpath.STAT_T_STOP]:.6g}; the system "
                f"appears stiff for rtol={rtol}, atol={atol}"
            )
        if status == _fastpath.STATUS_POSITIVITY:
            raise PositivityError(
                f"diagonal entry {stats[_fastpath.STAT_FAIL_VALUE]:.3e} below "
                f"-{POSITIVITY_ABORT:.0e} at t={stats[_fastpath.STAT_T_STOP]:.4g}; "
                "state left the physical cone (check cutoff and tolerances)"
            )
        if status == _fastpath.STATUS_NONFINITE:
            raise IntegrationError(
                f"non-finite motion state at t={stats[_fastpath.STAT_T_STOP]:.4g}"
            )
        records = {
            "positions": rec_pos,
            "momenta": rec_mom,
            "scalar": rec_scalar,
            "exc": rec_exc,
            "cross_re": rec_cross_re,
            "cross_im": rec_cross_im,
        }
        return y, records, stats

    def _call_fast(self, y, t0, t_final, rtol, atol, grid, tabs,
                   rec_pos, rec_mom, rec_scalar, rec_exc,
                   rec_cross_re, rec_cross_im, freeze, stats):
        from .couplings import NearFieldError

        p = self.params
        cp = p.coupling
        try:
            return _fastpath.integrate(
                y,
                t0,
                t_final,
                rtol,
                atol,
                grid,
                rec_pos,
                rec_mom,
                rec_scalar,
                rec_exc,
            rec_cross_re,
                rec_cross_im,
                tabs["heff_c0"],
                *tabs["hpattern"],
                *tabs["xb"],
                *tabs["pb"],
                *tabs["swf"],
                *tabs["swp"],
                *tabs["pair_ij"],
                *tabs["ex"],
                *tabs["sp"],
                *tabs["ee"],
                *tabs["nn"],
                tabs["top_idx"],
                self.dim,
                self.n_atoms,
                cp.g0,
                cp.k_a,
                cp.k_c,
                cp.gamma,
                tabs["weights"][0],
                tabs["weights"][1],
                p.omega_r,
                freeze,
                p.independent_atoms,
                True,
                p.collective_force_decay_term,
                POSITIVITY_ABORT,
                TOP_FOCK_WARN,
                stats,
            )
        except ValueError as err:  # the kernel only raises the near-field guard
            raise NearFieldError(str(err)) from None


@lru_cache(maxsize=16)
def _get_engine(params: SystemParams) -> _Generator:
    return _Generator(params)


def build_superoperator(params: SystemParams, positions: np.ndarray) -> sparse.csr_matrix:
    """Full Liouvillian as a sparse matrix on row-major vectorized states.

    This is exactly the generator the integrator applies, collapsed at fixed
    positions; the steady-state oracle computes its null space.
    """
    eng = _get_engine(params)
    return eng.frozen_operator(np.asarray(positions, dtype=float))


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

@dataclass
class Recorder:
    """Uniform recording grid specification with an optional callback.

    The callback receives ``(time, CoupledState, observables_dict)`` at
    every recorded sample; the grid is independent of the adaptive internal
    steps, which are generally much finer.
    """

    n_samples: int = 2000
    callback: "Callable[[float, CoupledState, dict], None] | None" = None


def step(
    state: CoupledState,
    params: SystemParams,
    dt_max: float,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> CoupledState:
    """Advance by one accepted adaptive step of at most ``dt_max``."""
    eng = _get_engine(params)
    y0 = eng.pack(state)
    solver = RK45(
        eng.rhs_moving,
        state.time,
        y0,
        t_bound=state.time + dt_max,
        rtol=rtol,
        atol=atol,
        max_step=dt_max,
    )
    msg = solver.step()
    if solver.status == "failed":
        raise IntegrationError(f"integrator step failed at t={state.time}: {msg}")
    _check_step(eng, solver.y, solver.t)
    return eng.unpack(solver.t, solver.y)


def _check_step(eng: _Generator, y: np.ndarray, t: float) -> float:
    """Cheap post-step guards; returns the trace deviation."""
    diag = y[eng.diag_idx]
    trace_dev = abs(diag.real.sum() - 1.0)
    min_diag = diag.real.min()
    if min_diag < -POSITIVITY_ABORT:
        raise PositivityError(
            f"diagonal entry {min_diag:.3e} below -{POSITIVITY_ABORT:.0e} at t={t:.4g}; "
            "state left the physical cone (check cutoff and tolerances)"
        )
    motion = y[eng.quantum_size :]
    if motion.size and not np.isfinite(motion).all():
        raise IntegrationError(f"non-finite motion state at t={t:.4g}")
    return trace_dev


def evolve(
    initial: CoupledState,
    params: SystemParams,
    t_final: float,
    recorder: "Recorder | None" = None,
    freeze_motion: bool = False,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    method: str = "auto",
) -> "_obs.Trajectory":
    """Integrate from ``initial.time`` to the absolute time ``t_final``.

    Observables are sampled on a uniform grid of ``recorder.n_samples``
    points (endpoints included).  With ``freeze_motion=True`` positions and
    momenta are pinned bit-exactly and no forces are evaluated.  Returns a
    :class:`cavitycool.observables.Trajectory` with the stability verdict
    attached and the final coupled state available for continuation runs.

    ``method`` selects the integrator backend: "fast" for the compiled
    stepper, "scipy" for the reference implementation, "auto" (default) for
    the compiled one whenever it is available and no per-sample callback is
    requested.  Both implement the identical embedded 5(4) pair.
    """
    if t_final <= initial.time:
        raise ValueError("t_final must exceed the initial time")
    recorder = recorder or Recorder()
    eng = _get_engine(params)
    if initial.motion.positions.size != params.n_atoms:
        raise ValueError("initial state does not match params.n_atoms")
    if method not in ("auto", "fast", "scipy"):
        raise ValueError(f"unknown integrator method {method!r}")
    if method == "fast" and _fastpath is None:
        raise RuntimeError("compiled integrator requested but numba is unavailable")
    use_fast = method == "fast" or (
        method == "auto" and _fastpath is not None and recorder.callback is None
    )

    grid = np.linspace(initial.time, t_final, recorder.n_samples)
    n = params.n_atoms
    npair = len(eng.pairs)

    if use_fast:
        y_final, rec, stats = eng.run_fast(initial, t_final, grid, rtol, atol, freeze_motion)
        positions = rec["positions"]
        momenta = rec["momenta"]
        series = {
            "e_kin": rec["scalar"][:, 0],
            "photon_number": rec["scalar"][:, 1],
            "excitation_total": rec["scalar"][:, 2],
            "excitation_atoms": rec["exc"],
            "cross_re": rec["cross_re"],
            "cross_im": rec["cross_im"],
        }
        # the compiled loop records grid[1:]; fill the initial sample here
        y0 = eng.pack(initial)
        obs0 = eng.observables_from(y0[: eng.quantum_size], initial.motion.momenta)
        positions[0] = initial.motion.positions
        momenta[0] = initial.motion.momenta
        series["e_kin"][0] = obs0["e_kin"]
        series["photon_number"][0] = obs0["photon_number"]
        series["excitation_total"][0] = obs0["excitation_total"]
        series["excitation_atoms"][0] = obs0["excitation_atoms"]
        series["cross_re"][0] = obs0["cross_re"]
        series["cross_im"][0] = obs0["cross_im"]
        trace_drift_max = float(stats[_fastpath.STAT_TRACE_DRIFT])
        hermiticity_max = float(stats[_fastpath.STAT_HERM_MAX])
        if stats[_fastpath.STAT_TOP_FOCK] > TOP_FOCK_WARN:
            warnings.warn(
                f"population {stats[_fastpath.STAT_TOP_FOCK]:.2e} in the top photon level; "
                f"consider raising fock_cutoff above {params.fock_cutoff}",
                RuntimeWarning,
                stacklevel=2,
            )
        final = eng.unpack(t_final, y_final)
    else:
        y0 = eng.pack(initial)
        rhs = (
            eng.make_frozen_rhs(initial.motion.positions.copy())
            if freeze_motion
            else eng.rhs_moving
        )
        positions = np.empty((grid.size, n))
        momenta = np.empty((grid.size, n))
        series = {
            "e_kin": np.empty(grid.size),
            "photon_number": np.empty(grid.size),
            "excitation_total": np.empty(grid.size),
            "excitation_atoms": np.empty((grid.size, n)),
            "cross_re": np.empty((grid.size, npair)),
            "cross_im": np.empty((grid.size, npair)),
        }

        warned_top_fock = False
        trace_drift_max = 0.0
        hermiticity_max = 0.0

        def record(k: int, t: float, y: np.ndarray) -> None:
            nonlocal warned_top_fock, hermiticity_max
            nq = eng.quantum_size
            v = y[:nq]
            x = y[nq : nq + n].real
            q = y[nq + n :].real
            positions[k] = x
            momenta[k] = q
            obs = eng.observables_from(v, q)
            for key in ("e_kin", "photon_number", "excitation_total"):
                series[key][k] = obs[key]
            series["excitation_atoms"][k] = obs["excitation_atoms"]
            series["cross_re"][k] = obs["cross_re"]
            series["cross_im"][k] = obs["cross_im"]
            rho = v.reshape(eng.dim, eng.dim)
            hermiticity_max = max(hermiticity_max, float(np.abs(rho - rho.conj().T).max()))
            top = v[eng.top_fock_idx].real.sum()
            if top > TOP_FOCK_WARN and not warned_top_fock:
                warnings.warn(
                    f"population {top:.2e} in the top photon level at t={t:.4g}; "
                    f"consider raising fock_cutoff above {params.fock_cutoff}",
                    RuntimeWarning,
                    stacklevel=2,
                )
                warned_top_fock = True
            if recorder.callback is not None:
                recorder.callback(t, eng.unpack(t, y), obs)

        record(0, grid[0], y0)

        solver = RK45(rhs, initial.time, y0, t_bound=t_final, rtol=rtol, atol=atol)
        next_k = 1
        while solver.status == "running":
            msg = solver.step()
            if solver.status == "failed":
                raise IntegrationError(
                    f"step-size underflow at t={solver.t:.6g} (h={solver.h_abs:.3e}); "
                    f"the system appears stiff for rtol={rtol}, atol={atol}: {msg}"
                )
            trace_drift_max = max(trace_drift_max, _check_step(eng, solver.y, solver.t))
            if next_k < grid.size and grid[next_k] <= solver.t:
                dense = solver.dense_output()
                while next_k < grid.size and grid[next_k] <= solver.t:
                    record(next_k, grid[next_k], dense(grid[next_k]))
                    next_k += 1
        while next_k < grid.size:  # t_bound reached exactly between grid checks
            record(next_k, grid[next_k], solver.y)
            next_k += 1
        final = eng.unpack(solver.t, solver.y)

    if freeze_motion:
        positions[:] = initial.motion.positions
        momenta[:] = initial.motion.momenta
        final.motion = initial.motion.copy()

    meta = {
        "rtol": rtol,
        "atol": atol,
        "trace_drift_max": trace_drift_max,
        "hermiticity_max": hermiticity_max,
        "freeze_motion": freeze_motion,
        "method": "fast" if use_fast else "scipy",
        "max_abs_cross_im": float(np.abs(series["cross_im"]).max()) if npair else 0.0,
    }
    if trace_drift_max > 1e-8:
        warnings.warn(
            f"trace drift {trace_drift_max:.2e} exceeded 1e-8 (logged, not renormalized)",
            RuntimeWarning,
            stacklevel=2,
        )

    traj = _obs.Trajectory(
        times=grid,
        positions=positions,
        momenta=momenta,
        series=series,
        pair_index=list(eng.pairs),
        params=params,
        initial_momenta=initial.motion.momenta.copy(),
        final_state=final,
        meta=meta,
    )
    traj.stability = _obs.classify_stability(traj)
    return traj


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: "str | Path", state: CoupledState) -> None:
    """Full snapshot of a coupled state, readable by :func:`load_checkpoint`."""
    save_state(
        path,
        state.quantum,
        positions=state.motion.positions,
        momenta=state.motion.momenta,
        time=np.array(state.time),
    )


def load_checkpoint(path: "str | Path") -> CoupledState:
    quantum, extra = load_state(path)
    return CoupledState(
        quantum,
        MotionState(extra["positions"], extra["momenta"]),
        float(extra["time"]),
    )
