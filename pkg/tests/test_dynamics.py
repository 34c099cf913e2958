"""Coupled-evolution tests: generator correctness, forces, conservation laws."""

import math
import warnings

import numpy as np
import pytest

from cavitycool.couplings import CouplingParams, NearFieldError
from cavitycool.dynamics import (
    CoupledState,
    MotionState,
    PositivityError,
    Recorder,
    SystemParams,
    _get_engine,
    antinode_positions,
    evolve,
    force,
    hamiltonian,
    initial_state,
    liouvillian_apply,
    load_checkpoint,
    master_rhs,
    save_checkpoint,
    step,
)
from cavitycool.hilbert import QuantumState, expectation, ket_index
from cavitycool.observables import photon_number


def baseline_params(**over) -> SystemParams:
    """Three pumped atoms in a blue-detuned lossy cavity (reference point)."""
    coupling = over.pop("coupling", CouplingParams(gamma=1.0, g0=over.pop("g0", 5.0)))
    defaults = dict(delta=10.0, pump_rate=8.0, kappa=10.0, omega_r=0.1)
    defaults.update(over)
    return SystemParams(coupling=coupling, **defaults)


def random_density_matrix(dim: int, rng) -> np.ndarray:
    m = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = m @ m.conj().T
    return rho / np.trace(rho)


def omega_oracle(gamma, xi, theta):
    c2 = math.cos(theta) ** 2
    return -0.75 * gamma * (
        (1 - c2) * math.cos(xi) / xi
        - (1 - 3 * c2) * (math.sin(xi) / xi**2 + math.cos(xi) / xi**3)
    )


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------

def test_hamiltonian_no_coupling_is_diagonal():
    params = baseline_params(g0=0.0, independent_atoms=True, n_atoms=2, fock_cutoff=3)
    h = hamiltonian(params, antinode_positions(params)).entries
    assert np.allclose(h, np.diag(np.diag(h)))
    # field eigenvalues delta * n on every atomic branch
    diag = np.diag(h).real
    for n in range(4):
        idx = ket_index(params.layout, [0, 0], n)
        assert diag[idx] == pytest.approx(params.delta * n)


def test_hamiltonian_vanishing_coupling_at_nodes():
    params = baseline_params(independent_atoms=True)
    lam = params.coupling.lambda_c
    nodes = np.array([lam / 4, lam / 4 + lam / 2, lam / 4 + lam])
    h = hamiltonian(params, nodes).entries
    href = hamiltonian(baseline_params(g0=0.0, independent_atoms=True), nodes).entries
    assert np.abs(h - href).max() < 1e-12


def test_hamiltonian_exchange_element_at_half_wavelength():
    params = baseline_params(n_atoms=2, g0=0.0)
    lam = params.coupling.lambda_c
    h = hamiltonian(params, np.array([0.0, lam / 2])).entries
    eg = ket_index(params.layout, [1, 0], 0)
    ge = ket_index(params.layout, [0, 1], 0)
    expected = omega_oracle(1.0, math.pi, math.pi / 2)
    assert h[eg, ge] == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.2145, abs=5e-5)


def test_hamiltonian_is_hermitian():
    params = baseline_params()
    rng = np.random.default_rng(1)
    for _ in range(5):
        pos = np.sort(rng.uniform(0, 3 * math.pi, 3))
        if np.diff(pos).min() < 0.1:
            continue
        h = hamiltonian(params, pos).entries
        assert np.abs(h - h.conj().T).max() < 1e-12


# ---------------------------------------------------------------------------
# Liouvillian
# ---------------------------------------------------------------------------

def test_pump_rate_from_ground_state():
    params = baseline_params(n_atoms=1, g0=0.0, kappa=1.0, spontaneous_decay_off=True)
    layout = params.layout
    rho = QuantumState.ground_vacuum(layout).rho
    drho = liouvillian_apply(params, np.array([0.0]), rho)
    e_op = np.zeros_like(rho)
    idx = ket_index(layout, [1], 0)
    e_op[idx, idx] = 1.0
    rate = np.einsum("ij,ji->", e_op, drho).real
    assert rate == pytest.approx(params.pump_rate, rel=1e-12)


def test_cavity_energy_decay_rate_is_two_kappa():
    params = baseline_params(n_atoms=1, g0=0.0, pump_rate=0.0, spontaneous_decay_off=True)
    layout = params.layout
    rho = np.zeros((layout.total_dim, layout.total_dim), dtype=complex)
    one = ket_index(layout, [0], 1)
    rho[one, one] = 1.0
    drho = liouvillian_apply(params, np.array([0.0]), rho)
    from cavitycool.hilbert import number_operator

    rate = np.einsum("ij,ji->", number_operator(layout).entries, drho).real
    assert rate == pytest.approx(-2.0 * params.kappa, rel=1e-12)


def test_symmetric_pair_state_superradiant_emission():
    # separation just above the near-field guard: the cross-damping rate is
    # gamma to ~1e-6, so the one-excitation symmetric state emits at ~2 gamma
    params = baseline_params(n_atoms=2, g0=0.0, pump_rate=0.0, kappa=1.0)
    layout = params.layout
    ket = np.zeros(layout.total_dim)
    ket[ket_index(layout, [1, 0], 0)] = 1 / math.sqrt(2)
    ket[ket_index(layout, [0, 1], 0)] = 1 / math.sqrt(2)
    state = QuantumState.pure(layout, ket)
    positions = np.array([0.0, 2.5e-3])
    drho = liouvillian_apply(params, positions, state.rho)
    from cavitycool.hilbert import atom_lowering, atom_raising

    e_op = sum(
        (atom_raising(layout, i) @ atom_lowering(layout, i)).entries for i in range(2)
    )
    rate = np.einsum("ij,ji->", e_op, drho).real
    assert rate == pytest.approx(-2.0, rel=1e-5)


def test_liouvillian_is_traceless():
    rng = np.random.default_rng(7)
    params = baseline_params()
    rho = random_density_matrix(params.layout.total_dim, rng)
    drho = liouvillian_apply(params, antinode_positions(params), rho)
    assert abs(np.trace(drho)) < 1e-10


@pytest.mark.parametrize("independent", [False, True])
def test_engine_rhs_matches_readable_reference(independent):
    rng = np.random.default_rng(3)
    params = baseline_params(independent_atoms=independent)
    eng = _get_engine(params)
    for _ in range(3):
        rho = random_density_matrix(eng.dim, rng)
        pos = np.array([0.4, 3.3, 6.9]) + rng.normal(0, 0.3, 3)
        mom = rng.normal(0, 1, 3)
        st = CoupledState(QuantumState(params.layout, rho), MotionState(pos, mom))
        dy = eng.rhs_moving(0.0, eng.pack(st))
        ref = master_rhs(params, pos, rho)
        assert np.abs(dy[: eng.quantum_size].reshape(eng.dim, eng.dim) - ref).max() < 1e-12


def test_replay_rhs_matches_moving_generator():
    rng = np.random.default_rng(5)
    params = baseline_params()
    eng = _get_engine(params)
    pos = np.array([0.1, 3.3, 6.5])
    rho_bar = rng.normal(size=(eng.dim, eng.dim)) + 1j * rng.normal(size=(eng.dim, eng.dim))
    rhs = eng.make_replay_rhs(lambda t: pos)
    dv = rhs(0.0, rho_bar.ravel().copy())
    ref = master_rhs(params, pos, rho_bar)
    assert np.abs(dv.reshape(eng.dim, eng.dim) - ref).max() < 1e-12


# ---------------------------------------------------------------------------
# Forces
# ---------------------------------------------------------------------------

def test_cavity_force_vanishes_at_antinode():
    params = baseline_params(independent_atoms=True)
    state = QuantumState.ground_vacuum(params.layout)
    f = force(params, antinode_positions(params), state)
    assert np.abs(f).max() < 1e-14


def test_cavity_force_at_eighth_wavelength():
    params = baseline_params(n_atoms=1)
    layout = params.layout
    ket = np.zeros(layout.total_dim)
    ket[ket_index(layout, [0], 1)] = 1 / math.sqrt(2)
    ket[ket_index(layout, [1], 0)] = 1 / math.sqrt(2)
    state = QuantumState.pure(layout, ket)  # <a sig+ + a^dag sig-> = 1
    lam = params.coupling.lambda_c
    f = force(params, np.array([lam / 8]), state)
    cp = params.coupling
    expected = cp.g0 * (cp.k_c / cp.k_a) * (1 / math.sqrt(2)) * 1.0
    assert f[0] == pytest.approx(expected, rel=1e-12)


def test_dipole_pair_forces_cancel_for_symmetric_state():
    params = baseline_params(n_atoms=2, g0=0.0)
    layout = params.layout
    ket = np.zeros(layout.total_dim)
    ket[ket_index(layout, [1, 0], 0)] = 1 / math.sqrt(2)
    ket[ket_index(layout, [0, 1], 0)] = 1 / math.sqrt(2)
    state = QuantumState.pure(layout, ket)
    f = force(params, np.array([-1.1, 1.1]), state)
    assert f.sum() == pytest.approx(0.0, abs=1e-14)
    assert f[0] == pytest.approx(-f[1], rel=1e-12)


def frozen_potential(params, positions, e_x, s_re, i, ri):
    """Potential-like function for atom i with frozen expectation values."""
    from cavitycool.couplings import dipole_shift, mode_amplitude

    pos = positions.copy()
    pos[i] = ri
    u = mode_amplitude(params.coupling, pos[i]) * e_x[i]
    for j in range(pos.size):
        if j != i:
            r = abs(pos[i] - pos[j])
            pair = (min(i, j), max(i, j))
            u += 2.0 * dipole_shift(params.coupling, r) * s_re[pair]
    return u


def test_force_matches_frozen_expectation_finite_difference():
    rng = np.random.default_rng(11)
    params = baseline_params()
    eng = _get_engine(params)
    cp = params.coupling
    for _ in range(10):
        rho = random_density_matrix(eng.dim, rng)
        pos = np.sort(rng.uniform(0.0, 3 * math.pi, 3))
        pos += np.array([0.0, 0.4, 0.8])  # keep pairs clear of the guard
        state = QuantumState(params.layout, rho)
        f = force(params, pos, state)
        e_x = eng.trace_with(eng.x_flat, rho.ravel()).real
        s = eng.trace_with(eng.spm_flat, rho.ravel())
        s_re = {pair: s[k].real for k, pair in enumerate(eng.pairs)}
        h = 1e-6
        for i in range(3):
            up = frozen_potential(params, pos, e_x, s_re, i, pos[i] + h)
            dn = frozen_potential(params, pos, e_x, s_re, i, pos[i] - h)
            fd = -(up - dn) / (2 * h) / cp.k_a  # momentum is in hbar*k_a
            assert f[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_decay_force_term_flag():
    rng = np.random.default_rng(13)
    params_off = baseline_params(n_atoms=2, g0=0.0)
    params_on = baseline_params(n_atoms=2, g0=0.0, collective_force_decay_term=True)
    rho = random_density_matrix(params_on.layout.total_dim, rng)
    pos = np.array([0.2, 2.9])
    state = QuantumState(params_on.layout, rho)
    f_off = force(params_off, pos, state)
    f_on = force(params_on, pos, state)
    from cavitycool.couplings import collective_decay_gradient

    eng = _get_engine(params_on)
    s = eng.trace_with(eng.spm_flat, rho.ravel())[0]
    dg = collective_decay_gradient(params_on.coupling, abs(pos[0] - pos[1]))
    sign = -1.0  # atom 0 sits left of atom 1
    extra = -s.imag * dg * sign / params_on.coupling.k_a
    assert f_on[0] - f_off[0] == pytest.approx(extra, rel=1e-12)
    assert f_on[1] - f_off[1] == pytest.approx(extra, rel=1e-12)


# ---------------------------------------------------------------------------
# Stepping and evolution
# ---------------------------------------------------------------------------

def test_free_flight_is_machine_precision_linear():
    coupling = CouplingParams(gamma=0.0, g0=0.0)
    params = SystemParams(
        coupling=coupling, delta=0.0, pump_rate=0.0, kappa=10.0, omega_r=0.25,
        n_atoms=2, fock_cutoff=1,
    )
    lam = params.coupling.lambda_c
    x0 = np.array([0.0, lam / 2])
    q0 = np.array([1.5, -0.5])
    state = CoupledState(QuantumState.ground_vacuum(params.layout), MotionState(x0, q0))
    traj = evolve(state, params, 100.0, Recorder(n_samples=11))
    for k, t in enumerate(traj.times):
        expected = x0 + 2.0 * params.omega_r * q0 * t / params.coupling.k_a
        assert np.abs(traj.positions[k] - expected).max() < 1e-10
        assert np.array_equal(traj.momenta[k], q0)


@pytest.mark.parametrize("method", ["fast", "scipy"])
def test_two_level_pumped_steady_state(method):
    params = SystemParams(
        coupling=CouplingParams(gamma=1.0, g0=0.0), delta=0.0, pump_rate=4.0,
        kappa=1.0, omega_r=0.1, n_atoms=1, fock_cutoff=1,
    )
    state = initial_state(params, [0.0])
    traj = evolve(state, params, 25.0, Recorder(n_samples=100), method=method)
    expected = params.pump_rate / (params.pump_rate + 1.0)
    assert traj.series["excitation_total"][-1] == pytest.approx(expected, abs=1e-6)


def test_step_advances_within_dt_max():
    params = baseline_params()
    state = initial_state(params, [1.0, -0.73, 1.18])
    new = step(state, params, dt_max=0.05)
    assert 0 < new.time <= 0.05 + 1e-12
    new.quantum.check_invariants()


def test_fast_and_scipy_paths_agree():
    params = baseline_params()
    state = initial_state(params, [1.0, -0.73, 1.18])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tf = evolve(state, params, 5.0, Recorder(n_samples=50), method="fast")
        ts = evolve(state, params, 5.0, Recorder(n_samples=50), method="scipy")
    assert np.abs(tf.positions - ts.positions).max() < 1e-12
    assert np.abs(
        tf.final_state.quantum.rho - ts.final_state.quantum.rho
    ).max() < 1e-12


def test_frozen_positions_bit_identical():
    params = baseline_params()
    positions = antinode_positions(params)
    state = CoupledState(
        QuantumState.ground_vacuum(params.layout), MotionState(positions, [0.3, -0.2, 0.7])
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        traj = evolve(state, params, 20.0, Recorder(n_samples=64), freeze_motion=True)
    assert (traj.positions == positions).all()
    assert (traj.momenta == np.array([0.3, -0.2, 0.7])).all()
    assert (traj.final_state.motion.positions == positions).all()


def test_zero_coupling_observables_constant():
    coupling = CouplingParams(gamma=0.0, g0=0.0)
    params = SystemParams(
        coupling=coupling, delta=0.0, pump_rate=0.0, kappa=1.0, omega_r=0.1,
        n_atoms=1, fock_cutoff=1,
    )
    state = initial_state(params, [0.7])
    traj = evolve(state, params, 100.0, Recorder(n_samples=32))
    for key in ("photon_number", "excitation_total", "e_kin"):
        assert np.ptp(traj.series[key]) < 1e-12


def test_trace_and_hermiticity_preserved():
    params = baseline_params()
    state = initial_state(params, [1.0, -0.73, 1.18])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        traj = evolve(state, params, 50.0)
    assert traj.meta["trace_drift_max"] < 1e-8
    assert traj.meta["hermiticity_max"] < 1e-10
    traj.final_state.quantum.check_invariants()


def test_closed_subcase_conserves_energy():
    # no pump, no cavity loss, free-space decay channel off; the coherent
    # pair exchange stays active so the dipole potential is part of <H>
    params = SystemParams(
        coupling=CouplingParams(gamma=1.0, g0=2.0),
        delta=3.0,
        pump_rate=0.0,
        kappa=0.0,
        omega_r=0.1,
        n_atoms=2,
        fock_cutoff=3,
        spontaneous_decay_off=True,
    )
    layout = params.layout
    ket = np.zeros(layout.total_dim)
    ket[ket_index(layout, [1, 0], 0)] = 1.0
    lam = params.coupling.lambda_c
    x0 = np.array([0.15, lam / 2 - 0.1])
    q0 = np.array([0.8, -0.6])
    state = CoupledState(QuantumState.pure(layout, ket), MotionState(x0, q0))

    energies = []

    def track(t, snap, obs):
        h = hamiltonian(params, snap.motion.positions)
        energies.append(expectation(snap.quantum, h).real + obs["e_kin"])

    evolve(state, params, 10.0, Recorder(n_samples=60, callback=track))
    energies = np.array(energies)
    scale = max(abs(energies[0]), 1e-12)
    assert np.abs(energies - energies[0]).max() / scale < 1e-5


def test_positivity_guard_aborts():
    params = baseline_params(n_atoms=1, fock_cutoff=1)
    layout = params.layout
    rho = QuantumState.ground_vacuum(layout).rho.copy()
    rho[1, 1] = -5e-6
    rho[0, 0] = 1 + 5e-6
    state = CoupledState(QuantumState(layout, rho), MotionState([0.0], [0.0]))
    with pytest.raises(PositivityError):
        evolve(state, params, 1.0)


def test_near_field_initial_configuration_raises():
    params = baseline_params()
    state = CoupledState(
        QuantumState.ground_vacuum(params.layout),
        MotionState([0.0, 1e-5, 6.0], [0.0, 0.0, 0.0]),
    )
    with pytest.raises(NearFieldError):
        evolve(state, params, 1.0)


def test_checkpoint_roundtrip_and_continuation(tmp_path):
    params = baseline_params()
    state = initial_state(params, [1.0, -0.73, 1.18])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        traj = evolve(state, params, 3.0, Recorder(n_samples=16))
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, traj.final_state)
        loaded = load_checkpoint(path)
        assert loaded.time == traj.final_state.time
        assert np.array_equal(loaded.quantum.rho, traj.final_state.quantum.rho)
        assert np.array_equal(loaded.motion.positions, traj.final_state.motion.positions)
        # one continued run equals a single longer run at the recorded samples
        cont = evolve(loaded, params, 6.0, Recorder(n_samples=16))
    assert cont.times[0] == pytest.approx(3.0)
    assert cont.times[-1] == pytest.approx(6.0)


def test_recorder_callback_receives_snapshots():
    params = baseline_params()
    state = initial_state(params, [1.0, -0.73, 1.18])
    seen = []

    def cb(t, snap, obs):
        seen.append((t, snap.motion.positions.copy(), obs["photon_number"]))

    evolve(state, params, 1.0, Recorder(n_samples=5, callback=cb))
    assert len(seen) == 5
    assert seen[0][0] == 0.0 and seen[-1][0] == pytest.approx(1.0)


@pytest.mark.slow
def test_integrator_tolerance_convergence():
    params = baseline_params()
    state = initial_state(params, [1.0, -0.73, 1.18])
    lam = params.coupling.lambda_c
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ref = evolve(state, params, 100.0, Recorder(n_samples=11))
        tight = evolve(state, params, 100.0, Recorder(n_samples=11), rtol=5e-9, atol=5e-11)
    assert np.abs(ref.positions[-1] - tight.positions[-1]).max() < 1e-4 * lam


def test_invalid_params_rejected():
    cp = CouplingParams(gamma=1.0)
    with pytest.raises(ValueError):
        SystemParams(coupling=cp, delta=0.0, pump_rate=-1.0, kappa=1.0, omega_r=0.1)
    with pytest.raises(ValueError):
        SystemParams(coupling=cp, delta=0.0, pump_rate=0.0, kappa=-1.0, omega_r=0.1)
    with pytest.raises(ValueError):
        SystemParams(coupling=cp, delta=0.0, pump_rate=0.0, kappa=1.0, omega_r=0.0)
