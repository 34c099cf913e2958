"""Compiled inner loop: Dormand-Prince 5(4) stepping fused with the
master-equation right-hand side.

The Python-level integrator in :mod:`cavitycool.dynamics` is the reference
implementation; this module reimplements the identical algorithm (same
tableau, same error control, same dense-output interpolant) with numba so
that long parameter scans are tractable.  The right-hand side applies the
generator as ``-i (H_eff rho - rho H_eff^dag)`` plus gather/scatter
"sandwich" terms, where ``H_eff`` collects the Hamiltonian and every
anticommutator part and all jump sandwiches act through precomputed index
tables.

Cross-agreement between this path and the scipy-based path is asserted in
the test suite; either can be selected through ``evolve(..., method=...)``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Dormand-Prince 5(4) tableau, identical to scipy.integrate.RK45.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.zeros((7, 6))
_A[1, 0] = 1 / 5
_A[2, :2] = [3 / 40, 9 / 40]
_A[3, :3] = [44 / 45, -56 / 15, 32 / 9]
_A[4, :4] = [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]
_A[5, :5] = [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]
_A[6, :6] = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]
_B = _A[6].copy()
_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)
_P = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0

STATUS_OK = 0
STATUS_UNDERFLOW = 1
STATUS_POSITIVITY = 2
STATUS_NONFINITE = 3

# statistics slots returned by the integrator
STAT_NSTEPS = 0
STAT_NRHS = 1
STAT_TRACE_DRIFT = 2
STAT_HERM_MAX = 3
STAT_TOP_FOCK = 4
STAT_MIN_DIAG = 5
STAT_T_STOP = 6
STAT_FAIL_VALUE = 7


@njit(cache=True, fastmath=False)
def _pair_omega(gamma, w_perp, w_par, xi):
    s = np.sin(xi)
    c = np.cos(xi)
    return -0.75 * gamma * (w_perp * c / xi - w_par * (s / xi**2 + c / xi**3))


@njit(cache=True, fastmath=False)
def _pair_gamma(gamma, w_perp, w_par, xi):
    if xi < 1e-3:
        t_perp = 1.0 - xi**2 / 6.0 + xi**4 / 120.0
        t_par = -1.0 / 3.0 + xi**2 / 30.0 - xi**4 / 840.0
    else:
        s = np.sin(xi)
        c = np.cos(xi)
        t_perp = s / xi
        t_par = c / xi**2 - s / xi**3
    return 1.5 * gamma * (w_perp * t_perp + w_par * t_par)


@njit(cache=True, fastmath=False)
def _pair_domega(gamma, w_perp, w_par, xi, k_a):
    s = np.sin(xi)
    c = np.cos(xi)
    d_perp = -s / xi - c / xi**2
    d_par = (c / xi**2 - 2.0 * s / xi**3) + (-s / xi**3 - 3.0 * c / xi**4)
    return -0.75 * gamma * (w_perp * d_perp - w_par * d_par) * k_a


@njit(cache=True, fastmath=False)
def _pair_dgamma(gamma, w_perp, w_par, xi, k_a):
    if xi < 1e-3:
        d_perp = -xi / 3.0 + xi**3 / 30.0
        d_par = xi / 15.0 - xi**3 / 210.0
    else:
        s = np.sin(xi)
        c = np.cos(xi)
        d_perp = c / xi - s / xi**2
        d_par = (-s / xi**2 - 2.0 * c / xi**3) - (c / xi**3 - 3.0 * s / xi**4)
    return 1.5 * gamma * (w_perp * d_perp + w_par * d_par) * k_a


@njit(cache=True, fastmath=False)
def _rhs(
    t,
    y,
    dy,
    heff_base,
    heff,
    hb_ptr,
    hb_col,
    xb_row,
    xb_col,
    xb_val,
    xb_ptr,
    pb_row,
    pb_col,
    pb_val,
    pb_ptr,
    swf_dst,
    swf_src,
    swf_val,
    swp_dst,
    swp_src,
    swp_val,
    swp_ptr,
    pair_i,
    pair_j,
    ex_idx,
    ex_val,
    ex_ptr,
    sp_idx,
    sp_val,
    sp_ptr,
    dim,
    n_atoms,
    g0,
    k_a,
    k_c,
    gamma,
    w_perp,
    w_par,
    omega_r,
    freeze,
    independent,
    with_motion,
    force_decay,
):
    nq = dim * dim
    n_pairs = pair_i.size

    om = np.zeros(n_pairs)
    gm = np.zeros(n_pairs)
    dom = np.zeros(n_pairs)
    dgm = np.zeros(n_pairs)
    sgn = np.zeros(n_pairs)
    if not freeze and not independent and n_pairs > 0:
        for p in range(n_pairs):
            diff = y[nq + pair_i[p]].real - y[nq + pair_j[p]].real
            r = abs(diff)
            xi = k_a * r
            if xi <= 1e-3:
                raise ValueError(
                    "atoms closer than the near-field guard; the 1/r^3 dipole "
                    "shift is unphysical for overlapping atoms"
                )
            sgn[p] = 1.0 if diff >= 0 else -1.0
            om[p] = _pair_omega(gamma, w_perp, w_par, xi)
            gm[p] = _pair_gamma(gamma, w_perp, w_par, xi)
            if with_motion:
                dom[p] = _pair_domega(gamma, w_perp, w_par, xi, k_a)
                if force_decay:
                    dgm[p] = _pair_dgamma(gamma, w_perp, w_par, xi, k_a)

    # effective Hamiltonian: fixed part + coupling and pair scatter updates
    for r in range(dim):
        for c in range(dim):
            heff[r, c] = heff_base[r, c]
    if not freeze:
        for i in range(n_atoms):
            gi = g0 * np.cos(k_c * y[nq + i].real)
            for m in range(xb_ptr[i], xb_ptr[i + 1]):
                heff[xb_row[m], xb_col[m]] += gi * xb_val[m]
        for p in range(n_pairs):
            coef = complex(om[p], -0.5 * gm[p])
            for m in range(pb_ptr[p], pb_ptr[p + 1]):
                heff[pb_row[m], pb_col[m]] += coef * pb_val[m]

    # -i (H_eff rho - rho H_eff^dag) through the precomputed sparsity pattern
    rho = y[:nq].reshape(dim, dim)
    rho_t = np.empty((dim, dim), dtype=np.complex128)
    for r in range(dim):
        for c in range(dim):
            rho_t[c, r] = rho[r, c]
    a_mat = np.zeros((dim, dim), dtype=np.complex128)
    bt_mat = np.zeros((dim, dim), dtype=np.complex128)
    for r in range(dim):
        for m in range(hb_ptr[r], hb_ptr[r + 1]):
            c = hb_col[m]
            v = heff[r, c]
            if v.real != 0.0 or v.imag != 0.0:
                vc = np.conj(v)
                for k in range(dim):
                    a_mat[r, k] += v * rho[c, k]
                    bt_mat[r, k] += vc * rho_t[c, k]
    for r in range(dim):
        base = r * dim
        for c in range(dim):
            d = a_mat[r, c] - bt_mat[c, r]
            dy[base + c] = complex(d.imag, -d.real)  # -i * d

    for m in range(swf_dst.size):
        dy[swf_dst[m]] += swf_val[m] * y[swf_src[m]]
    if swp_ptr.size > 1:
        for p in range(n_pairs):
            w = gm[p]
            if w != 0.0:
                for m in range(swp_ptr[p], swp_ptr[p + 1]):
                    dy[swp_dst[m]] += w * swp_val[m] * y[swp_src[m]]

    if with_motion:
        if freeze:
            for i in range(2 * n_atoms):
                dy[nq + i] = 0.0
        else:
            for i in range(n_atoms):
                dy[nq + i] = 2.0 * omega_r * y[nq + n_atoms + i].real / k_a
            for i in range(n_atoms):
                ex = 0.0
                for m in range(ex_ptr[i], ex_ptr[i + 1]):
                    ex += (ex_val[m] * y[ex_idx[m]]).real
                dy[nq + n_atoms + i] = g0 * (k_c / k_a) * np.sin(k_c * y[nq + i].real) * ex
            if not independent:
                inv_ka = 1.0 / k_a
                for p in range(n_pairs):
                    sre = 0.0
                    sim = 0.0
                    for m in range(sp_ptr[p], sp_ptr[p + 1]):
                        val = sp_val[m] * y[sp_idx[m]]
                        sre += val.real
                        sim += val.imag
                    fc = -2.0 * inv_ka * sre * dom[p] * sgn[p]
                    dy[nq + n_atoms + pair_i[p]] += fc
                    dy[nq + n_atoms + pair_j[p]] -= fc
                    if force_decay:
                        fd = -inv_ka * sim * dgm[p] * sgn[p]
                        dy[nq + n_atoms + pair_i[p]] += fd
                        dy[nq + n_atoms + pair_j[p]] += fd
    return 0


@njit(cache=True, fastmath=False)
def _error_norm(err, y0, y1, rtol, atol):
    total = 0.0
    for i in range(err.size):
        sc = atol + rtol * max(abs(y0[i]), abs(y1[i]))
        e = abs(err[i]) / sc
        total += e * e
    return np.sqrt(total / err.size)


@njit(cache=True, fastmath=False)
def integrate(
    y,
    t0,
    t_bound,
    rtol,
    atol,
    grid,
    rec_pos,
    rec_mom,
    rec_scalar,
    rec_exc,
    rec_cross_re,
    rec_cross_im,
    heff_base,
    hb_ptr,
    hb_col,
    xb_row,
    xb_col,
    xb_val,
    xb_ptr,
    pb_row,
    pb_col,
    pb_val,
    pb_ptr,
    swf_dst,
    swf_src,
    swf_val,
    swp_dst,
    swp_src,
    swp_val,
    swp_ptr,
    pair_i,
    pair_j,
    ex_idx,
    ex_val,
    ex_ptr,
    sp_idx,
    sp_val,
    sp_ptr,
    ee_idx,
    ee_val,
    ee_ptr,
    nn_idx,
    nn_val,
    top_idx,
    dim,
    n_atoms,
    g0,
    k_a,
    k_c,
    gamma,
    w_perp,
    w_par,
    omega_r,
    freeze,
    independent,
    with_motion,
    force_decay,
    positivity_abort,
    top_fock_warn,
    stats,
):
    """Adaptive 5(4) integration with uniform-grid recording.

    ``rec_scalar`` columns: kinetic energy, photon number, total excitation.
    Returns a status code; ``y`` holds the final state, ``stats`` the
    diagnostics.  Recording starts at ``grid[1]`` (the caller records the
    initial sample).
    """
    ny = y.size
    nq = dim * dim

    heff = np.empty((dim, dim), dtype=np.complex128)
    k_stages = np.empty((7, ny), dtype=np.complex128)
    y_stage = np.empty(ny, dtype=np.complex128)
    y_new = np.empty(ny, dtype=np.complex128)
    err = np.empty(ny, dtype=np.complex128)
    y_sample = np.empty(ny, dtype=np.complex128)
    wvec = np.empty(7)

    t = t0
    n_rhs = 0
    n_steps = 0
    trace_drift = 0.0
    herm_max = 0.0
    top_seen = 0.0
    min_diag_seen = 0.0

    _rhs(
        t, y, k_stages[0], heff_base, heff, hb_ptr, hb_col,
        xb_row, xb_col, xb_val, xb_ptr, pb_row, pb_col, pb_val, pb_ptr,
        swf_dst, swf_src, swf_val, swp_dst, swp_src, swp_val, swp_ptr,
        pair_i, pair_j, ex_idx, ex_val, ex_ptr, sp_idx, sp_val, sp_ptr,
        dim, n_atoms, g0, k_a, k_c, gamma, w_perp, w_par, omega_r,
        freeze, independent, with_motion, force_decay,
    )
    n_rhs += 1

    # initial step size (same heuristic as the reference implementation)
    d0 = 0.0
    d1 = 0.0
    for i in range(ny):
        sc = atol + rtol * abs(y[i])
        d0 += (abs(y[i]) / sc) ** 2
        d1 += (abs(k_stages[0, i]) / sc) ** 2
    d0 = np.sqrt(d0 / ny)
    d1 = np.sqrt(d1 / ny)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    for i in range(ny):
        y_stage[i] = y[i] + h0 * k_stages[0, i]
    _rhs(
        t + h0, y_stage, k_stages[1], heff_base, heff, hb_ptr, hb_col,
        xb_row, xb_col, xb_val, xb_ptr, pb_row, pb_col, pb_val, pb_ptr,
        swf_dst, swf_src, swf_val, swp_dst, swp_src, swp_val, swp_ptr,
        pair_i, pair_j, ex_idx, ex_val, ex_ptr, sp_idx, sp_val, sp_ptr,
        dim, n_atoms, g0, k_a, k_c, gamma, w_perp, w_par, omega_r,
        freeze, independent, with_motion, force_decay,
    )
    n_rhs += 1
    d2 = 0.0
    for i in range(ny):
        sc = atol + rtol * abs(y[i])
        d2 += (abs(k_stages[1, i] - k_stages[0, i]) / sc) ** 2
    d2 = np.sqrt(d2 / ny) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    h = min(100.0 * h0, h1)
    h = min(h, t_bound - t0)

    next_k = 1
    step_rejected = False

    while t < t_bound:
        min_step = 10.0 * abs(np.nextafter(t, np.inf) - t)
        if h < min_step:
            h = min_step

        # six new stages (K[0] holds the FSAL derivative)
        accepted = False
        t_new = t
        while not accepted:
            t_new = t + h
            if t_new > t_bound:
                t_new = t_bound
            h = t_new - t
            for s in range(1, 7):
                for i in range(ny):
                    y_stage[i] = y[i]
                for m in range(s):
                    w = h * _A[s, m]
                    if w != 0.0:
                        for i in range(ny):
                            y_stage[i] += w * k_stages[m, i]
                t_s = t + _C[s] * h
                if s == 6:
                    for i in range(ny):
                        y_new[i] = y_stage[i]
                _rhs(
                    t_s, y_stage, k_stages[s], heff_base, heff, hb_ptr, hb_col,
                    xb_row, xb_col, xb_val, xb_ptr, pb_row, pb_col, pb_val, pb_ptr,
                    swf_dst, swf_src, swf_val, swp_dst, swp_src, swp_val, swp_ptr,
                    pair_i, pair_j, ex_idx, ex_val, ex_ptr, sp_idx, sp_val, sp_ptr,
                    dim, n_atoms, g0, k_a, k_c, gamma, w_perp, w_par, omega_r,
                    freeze, independent, with_motion, force_decay,
                )
                n_rhs += 1
            for i in range(ny):
                err[i] = 0.0
            for m in range(7):
                w = h * _E[m]
                if w != 0.0:
                    for i in range(ny):
                        err[i] += w * k_stages[m, i]
            norm = _error_norm(err, y, y_new, rtol, atol)
            if norm < 1.0:
                if norm == 0.0:
                    factor = MAX_FACTOR
                else:
                    factor = min(MAX_FACTOR, SAFETY * norm**-0.2)
                if step_rejected:
                    factor = min(1.0, factor)
                accepted = True
                step_rejected = False
            else:
                h *= max(MIN_FACTOR, SAFETY * norm**-0.2)
                step_rejected = True
                if h < min_step:
                    stats[STAT_T_STOP] = t
                    return STATUS_UNDERFLOW

        n_steps += 1

        # dense-output recording for grid points inside (t, t_new]
        while next_k < grid.size and grid[next_k] <= t_new:
            theta = (grid[next_k] - t) / h
            for s in range(7):
                acc = 0.0
                tp = theta
                for j in range(4):
                    acc += _P[s, j] * tp
                    tp *= theta
                wvec[s] = acc
            for i in range(ny):
                y_sample[i] = y[i]
            for s in range(7):
                w = h * wvec[s]
                if w != 0.0:
                    for i in range(ny):
                        y_sample[i] += w * k_stages[s, i]
            _record(
                next_k, y_sample, rec_pos, rec_mom, rec_scalar, rec_exc,
                rec_cross_re, rec_cross_im, ee_idx, ee_val, ee_ptr, nn_idx, nn_val,
                sp_idx, sp_val, sp_ptr, dim, n_atoms, omega_r,
            )
            # hermiticity and top-level population monitored at samples
            hmax = 0.0
            for r in range(dim):
                for c in range(r, dim):
                    dv = y_sample[r * dim + c] - np.conj(y_sample[c * dim + r])
                    m = abs(dv)
                    if m > hmax:
                        hmax = m
            if hmax > herm_max:
                herm_max = hmax
            tp_pop = 0.0
            for m in range(top_idx.size):
                tp_pop += y_sample[top_idx[m]].real
            if tp_pop > top_seen:
                top_seen = tp_pop
            next_k += 1

        # cheap per-step guards on the accepted state
        tr = 0.0
        mind = np.inf
        for r in range(dim):
            dv = y_new[r * dim + r].real
            tr += dv
            if dv < mind:
                mind = dv
        dev = abs(tr - 1.0)
        if dev > trace_drift:
            trace_drift = dev
        if mind < min_diag_seen:
            min_diag_seen = mind
        if mind < -positivity_abort:
            stats[STAT_T_STOP] = t_new
            stats[STAT_FAIL_VALUE] = mind
            return STATUS_POSITIVITY
        if with_motion:
            ok = True
            for i in range(2 * n_atoms):
                v = y_new[nq + i]
                if not (np.isfinite(v.real) and np.isfinite(v.imag)):
                    ok = False
            if not ok:
                stats[STAT_T_STOP] = t_new
                return STATUS_NONFINITE

        for i in range(ny):
            y[i] = y_new[i]
            k_stages[0, i] = k_stages[6, i]
        t = t_new
        h = min(h * factor, np.inf)

    stats[STAT_NSTEPS] = n_steps
    stats[STAT_NRHS] = n_rhs
    stats[STAT_TRACE_DRIFT] = trace_drift
    stats[STAT_HERM_MAX] = herm_max
    stats[STAT_TOP_FOCK] = top_seen
    stats[STAT_MIN_DIAG] = min_diag_seen
    stats[STAT_T_STOP] = t
    return STATUS_OK


@njit(cache=True, fastmath=False)
def _record(
    k,
    y,
    rec_pos,
    rec_mom,
    rec_scalar,
    rec_exc,
    rec_cross_re,
    rec_cross_im,
    ee_idx,
    ee_val,
    ee_ptr,
    nn_idx,
    nn_val,
    sp_idx,
    sp_val,
    sp_ptr,
    dim,
    n_atoms,
    omega_r,
):
    nq = dim * dim
    ekin = 0.0
    for i in range(n_atoms):
        rec_pos[k, i] = y[nq + i].real
        q = y[nq + n_atoms + i].real
        rec_mom[k, i] = q
        ekin += q * q
    rec_scalar[k, 0] = omega_r * ekin
    nph = 0.0
    for m in range(nn_idx.size):
        nph += (nn_val[m] * y[nn_idx[m]]).real
    rec_scalar[k, 1] = nph
    tot = 0.0
    for i in range(n_atoms):
        e = 0.0
        for m in range(ee_ptr[i], ee_ptr[i + 1]):
            e += (ee_val[m] * y[ee_idx[m]]).real
        rec_exc[k, i] = e
        tot += e
    rec_scalar[k, 2] = tot
    n_pairs = sp_ptr.size - 1
    for p in range(n_pairs):
        sre = 0.0
        sim = 0.0
        for m in range(sp_ptr[p], sp_ptr[p + 1]):
            val = sp_val[m] * y[sp_idx[m]]
            sre += val.real
            sim += val.imag
        rec_cross_re[k, p] = sre
        rec_cross_im[k, p] = sim
