"""Position-dependent couplings: cavity mode function and vacuum-mediated
dipole-dipole kernels.

Two identical dipoles a distance ``r`` apart exchange excitation coherently
at a rate ``omega(r)`` and decay collectively with a cross-damping rate
``gamma(r)``; both kernels depend on the dimensionless separation
``xi = k_a * r`` and on the angle ``theta`` between the dipole moments and
the separation vector.  With all motion along the cavity axis and the
dipoles perpendicular to it, ``theta = pi/2`` for every pair.

The coherent kernel diverges like ``1/xi**3`` at contact, which is
unphysical for overlapping atoms; separations below ``r_min = 1e-3 / k_a``
raise :class:`NearFieldError` instead of silently clamping.  The collective
decay kernel is finite everywhere and is evaluated by a series expansion
below ``xi = 1e-3`` where the closed form loses digits to cancellation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

#: Dimensionless separation below which the decay kernel switches to its series.
SERIES_SWITCH_XI = 1e-3

#: Dimensionless separation below which the coherent kernel is refused.
NEAR_FIELD_XI = 1e-3


class NearFieldError(ValueError):
    """Separation below the near-field guard where the 1/r^3 kernel is unphysical."""


@dataclass(frozen=True)
class CouplingParams:
    """Rates and geometry entering all position-dependent couplings.

    Parameters
    ----------
    gamma:
        Atomic linewidth; the unit all other rates are naturally quoted in.
    g0:
        Peak atom-cavity coupling at a field antinode.
    k_a:
        Wavenumber of the atomic transition.
    k_c:
        Wavenumber of the cavity mode; defaults to ``k_a``.  Kept distinct
        because the detunings of interest leave the fractional difference
        irrelevant at optical frequencies but the code never assumes it.
    theta:
        Angle between the transition dipoles and the interatomic separation
        vector (radians).  A single global value; 1D motion keeps all
        separation vectors along the axis.
    """

    gamma: float = 1.0
    g0: float = 0.0
    k_a: float = 1.0
    k_c: float | None = None
    theta: float = math.pi / 2

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.g0 < 0:
            raise ValueError(f"g0 must be >= 0, got {self.g0}")
        if self.k_a <= 0:
            raise ValueError(f"k_a must be > 0, got {self.k_a}")
        if self.k_c is None:
            object.__setattr__(self, "k_c", self.k_a)
        elif self.k_c <= 0:
            raise ValueError(f"k_c must be > 0, got {self.k_c}")

    @property
    def lambda_c(self) -> float:
        """Cavity wavelength 2*pi / k_c."""
        return 2.0 * math.pi / self.k_c

    @property
    def r_min(self) -> float:
        """Smallest separation accepted by the coherent dipole kernel."""
        return NEAR_FIELD_XI / self.k_a


@dataclass
class CouplingMatrices:
    """Pairwise coupling rates for one atomic configuration.

    ``omega`` has a zero diagonal (no self energy shift); ``gamma_mat`` has
    the single-atom linewidth on the diagonal.
    """

    omega: np.ndarray
    gamma_mat: np.ndarray


def mode_amplitude(params: CouplingParams, r: "float | np.ndarray") -> "float | np.ndarray":
    """Cavity coupling at position ``r``: ``g0 * cos(k_c * r)``."""
    return params.g0 * np.cos(params.k_c * r)


def _angle_weights(theta: float) -> "tuple[float, float]":
    c2 = math.cos(theta) ** 2
    return 1.0 - c2, 1.0 - 3.0 * c2


def dipole_shift(params: CouplingParams, r_ij: float) -> float:
    """Coherent excitation-exchange rate for a pair at separation ``r_ij``."""
    xi = params.k_a * r_ij
    if xi <= NEAR_FIELD_XI:
        raise NearFieldError(
            f"separation {r_ij!r} gives k_a*r = {xi:.3e} <= {NEAR_FIELD_XI}; the "
            "near-field 1/r^3 shift is unphysical for overlapping atoms"
        )
    w_perp, w_par = _angle_weights(params.theta)
    return (
        -0.75
        * params.gamma
        * (
            w_perp * math.cos(xi) / xi
            - w_par * (math.sin(xi) / xi**2 + math.cos(xi) / xi**3)
        )
    )


def dipole_shift_gradient(params: CouplingParams, r_ij: float) -> float:
    """Analytic derivative ``d omega / d r`` of :func:`dipole_shift`."""
    xi = params.k_a * r_ij
    if xi <= NEAR_FIELD_XI:
        raise NearFieldError(
            f"separation {r_ij!r} gives k_a*r = {xi:.3e} <= {NEAR_FIELD_XI}; the "
            "near-field 1/r^3 shift is unphysical for overlapping atoms"
        )
    w_perp, w_par = _angle_weights(params.theta)
    s, c = math.sin(xi), math.cos(xi)
    d_perp = -s / xi - c / xi**2
    d_par = (c / xi**2 - 2.0 * s / xi**3) + (-s / xi**3 - 3.0 * c / xi**4)
    return -0.75 * params.gamma * (w_perp * d_perp - w_par * d_par) * params.k_a


def collective_decay(params: CouplingParams, r_ij: float) -> float:
    """Cross-damping rate for a pair at separation ``r_ij``; equals ``gamma`` at contact."""
    if r_ij < 0:
        raise ValueError(f"separation must be >= 0, got {r_ij}")
    xi = params.k_a * r_ij
    w_perp, w_par = _angle_weights(params.theta)
    if xi < SERIES_SWITCH_XI:
        # sin(xi)/xi and cos(xi)/xi^2 - sin(xi)/xi^3 expanded to O(xi^6).
        t_perp = 1.0 - xi**2 / 6.0 + xi**4 / 120.0
        t_par = -1.0 / 3.0 + xi**2 / 30.0 - xi**4 / 840.0
    else:
        s, c = math.sin(xi), math.cos(xi)
        t_perp = s / xi
        t_par = c / xi**2 - s / xi**3
    return 1.5 * params.gamma * (w_perp * t_perp + w_par * t_par)


def collective_decay_gradient(params: CouplingParams, r_ij: float) -> float:
    """Analytic derivative ``d gamma_pair / d r`` of :func:`collective_decay`."""
    if r_ij < 0:
        raise ValueError(f"separation must be >= 0, got {r_ij}")
    xi = params.k_a * r_ij
    w_perp, w_par = _angle_weights(params.theta)
    if xi < SERIES_SWITCH_XI:
        d_perp = -xi / 3.0 + xi**3 / 30.0
        d_par = xi / 15.0 - xi**3 / 210.0
    else:
        s, c = math.sin(xi), math.cos(xi)
        d_perp = c / xi - s / xi**2
        d_par = (-s / xi**2 - 2.0 * c / xi**3) - (c / xi**3 - 3.0 * s / xi**4)
    return 1.5 * params.gamma * (w_perp * d_perp + w_par * d_par) * params.k_a


def build_coupling_matrices(
    params: CouplingParams,
    positions: np.ndarray,
    independent: bool = False,
) -> CouplingMatrices:
    """Assemble the full N x N coupling matrices for one configuration.

    With ``independent=True`` the atoms are treated as mutually
    non-interacting: the exchange matrix is zero and the decay matrix is
    diagonal, which models atoms far apart from each other.
    """
    positions = np.asarray(positions, dtype=float)
    n = positions.size
    omega = np.zeros((n, n))
    gamma_mat = np.eye(n) * params.gamma
    if independent:
        return CouplingMatrices(omega, gamma_mat)
    for i in range(n):
        for j in range(i + 1, n):
            r = abs(positions[i] - positions[j])
            try:
                omega[i, j] = omega[j, i] = dipole_shift(params, r)
            except NearFieldError as err:
                raise NearFieldError(
                    f"atoms {i} and {j} are too close (separation {r!r}): {err}"
                ) from None
            gamma_mat[i, j] = gamma_mat[j, i] = collective_decay(params, r)
    return CouplingMatrices(omega, gamma_mat)
