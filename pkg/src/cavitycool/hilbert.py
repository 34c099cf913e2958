"""Composite Hilbert space of N two-level atoms and one truncated field mode.

The tensor ordering is fixed and documented so that serialized states are
portable: atom 0 (x) atom 1 (x) ... (x) atom N-1 (x) field, with the atomic
basis ordered (|g>, |e>) and the field basis ordered |0>, ..., |n_max>.
Row-major (C order) Kronecker products throughout; everything is a dense
complex matrix, which is the right trade-off for the target sizes
(total dimension <= 64 for three atoms).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

#: Guard against accidentally requesting an enormous composite space.
DEFAULT_DIM_CAP = 4096

#: Absolute tolerance (relative to the largest entry) for Hermiticity checks.
HERMITIAN_TOL = 1e-10

_SIGMA_MINUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)  # |g><e|
_IDENTITY_2 = np.eye(2, dtype=complex)


class LayoutError(ValueError):
    """Raised for invalid or mismatched Hilbert-space layouts."""


@dataclass(frozen=True)
class HilbertLayout:
    """Shape of the composite space: ``2**n_atoms * (fock_cutoff + 1)``.

    ``fock_cutoff`` is the largest retained photon number, so the field
    factor has dimension ``fock_cutoff + 1``.  A cutoff of zero (field
    frozen in vacuum) is permitted for degenerate test setups; production
    layouts built through :func:`build_layout` require at least one photon.
    """

    n_atoms: int
    fock_cutoff: int

    def __post_init__(self) -> None:
        if self.n_atoms < 1:
            raise LayoutError(f"n_atoms must be >= 1, got {self.n_atoms}")
        if self.fock_cutoff < 0:
            raise LayoutError(f"fock_cutoff must be >= 0, got {self.fock_cutoff}")

    @property
    def field_dim(self) -> int:
        return self.fock_cutoff + 1

    @property
    def total_dim(self) -> int:
        return 2**self.n_atoms * self.field_dim


def build_layout(n_atoms: int, fock_cutoff: int, dim_cap: int = DEFAULT_DIM_CAP) -> HilbertLayout:
    """Validated layout constructor with a total-dimension cap.

    Raises
    ------
    LayoutError
        If ``n_atoms < 1``, ``fock_cutoff < 1`` or the composite dimension
        exceeds ``dim_cap``.
    """
    if fock_cutoff < 1:
        raise LayoutError(f"fock_cutoff must be >= 1, got {fock_cutoff}")
    layout = HilbertLayout(n_atoms, fock_cutoff)
    if layout.total_dim > dim_cap:
        raise LayoutError(
            f"total dimension {layout.total_dim} exceeds the cap {dim_cap}; "
            "raise dim_cap explicitly if this is intentional"
        )
    return layout


@dataclass
class DenseOperator:
    """A dense operator on the composite space.

    When ``hermitian=True`` is requested the entries are verified against
    ``max|M - M^dag| < 1e-10`` in units of the largest entry magnitude.
    """

    layout: HilbertLayout
    entries: np.ndarray
    hermitian: bool = False

    def __post_init__(self) -> None:
        self.entries = np.asarray(self.entries, dtype=complex)
        dim = self.layout.total_dim
        if self.entries.shape != (dim, dim):
            raise LayoutError(
                f"operator shape {self.entries.shape} does not match layout dimension {dim}"
            )
        if self.hermitian:
            scale = np.abs(self.entries).max() or 1.0
            defect = np.abs(self.entries - self.entries.conj().T).max()
            if defect > HERMITIAN_TOL * scale:
                raise ValueError(
                    f"operator flagged Hermitian but max|M - M^dag| = {defect:.3e} "
                    f"exceeds {HERMITIAN_TOL:.0e} * max|M|"
                )

    def dag(self) -> "DenseOperator":
        return DenseOperator(self.layout, self.entries.conj().T, hermitian=self.hermitian)

    def __matmul__(self, other: "DenseOperator") -> "DenseOperator":
        _require_same_layout(self.layout, other.layout)
        return DenseOperator(self.layout, self.entries @ other.entries)

    def __add__(self, other: "DenseOperator") -> "DenseOperator":
        _require_same_layout(self.layout, other.layout)
        return DenseOperator(self.layout, self.entries + other.entries)

    def __sub__(self, other: "DenseOperator") -> "DenseOperator":
        _require_same_layout(self.layout, other.layout)
        return DenseOperator(self.layout, self.entries - other.entries)

    def __rmul__(self, scalar: complex) -> "DenseOperator":
        return DenseOperator(self.layout, scalar * self.entries)


class StateInvariantError(ValueError):
    """Raised when a density matrix violates trace/Hermiticity/positivity guards."""


@dataclass
class QuantumState:
    """Dense density operator on the composite space."""

    layout: HilbertLayout
    rho: np.ndarray

    def __post_init__(self) -> None:
        self.rho = np.asarray(self.rho, dtype=complex)
        dim = self.layout.total_dim
        if self.rho.shape != (dim, dim):
            raise LayoutError(
                f"state shape {self.rho.shape} does not match layout dimension {dim}"
            )

    @classmethod
    def ground_vacuum(cls, layout: HilbertLayout) -> "QuantumState":
        """All atoms in |g>, no photons."""
        rho = np.zeros((layout.total_dim, layout.total_dim), dtype=complex)
        rho[0, 0] = 1.0
        return cls(layout, rho)

    @classmethod
    def pure(cls, layout: HilbertLayout, ket: np.ndarray) -> "QuantumState":
        ket = np.asarray(ket, dtype=complex).ravel()
        if ket.size != layout.total_dim:
            raise LayoutError("ket length does not match layout dimension")
        ket = ket / np.linalg.norm(ket)
        return cls(layout, np.outer(ket, ket.conj()))

    def trace(self) -> complex:
        return np.trace(self.rho)

    def copy(self) -> "QuantumState":
        return QuantumState(self.layout, self.rho.copy())

    def check_invariants(
        self,
        trace_tol: float = 1e-8,
        hermitian_tol: float = 1e-10,
        positivity_tol: float = 1e-10,
    ) -> None:
        """Assert the trace / Hermiticity / diagonal-positivity guards.

        Raises :class:`StateInvariantError` with a diagnostic naming the
        violated guard.  Positivity is only checked on the diagonal, which
        is cheap and catches every failure mode the integrator produces.
        """
        tr = self.trace()
        if abs(tr - 1.0) > trace_tol:
            raise StateInvariantError(f"trace(rho) = {tr} deviates from 1 by {abs(tr - 1.0):.3e}")
        herm = np.abs(self.rho - self.rho.conj().T).max()
        if herm > hermitian_tol:
            raise StateInvariantError(f"max|rho - rho^dag| = {herm:.3e} exceeds {hermitian_tol:.0e}")
        min_diag = self.rho.diagonal().real.min()
        if min_diag < -positivity_tol:
            raise StateInvariantError(
                f"negative population {min_diag:.3e} below -{positivity_tol:.0e}"
            )


def _require_same_layout(a: HilbertLayout, b: HilbertLayout) -> None:
    if a != b:
        raise LayoutError(f"layout mismatch: {a} vs {b}")


def ket_index(layout: HilbertLayout, atom_levels: "list[int] | tuple[int, ...]", fock_n: int) -> int:
    """Flat basis index of |atom_levels...> (x) |fock_n> in the fixed ordering."""
    if len(atom_levels) != layout.n_atoms:
        raise LayoutError("need one level per atom")
    if not 0 <= fock_n <= layout.fock_cutoff:
        raise LayoutError(f"photon number {fock_n} outside [0, {layout.fock_cutoff}]")
    idx = 0
    for level in atom_levels:
        if level not in (0, 1):
            raise LayoutError("atomic levels are 0 (ground) or 1 (excited)")
        idx = 2 * idx + level
    return idx * layout.field_dim + fock_n


def _embed_atom(layout: HilbertLayout, i: int, op2: np.ndarray) -> np.ndarray:
    if not 0 <= i < layout.n_atoms:
        raise LayoutError(f"atom index {i} outside [0, {layout.n_atoms})")
    left = np.eye(2**i, dtype=complex)
    right = np.eye(2 ** (layout.n_atoms - i - 1) * layout.field_dim, dtype=complex)
    return np.kron(np.kron(left, op2), right)


def atom_lowering(layout: HilbertLayout, i: int) -> DenseOperator:
    """Lowering operator |g><e| of atom ``i`` embedded in the composite space."""
    return DenseOperator(layout, _embed_atom(layout, i, _SIGMA_MINUS))


def atom_raising(layout: HilbertLayout, i: int) -> DenseOperator:
    """Raising operator |e><g| of atom ``i`` embedded in the composite space."""
    return DenseOperator(layout, _embed_atom(layout, i, _SIGMA_MINUS.conj().T))


def _annihilator(field_dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, field_dim, dtype=float)), k=1).astype(complex)


def field_annihilation(layout: HilbertLayout) -> DenseOperator:
    """Truncated photon annihilation operator: a|n> = sqrt(n)|n-1>, a|0> = 0."""
    a = _annihilator(layout.field_dim)
    return DenseOperator(layout, np.kron(np.eye(2**layout.n_atoms, dtype=complex), a))


def field_creation(layout: HilbertLayout) -> DenseOperator:
    return field_annihilation(layout).dag()


def number_operator(layout: HilbertLayout) -> DenseOperator:
    a = _annihilator(layout.field_dim)
    n = a.conj().T @ a
    return DenseOperator(
        layout, np.kron(np.eye(2**layout.n_atoms, dtype=complex), n), hermitian=True
    )


def identity(layout: HilbertLayout) -> DenseOperator:
    return DenseOperator(layout, np.eye(layout.total_dim, dtype=complex), hermitian=True)


def expectation(state: QuantumState, op: DenseOperator) -> complex:
    """``trace(op @ rho)``; real to 1e-10 when ``op`` is Hermitian and rho is a state."""
    _require_same_layout(state.layout, op.layout)
    return complex(np.einsum("ij,ji->", op.entries, state.rho))


# ---------------------------------------------------------------------------
# State snapshot serialization (used by the CLI checkpointing)
# ---------------------------------------------------------------------------

def save_state(path: "str | Path", state: QuantumState, **extra: np.ndarray) -> None:
    """Write a self-describing snapshot: layout header + flat row-major entries.

    ``extra`` arrays (e.g. classical positions/momenta/time) are stored
    alongside under their keyword names.
    """
    np.savez(
        path,
        format_version=np.array(1),
        n_atoms=np.array(state.layout.n_atoms),
        fock_cutoff=np.array(state.layout.fock_cutoff),
        rho_flat=state.rho.ravel(order="C"),
        **extra,
    )


def load_state(path: "str | Path") -> "tuple[QuantumState, dict[str, np.ndarray]]":
    """Inverse of :func:`save_state`; returns the state and any extra arrays."""
    with np.load(path) as data:
        layout = HilbertLayout(int(data["n_atoms"]), int(data["fock_cutoff"]))
        dim = layout.total_dim
        rho = data["rho_flat"].reshape(dim, dim)
        reserved = {"format_version", "n_atoms", "fock_cutoff", "rho_flat"}
        extra = {k: data[k] for k in data.files if k not in reserved}
    return QuantumState(layout, rho), extra
