"""Figure specification and input-table schemas."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

KINDS = ("trajectory", "heatmap", "comparison", "spectrum")

#: Required columns per table kind; extra columns are allowed and ignored.
REQUIRED_COLUMNS = {
    "trajectory": ("t_gamma", "e_kin_hbar_gamma", "photon_number", "excitation_total"),
    "heatmap": ("e_kin_rel", "stable_fraction", "n_stable"),
    "comparison": ("t_gamma", "e_rel_collective", "e_rel_independent"),
    "spectrum": ("omega_gamma", "s"),
}


class SchemaError(ValueError):
    """Input file does not match the documented export schema."""


@dataclass
class FigureSpec:
    """What to draw and from which files.

    ``table`` is the delimited-text data file; ``meta`` the optional JSON
    sidecar written next to it.  ``options`` tunes presentation only:
    ``value`` (heatmap column), ``normalize`` (spectrum peak normalization,
    default on), ``log_time`` (comparison time axis), ``title``, ``dpi``.
    """

    kind: str
    table: Path
    meta: "Path | None" = None
    options: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; choose from {KINDS}")
        self.table = Path(self.table)
        if self.meta is not None:
            self.meta = Path(self.meta)
