"""Per-kind figure rendering onto the Agg backend (headless, deterministic)."""

from __future__ import annotations

import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .readers import numbered_columns, read_meta, read_table, require_columns
from .spec import FigureSpec

_PNG_META = {"Software": None}  # strip the library version for byte-stable output


def render(spec: FigureSpec, output: "str | Path") -> Path:
    """Draw one figure and write it to ``output`` (format from the suffix)."""
    output = Path(output)
    table = read_table(spec.table)
    require_columns(table, spec.kind, spec.table)
    n_rows = len(next(iter(table.values()))) if table else 0
    dpi = int(spec.options.get("dpi", 150))
    if n_rows == 0:
        fig = _placeholder(spec)
    elif spec.kind == "trajectory":
        fig = _trajectory(spec, table)
    elif spec.kind == "heatmap":
        fig = _heatmap(spec, table)
    elif spec.kind == "comparison":
        fig = _comparison(spec, table)
    else:
        fig = _spectrum(spec, table)
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, dpi=dpi, metadata=_PNG_META if output.suffix == ".png" else None)
    plt.close(fig)
    return output


def _placeholder(spec: FigureSpec):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.text(0.5, 0.5, f"no data\n({spec.table.name})", ha="center", va="center")
    ax.set_axis_off()
    fig.suptitle(spec.options.get("title", f"{spec.kind}: empty input"))
    return fig


def _trajectory(spec: FigureSpec, table):
    t = table["t_gamma"]
    traces = numbered_columns(table, "r", "_lambda_c")
    fig, (ax_pos, ax_kin) = plt.subplots(
        2, 1, figsize=(7, 6), sharex=True, height_ratios=[2, 1]
    )
    if traces:
        for k, r in enumerate(traces):
            ax_pos.plot(t, r, lw=1.0, label=f"atom {k + 1}")
        ax_pos.set_ylabel(r"position ($\lambda_c$)")
        ax_pos.legend(loc="upper right", fontsize=8)
    else:
        warnings.warn(
            f"{spec.table}: no position columns (r1_lambda_c, ...); trace panel dropped",
            RuntimeWarning,
            stacklevel=2,
        )
        ax_pos.set_axis_off()
    ax_kin.plot(t, table["e_kin_hbar_gamma"], lw=0.8, color="tab:blue")
    ax_kin.set_xlabel(r"time ($1/\Gamma$)")
    ax_kin.set_ylabel(r"$E_{\rm kin}$ ($\hbar\Gamma$)")
    meta = read_meta(spec.meta, required_by=str(spec.table))
    title = spec.options.get("title", "trajectories")
    if meta and meta.get("stability_overall") is not None:
        verdict = "stable" if meta["stability_overall"] else "unstable"
        title = f"{title} ({verdict})"
    fig.suptitle(title)
    fig.tight_layout()
    return fig


def _heatmap(spec: FigureSpec, table):
    names = list(table.keys())
    ax1_name, ax2_name = names[0], names[1]
    value = spec.options.get("value", "e_kin_rel")
    if value not in table:
        from .spec import SchemaError

        raise SchemaError(f"{spec.table}: missing value column {value!r}")
    v1 = np.unique(table[ax1_name])
    v2 = np.unique(table[ax2_name])
    grid = np.full((v1.size, v2.size), np.nan)
    for a, b, val in zip(table[ax1_name], table[ax2_name], table[value]):
        grid[np.searchsorted(v1, a), np.searchsorted(v2, b)] = val

    fig, ax = plt.subplots(figsize=(6.5, 5))
    masked = np.ma.masked_invalid(grid)
    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad("0.85")  # cells without a single stable trajectory
    clamped = value == "e_kin_rel"
    if clamped:
        # the 1.0 ceiling marks heating runs clamped in aggregation; give it
        # a color outside the data ramp so clamped cells are unmistakable
        cmap.set_over("#8b0000")
        vmax = 1.0 - 1e-9
        pcm = ax.pcolormesh(v2, v1, masked, cmap=cmap, vmin=0.0, vmax=vmax, shading="nearest")
        fig.colorbar(pcm, ax=ax, extend="max", label=value)
    else:
        pcm = ax.pcolormesh(v2, v1, masked, cmap=cmap, shading="nearest")
        fig.colorbar(pcm, ax=ax, label=value)
    ax.set_xlabel(f"{ax2_name} ($\\Gamma$)")
    ax.set_ylabel(f"{ax1_name} ($\\Gamma$)")
    fig.suptitle(spec.options.get("title", f"{value} over {ax1_name} x {ax2_name}"))
    fig.tight_layout()
    return fig


def _comparison(spec: FigureSpec, table):
    t = table["t_gamma"]
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    for key, style, label in (
        ("e_rel_collective", "-", "collective"),
        ("e_rel_independent", "--", "independent"),
    ):
        if np.isfinite(table[key]).any():
            ax.plot(t, table[key], style, lw=1.4, label=label)
        else:
            warnings.warn(
                f"{spec.table}: column {key!r} has no finite values; curve dropped",
                RuntimeWarning,
                stacklevel=2,
            )
    log_time = spec.options.get("log_time", bool(t[-1] > 1000.0))
    if log_time:
        ax.set_xscale("log")
        positive = t > 0
        if positive.any():
            ax.set_xlim(max(t[positive][0], 1e-2), t[-1])
    ax.set_xlabel(r"time ($1/\Gamma$)")
    ax.set_ylabel(r"$\bar E_{\rm kin}^{\rm rel}$")
    ax.legend()
    fig.suptitle(spec.options.get("title", "cooling with and without pair coupling"))
    fig.tight_layout()
    return fig


def _spectrum(spec: FigureSpec, table):
    omegas = table["omega_gamma"]
    s = table["s"]
    normalize = spec.options.get("normalize", True)
    peak = s.max() if s.size else 1.0
    scale = peak if (normalize and peak > 0) else 1.0
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    ax.plot(omegas, s / scale, lw=1.0, color="tab:blue", label="spectrum")

    meta = read_meta(spec.meta, required_by=str(spec.table))
    fit = (meta or {}).get("fit") or {}
    if fit.get("converged") and fit.get("gamma") is not None:
        half = fit["gamma"] / 2.0
        model = fit["amplitude"] * half**2 / ((omegas - fit["delta0"]) ** 2 + half**2)
        ax.plot(omegas, model / scale, "--", lw=1.0, color="tab:orange", label="Lorentzian fit")
        ax.axvline(fit["delta0"], color="tab:orange", lw=0.6, alpha=0.6)
        ax.annotate(
            rf"$\delta_0 = {fit['delta0']:.3g}\,\Gamma$",
            xy=(fit["delta0"], 1.02 if normalize else peak),
            fontsize=8,
            ha="left",
        )
    elif meta is not None and not fit:
        warnings.warn(
            f"{spec.meta}: no fit block in sidecar; fit overlay dropped",
            RuntimeWarning,
            stacklevel=2,
        )
    secondary = (meta or {}).get("secondary_peak")
    if secondary:
        ax.axvline(secondary["omega"], color="tab:red", lw=0.8, ls=":")
        ax.annotate(
            rf"$\delta_c = {secondary['delta_c']:.3g}\,\Gamma$",
            xy=(secondary["omega"], secondary["rel_height"]),
            fontsize=8,
            ha="left",
            color="tab:red",
        )
    ax.set_xlabel(r"$\omega - \omega_a$ ($\Gamma$)")
    ax.set_ylabel("S (peak-normalized)" if normalize else "S")
    ax.legend(fontsize=8)
    window = spec.options.get("xlim")
    if window:
        ax.set_xlim(window)
    fig.suptitle(spec.options.get("title", "emission spectrum"))
    fig.tight_layout()
    return fig
