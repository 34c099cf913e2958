"""Command-line entry point.

Subcommands run single trajectories, spectra, parameter scans, the
long-time collective-vs-independent comparison, the stability preset and
the steady-state oracle.  Every run writes a self-contained output
directory: the normalized config, a manifest with diagnostics, and the
data files documented by the producing modules.  Reruns with identical
config and seed produce byte-identical data files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import MODES, ConfigError, RunConfig, parse_config, serialize_config
from .dynamics import (
    Recorder,
    load_checkpoint,
    antinode_positions,
    evolve,
    initial_state,
    save_checkpoint,
)
from .hilbert import QuantumState
from .observables import export_trajectory, g2_zero, inversion, photon_number
from .spectrum import (
    export_spectrum,
    fixed_position_spectrum,
    moving_spectrum,
    spectrum_of,
)
from .sweep import (
    export_comparison,
    export_scan,
    long_time_comparison,
    run_scan,
    sample_momenta,
    steady_state_oracle,
)

OUTPUT_ROOT_ENV = "CAVITYCOOL_OUTPUT_ROOT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cavitycool",
        description="Semiclassical dynamics of dipole-interacting atoms in a lossy cavity",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode, help=f"run in {mode} mode")
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override the RNG seed")
        p.add_argument("--threads", type=int, default=None, help="worker process count")
        p.add_argument("--t-final", type=float, default=None, help="evolution time (1/gamma)")
        p.add_argument("--fock-cutoff", type=int, default=None, help="max photon number kept")
        p.add_argument("--output", type=str, default=None, help="output directory")
        p.add_argument(
            "--momenta",
            type=str,
            default=None,
            help="comma-separated initial momenta (hbar*k_a); sampled when omitted",
        )
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Config file plus flag overrides; flags take precedence."""
    config = parse_config(args.config)
    run_over = {"mode": args.mode}
    if args.seed is not None:
        run_over["seed"] = args.seed
    if args.threads is not None:
        run_over["threads"] = args.threads
    if args.t_final is not None:
        run_over["t_final"] = args.t_final
    if args.output is not None:
        run_over["output_dir"] = args.output
    params = config.params
    if args.fock_cutoff is not None:
        params = replace(params, fock_cutoff=args.fock_cutoff)
    momenta = config.momenta
    if args.momenta is not None:
        momenta = tuple(float(v) for v in args.momenta.split(","))
        if len(momenta) != params.n_atoms:
            raise ConfigError(f"need {params.n_atoms} momenta, got {len(momenta)}")
    seed = run_over.get("seed", config.seed)
    config = replace(
        config,
        params=params,
        mode=args.mode,
        seed=seed,
        threads=run_over.get("threads", config.threads),
        t_final=run_over.get("t_final", config.t_final),
        output_dir=run_over.get("output_dir", config.output_dir),
        sampler=replace(config.sampler, seed=seed),
        momenta=momenta,
        grid=None if config.grid is None else replace(config.grid, fixed=params, seed=seed),
    )
    return config


def _resolve_output_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _initial_momenta(config: RunConfig) -> np.ndarray:
    if config.momenta is not None:
        return np.asarray(config.momenta, dtype=float)
    return sample_momenta(config.sampler, config.params, config.params.n_atoms, (0,))


def _positions(config: RunConfig) -> np.ndarray:
    if config.positions_lambda is not None:
        lam = config.params.coupling.lambda_c
        return np.asarray(config.positions_lambda, dtype=float) * lam
    return antinode_positions(config.params)


def execute(config: RunConfig) -> int:
    """Run one configured job; returns the process exit status."""
    out = _resolve_output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(serialize_config(config))
    t_start = time.perf_counter()
    caught: "list[str]" = []
    try:
        with warnings.catch_warnings(record=True) as wlist:
            warnings.simplefilter("always")
            _dispatch(config, out)
        caught = [str(w.message) for w in wlist]
        status = 0
    except Exception as err:  # noqa: BLE001 - single reporting point for the CLI
        record = {"error": type(err).__name__, "message": str(err)}
        (out / "error.json").write_text(json.dumps(record, indent=2) + "\n")
        print(f"error: {err}", file=sys.stderr)
        status = 1
    manifest = {
        "mode": config.mode,
        "seed": config.seed,
        "code_version": __version__,
        "wall_time_s": round(time.perf_counter() - t_start, 3),
        "warnings": caught,
        "status": status,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return status


def _dispatch(config: RunConfig, out: Path) -> None:
    params = config.params
    if config.mode == "trajectory":
        momenta = _initial_momenta(config)
        traj = evolve(
            initial_state(params, momenta),
            params,
            config.t_final,
            Recorder(n_samples=config.n_samples),
        )
        export_trajectory(traj, out / "trajectory.csv", out / "trajectory.meta.json")
        save_checkpoint(out / "final_state.npz", traj.final_state)
    elif config.mode == "spectrum":
        if config.spectrum_checkpoint:
            # resume from a saved quasi-steady snapshot instead of settling
            steady = load_checkpoint(config.spectrum_checkpoint)
            corr, spec = spectrum_of(
                params,
                steady,
                tau_max=config.tau_max,
                n_tau=config.n_tau,
                freeze_motion=config.spectrum_fixed,
            )
        elif config.spectrum_fixed:
            corr, spec = fixed_position_spectrum(
                params,
                positions=_positions(config) if config.positions_lambda else None,
                t_steady=config.t_final,
                tau_max=config.tau_max,
                n_tau=config.n_tau,
            )
        else:
            traj, corr, spec = moving_spectrum(
                params,
                _initial_momenta(config),
                t_steady=config.t_final,
                tau_max=config.tau_max,
                n_tau=config.n_tau,
            )
            export_trajectory(traj, out / "trajectory.csv", out / "trajectory.meta.json")
            save_checkpoint(out / "steady_state.npz", traj.final_state)
        export_spectrum(spec, out / "spectrum.csv", out / "spectrum.meta.json")
        _write_g1(corr, out / "g1.csv")
    elif config.mode in ("scan", "stability"):
        table = run_scan(config.grid, t_final=config.t_final, threads=config.threads)
        name = "scan" if config.mode == "scan" else "stability"
        export_scan(table, out / f"{name}.csv", out / f"{name}.meta.json")
    elif config.mode == "comparison":
        result = long_time_comparison(
            params,
            sampler=config.sampler,
            t_final=config.comparison_t_final,
            samples=config.comparison_samples,
            threads=config.threads,
        )
        export_comparison(result, out / "comparison.csv", out / "comparison.meta.json")
    elif config.mode == "steady":
        state = steady_state_oracle(params, _positions(config))
        record = {
            "photon_number": photon_number(state),
            "g2_zero": _safe_g2(state),
            "inversion": inversion(state),
        }
        (out / "steady.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    else:  # pragma: no cover - parse_config already validates
        raise ConfigError(f"unknown mode {config.mode!r}")


def _safe_g2(state: QuantumState) -> "float | None":
    try:
        return g2_zero(state)
    except ValueError:
        return None


def _write_g1(corr, path: Path) -> None:
    import csv

    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau_gamma", "re_g1", "im_g1"])
        for t, g in zip(corr.taus, corr.g1):
            writer.writerow(
                [format(t, ".17g"), format(g.real, ".17g"), format(g.imag, ".17g")]
            )


def main(argv: "list[str] | None" = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    return execute(config)


if __name__ == "__main__":
    sys.exit(main())
