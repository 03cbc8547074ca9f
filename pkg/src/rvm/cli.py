"""Command-line entry points: run, verify, linear, report.

Exit codes: 0 success, 1 configuration error, 2 numerical abort (non-finite
values), 3 I/O failure, 4 hard verification-check failure. The environment
variable RVM_THREADS caps worker threads (default: logical cores).
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
import time

import numpy as np

from .config import config_hash, config_to_text, load_config, save_config
from .core import RunConfig, resolve_threads, scenario_from_config, sobol_points
from .iteration import (
    RunResult,
    build_linear_cache,
    density_moment_series,
    estimate_norm_K0,
    estimate_norm_K1alpha,
    measure_norms,
    run_iteration,
)
from .fields import FieldCache, GridSpec

__all__ = ["main", "cmd_run", "cmd_verify", "cmd_linear", "cmd_report",
           "load_run"]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3
EXIT_CHECK = 4


def _apply_thread_cap():
    try:
        import numba

        numba.set_num_threads(
            max(1, min(resolve_threads(), numba.config.NUMBA_NUM_THREADS)))
    except ImportError:
        pass


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_float(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def cmd_run(config_path, out_dir, progress=print) -> int:
    """Execute the field iteration and write checkpoints, summary CSV and
    decay-series CSVs under out_dir."""
    try:
        cfg = load_config(config_path)
    except (OSError, FileNotFoundError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, OSError) and os.path.exists(config_path) else EXIT_CONFIG
    except ValueError as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _apply_thread_cap()
    try:
        os.makedirs(out_dir, exist_ok=True)
        data = scenario_from_config(cfg)
        result = run_iteration(cfg, data, out_dir=out_dir, progress=progress)
        _write_run_outputs(out_dir, cfg, data, result)
    except FloatingPointError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _write_run_outputs(out_dir, cfg: RunConfig, data, result: RunResult) -> None:
    rows = [(st.n, st.norms.K0, st.norms.K1a, st.d_n, st.ke_max)
            for st in result.states]
    _write_csv(os.path.join(out_dir, "summary.csv"),
               ["n", "norm_K0", "norm_K1a", "d_n", "kinetic_energy_max"], rows)

    times = list(cfg.decay_times)
    series = density_moment_series(data, result.final_cache, times,
                                   extension=cfg.field_extension)
    _write_csv(os.path.join(out_dir, "decay_density.csv"),
               ["t", "velocity_integral_at_origin"],
               [(float(t), float(v)) for t, v in series])

    grid = result.final_cache.grid
    xs = (2.0 * sobol_points(256, 3, cfg.seed + 77) - 1.0) * grid.box_radius
    rows = []
    for t in grid.t_axis:
        E, B = result.final_cache.interpolate(float(t), xs)
        mag = np.linalg.norm(E, axis=1) + np.linalg.norm(B, axis=1)
        w = (np.abs(t - np.linalg.norm(xs, axis=1)) + 1.0) * (
            t + np.linalg.norm(xs, axis=1) + 1.0)
        rows.append((float(t), float(mag.max()), float((w * mag).max())))
    _write_csv(os.path.join(out_dir, "decay_field.csv"),
               ["t", "max_field", "max_weighted_field"], rows)

    manifest = {
        "format": "rvm-run-manifest-v1",
        "scenario": cfg.scenario,
        "config_hash": config_hash(cfg),
        "lambda": result.lam,
        "linear_norms": {"K0": result.linear_norms.K0,
                         "K1a": result.linear_norms.K1a},
        "iterates": [st.n for st in result.states],
        "converged": result.converged,
        "files": {
            "summary": "summary.csv",
            "decay_density": "decay_density.csv",
            "decay_field": "decay_field.csv",
            "config": "config.rvm.cfg",
            "iterate_dirs": [f"iterate_{st.n:03d}" for st in result.states],
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "tool_version": _version(),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _version() -> str:
    from . import __version__

    return __version__


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

class _LoadedRun:
    """RunResult-shaped view over a checkpoint directory (for verification)."""

    def __init__(self, config, lam, states, pushed, components, linear_norms):
        self.config = config
        self.lam = lam
        self.states = states
        self.pushed = pushed
        self.components = components
        self.linear_norms = linear_norms
        self.converged = True
        self.tail_report = {}

    @property
    def final_cache(self):
        return self.states[-1].cache


def load_run(run_dir) -> _LoadedRun:
    """Rebuild the artifacts of a completed run from its checkpoints.

    Trajectory forces come back as finite differences of the stored knot
    velocities, which is adequate for the verification suite's source terms.
    """
    from types import SimpleNamespace

    from .characteristics import KnotTrajectories
    from .core import scenario_from_config
    from .density import PushedEnsemble, decompose, load_ensemble

    cfg = load_config(os.path.join(run_dir, "config.rvm.cfg"))
    manifest_path = os.path.join(run_dir, "run_manifest.json")
    run_manifest = None
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            run_manifest = json.load(fh)
    data = scenario_from_config(cfg)
    it_dirs = sorted(d for d in os.listdir(run_dir) if d.startswith("iterate_"))
    if not it_dirs:
        raise ValueError(f"no iterate checkpoints under {run_dir}")
    states = []
    pushed = []
    for d in it_dirs:
        mpath = os.path.join(run_dir, d, "manifest.json")
        with open(mpath) as fh:
            man = json.load(fh)
        cache = FieldCache.load(os.path.join(run_dir, d, man["files"]["field_cache"]))
        norms = SimpleNamespace(K0=man["norms"]["K0"], K1a=man["norms"]["K1a"],
                                alpha=man["norms"]["alpha"])
        states.append(SimpleNamespace(
            n=man["iterate"], cache=cache, norms=norms, d_n=man["d_n"],
            ke_max=man["kinetic_energy_max"], in_space=man["in_space"],
            dropped_weight=man["dropped_weight"],
            dropped_count=man["dropped_count"]))
        if d == it_dirs[-1]:
            for key, name in man["files"].items():
                if not key.startswith("ensemble_k"):
                    continue
                ens, s, X, V = load_ensemble(os.path.join(run_dir, d, name))
                F = np.gradient(V, s, axis=0) if len(s) > 1 else np.zeros_like(V)
                pushed.append(PushedEnsemble(
                    ensemble=ens, knots=KnotTrajectories(s=s, X=X, V=V, F=F)))
    components = []
    if cfg.scenario != "empty" and cfg.eps0 > 0:
        components, _ = decompose(data, cfg.k_max, cfg.tail_tol, seed=cfg.seed)
    if run_manifest is None:
        run_manifest = man  # last iterate manifest carries the shared fields
    lin = SimpleNamespace(K0=run_manifest["linear_norms"]["K0"],
                          K1a=run_manifest["linear_norms"]["K1a"])
    return _LoadedRun(cfg, run_manifest["lambda"], states, pushed, components,
                      lin)


def cmd_verify(run_dir, checks_filter=None, quick: bool = False,
               progress=print) -> int:
    """Run the verification suite over a checkpoint directory and write the
    JSON report there; exit 0 iff every hard check passes."""
    from .core import scenario_from_config
    from .verify import OracleConfig, lemma_suite

    _apply_thread_cap()
    try:
        run = load_run(run_dir)
        data = scenario_from_config(run.config)
    except (ValueError, KeyError, json.JSONDecodeError, struct.error) as exc:
        print(f"error: corrupted checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: cannot load run: {exc}", file=sys.stderr)
        return EXIT_IO
    include = None
    if checks_filter:
        include = {c.strip() for c in checks_filter.split(",") if c.strip()}
    report = lemma_suite(run, data, OracleConfig(), quick=quick,
                         include=include)
    out = os.path.join(run_dir, "verify_report.json")
    with open(out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    for c in report["checks"]:
        progress(f"[{c['status']:>8}] {c['check_id']}")
    progress(f"report written to {out}")
    return EXIT_OK if report["passed"] else EXIT_CHECK


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def cmd_linear(config_path, out_dir, progress=print) -> int:
    """Evaluate only the homogeneous evolution of the initial fields, report
    its weighted norms and the norm/M ratio at two grid refinements."""
    try:
        cfg = load_config(config_path)
    except ValueError as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    _apply_thread_cap()
    try:
        os.makedirs(out_dir, exist_ok=True)
        data = scenario_from_config(cfg)
        alpha = cfg.resolved_alpha()
        grid = GridSpec(cfg.t_final, cfg.n_t, cfg.box_radius, cfg.n_x)
        fine = grid.refined()
        reports = {}
        for name, g in (("coarse", grid), ("fine", fine)):
            cache = build_linear_cache(data, g)
            norms = measure_norms(cache, alpha, cfg.norm_probes,
                                  cfg.pair_probes, cfg.seed)
            reports[name] = {"K0": norms.K0, "K1a": norms.K1a,
                             "norm_total": norms.K0 + norms.K1a,
                             "ratio_to_M": (norms.K0 + norms.K1a) / data.M,
                             "grid": {"n_t": g.n_t, "n_x": g.n_x}}
            progress(f"{name}: K0={norms.K0:.5f} K1a={norms.K1a:.5f} "
                     f"(K0+K1a)/M={reports[name]['ratio_to_M']:.5f}")
        c, f = reports["coarse"]["ratio_to_M"], reports["fine"]["ratio_to_M"]
        reports["refinement_drift"] = abs(c - f) / max(f, 1e-300)
        reports["config_hash"] = config_hash(cfg)
        with open(os.path.join(out_dir, "linear_report.json"), "w") as fh:
            json.dump(reports, fh, indent=2, sort_keys=True)
    except FloatingPointError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(run_dir, progress=print) -> int:
    """Pretty-print the manifests of a run directory."""
    path = os.path.join(run_dir, "run_manifest.json")
    try:
        with open(path) as fh:
            man = json.load(fh)
    except OSError as exc:
        print(f"error: cannot read manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"error: corrupted manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    progress(f"run: scenario={man['scenario']} config={man['config_hash'][:12]} "
             f"converged={man['converged']}")
    progress(f"lambda={man['lambda']:.4f} linear K0={man['linear_norms']['K0']:.4f} "
             f"K1a={man['linear_norms']['K1a']:.4f}")
    for d in man["files"]["iterate_dirs"]:
        ipath = os.path.join(run_dir, d, "manifest.json")
        try:
            with open(ipath) as fh:
                im = json.load(fh)
        except OSError:
            progress(f"  {d}: (missing manifest)")
            continue
        progress(f"  iterate {im['iterate']}: K0={im['norms']['K0']:.4f} "
                 f"K1a={im['norms']['K1a']:.4f} d_n={im['d_n']:.3e} "
                 f"ke_max={im['kinetic_energy_max']:.3e} member={im['in_space']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rvm",
        description="Particle solver and verification harness for the "
                    "relativistic Vlasov-Maxwell system")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the field iteration")
    p_run.add_argument("config")
    p_run.add_argument("out_dir")

    p_ver = sub.add_parser("verify", help="run the verification suite on a run directory")
    p_ver.add_argument("run_dir")
    p_ver.add_argument("--checks", default=None,
                       help="comma-separated check ids to run (default: all)")
    p_ver.add_argument("--quick", action="store_true",
                       help="reduced sample counts")

    p_lin = sub.add_parser("linear", help="evaluate only the homogeneous field")
    p_lin.add_argument("config")
    p_lin.add_argument("out_dir")

    p_rep = sub.add_parser("report", help="pretty-print a run manifest")
    p_rep.add_argument("run_dir")

    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out_dir)
    if args.command == "verify":
        return cmd_verify(args.run_dir, args.checks, args.quick)
    if args.command == "linear":
        return cmd_linear(args.config, args.out_dir)
    if args.command == "report":
        return cmd_report(args.run_dir)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
