"""Fixed-point field iteration: push the time-0 ensembles through the previous
field, rebuild the field from the transported density, measure the weighted
norms, and monitor contraction.

The iteration starts from the zero field; each iterate re-pushes the same
time-0 samples (no incremental correction), so iterates are independent and a
run can restart from any checkpoint. Stopping on a geometric decrease of the
weighted sup-difference d_n is an empirical surrogate for the pointwise
convergence the theory provides; reports flag it as such.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .characteristics import ZeroField, integrate_states_to
from .core import InitialData, RunConfig, decay_weight, hat_velocity, sobol_points
from .density import (
    DyadicComponent,
    PushedEnsemble,
    decompose,
    default_smoothing_h,
    push_ensemble,
    sample_particles,
    save_ensemble,
    smoothing_kernel,
)
from .fields import (
    FieldCache,
    GridSpec,
    _surface_block,
    build_iterate_cache,
    kirchhoff_linear_block,
    zero_field_cache,
)
from .quadrature import ball_rule, sphere_rule

__all__ = [
    "NormReport",
    "IterationState",
    "RunResult",
    "norm_probes",
    "pair_probes",
    "estimate_norm_K0",
    "estimate_norm_K1alpha",
    "measure_norms",
    "membership_check",
    "sup_weighted_difference",
    "kinetic_energy_density",
    "build_linear_cache",
    "run_iteration",
    "density_moment_series",
]


@dataclass(frozen=True)
class NormReport:
    """Estimates of the two weighted field norms with argmax witnesses.

    Probe-based sup estimates are lower bounds by construction, so the
    membership check below is necessary-condition testing; estimates are
    monotone under probe-set refinement (nested prefixes).
    """

    K0: float
    K1a: float
    alpha: float
    n_probes: int
    n_pairs: int
    witness_K0: tuple  # (t, x)
    witness_K1a: tuple  # (t, x, y)


@dataclass
class IterationState:
    """Snapshot after building iterate n."""

    n: int
    cache: FieldCache
    norms: NormReport
    d_n: float
    ke_max: float
    in_space: bool
    dropped_weight: float
    dropped_count: int
    wall_seconds: float


@dataclass
class RunResult:
    config: RunConfig
    lam: float
    linear_norms: NormReport
    states: list
    pushed: list  # final iterate's pushed ensembles
    components: list
    converged: bool
    tail_report: dict

    @property
    def final_cache(self) -> FieldCache:
        return self.states[-1].cache


# ---------------------------------------------------------------------------
# Probe sets (deterministic, nested under refinement)
# ---------------------------------------------------------------------------

def norm_probes(grid: GridSpec, n: int, seed: int):
    """(t, x) probes over the cache domain from a scrambled Sobol stream."""
    u = sobol_points(n, 4, seed)
    t = u[:, 0] * grid.t_final
    x = (2.0 * u[:, 1:4] - 1.0) * grid.box_radius
    return t, x


def pair_probes(grid: GridSpec, n: int, seed: int):
    """(t, x, y) probes with |x| <= |y| <= t inside the cache ball."""
    u = sobol_points(n, 8, seed)
    t = u[:, 0] * grid.t_final
    ry = np.minimum(t, grid.box_radius) * u[:, 1] ** (1.0 / 3.0)
    dy = _unit(u[:, 2:4])
    y = ry[:, None] * dy
    rx = ry * u[:, 4] ** (1.0 / 3.0)
    dx = _unit(u[:, 5:7])
    x = rx[:, None] * dx
    return t, x, y


def _unit(u2: np.ndarray) -> np.ndarray:
    """Map two unit-cube coordinates to a unit vector (area-preserving)."""
    mu = 2.0 * u2[:, 0] - 1.0
    phi = 2.0 * np.pi * u2[:, 1]
    st = np.sqrt(1.0 - mu**2)
    return np.stack([st * np.cos(phi), st * np.sin(phi), mu], axis=1)


# ---------------------------------------------------------------------------
# Norm estimation and membership
# ---------------------------------------------------------------------------

def _field_mag(cache: FieldCache, t, X):
    E, B = cache.interpolate(t, X)
    return np.linalg.norm(E, axis=-1) + np.linalg.norm(B, axis=-1)


def estimate_norm_K0(cache: FieldCache, probes=None, n: int = 4096,
                     seed: int = 0):
    """Probe max of (|t-|x||+1)(t+|x|+1)(|E|+|B|); returns (value, witness)."""
    if probes is None:
        probes = norm_probes(cache.grid, n, seed)
    t, X = probes
    vals = decay_weight(t, np.linalg.norm(X, axis=-1)) * _field_mag(cache, t, X)
    i = int(np.argmax(vals))
    return float(vals[i]), (float(t[i]), X[i].copy())


def estimate_norm_K1alpha(cache: FieldCache, alpha: float, pairs=None,
                          n: int = 4096, seed: int = 0):
    """Probe max of the interior weighted difference quotient.

    (t-|y|+1)^(1+alpha) (t+1) (|dE|+|dB|)/(|x-y|+1) over pairs with
    |x| <= |y| <= t. The second difference is read symmetrically as
    B(t,x) - B(t,y) (matching the E difference); the asymmetric reading that
    mixes B(t,x) with E(t,y) is taken to be a typo, and this estimator
    documents that choice. Pairs violating |x| <= |y| <= t are rejected.
    """
    if pairs is None:
        pairs = pair_probes(cache.grid, n, seed)
    t, x, y = pairs
    rx = np.linalg.norm(x, axis=-1)
    ry = np.linalg.norm(y, axis=-1)
    tol = 1e-9
    if np.any(rx > ry + tol) or np.any(ry > t + tol):
        raise ValueError("pair probes must satisfy |x| <= |y| <= t")
    Ex, Bx = cache.interpolate(t, x)
    Ey, By = cache.interpolate(t, y)
    diff = np.linalg.norm(Ex - Ey, axis=-1) + np.linalg.norm(Bx - By, axis=-1)
    w = (t - ry + 1.0) ** (1.0 + alpha) * (t + 1.0)
    vals = w * diff / (np.linalg.norm(x - y, axis=-1) + 1.0)
    i = int(np.argmax(vals))
    return float(vals[i]), (float(t[i]), x[i].copy(), y[i].copy())


def measure_norms(cache: FieldCache, alpha: float, n_probes: int = 4096,
                  n_pairs: int = 4096, seed: int = 0) -> NormReport:
    K0, w0 = estimate_norm_K0(cache, n=n_probes, seed=seed)
    K1a, w1 = estimate_norm_K1alpha(cache, alpha, n=n_pairs, seed=seed + 1)
    return NormReport(K0=K0, K1a=K1a, alpha=alpha, n_probes=n_probes,
                      n_pairs=n_pairs, witness_K0=w0, witness_K1a=w1)


def membership_check(report: NormReport, lam: float) -> bool:
    """Closed-ball membership: K0 <= Lambda and K1a <= Lambda^2."""
    if not lam > 2.0:
        raise ValueError("Lambda must exceed 2")
    return report.K0 <= lam and report.K1a <= lam * lam


def sup_weighted_difference(cache_a: FieldCache, cache_b: FieldCache,
                            probes) -> float:
    """sup over probes of the decay-weighted |K_a - K_b| (the metric d_n)."""
    t, X = probes
    Ea, Ba = cache_a.interpolate(t, X)
    Eb, Bb = cache_b.interpolate(t, X)
    mag = (np.linalg.norm(Ea - Eb, axis=-1) + np.linalg.norm(Ba - Bb, axis=-1))
    return float(np.max(decay_weight(t, np.linalg.norm(X, axis=-1)) * mag))


def kinetic_energy_density(pushed_list, t: float, x: np.ndarray, h: float) -> float:
    """sum_p w_p |V_p(t)| eta_h(X_p(t) - x): the continuation diagnostic."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for pe in pushed_list:
        if pe.ensemble.n_particles == 0:
            continue
        X, V = pe.states_at(t)
        d = np.linalg.norm(X - x, axis=1)
        total += float((pe.w * np.linalg.norm(V, axis=1)) @ smoothing_kernel(d, h))
    return total


def _ke_running_max(pushed_list, grid: GridSpec, h: float, n_x: int = 32,
                    seed: int = 5) -> float:
    """Max kinetic-energy density over cache time slices and Sobol x-probes."""
    if not pushed_list or all(pe.ensemble.n_particles == 0 for pe in pushed_list):
        return 0.0
    xs = (2.0 * sobol_points(n_x, 3, seed) - 1.0) * grid.box_radius
    best = 0.0
    for t in grid.t_axis:
        for pe in pushed_list:
            if pe.ensemble.n_particles == 0:
                continue
            X, V = pe.states_at(float(t))
            wv = pe.w * np.linalg.norm(V, axis=1)
            for x in xs:
                d = np.linalg.norm(X - x, axis=1)
                best = max(best, float(wv @ smoothing_kernel(d, h)))
    return best


# ---------------------------------------------------------------------------
# The iteration loop
# ---------------------------------------------------------------------------

def build_linear_cache(data: InitialData, grid: GridSpec,
                       sph=None) -> FieldCache:
    """Cache of the homogeneous evolution (calE, calB) alone."""
    sph = sph or sphere_rule()
    nodes = grid.nodes()
    E, B = kirchhoff_linear_block(data, nodes[:, 0], nodes[:, 1:], rule=sph)
    vals = np.concatenate([E, B], axis=1).reshape(
        grid.n_t, grid.n_x, grid.n_x, grid.n_x, 6)
    return FieldCache(grid=grid, values=vals, iterate=0)


def _sample_all(components, cfg: RunConfig):
    """Ensembles for the non-empty components (weight floor cuts dead shells)."""
    ensembles = []
    for comp in components:
        if comp.measured_sup <= 1e-300:
            continue
        ens = sample_particles(comp, cfg.particles_per_shell,
                               cfg.seed + 1000 + comp.k)
        if ens.total_weight <= 0.0:
            continue
        ensembles.append(ens)
    return ensembles


def run_iteration(cfg: RunConfig, data: InitialData, out_dir=None,
                  progress=None) -> RunResult:
    """Run the fixed-point loop K(0) = 0 -> f(n) -> K(n); see module docstring.

    Records per-iterate norms, the weighted sup-difference d_n, the running
    kinetic-energy max, and the function-space membership (a warning, not an
    abort, when it fails). Checkpoints each iterate under out_dir when given.
    """
    cfg.validate()
    alpha = cfg.resolved_alpha()
    grid = GridSpec(t_final=cfg.t_final, n_t=cfg.n_t,
                    box_radius=cfg.box_radius, n_x=cfg.n_x)
    sph = sphere_rule(cfg.sphere_nodes_polar, cfg.sphere_nodes_azimuth)
    vball = ball_rule(min(data.support_radius, 8.0), cfg.v_nodes_radial,
                      cfg.v_nodes_polar, cfg.v_nodes_azimuth)

    def log(msg):
        if progress:
            progress(msg)

    # Lambda sizing from the measured linear-field norm
    t0 = time.time()
    lin_cache = build_linear_cache(data, grid, sph)
    lin_norms = measure_norms(lin_cache, alpha, cfg.norm_probes, cfg.pair_probes,
                              cfg.seed)
    lam = cfg.lam
    if math.isnan(lam):
        lam = 2.0 + 2.0 * (lin_norms.K0 + lin_norms.K1a)
    elif lam < 2.0 + 2.0 * (lin_norms.K0 + lin_norms.K1a):
        raise ValueError(
            f"Lambda={lam} below the required 2 + 2*||linear|| = "
            f"{2.0 + 2.0 * (lin_norms.K0 + lin_norms.K1a):.4f}")
    log(f"linear field: K0={lin_norms.K0:.4f} K1a={lin_norms.K1a:.4f} "
        f"Lambda={lam:.4f} ({time.time() - t0:.1f}s)")

    if data.eps0 > 0.0:
        components, tail_report = decompose(data, cfg.k_max, cfg.tail_tol,
                                            seed=cfg.seed)
        ensembles = _sample_all(components, cfg)
    else:
        components, tail_report = [], {"k_max": cfg.k_max,
                                       "analytic_tail_mass_bound": 0.0,
                                       "sampled_tail_sup": 0.0,
                                       "tail_tol": cfg.tail_tol}
        ensembles = []
    h = cfg.smoothing_h
    if math.isnan(h):
        h = default_smoothing_h(ensembles) if ensembles else 1.0

    probes = norm_probes(grid, cfg.norm_probes, cfg.seed)
    r_min = cfg.r_min_factor * cfg.box_radius

    # iterate-independent field part: Kirchhoff evolution plus surface terms
    static_vals = lin_cache.values.reshape(-1, 6)
    if data.eps0 > 0.0 and ensembles:
        static_vals = static_vals + _surface_block(data, grid.nodes(), sph, vball)

    prev_cache = zero_field_cache(grid)
    states = []
    pushed = []
    converged = False
    for n in range(1, cfg.max_iterations + 1):
        t_iter = time.time()
        if n == 1:
            oracle = ZeroField()
        else:
            oracle = prev_cache.as_oracle(extension=cfg.field_extension)
        pushed = [push_ensemble(e, oracle, cfg.t_final, cfg.push_step,
                                cfg.knot_spacing) for e in ensembles]
        cache, diag = build_iterate_cache(
            data, pushed, grid, sph=sph, vball=vball, r_min=r_min, iterate=n,
            static_vals=static_vals)
        norms = measure_norms(cache, alpha, cfg.norm_probes, cfg.pair_probes,
                              cfg.seed)
        cache.norm_K0 = norms.K0
        cache.norm_K1a = norms.K1a
        d_n = sup_weighted_difference(cache, prev_cache, probes)
        ke = _ke_running_max(pushed, grid, h)
        member = membership_check(norms, lam)
        state = IterationState(n=n, cache=cache, norms=norms, d_n=d_n,
                               ke_max=ke, in_space=member,
                               dropped_weight=diag["dropped_weight"],
                               dropped_count=int(diag["dropped_count"]),
                               wall_seconds=time.time() - t_iter)
        states.append(state)
        log(f"iterate {n}: K0={norms.K0:.4f} K1a={norms.K1a:.4f} "
            f"d_n={d_n:.3e} ke_max={ke:.3e} member={member} "
            f"({state.wall_seconds:.1f}s)")
        if not member:
            log(f"warning: iterate {n} left the function space "
                f"(K0={norms.K0:.3f} vs Lambda={lam:.3f})")
        if out_dir is not None:
            _write_checkpoint(out_dir, cfg, data, state, pushed, lam, lin_norms)
        prev_cache = cache
        if d_n < cfg.convergence_threshold:
            converged = True
            break
    return RunResult(config=cfg, lam=lam, linear_norms=lin_norms,
                     states=states, pushed=pushed, components=components,
                     converged=converged, tail_report=tail_report)


def _write_checkpoint(out_dir, cfg: RunConfig, data: InitialData,
                      state: IterationState, pushed, lam: float,
                      lin_norms: NormReport) -> None:
    from .config import config_hash, config_to_text

    it_dir = os.path.join(out_dir, f"iterate_{state.n:03d}")
    os.makedirs(it_dir, exist_ok=True)
    state.cache.save(os.path.join(it_dir, "field_cache.rvmf"))
    stride = max(1, int(round(1.0 / max(cfg.knot_spacing, 1e-9) / 2)))
    files = {"field_cache": "field_cache.rvmf"}
    for pe in pushed:
        name = f"ensemble_k{pe.k}.rvme"
        save_ensemble(os.path.join(it_dir, name), pe, knot_stride=stride)
        files[f"ensemble_k{pe.k}"] = name
    manifest = {
        "format": "rvm-manifest-v1",
        "iterate": state.n,
        "scenario": cfg.scenario,
        "config_hash": config_hash(cfg),
        "lambda": lam,
        "linear_norms": {"K0": lin_norms.K0, "K1a": lin_norms.K1a},
        "norms": {"K0": state.norms.K0, "K1a": state.norms.K1a,
                  "alpha": state.norms.alpha},
        "d_n": state.d_n,
        "kinetic_energy_max": state.ke_max,
        "in_space": state.in_space,
        "dropped_weight": state.dropped_weight,
        "dropped_count": state.dropped_count,
        "files": files,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "tool_version": _tool_version(),
        "note": "geometric-contraction stopping is an empirical surrogate "
                "for the proved pointwise convergence",
    }
    with open(os.path.join(it_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "config.rvm.cfg"), "w") as fh:
        fh.write(config_to_text(cfg))


def _tool_version() -> str:
    from . import __version__

    return __version__


# ---------------------------------------------------------------------------
# Decay series
# ---------------------------------------------------------------------------

def density_moment_series(data: InitialData, cache: FieldCache, times,
                          x=np.zeros(3), v_radius: float = 10.0,
                          rule=None, step: float = 0.02,
                          extension: str = "decay_clamp"):
    """Velocity integral of f at fixed x over the given times, by quadrature of
    the semi-Lagrangian density (backward transport through the cached field).

    Returns an array of (t, integral) rows, the series whose log-log slope
    against 1+t is the density decay diagnostic.
    """
    rule = rule or ball_rule(v_radius, 12, 8, 16)
    oracle = cache.as_oracle(extension=extension)
    out = []
    x = np.asarray(x, dtype=float)
    for t in times:
        X = np.broadcast_to(x, (len(rule.nodes), 3)).copy()
        if t == 0.0:
            vals = data.f0(X, rule.nodes)
        else:
            X0, V0 = integrate_states_to(oracle, float(t), 0.0, X, rule.nodes,
                                         step)
            vals = data.f0(X0, V0)
        out.append((float(t), float(rule.weights @ vals)))
    return np.asarray(out)
