"""Independent oracles and the identity/inequality test suite.

Every oracle here is independent of the code path it validates: cone volume
integrals are re-done by tensor-grid quadrature in (r, omega, v) against a
semi-Lagrangian density (never particle sums); Maxwell equations are checked
by finite differences of the cached field against deposited sources; measure
bounds by Monte Carlo against grid counting; decay rates by log-log fits.
Checks with explicit constants are hard pass/fail; checks whose constants are
existential report the measured constant and its stability instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .characteristics import integrate_characteristic, integrate_states_to
from .core import InitialData, SpacetimePoint, decay_weight, hat_velocity, sobol_points
from .density import DyadicBounds, PushedEnsemble, velocity_support_radius
from .fields import (
    ConeKernelSet,
    FieldCache,
    cone_crossings,
    kernel_kS_force,
    kernel_kT,
    sphere_integral_bound_check,
)
from .quadrature import ball_rule, radial_rule, sphere_rule

__all__ = [
    "OracleConfig",
    "momentum_conservation_check",
    "constant_field_backflow",
    "cone_quadrature_oracle",
    "maxwell_residual",
    "measure_fd_order",
    "schaeffer_measure_check",
    "schaeffer_grid_count",
    "decay_fit",
    "lemma_suite",
]


@dataclass
class OracleConfig:
    """Grids, stencils and sample counts for the oracle suite."""

    cone_r_nodes: int = 24
    cone_sphere_polar: int = 12
    cone_sphere_azimuth: int = 24
    v_radial: int = 10
    v_polar: int = 6
    v_azimuth: int = 12
    fd_space: float = 0.5  # stencil spacing; keep >= 2x cache spacing
    fd_time: float = 0.5
    mc_samples: int = 200_000
    transport_step: float = 0.02
    seed: int = 424242

    def __post_init__(self):
        for name in ("cone_r_nodes", "cone_sphere_polar", "cone_sphere_azimuth",
                     "v_radial", "v_polar", "v_azimuth", "mc_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.fd_space <= 0 or self.fd_time <= 0 or self.transport_step <= 0:
            raise ValueError("stencil spacings must be positive")


# ---------------------------------------------------------------------------
# Momentum conservation on the backward cone
# ---------------------------------------------------------------------------

def momentum_conservation_check(pushed: PushedEnsemble, comp, observer: SpacetimePoint,
                                y_rule=None, v_rule=None):
    """Cone-flux identity for one shell: the (1 + vhat.omega)-weighted cone
    integral of the transported density equals the initial mass inside the
    ball |y - x| <= t.

    In the particle representation the weight cancels the retardation Jacobian
    exactly, so the left side is the plain weight sum over cone-crossing
    particles; the right side is quadrature of the initial component over the
    ball. Returns (lhs, rhs, relative_error).
    """
    t = float(observer.t)
    x = np.asarray(observer.x, dtype=float)
    if t == 0.0:
        return 0.0, 0.0, 0.0
    mask = np.linalg.norm(pushed.knots.X[0] - x, axis=1) <= t
    lhs = float(pushed.w[mask].sum())

    radius = min(t, float(np.linalg.norm(x)) + comp.outer_radius)
    y_rule = y_rule or ball_rule(radius, 24, 12, 24)
    v_rule = v_rule or ball_rule(comp.outer_radius, 12, 8, 16)
    if y_rule.radius != radius:
        y_rule = ball_rule(radius, 24, 12, 24)
    Y = y_rule.nodes + x
    f = comp(Y[:, None, :], v_rule.nodes[None, :, :])
    rhs = float(y_rule.weights @ f @ v_rule.weights)
    rel = abs(lhs - rhs) / max(abs(rhs), 1e-300)
    return lhs, rhs, rel


# ---------------------------------------------------------------------------
# Cone quadrature oracle
# ---------------------------------------------------------------------------

def constant_field_backflow(E: np.ndarray):
    """Closed-form backward flow through a constant electric field.

    Returns flow(tau, Y, V) -> (X0, V0): the time-0 state of the
    characteristic that reaches (Y, V) at time tau. Used to make the cone
    oracle's density evaluation algebraic. For E = 0 this is free streaming.
    """
    E = np.asarray(E, dtype=float)
    Emag = float(np.linalg.norm(E))
    if Emag == 0.0:
        def flow0(tau, Y, V):
            return Y - tau * hat_velocity(V), V.copy()
        return flow0
    e1 = E / Emag
    # orthonormal frame (e1, e2, e3)
    a = np.array([1.0, 0.0, 0.0]) if abs(e1[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e2 = np.cross(e1, a)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(e1, e2)
    R = np.stack([e1, e2, e3], axis=0)  # rows: new basis

    def flow(tau, Y, V):
        Yl = Y @ R.T
        Vl = V @ R.T
        u1 = Vl[:, 0]
        m = np.sqrt(1.0 + Vl[:, 1] ** 2 + Vl[:, 2] ** 2)
        u0 = u1 - Emag * tau
        d1 = (np.sqrt(m**2 + u1**2) - np.sqrt(m**2 + u0**2)) / Emag
        dperp = (np.arcsinh(u1 / m) - np.arcsinh(u0 / m)) / Emag
        X0 = Yl.copy()
        X0[:, 0] -= d1
        X0[:, 1] -= Vl[:, 1] * dperp
        X0[:, 2] -= Vl[:, 2] * dperp
        V0 = Vl.copy()
        V0[:, 0] = u0
        return X0 @ R, V0 @ R

    return flow


def cone_quadrature_oracle(data: InitialData, observer: SpacetimePoint,
                           kernel, p: int, ocfg: OracleConfig,
                           backflow=None, field_oracle=None,
                           force_field=None, v_radius: float | None = None,
                           r_min: float = 0.0):
    """Direct tensor-grid quadrature of a cone integral (the D1 oracle).

    Evaluates int over {r_min <= |y-x| <= t} x R^3_v of
        kernel(omega, vhat[, F]) f(t-|y-x|, y, v) / |y-x|^p  dv dy
    in spherical cone coordinates y = x + r omega (the r^2 measure cancels the
    kernel weight up to r^(2-p)) with a truncated velocity ball. The density
    is semi-Lagrangian: either through the closed-form ``backflow`` or by
    fixed-step backward transport through ``field_oracle``. ``force_field``
    (t, Y) -> (E, B) supplies the force factor for source-type kernels, which
    then receive (omega, vhat, F). ``r_min`` matches the particle-sum cutoff
    so both estimators target the same truncated integral (the particle sum
    has finite mean but infinite variance across the cone tip, so agreement
    checks must share the truncation). Intended for tiny configurations only.
    """
    t = float(observer.t)
    x = np.asarray(observer.x, dtype=float)
    if t <= 0.0:
        return np.zeros(3)
    sph = sphere_rule(ocfg.cone_sphere_polar, ocfg.cone_sphere_azimuth)
    rr, wr = radial_rule(t, ocfg.cone_r_nodes, r_min=r_min)
    if v_radius is None:
        v_radius = min(data.support_radius + 2.0, 12.0)
    vb = ball_rule(v_radius, ocfg.v_radial, ocfg.v_polar, ocfg.v_azimuth)
    vh = hat_velocity(vb.nodes)

    total = np.zeros(3)
    for r, wri in zip(rr, wr):
        tau = t - r
        Y = x[None, :] + r * sph.nodes  # (ns, 3)
        ns, nv = len(Y), len(vb.nodes)
        Yf = np.repeat(Y, nv, axis=0)
        Vf = np.tile(vb.nodes, (ns, 1))
        if backflow is not None:
            X0, V0 = backflow(tau, Yf, Vf)
        elif tau == 0.0:
            X0, V0 = Yf, Vf
        else:
            X0, V0 = integrate_states_to(field_oracle, tau, 0.0, Yf, Vf,
                                         ocfg.transport_step)
        f = data.f0(X0, V0).reshape(ns, nv)
        om = sph.nodes[:, None, :]
        if force_field is not None:
            E, B = force_field(tau, Y)
            F = E[:, None, :] + np.cross(vh[None, :, :], B[:, None, :])
            ker = kernel(om, vh[None, :, :], F)
        else:
            ker = kernel(om, vh[None, :, :])
        contrib = np.einsum("sv,svc,s,v->c", f, ker, sph.weights, vb.weights)
        total += wri * r ** (2 - p) * contrib
    return total


# ---------------------------------------------------------------------------
# Maxwell residuals by finite differences
# ---------------------------------------------------------------------------

_FD4 = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
_FD4_OFF = np.array([-2, -1, 1, 2])


def _fd_space(cache_eval, t, X, comp_axis, h):
    """4th-order centered first derivative along space axis comp_axis."""
    acc = 0.0
    for c, o in zip(_FD4, _FD4_OFF):
        Xo = X.copy()
        Xo[:, comp_axis] += o * h
        E, B = cache_eval(t, Xo)
        acc = acc + c * np.concatenate([E, B], axis=1)
    return acc / h


def maxwell_residual(cache: FieldCache, rho_j_eval=None, probes=None,
                     n_probes: int = 512, fd_space: float | None = None,
                     fd_time: float | None = None, seed: int = 7):
    """Centered finite-difference residuals of the four field equations.

    Fourth order in space, second order in time, at interior probes that keep
    the stencil inside the cache domain. ``rho_j_eval(t, X, h_hint)`` returns
    (rho, j) deposited at a smoothing scale tied to the stencil; None means
    vacuum. Returns max and mean norms per equation plus the field scale.
    """
    g = cache.grid
    h = fd_space if fd_space is not None else min(2.0 * g.dx, g.box_radius / 5.0)
    k = fd_time if fd_time is not None else min(2.0 * g.dt, g.t_final / 5.0)
    if probes is None:
        u = sobol_points(n_probes, 4, seed)
        t = k + u[:, 0] * (g.t_final - 2 * k)
        X = (2.0 * u[:, 1:4] - 1.0) * (g.box_radius - 2 * h)
    else:
        t, X = probes
        X = np.atleast_2d(X)

    def ev(tq, Xq):
        return cache.interpolate(tq, Xq)

    res = {"faraday": [], "ampere": [], "gauss_e": [], "gauss_b": []}
    scale = 0.0
    for ti in np.unique(t):
        sel = t == ti
        Xs = X[sel]
        Ep, Bp = ev(ti + k, Xs)
        Em, Bm = ev(ti - k, Xs)
        dtE = (Ep - Em) / (2 * k)
        dtB = (Bp - Bm) / (2 * k)
        dEB = [_fd_space(ev, ti, Xs, ax, h) for ax in range(3)]  # d/dx_ax of (E,B)
        curlE = np.stack([dEB[1][:, 2] - dEB[2][:, 1],
                          dEB[2][:, 0] - dEB[0][:, 2],
                          dEB[0][:, 1] - dEB[1][:, 0]], axis=1)
        curlB = np.stack([dEB[1][:, 5] - dEB[2][:, 4],
                          dEB[2][:, 3] - dEB[0][:, 5],
                          dEB[0][:, 4] - dEB[1][:, 3]], axis=1)
        divE = dEB[0][:, 0] + dEB[1][:, 1] + dEB[2][:, 2]
        divB = dEB[0][:, 3] + dEB[1][:, 4] + dEB[2][:, 5]
        if rho_j_eval is not None:
            rho, j = rho_j_eval(ti, Xs, h)
        else:
            rho, j = np.zeros(len(Xs)), np.zeros((len(Xs), 3))
        E0, B0 = ev(ti, Xs)
        scale = max(scale, float(np.abs(E0).max(initial=0)),
                    float(np.abs(B0).max(initial=0)))
        res["ampere"].append(np.linalg.norm(dtE - curlB + 4 * np.pi * j, axis=1))
        res["gauss_e"].append(np.abs(divE - 4 * np.pi * rho))
        res["faraday"].append(np.linalg.norm(dtB + curlE, axis=1))
        res["gauss_b"].append(np.abs(divB))
    out = {}
    for key, chunks in res.items():
        allv = np.concatenate(chunks)
        out[key] = {"max": float(allv.max()), "mean": float(allv.mean())}
    out["field_scale"] = scale
    out["fd_space"] = h
    out["fd_time"] = k
    return out


def measure_fd_order(coarse: dict, fine: dict, refinement: float = 2.0,
                     floor: float = 0.0) -> dict:
    """Observed convergence order per equation from two residual readings.

    Use one fixed probe set for both readings. Residuals at or below
    ``floor`` (e.g. a symmetry-cancelled equation at rounding level) are
    reported as infinite order rather than a meaningless ratio.
    """
    orders = {}
    for key in ("ampere", "gauss_e", "faraday", "gauss_b"):
        rc, rf = coarse[key]["mean"], fine[key]["mean"]
        if rf <= floor or rc <= floor or rf <= 0 or rc <= 0:
            orders[key] = float("inf")
        else:
            orders[key] = math.log(rc / rf) / math.log(refinement)
    return orders


# ---------------------------------------------------------------------------
# Velocity-set measure (Monte Carlo vs grid count)
# ---------------------------------------------------------------------------

def schaeffer_measure_check(P: float, delta: float, mc_samples: int,
                            v_center: np.ndarray, seed: int = 0):
    """Monte Carlo measure of S = {w : |w| <= P, |vhat - what| <= delta}.

    Returns (mu_est, ratio) with ratio = mu/(P^5 delta^3); the suite asserts
    the ratio stays bounded across a (P, delta, v_center) family.
    """
    if P < 1.0:
        raise ValueError("P must be >= 1")
    if delta <= 0:
        raise ValueError("delta must be positive")
    v_center = np.asarray(v_center, dtype=float)
    if np.linalg.norm(v_center) > P + 1e-12:
        raise ValueError("|v_center| must be <= P")
    rng = np.random.default_rng(seed)
    n = int(mc_samples)
    w = rng.normal(size=(n, 3))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    w *= (P * rng.uniform(size=(n, 1)) ** (1.0 / 3.0))
    vh = hat_velocity(v_center)
    hits = np.linalg.norm(hat_velocity(w) - vh, axis=1) <= delta
    vol = 4.0 / 3.0 * math.pi * P**3
    mu = vol * float(hits.mean())
    return mu, mu / (P**5 * delta**3)


def schaeffer_grid_count(P: float, delta: float, n_grid: int = 160):
    """Deterministic grid-count measure of S for v_center = 0.

    There S = {|w| <= min(P, delta/sqrt(1-delta^2))} (a ball); counting is
    done on a grid over its bounding box.
    """
    R = P if delta >= 1.0 else min(P, delta / math.sqrt(1.0 - delta * delta))
    ax = np.linspace(-R, R, n_grid)
    cell = (ax[1] - ax[0]) ** 3
    Xg, Yg, Zg = np.meshgrid(ax, ax, ax, indexing="ij")
    W = np.stack([Xg.ravel(), Yg.ravel(), Zg.ravel()], axis=1)
    inside = (np.linalg.norm(W, axis=1) <= P) & (
        np.linalg.norm(hat_velocity(W), axis=1) <= delta)
    return cell * float(inside.sum())


# ---------------------------------------------------------------------------
# Log-log decay fits
# ---------------------------------------------------------------------------

def decay_fit(series, window=None):
    """Least-squares slope of log(value) against log(1+t).

    ``series`` is (n, 2) rows (t, value) with at least 8 points; non-positive
    values are rejected. Returns (slope, ci_width) with a 95 percent
    confidence half-width from the standard error of the slope.
    """
    arr = np.asarray(series, dtype=float)
    if window is not None:
        lo, hi = window
        arr = arr[(arr[:, 0] >= lo) & (arr[:, 0] <= hi)]
    if len(arr) < 8:
        raise ValueError("need at least 8 points in the fit window")
    if np.any(arr[:, 1] <= 0.0):
        raise ValueError("values must be positive for a log fit")
    X = np.log1p(arr[:, 0])
    Y = np.log(arr[:, 1])
    A = np.stack([X, np.ones_like(X)], axis=1)
    coef, res, _, _ = np.linalg.lstsq(A, Y, rcond=None)
    slope = float(coef[0])
    n = len(X)
    resid = Y - A @ coef
    s2 = float(resid @ resid) / max(n - 2, 1)
    sxx = float(np.sum((X - X.mean()) ** 2))
    stderr = math.sqrt(s2 / sxx) if sxx > 0 else float("inf")
    return slope, 1.96 * stderr


# ---------------------------------------------------------------------------
# The aggregated suite
# ---------------------------------------------------------------------------

def _check(check_id, ref, status, values, witness=None):
    return {"check_id": check_id, "paper_ref": ref, "status": status,
            "values": values, "witnesses": witness}


def lemma_suite(result, data: InitialData, ocfg: OracleConfig | None = None,
                quick: bool = False, include=None) -> dict:
    """Run the identity/inequality battery on a completed run.

    Hard pass/fail only where constants are explicit (kernel bounds, sphere
    integral bounds, function-space membership); everything else reports the
    measured constant and a stability reading. ``include`` restricts the run
    to the named check ids. Returns a JSON-ready report.
    """
    from .config import config_hash

    ocfg = ocfg or OracleConfig()
    cfg = result.config
    include = set(include) if include else None
    cache = result.final_cache
    K0 = cache.norm_K0 if np.isfinite(cache.norm_K0) else 0.0
    K1a = cache.norm_K1a if np.isfinite(cache.norm_K1a) else 0.0
    t_end = cache.grid.t_final
    oracle = cache.as_oracle(extension="decay_clamp")

    def check_kernel_bounds():
        n_kernel = 10**5 if quick else 10**6
        kb = ConeKernelSet.bound_check(n_samples=n_kernel, seed=ocfg.seed)
        return ("pass" if kb["passed"] else "fail",
                "explicit bounds on the cone kernels and the parallelogram identity",
                kb)

    def check_sphere_integral_bounds():
        rng = np.random.default_rng(ocfg.seed + 1)
        ns = 100 if quick else 400
        samples = [(float(t), float(r), int(k))
                   for t, r, k in zip(rng.uniform(0.1, 30, ns),
                                      rng.uniform(0.0, 30, ns),
                                      rng.integers(2, 6, ns))]
        sb = sphere_integral_bound_check(samples)
        return ("pass" if sb["passed"] else "fail",
                "surface integrals of (1+|y|)^(-k) obey the explicit decay majorant",
                sb)

    def _backward_trajectories(n_traj):
        u = sobol_points(n_traj, 6, ocfg.seed + 2)
        trajs = []
        for row in u:
            x = (2 * row[:3] - 1) * min(2.0, cache.grid.box_radius)
            v = (2 * row[3:] - 1) * 2.0
            trajs.append(integrate_characteristic(oracle, (t_end, x, v), 0.0, 1e-8))
        return trajs

    def check_velocity_comparability():
        from .characteristics import velocity_bound_report

        trajs = _backward_trajectories(12 if quick else 32)
        vb = velocity_bound_report(trajs, K0)
        return ("measured",
                "two-sided comparability of |V| + K0 log(2+K0) along characteristics",
                {"max_ratio": vb["max_ratio"], "L": vb["L"]})

    def check_position_deviation():
        trajs = _backward_trajectories(12 if quick else 32)
        ratios = []
        for traj in trajs:
            V0 = traj.velocity(0.0)[0]
            X0 = traj.position(0.0)[0]
            lamp = np.linalg.norm(V0) + (1.0 + K0 * math.log(2.0 + K0)) ** 2
            for s in traj.s[traj.s > 0.5]:
                Xs = traj.position(s)[0]
                Vs = traj.velocity(s)[0]
                lhs = np.linalg.norm(Xs - X0 - s * hat_velocity(Vs))
                denom = lamp * (math.log(1 + s) + math.log(1 + np.linalg.norm(X0)))
                if denom > 0:
                    ratios.append(lhs / denom)
        return ("measured",
                "logarithmic bound on the deviation from straight-line transport",
                {"max_ratio": float(np.max(ratios)), "n": len(ratios)})

    def check_velocity_separation():
        ratios = []
        npairs = 8 if quick else 24
        up = sobol_points(npairs, 9, ocfg.seed + 3)
        for row in up:
            x = (2 * row[:3] - 1) * 2.0
            v1 = (2 * row[3:6] - 1) * 2.0
            v2 = (2 * row[6:9] - 1) * 2.0
            t1 = integrate_characteristic(oracle, (t_end, x, v1), 0.0, 1e-8)
            t2 = integrate_characteristic(oracle, (t_end, x, v2), 0.0, 1e-8)
            R = max(np.linalg.norm(t1.position(0.0)[0]),
                    np.linalg.norm(t2.position(0.0)[0]),
                    np.linalg.norm(t1.velocity(0.0)[0]),
                    np.linalg.norm(t2.velocity(0.0)[0]))
            lamp = R + (1.0 + K0 * math.log(2.0 + K0)) ** 2
            lhs = t_end * np.linalg.norm(hat_velocity(v1) - hat_velocity(v2))
            denom = lamp * (math.log(1.0 + K1a + K0 + R) + 1.0)
            ratios.append(lhs / denom)
        return ("measured",
                "decay of the speed separation of characteristics sharing an endpoint",
                {"max_ratio": float(np.max(ratios)), "n": len(ratios)})

    def check_averaged_density_decay():
        stats = {}
        vprobe = sobol_points(16 if quick else 48, 4, ocfg.seed + 4)
        for pe in result.pushed:
            k = pe.k
            db = DyadicBounds.from_norms(k, K0, K1a)
            comp = next(c for c in result.components if c.k == k)
            vr = velocity_support_radius(k, K0, cfg.support_cfactor)
            rule = ball_rule(vr, 8, 4, 8)
            sup_half, sup_full = 0.0, 0.0
            for row in vprobe:
                t = row[0] * t_end
                x = (2 * row[1:4] - 1) * cache.grid.box_radius
                X = np.broadcast_to(x, (len(rule.nodes), 3)).copy()
                X0, V0 = integrate_states_to(oracle, float(t), 0.0, X,
                                             rule.nodes, ocfg.transport_step)
                avg = float(rule.weights @ comp(X0, V0))
                shape = (comp.sup_bound * db.lam1**5 * db.lam2**3 * db.lam3**3
                         / (2.0**k + t + np.linalg.norm(x)) ** 3)
                ratio = avg / shape
                sup_full = max(sup_full, ratio)
                if t <= t_end / 2:
                    sup_half = max(sup_half, ratio)
            stats[k] = {"sup_ratio_half_horizon": sup_half,
                        "sup_ratio_full_horizon": sup_full}
        return ("measured",
                "shell-averaged density obeys the (2^k+t+|x|)^-3 shape", stats)

    def check_weighted_cone_charge():
        stats = {}
        obs_list = [SpacetimePoint(t_end * f, np.zeros(3)) for f in (0.5, 1.0)]
        for pe in result.pushed:
            k = pe.k
            comp = next(c for c in result.components if c.k == k)
            db = DyadicBounds.from_norms(k, K0, K1a)
            worst = {}
            for p in (0, 1, 2):
                best = 0.0
                for obs in obs_list:
                    mask, s, omega, r, c, vh, F = cone_crossings(pe, obs)
                    keep = mask & (r > 1e-9)
                    val = float(np.sum(pe.w[keep] / ((1.0 + c[keep]) * r[keep] ** p)))
                    shape = (comp.sup_bound * (2.0**k + obs.t) ** (-p)
                             * 2.0 ** ((6 - 2 * p) * k) * db.lam1 ** (2 + p)
                             * db.lam2**p * db.lam3**p)
                    best = max(best, val / shape)
                worst[str(p)] = best
            stats[k] = worst
        return ("measured",
                "cone integrals of the shell density with r^-p weights", stats)

    def check_field_term_decay():
        stats = {}
        for pe in result.pushed:
            k = pe.k
            comp = next(c for c in result.components if c.k == k)
            db = DyadicBounds.from_norms(k, K0, K1a)
            ratios_T, ratios_S = [], []
            for obs in (SpacetimePoint(0.5 * t_end, np.zeros(3)),
                        SpacetimePoint(t_end, np.array([0.25 * t_end, 0, 0]))):
                mask, s, omega, r, c, vh, F = cone_crossings(pe, obs)
                keep = mask & (r > 1e-9)
                if not np.any(keep):
                    continue
                jac = pe.w[keep] / (1.0 + c[keep])
                ET = (-kernel_kT(omega[keep], vh[keep])
                      * (jac / r[keep] ** 2)[:, None]).sum(axis=0)
                ES = (-kernel_kS_force(omega[keep], vh[keep], F[keep])
                      * (jac / r[keep])[:, None]).sum(axis=0)
                rx = float(np.linalg.norm(obs.x))
                shapeT = (2.0 ** (2 * k) * db.lam1**5 * db.lam2**2 * db.lam3**2
                          * comp.sup_bound / (rx + obs.t + 1.0) ** 2)
                shapeS = (2.0 ** (4 * k) * db.lam1**4 * db.lam2 * db.lam3
                          * max(K0, 1e-300) * comp.sup_bound
                          / ((abs(obs.t - rx) + 1.0) * (rx + obs.t + 1.0)))
                ratios_T.append(float(np.linalg.norm(ET)) / shapeT)
                ratios_S.append(float(np.linalg.norm(ES)) / shapeS)
            stats[k] = {"transport_ratio_max": max(ratios_T, default=0.0),
                        "source_ratio_max": max(ratios_S, default=0.0)}
        return ("measured",
                "pointwise decay shapes of the per-shell transport and source terms",
                stats)

    def check_momentum_conservation():
        stats = {}
        for pe in result.pushed:
            comp = next(c for c in result.components if c.k == pe.k)
            obs = SpacetimePoint(0.75 * t_end, np.zeros(3))
            lhs, rhs, rel = momentum_conservation_check(pe, comp, obs)
            stats[pe.k] = {"lhs": lhs, "rhs": rhs, "rel_error": rel}
        return ("measured",
                "cone-flux identity for the transported shell densities", stats)

    def check_density_pointwise_decay():
        ratios = []
        ud = sobol_points(32 if quick else 128, 7, ocfg.seed + 5)
        for row in ud:
            t = row[0] * t_end
            x = (2 * row[1:4] - 1) * 2.0
            v = (2 * row[4:7] - 1) * 4.0
            X0, V0 = integrate_states_to(oracle, float(t), 0.0, x[None],
                                         v[None], ocfg.transport_step)
            fval = float(data.f0(X0, V0)[0])
            bound = data.eps0 * (1.0 + np.linalg.norm(v)) ** (-data.q)
            ratios.append(fval / bound)
        return ("measured",
                "transported density keeps the (1+|v|)^-q decay up to a constant",
                {"max_ratio": float(np.max(ratios))})

    def check_function_space_membership():
        members = [bool(st.in_space) for st in result.states]
        return ("pass" if all(members) else "fail",
                "weighted norms stay within the closed ball (K0 <= L, K1a <= L^2)",
                {"lambda": result.lam,
                 "per_iterate": [{"n": st.n, "K0": st.norms.K0,
                                  "K1a": st.norms.K1a,
                                  "in_space": bool(st.in_space)}
                                 for st in result.states]})

    def check_contraction_surrogate():
        dns = [st.d_n for st in result.states]
        ratios = [dns[i] / dns[i + 1] if dns[i + 1] > 0 else float("inf")
                  for i in range(len(dns) - 1)]
        return ("measured",
                "empirical geometric decrease of the weighted iterate differences "
                "(surrogate; the underlying convergence statement is qualitative)",
                {"d_n": dns, "ratios": ratios})

    def check_kinetic_energy_bounded():
        kes = [st.ke_max for st in result.states]
        stable = (max(kes) <= 1.2 * min(kes)) if (kes and min(kes) > 0) else True
        return ("measured",
                "running max of the kinetic energy density stays bounded across iterates",
                {"per_iterate": kes, "stable_20pct": bool(stable)})

    def check_velocity_set_measure():
        fam = {}
        ratios = []
        n_mc = ocfg.mc_samples // 4 if quick else ocfg.mc_samples
        for P in (2.0, 4.0, 8.0):
            for delta in (0.05, 0.1, 0.2):
                vc = np.array([0.7 * P, 0.0, 0.0])
                mu, ratio = schaeffer_measure_check(P, delta, n_mc, vc,
                                                    seed=ocfg.seed + 6)
                fam[f"P{P:g}_d{delta:g}"] = {"mu": mu, "ratio": ratio}
                if ratio > 0:
                    ratios.append(ratio)
        spread = max(ratios) / min(ratios) if ratios else 1.0
        return ("measured",
                "measure of near-aligned relativistic-speed sets scales like P^5 d^3",
                {"family": fam, "ratio_spread": spread})

    registry = [
        ("kernel_bounds", check_kernel_bounds),
        ("sphere_integral_bounds", check_sphere_integral_bounds),
        ("velocity_comparability", check_velocity_comparability),
        ("position_deviation", check_position_deviation),
        ("velocity_separation", check_velocity_separation),
        ("function_space_membership", check_function_space_membership),
        ("contraction_surrogate", check_contraction_surrogate),
        ("kinetic_energy_bounded", check_kinetic_energy_bounded),
        ("velocity_set_measure", check_velocity_set_measure),
    ]
    if result.pushed:
        registry += [
            ("averaged_density_decay", check_averaged_density_decay),
            ("weighted_cone_charge", check_weighted_cone_charge),
            ("field_term_decay", check_field_term_decay),
            ("momentum_conservation", check_momentum_conservation),
            ("density_pointwise_decay", check_density_pointwise_decay),
        ]

    checks = []
    for cid, fn in registry:
        if include is not None and cid not in include:
            continue
        status, ref, values = fn()
        checks.append(_check(cid, ref, status, values))
    passed = all(c["status"] != "fail" for c in checks)
    return {"passed": passed, "config_hash": config_hash(cfg), "checks": checks}
