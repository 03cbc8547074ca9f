"""Shared domain vocabulary: vectors, phase states, field samples, initial data,
run configuration.

Units: c = 1 throughout; no physical-unit conversion layer. All spatial and
velocity quantities are dimensionless triples. The velocity variable ``v`` is
unbounded; the relativistic speed ``vhat = v/sqrt(1+|v|^2)`` always has norm
strictly below one.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import erf

Vec3 = np.ndarray

__all__ = [
    "Vec3",
    "vec3",
    "hat_velocity",
    "decay_weight",
    "PhaseState",
    "SpacetimePoint",
    "FieldSample",
    "InitialData",
    "RunConfig",
    "default_alpha",
    "make_gaussian_scenario",
    "make_empty_scenario",
    "scenario_from_config",
    "resolve_threads",
    "sobol_points",
]

# Shape constant for the rotational Gaussian fields (u x x) exp(-|x|^2): with
# this factor the weighted sups |grad^k F|(1+|x|)^(2+k) of the two rotational
# pieces combined stay below 0.9*M for k = 0,1,2 (measured 1.47/6.04/34.9 per
# unit amplitude), leaving room for the Coulomb part.
_ROT_SCALE = 0.012


def vec3(x: float, y: float, z: float) -> Vec3:
    """Build a 3-vector, rejecting non-finite components."""
    v = np.array([x, y, z], dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("vector components must be finite")
    return v


def hat_velocity(v: np.ndarray) -> np.ndarray:
    """Relativistic speed v/sqrt(1+|v|^2); norm strictly below 1.

    Works on a single triple or any (..., 3) array.
    """
    v = np.asarray(v, dtype=float)
    n2 = np.sum(v * v, axis=-1, keepdims=True)
    return v / np.sqrt(1.0 + n2)


def decay_weight(t, x_norm):
    """Linear-wave decay weight (|t-|x||+1)(t+|x|+1)."""
    t = np.asarray(t, dtype=float)
    r = np.asarray(x_norm, dtype=float)
    return (np.abs(t - r) + 1.0) * (t + r + 1.0)


def _finite_readonly(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must have finite components")
    a = a.copy()
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PhaseState:
    """A point (x, v) in 6D phase space; v is the unbounded velocity variable."""

    x: Vec3
    v: Vec3

    def __post_init__(self):
        object.__setattr__(self, "x", _finite_readonly(self.x, "x"))
        object.__setattr__(self, "v", _finite_readonly(self.v, "v"))

    @property
    def vhat(self) -> Vec3:
        return hat_velocity(self.v)


@dataclass(frozen=True)
class SpacetimePoint:
    """An observer (t, x) with t >= 0."""

    t: float
    x: Vec3

    def __post_init__(self):
        if not (math.isfinite(self.t) and self.t >= 0.0):
            raise ValueError("t must be finite and >= 0")
        object.__setattr__(self, "x", _finite_readonly(self.x, "x"))


@dataclass(frozen=True)
class FieldSample:
    """An (E, B) pair at one spacetime point."""

    E: Vec3
    B: Vec3

    def __post_init__(self):
        object.__setattr__(self, "E", _finite_readonly(self.E, "E"))
        object.__setattr__(self, "B", _finite_readonly(self.B, "B"))

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.E) + np.linalg.norm(self.B))


@dataclass(frozen=True)
class InitialData:
    """Admissible initial data (f0, E0, B0).

    ``f0(x, v)`` accepts (..., 3) arrays and returns (...,) densities >= 0.
    ``E0``/``B0`` map (..., 3) positions to (..., 3) fields; their Jacobians
    (..., 3, 3) and Hessians (..., 3, 3, 3), indexed [i, j(, k)] for
    d_j (d_k) F_i, are available analytically.

    Expected bounds (checked by sampling in the test suite, not here):
    |grad^k E0| + |grad^k B0| <= M (1+|x|)^(-2-k) for k = 0,1,2,
    0 <= f0 <= eps0 (1+|x|+|v|)^(-q), div B0 = 0, div E0 = 4 pi rho0.
    """

    f0: Callable[[np.ndarray, np.ndarray], np.ndarray]
    E0: Callable[[np.ndarray], np.ndarray]
    B0: Callable[[np.ndarray], np.ndarray]
    E0_jac: Callable[[np.ndarray], np.ndarray]
    B0_jac: Callable[[np.ndarray], np.ndarray]
    E0_hess: Callable[[np.ndarray], np.ndarray]
    B0_hess: Callable[[np.ndarray], np.ndarray]
    M: float
    q: float
    eps0: float
    amplitude: float  # peak value of f0
    support_radius: float  # |(x,v)| beyond which f0 is numerically zero
    name: str = "custom"
    # optional closed forms for (n.grad)F and curl F; when all four are
    # present the sphere quadrature avoids materializing Jacobians
    E0_dirderiv: Callable | None = None
    B0_dirderiv: Callable | None = None
    E0_curl: Callable | None = None
    B0_curl: Callable | None = None
    # optional fused evaluator of the two wave integrands
    # (E0 + t (n.grad)E0 + t curl B0, B0 + t (n.grad)B0 - t curl E0)
    # at points Y with directions n and radii t; shares the exponentials
    wave_integrands: Callable | None = None

    def rho0(self, x: np.ndarray, v_rule=None) -> np.ndarray:
        """Velocity integral of f0 at positions x (quadrature over a ball)."""
        from .quadrature import ball_rule

        rule = v_rule if v_rule is not None else ball_rule(self.support_radius, 24, 12, 24)
        x = np.asarray(x, dtype=float)
        vals = self.f0(x[..., None, :], rule.nodes)  # (..., n_nodes)
        return vals @ rule.weights


def resolve_threads(requested: int | None = None) -> int:
    """Worker count: explicit argument, else RVM_THREADS, else logical cores."""
    if requested is not None and requested > 0:
        return requested
    env = os.environ.get("RVM_THREADS", "")
    if env.strip():
        n = int(env)
        if n > 0:
            return n
    return os.cpu_count() or 1


def sobol_points(n: int, dim: int, seed: int) -> np.ndarray:
    """First n points of a scrambled Sobol sequence; deterministic given seed.

    Prefixes are nested: the first m < n points of the same (dim, seed) stream
    are exactly the first m rows, so probe refinement is monotone.
    """
    from scipy.stats import qmc

    eng = qmc.Sobol(d=dim, scramble=True, seed=seed)
    m = max(1, math.ceil(math.log2(max(n, 1))))
    return eng.random_base2(m)[:n]


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

def default_alpha(q: float, beta: float) -> float:
    """Strictly interior choice 0.9*min(beta/6, (q-9)*beta/2)."""
    return 0.9 * min(beta / 6.0, (q - 9.0) * beta / 2.0)


@dataclass
class RunConfig:
    """Everything a run needs; serializes to the sectioned key=value config file.

    ``alpha`` and ``lam`` (the function-space radius Lambda) may be NaN,
    meaning "derive at run time": alpha from (q, beta), Lambda from the
    measured norm of the linear field via Lambda = 2 + 2*||(calE, calB)||.
    """

    # [scenario]
    scenario: str = "gaussian"
    eps0: float = 1e-3
    M: float = 2.0
    q: float = 11.0
    seed: int = 20260810

    # [constants]
    beta: float = 0.5
    alpha: float = float("nan")
    lam: float = float("nan")

    # [discretization]
    particles_per_shell: int = 10000
    k_max: int = 8
    t_final: float = 8.0
    n_t: int = 9
    box_radius: float = 8.0
    n_x: int = 13
    ode_tol: float = 1e-9
    push_step: float = 0.04
    root_tol: float = 1e-9
    knot_spacing: float = 0.25
    sphere_nodes_polar: int = 24
    sphere_nodes_azimuth: int = 48
    v_nodes_radial: int = 10
    v_nodes_polar: int = 6
    v_nodes_azimuth: int = 12
    r_min_factor: float = 1e-6
    smoothing_h: float = float("nan")  # NaN -> twice mean interparticle spacing
    support_cfactor: float = 4.0
    field_extension: str = "decay_clamp"
    tail_tol: float = 1e-10

    # [iteration]
    max_iterations: int = 4
    convergence_threshold: float = 1e-12
    norm_probes: int = 4096
    pair_probes: int = 4096

    # [output]
    decay_times: tuple = (5.0, 6.5, 8.0)

    def resolved_alpha(self) -> float:
        if math.isnan(self.alpha):
            return default_alpha(self.q, self.beta)
        return self.alpha

    def validate(self) -> None:
        if self.scenario not in ("gaussian", "empty"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.scenario == "gaussian":
            if not (self.eps0 >= 0.0):
                raise ValueError("eps0 must be >= 0")
        if not (self.M > 1.0):
            raise ValueError("M must be > 1")
        if not (self.q > 9.0):
            raise ValueError("q must be > 9")
        if not (0.0 < self.beta < 1.0):
            raise ValueError("beta must lie in (0, 1)")
        a = self.resolved_alpha()
        if not (0.0 < a < min(self.beta / 6.0, (self.q - 9.0) * self.beta / 2.0)):
            raise ValueError("alpha outside the admissible region")
        if not math.isnan(self.lam) and not (self.lam > 2.0):
            raise ValueError("Lambda must exceed 2")
        for name in ("particles_per_shell", "k_max", "n_t", "n_x",
                     "max_iterations", "norm_probes", "pair_probes",
                     "sphere_nodes_polar", "sphere_nodes_azimuth",
                     "v_nodes_radial", "v_nodes_polar", "v_nodes_azimuth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("t_final", "box_radius", "ode_tol", "push_step",
                     "root_tol", "knot_spacing", "r_min_factor",
                     "support_cfactor", "convergence_threshold", "tail_tol"):
            if not (getattr(self, name) > 0.0):
                raise ValueError(f"{name} must be positive")
        if self.field_extension not in ("decay_clamp", "zero", "error"):
            raise ValueError("field_extension must be decay_clamp|zero|error")
        if any(t < 0 or t > self.t_final for t in self.decay_times):
            raise ValueError("decay_times must lie in [0, t_final]")

    def with_updates(self, **kw) -> "RunConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# Gaussian scenario
# ---------------------------------------------------------------------------

def gaussian_decay_envelope(q: float) -> float:
    """sup over s >= 0 of (1+s)^q exp(-s^2/2), attained at s* = (sqrt(1+4q)-1)/2.

    For f0 = a exp(-|x|^2-|v|^2) the product f0 (1+|x|+|v|)^q is largest along
    |x| = |v| = s/2 where |x|^2+|v|^2 = s^2/2, so a times this envelope is the
    sharp constant in the decay hypothesis.
    """
    s = 0.5 * (math.sqrt(1.0 + 4.0 * q) - 1.0)
    return (1.0 + s) ** q * math.exp(-0.5 * s * s)


def _coul_series(r2: np.ndarray, coeff) -> np.ndarray:
    """Evaluate sum_n coeff(n) * (-r2)^n with coeff(n) -> 0 fast (12 terms)."""
    out = np.zeros_like(r2)
    pw = np.ones_like(r2)
    for n in range(13):
        c = coeff(n)
        if c != 0.0:
            out = out + c * pw
        pw = pw * (-r2)
    return out


def _coul_scalars(r: np.ndarray, kappa: float):
    """phi, phi'/r and (phi''-phi'/r)/r^2 for the radial Coulomb field phi(r) x.

    phi(r) = kappa u(r)/r^3, u(r) = int_0^r s^2 e^{-s^2} ds,
    kappa = 4 pi a pi^(3/2). Alternating series below r = 0.5 (the closed form
    via erf cancels there); closed forms elsewhere. phi'' is obtained from
    phi'' = -2 kappa e^{-r^2} - 4 phi'/r.
    """
    r = np.asarray(r, dtype=float)
    shape = r.shape
    r = r.ravel()
    r2 = r * r
    e = np.exp(-r2)
    phi = np.empty_like(r)
    dphi_over_r = np.empty_like(r)
    g = np.empty_like(r)

    big = r2 >= 0.25
    if np.any(big):
        rb2 = r2[big]
        rb = r[big]
        eb = e[big]
        u_over_r3 = (math.sqrt(math.pi) / 4.0 * erf(rb) - 0.5 * rb * eb) / (rb2 * rb)
        phi[big] = kappa * u_over_r3
        dphi_over_r[big] = kappa * (eb - 3.0 * u_over_r3) / rb2
        g[big] = (-2.0 * kappa * eb - 5.0 * dphi_over_r[big]) / rb2

    small = ~big
    if np.any(small):
        rs2 = r2[small]
        fact = [math.factorial(n) for n in range(16)]
        phi[small] = kappa * _coul_series(
            rs2, lambda n: 1.0 / (fact[n] * (2 * n + 3)))
        # (1/r) d/dr [u/r^3] = sum_{n>=1} (-1)^n 2n r^{2n-2} / ((2n+3) n!)
        dphi_over_r[small] = -kappa * _coul_series(
            rs2, lambda n: 2.0 * (n + 1) / (fact[n + 1] * (2 * n + 5)))
        # (phi'' - phi'/r)/r^2 with phi'' = -2 kappa e^{-r^2} - 4 phi'/r:
        # series sum_{n>=2} (-1)^n 2n(2n-2) r^{2n-4} / ((2n+3) n!)
        g[small] = kappa * _coul_series(
            rs2, lambda n: 2.0 * (n + 2) * (2 * n + 2) / (fact[n + 2] * (2 * n + 7)))
    return phi.reshape(shape), dphi_over_r.reshape(shape), g.reshape(shape)


def _rot_matrix(u: np.ndarray) -> np.ndarray:
    """Constant matrix Mu with Mu @ x = u x x."""
    return np.array([
        [0.0, -u[2], u[1]],
        [u[2], 0.0, -u[0]],
        [-u[1], u[0], 0.0],
    ])


def make_gaussian_scenario(eps0: float, M: float, q: float, seed: int) -> InitialData:
    """Gaussian density plus curl-type large fields plus the exact Coulomb part.

    f0(x, v) = a exp(-|x|^2-|v|^2) with a = eps0/G_q, G_q the sharp envelope
    constant, so the decay hypothesis holds with constant eps0 for the
    configured q. B0 and the external part of E0 are divergence-free
    rotational Gaussians of scale M; the Coulomb part solves
    div E_coul = 4 pi rho0 in closed form (radial, via the error function), so
    the compatibility condition holds exactly by construction. The scenario is
    deterministic; ``seed`` is recorded by callers for sampling stages.
    """
    if not eps0 >= 0.0:
        raise ValueError("eps0 must be >= 0")
    if not M > 1.0:
        raise ValueError("M must be > 1")
    if not q > 9.0:
        raise ValueError("q must be > 9")

    amp = eps0 / gaussian_decay_envelope(q)
    kappa = 4.0 * math.pi * amp * math.pi ** 1.5
    c_rot = _ROT_SCALE * M
    Mu_B = _rot_matrix(np.array([0.0, 0.0, 1.0]))
    Mu_E = _rot_matrix(np.array([1.0, 0.0, 0.0]))

    def f0(x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        r2 = np.sum(x * x, axis=-1) + np.sum(v * v, axis=-1)
        return amp * np.exp(-r2)

    def rot_F(x, Mu):
        x = np.asarray(x, dtype=float)
        h = c_rot * np.exp(-np.sum(x * x, axis=-1))
        return (x @ Mu.T) * h[..., None]

    def rot_J(x, Mu):
        x = np.asarray(x, dtype=float)
        h = c_rot * np.exp(-np.sum(x * x, axis=-1))
        F = (x @ Mu.T) * h[..., None]
        return h[..., None, None] * Mu - 2.0 * F[..., :, None] * x[..., None, :]

    def rot_H(x, Mu):
        x = np.asarray(x, dtype=float)
        h = c_rot * np.exp(-np.sum(x * x, axis=-1))
        uxx = x @ Mu.T
        eye = np.eye(3)
        t1 = Mu[:, :, None] * x[..., None, None, :] + Mu[:, None, :] * x[..., None, :, None]
        t2 = uxx[..., :, None, None] * (
            -2.0 * eye[None, :, :] + 4.0 * x[..., None, :, None] * x[..., None, None, :]
        )
        return (-2.0 * t1 + t2) * h[..., None, None, None]

    def coul_F(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        phi, _, _ = _coul_scalars(r, kappa)
        return phi[..., None] * x

    def coul_J(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        phi, dphi_r, _ = _coul_scalars(r, kappa)
        eye = np.eye(3)
        return phi[..., None, None] * eye + dphi_r[..., None, None] * x[..., :, None] * x[..., None, :]

    def coul_H(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        _, dphi_r, g = _coul_scalars(r, kappa)
        eye = np.eye(3)
        xi = x[..., :, None, None]
        xj = x[..., None, :, None]
        xk = x[..., None, None, :]
        sym = eye[:, :, None] * xk + eye[:, None, :] * xj + eye[None, :, :] * xi
        return dphi_r[..., None, None, None] * sym + g[..., None, None, None] * xi * xj * xk

    # closed-form directional derivatives and curls (no 3x3 temporaries):
    # for F = (u x x) h(|x|^2): (n.grad)F = h (u x n) - 2 (x.n) F and
    # curl F = 2 h [(1-|x|^2) u + (x.u) x]; the radial Coulomb part has
    # (n.grad)E_c = (phi'/r)(x.n) x + phi n and zero curl.
    def rot_dir(x, n, Mu):
        x = np.asarray(x, dtype=float)
        h = (c_rot * np.exp(-np.sum(x * x, axis=-1)))[..., None]
        xn = np.sum(x * n, axis=-1)[..., None]
        return h * (n @ Mu.T) - 2.0 * xn * (x @ Mu.T) * h

    def rot_curl(x, u):
        x = np.asarray(x, dtype=float)
        h = (2.0 * c_rot * np.exp(-np.sum(x * x, axis=-1)))[..., None]
        r2 = np.sum(x * x, axis=-1)[..., None]
        xu = np.sum(x * u, axis=-1)[..., None]
        return h * ((1.0 - r2) * u + xu * x)

    def coul_dir(x, n):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        phi, dphi_r, _ = _coul_scalars(r, kappa)
        xn = np.sum(x * n, axis=-1)[..., None]
        return dphi_r[..., None] * xn * x + phi[..., None] * np.broadcast_to(n, x.shape)

    u_E = np.array([1.0, 0.0, 0.0])
    u_B = np.array([0.0, 0.0, 1.0])

    def wave_integrands(Y, nb, tt):
        # fused E0/B0/directional-derivative/curl evaluation sharing exp and
        # erf; tt broadcasts over the leading axes of Y
        r2 = np.sum(Y * Y, axis=-1)
        h = (c_rot * np.exp(-r2))[..., None]
        YE = Y @ Mu_E.T
        YB = Y @ Mu_B.T
        nE = nb @ Mu_E.T
        nB = nb @ Mu_B.T
        xn = np.sum(Y * nb, axis=-1)[..., None]
        phi, dphi_r, _ = _coul_scalars(np.sqrt(r2), kappa)
        phi = phi[..., None]
        E0 = YE * h + phi * Y
        B0 = YB * h
        dirE = (nE - 2.0 * xn * YE) * h + dphi_r[..., None] * xn * Y + phi * nb
        dirB = (nB - 2.0 * xn * YB) * h
        one_m = (1.0 - r2)[..., None]
        curlE = 2.0 * h * (one_m * u_E + Y[..., 0:1] * Y)
        curlB = 2.0 * h * (one_m * u_B + Y[..., 2:3] * Y)
        tt = np.asarray(tt, dtype=float)[..., None]
        return E0 + tt * (dirE + curlB), B0 + tt * (dirB - curlE)

    data = InitialData(
        f0=f0,
        E0=lambda x: rot_F(x, Mu_E) + coul_F(x),
        B0=lambda x: rot_F(x, Mu_B),
        E0_jac=lambda x: rot_J(x, Mu_E) + coul_J(x),
        B0_jac=lambda x: rot_J(x, Mu_B),
        E0_hess=lambda x: rot_H(x, Mu_E) + coul_H(x),
        B0_hess=lambda x: rot_H(x, Mu_B),
        M=M,
        q=q,
        eps0=eps0,
        amplitude=amp,
        support_radius=math.sqrt(-math.log(1e-18)),
        name="gaussian",
        E0_dirderiv=lambda x, n: rot_dir(x, n, Mu_E) + coul_dir(x, n),
        B0_dirderiv=lambda x, n: rot_dir(x, n, Mu_B),
        E0_curl=lambda x: rot_curl(x, u_E),
        B0_curl=lambda x: rot_curl(x, u_B),
        wave_integrands=wave_integrands,
    )
    return data


def make_empty_scenario(M: float = 2.0, q: float = 11.0, seed: int = 0) -> InitialData:
    """Vacuum reduction: f0 identically zero, fields as in the Gaussian scenario."""
    data = make_gaussian_scenario(0.0, M, q, seed)
    return replace(data, name="empty")


def scenario_from_config(cfg: RunConfig) -> InitialData:
    if cfg.scenario == "empty":
        return make_empty_scenario(cfg.M, cfg.q, cfg.seed)
    return make_gaussian_scenario(cfg.eps0, cfg.M, cfg.q, cfg.seed)
