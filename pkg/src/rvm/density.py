"""Dyadic decomposition of the initial density, particle sampling,
semi-Lagrangian evaluation, and velocity moments.

The initial density f0 splits into shell components f0_k = f0 * psi_{k-1}
built from an even smooth bump; each component is discretized by scrambled
Sobol points in its 6D annular support with phase-space measure weights.
Transport is exact along characteristics (weights never change), so a pushed
ensemble represents the time-t component by moving its samples only.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .characteristics import (
    FieldOracle,
    KnotTrajectories,
    integrate_characteristic,
    integrate_states_to,
    push_states,
)
from .core import InitialData, hat_velocity, sobol_points

__all__ = [
    "smooth_bump",
    "dyadic_weight",
    "DyadicComponent",
    "decompose",
    "ParticleEnsemble",
    "sample_particles",
    "PushedEnsemble",
    "push_ensemble",
    "evaluate_density",
    "evaluate_density_block",
    "velocity_support_radius",
    "smoothing_kernel",
    "charge_current",
    "default_smoothing_h",
    "DyadicBounds",
    "save_ensemble",
    "load_ensemble",
]


# ---------------------------------------------------------------------------
# Smooth bump and dyadic weights
# ---------------------------------------------------------------------------

def _glue(u: np.ndarray) -> np.ndarray:
    """exp(-1/u) glued to 0 at u <= 0 (C-infinity)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos])
    return out


def smooth_bump(s) -> np.ndarray:
    """Even C-infinity bump: exactly 1 on [-1, 1], exactly 0 outside [-2, 2]."""
    s = np.abs(np.asarray(s, dtype=float))
    a = _glue(2.0 - s)
    b = _glue(s - 1.0)
    return a / (a + b + (a + b == 0.0))


def dyadic_weight(k: int, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Annular cutoff psi_k(x, v) in [0, 1]; partial sums telescope to 1.

    psi_0 = bump(|(x,v)|); psi_k = bump(|(x,v)|/2^k) - bump(|(x,v)|/2^(k-1))
    for k >= 1, with |(x,v)| = sqrt(|x|^2 + |v|^2).
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    r = np.sqrt(np.sum(x * x, axis=-1) + np.sum(v * v, axis=-1))
    if k == 0:
        return smooth_bump(r)
    return smooth_bump(r / 2.0**k) - smooth_bump(r / 2.0 ** (k - 1))


@dataclass(frozen=True)
class DyadicComponent:
    """One shell component f0_k = f0 * psi_{k-1} of the initial density."""

    k: int
    data: InitialData
    sup_bound: float  # 2^{(2-k)q} eps0
    measured_sup: float
    inner_radius: float  # support is {inner <= |(x,v)| <= outer}
    outer_radius: float

    def __call__(self, x, v):
        return self.data.f0(x, v) * dyadic_weight(self.k - 1, x, v)

    @property
    def support_radius(self) -> float:
        """Stated support bound 2^(k+1) (the actual outer radius is 2^k)."""
        return 2.0 ** (self.k + 1)


def decompose(data: InitialData, k_max: int, tail_tol: float = 1e-10,
              n_check: int = 4096, seed: int = 0):
    """Shell components k = 1..k_max plus a truncation-tail report.

    The report carries the analytic tail-mass bound
    sum_{k > k_max} 2^((2-k)q) eps0 * vol6(2^(k+1)) and the sampled tail sup
    of f0 - sum_k f0_k near and beyond the last shell. Raises when the sampled
    tail exceeds ``tail_tol`` (use a larger k_max).
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    comps = []
    pts = sobol_points(n_check, 7, seed + 17)
    for k in range(1, k_max + 1):
        inner = 0.0 if k == 1 else 2.0 ** (k - 2)
        outer = 2.0**k
        x, v = _annulus_points(pts, inner, outer)[:2]
        vals = data.f0(x, v) * dyadic_weight(k - 1, x, v)
        comps.append(DyadicComponent(
            k=k, data=data,
            sup_bound=2.0 ** ((2 - k) * data.q) * data.eps0,
            measured_sup=float(vals.max()) if len(vals) else 0.0,
            inner_radius=inner, outer_radius=outer,
        ))

    # analytic tail bound: sup * 6-ball volume per shell, geometric in k
    vol6 = lambda R: math.pi**3 * R**6 / 6.0
    analytic_tail = sum(
        2.0 ** ((2 - k) * data.q) * data.eps0 * vol6(2.0 ** (k + 1))
        for k in range(k_max + 1, k_max + 60)
    )
    # sampled tail: residual of the partial sum at and beyond the last shell
    x, v = _annulus_points(pts, 2.0 ** (k_max - 1), 2.0 ** (k_max + 1))[:2]
    resid = data.f0(x, v)
    for k in range(1, k_max + 1):
        resid = resid - data.f0(x, v) * dyadic_weight(k - 1, x, v)
    sampled_tail = float(np.abs(resid).max()) if len(resid) else 0.0
    report = {
        "k_max": k_max,
        "analytic_tail_mass_bound": float(analytic_tail),
        "sampled_tail_sup": sampled_tail,
        "tail_tol": tail_tol,
    }
    if sampled_tail > tail_tol:
        raise ValueError(
            f"sampled dyadic tail {sampled_tail:.3e} exceeds {tail_tol:.3e}; "
            f"increase k_max beyond {k_max}")
    return comps, report


# ---------------------------------------------------------------------------
# Particle sampling
# ---------------------------------------------------------------------------

def _annulus_points(u: np.ndarray, r_in: float, r_out: float):
    """Map (n, 7) unit-cube points to the 6D annulus r_in <= |(x,v)| <= r_out.

    Radius from the 6D volume element (uniform in r^6), direction from the
    inverse-normal map of six coordinates. Returns (x, v, volume).
    """
    n = u.shape[0]
    lo, hi = r_in**6, r_out**6
    r = (lo + u[:, 0] * (hi - lo)) ** (1.0 / 6.0)
    g = ndtri(np.clip(u[:, 1:7], 1e-15, 1 - 1e-15))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    pts = r[:, None] * g
    vol = math.pi**3 / 6.0 * (r_out**6 - r_in**6)
    return pts[:, :3], pts[:, 3:], vol


@dataclass(frozen=True)
class ParticleEnsemble:
    """Weighted phase-space samples of one shell component at time 0."""

    k: int
    x0: np.ndarray  # (N, 3)
    v0: np.ndarray  # (N, 3)
    w: np.ndarray  # (N,), >= 0
    seed: int

    def __post_init__(self):
        for a in (self.x0, self.v0, self.w):
            a.setflags(write=False)
        if np.any(self.w < 0):
            raise ValueError("weights must be nonnegative")

    @property
    def n_particles(self) -> int:
        return len(self.w)

    @property
    def total_weight(self) -> float:
        return float(self.w.sum())


def sample_particles(comp: DyadicComponent, N: int, seed: int) -> ParticleEnsemble:
    """Scrambled-Sobol discretization of the measure f0_k dx dv.

    Deterministic given the seed; every sample lies inside the shell support
    and weights are f0_k(point) * (annulus volume)/N, so the weight sum
    estimates the component mass.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    u = sobol_points(N, 7, seed)
    x, v, vol = _annulus_points(u, comp.inner_radius, comp.outer_radius)
    w = comp(x, v) * (vol / N)
    return ParticleEnsemble(k=comp.k, x0=x, v0=v, w=w, seed=seed)


@dataclass
class PushedEnsemble:
    """A time-0 ensemble together with its trajectories through one field."""

    ensemble: ParticleEnsemble
    knots: KnotTrajectories

    @property
    def k(self) -> int:
        return self.ensemble.k

    @property
    def w(self) -> np.ndarray:
        return self.ensemble.w

    @property
    def t_final(self) -> float:
        return self.knots.t_final

    def states_at(self, t):
        return self.knots.states_at(t)


def push_ensemble(ensemble: ParticleEnsemble, field_oracle: FieldOracle,
                  t_final: float, step: float, knot_spacing: float) -> PushedEnsemble:
    knots = push_states(field_oracle, ensemble.x0, ensemble.v0, t_final, step,
                        knot_spacing)
    return PushedEnsemble(ensemble=ensemble, knots=knots)


# ---------------------------------------------------------------------------
# Semi-Lagrangian evaluation and moments
# ---------------------------------------------------------------------------

def evaluate_density(data: InitialData, field_oracle: FieldOracle, t: float,
                     x: np.ndarray, v: np.ndarray, tol: float = 1e-9,
                     component: DyadicComponent | None = None) -> float:
    """f(t, x, v) by tracing one characteristic back to time 0.

    Evaluates f0 (or the given shell component) at (X(0), V(0)); exact
    transport makes this the density of the solution of the linear transport
    problem in the given field. Result >= 0.
    """
    if t == 0.0:
        f = component if component is not None else data.f0
        return float(f(np.asarray(x, float), np.asarray(v, float)))
    traj = integrate_characteristic(field_oracle, (t, x, v), 0.0, tol)
    X0 = traj.position(0.0)[0]
    V0 = traj.velocity(0.0)[0]
    f = component if component is not None else data.f0
    return float(f(X0, V0))


def evaluate_density_block(data: InitialData, field_oracle: FieldOracle,
                           t: float, X: np.ndarray, V: np.ndarray,
                           step: float = 0.02,
                           component: DyadicComponent | None = None) -> np.ndarray:
    """Vectorized backward transport of many phase points to time 0."""
    X = np.atleast_2d(X)
    V = np.atleast_2d(V)
    f = component if component is not None else data.f0
    if t == 0.0:
        return np.asarray(f(X, V), dtype=float)
    X0, V0 = integrate_states_to(field_oracle, t, 0.0, X, V, step)
    return np.asarray(f(X0, V0), dtype=float)


def velocity_support_radius(k: int, K0_norm: float, C_cfg: float = 4.0) -> float:
    """Radius beyond which the time-t shell-k density is treated as zero.

    C_cfg * (2^k + K0 ln(2 + K0)); monotone in both arguments. Used to
    truncate velocity quadrature.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if K0_norm < 0:
        raise ValueError("K0_norm must be >= 0")
    return C_cfg * (2.0**k + K0_norm * math.log(2.0 + K0_norm))


def smoothing_kernel(r: np.ndarray, h: float) -> np.ndarray:
    """Normalized C^2 Wendland-type bump of radius h (integral 1 in 3D)."""
    q = np.asarray(r, dtype=float) / h
    out = np.zeros_like(q)
    m = q < 1.0
    qm = q[m]
    out[m] = (21.0 / (2.0 * math.pi * h**3)) * (1.0 - qm) ** 4 * (4.0 * qm + 1.0)
    return out


def default_smoothing_h(ensembles) -> float:
    """Twice the mean inter-particle spacing of the time-0 positions."""
    xs = np.concatenate([e.x0 for e in ensembles], axis=0)
    n = len(xs)
    if n == 0:
        return 1.0
    radius = float(np.linalg.norm(xs, axis=1).max()) or 1.0
    vol = 4.0 / 3.0 * math.pi * radius**3
    return 2.0 * (vol / n) ** (1.0 / 3.0)


def charge_current(pushed, t: float, x: np.ndarray, h: float):
    """Smoothed charge and current densities (rho, j) at position(s) x.

    rho = sum_p w_p eta_h(X_p(t) - x), j = sum_p w_p vhat_p(t) eta_h(...).
    |j| <= rho by construction since |vhat| < 1 and eta_h >= 0. ``pushed`` is
    one PushedEnsemble or an iterable of them.
    """
    if isinstance(pushed, PushedEnsemble):
        pushed = [pushed]
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xq = np.atleast_2d(x)
    rho = np.zeros(len(xq))
    j = np.zeros((len(xq), 3))
    for pe in pushed:
        if pe.ensemble.n_particles == 0:
            continue
        X, V = pe.states_at(t)
        vh = hat_velocity(V)
        w = pe.w
        for i, xi in enumerate(xq):
            d = np.linalg.norm(X - xi, axis=1)
            eta = smoothing_kernel(d, h)
            rho[i] += float(w @ eta)
            j[i] += (w * eta) @ vh
    if single:
        return float(rho[0]), j[0]
    return rho, j


# ---------------------------------------------------------------------------
# Dyadic bound factors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DyadicBounds:
    """Shell-k factors entering the averaged-density and field bounds."""

    k: int
    lam1: float  # 2^k + K0 ln(2+K0)
    lam2: float  # 2^k + (K0 ln(2+K0))^2
    lam3: float  # ln(1 + K1a + K0) + k + 1

    @classmethod
    def from_norms(cls, k: int, K0: float, K1a: float) -> "DyadicBounds":
        L = K0 * math.log(2.0 + K0)
        return cls(k=k, lam1=2.0**k + L, lam2=2.0**k + L * L,
                   lam3=math.log(1.0 + K1a + K0) + k + 1.0)


# ---------------------------------------------------------------------------
# Ensemble checkpoints: shell-index header + per-particle trajectory records
# ---------------------------------------------------------------------------

_ENS_MAGIC = b"RVME"


def save_ensemble(path, pushed: PushedEnsemble, knot_stride: int = 1) -> None:
    """Write header (magic, version, shell k, N, weights) then one trajectory
    record per particle in the characteristics binary layout (uint64 knot
    count, then per-knot s, X, V as little-endian float64)."""
    ens = pushed.ensemble
    kt = pushed.knots
    idx = np.arange(0, len(kt.s), max(1, knot_stride))
    if idx[-1] != len(kt.s) - 1:
        idx = np.append(idx, len(kt.s) - 1)
    s = kt.s[idx]
    m = len(s)
    with open(path, "wb") as fh:
        fh.write(_ENS_MAGIC)
        fh.write(struct.pack("<IqQ", 1, ens.k, ens.n_particles))
        fh.write(np.ascontiguousarray(ens.w, dtype="<f8").tobytes())
        rec = np.empty((m, 7), dtype="<f8")
        for p in range(ens.n_particles):
            rec[:, 0] = s
            rec[:, 1:4] = kt.X[idx, p]
            rec[:, 4:7] = kt.V[idx, p]
            fh.write(struct.pack("<Q", m))
            fh.write(rec.tobytes())


def load_ensemble(path):
    """Inverse of save_ensemble; trajectories come back on the stored knots.

    Returns (ParticleEnsemble, s_knots, X, V) with X, V of shape (m, N, 3).
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _ENS_MAGIC:
        raise ValueError("not an ensemble checkpoint")
    ver, k, n = struct.unpack_from("<IqQ", buf, 4)
    if ver != 1:
        raise ValueError(f"unsupported ensemble checkpoint version {ver}")
    off = 4 + 20
    w = np.frombuffer(buf, dtype="<f8", count=n, offset=off).copy()
    off += 8 * n
    s_ref = None
    Xs, Vs = [], []
    for p in range(n):
        (m,) = struct.unpack_from("<Q", buf, off)
        off += 8
        rec = np.frombuffer(buf, dtype="<f8", count=7 * m, offset=off).reshape(m, 7)
        off += 56 * m
        if s_ref is None:
            s_ref = rec[:, 0].copy()
        Xs.append(rec[:, 1:4].copy())
        Vs.append(rec[:, 4:7].copy())
    X = np.stack(Xs, axis=1) if n else np.zeros((len(s_ref or [0]), 0, 3))
    V = np.stack(Vs, axis=1) if n else np.zeros_like(X)
    x0 = X[0] if n else np.zeros((0, 3))
    v0 = V[0] if n else np.zeros((0, 3))
    ens = ParticleEnsemble(k=k, x0=x0, v0=v0, w=w, seed=-1)
    return ens, (s_ref if s_ref is not None else np.zeros(0)), X, V
