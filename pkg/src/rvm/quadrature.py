"""Product quadrature rules on spheres and balls.

Sphere rules are Gauss-Legendre in cos(theta) times uniform (trapezoidal) in
phi, which integrates smooth integrands spectrally and is reproducible from
the two node counts alone. Ball rules add a mapped Gauss-Legendre radial
factor with the r^2 measure folded into the weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = ["SphereRule", "BallRule", "sphere_rule", "ball_rule", "radial_rule"]


@dataclass(frozen=True)
class SphereRule:
    """Unit-sphere rule: sum(w_i g(n_i)) ~ integral of g over S^2 (total 4 pi)."""

    nodes: np.ndarray  # (n, 3) unit vectors
    weights: np.ndarray  # (n,), summing to 4 pi

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Contract values (..., n) or (..., n, c) against the weights."""
        values = np.asarray(values)
        if values.ndim >= 2 and values.shape[-2] == self.nodes.shape[0]:
            return np.einsum("...nc,n->...c", values, self.weights)
        return values @ self.weights


@dataclass(frozen=True)
class BallRule:
    """Ball rule: sum(w_i g(y_i)) ~ integral over |y| <= radius (volume measure)."""

    nodes: np.ndarray  # (n, 3)
    weights: np.ndarray  # (n,)
    radius: float


@lru_cache(maxsize=64)
def _sphere_cached(n_polar: int, n_azimuth: int):
    mu, wmu = np.polynomial.legendre.leggauss(n_polar)  # mu = cos(theta)
    phi = 2.0 * np.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
    wphi = 2.0 * np.pi / n_azimuth
    st = np.sqrt(1.0 - mu**2)
    nodes = np.empty((n_polar, n_azimuth, 3))
    nodes[..., 0] = st[:, None] * np.cos(phi)[None, :]
    nodes[..., 1] = st[:, None] * np.sin(phi)[None, :]
    nodes[..., 2] = mu[:, None]
    weights = (wmu[:, None] * wphi) * np.ones((1, n_azimuth))
    nodes = nodes.reshape(-1, 3)
    weights = weights.reshape(-1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def sphere_rule(n_polar: int = 24, n_azimuth: int = 48) -> SphereRule:
    nodes, weights = _sphere_cached(n_polar, n_azimuth)
    return SphereRule(nodes=nodes, weights=weights)


def radial_rule(r_max: float, n: int, r_min: float = 0.0):
    """Gauss-Legendre nodes/weights on [r_min, r_max] (no measure factor)."""
    z, w = np.polynomial.legendre.leggauss(n)
    r = 0.5 * (r_max - r_min) * z + 0.5 * (r_max + r_min)
    return r, 0.5 * (r_max - r_min) * w


def ball_rule(radius: float, n_radial: int = 10, n_polar: int = 6,
              n_azimuth: int = 12, r_min: float = 0.0) -> BallRule:
    """Product rule on the (possibly hollow) ball r_min <= |y| <= radius."""
    sph = sphere_rule(n_polar, n_azimuth)
    r, wr = radial_rule(radius, n_radial, r_min)
    nodes = r[:, None, None] * sph.nodes[None, :, :]
    weights = (wr * r**2)[:, None] * sph.weights[None, :]
    return BallRule(nodes=nodes.reshape(-1, 3), weights=weights.reshape(-1),
                    radius=radius)
