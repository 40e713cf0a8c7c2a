"""Model parameters, the tilted quartic potential and the free energy.

The stationary densities of the homogeneous kinetic equation are

    f(v) = exp(-P_u(v) / D) / Z,
    P_u(v) = alpha |v|^4 / 4 + (1 - alpha) |v|^2 / 2 - u v_1,

with the mean velocity aligned with the first axis.  Everything in this
module is closed form; integrals against ``exp(-P_u / D)`` live in
:mod:`csphase.quadrature`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

__all__ = [
    "ModelParams",
    "PotentialDecomposition",
    "StationaryDensity",
    "confinement",
    "radial_potential",
    "potential_value",
    "positive_root",
    "critical_points",
    "positive_minimum",
    "stationary_log_density",
    "free_energy",
]


@dataclass(frozen=True)
class ModelParams:
    """Velocity dimension, self-propulsion strength and noise."""

    dim: int
    alpha: float
    noise: float = 0.0

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.noise >= 0:
            raise ValueError(f"noise must be non-negative, got {self.noise}")

    def with_noise(self, noise: float) -> "ModelParams":
        return replace(self, noise=float(noise))


def confinement(alpha: float, s):
    """alpha s^2/4 + (1-alpha) s/2 with ``s = |v|^2``."""
    return alpha * s * s / 4.0 + (1.0 - alpha) * s / 2.0


def radial_potential(alpha: float, u: float, r):
    """P_u along the positive first axis, i.e. the minimum of P_u over |v| = r."""
    s = r * r
    return confinement(alpha, s) - u * r


def potential_value(params: ModelParams, u: float, v) -> float | np.ndarray:
    """Evaluate P_u(v); ``v`` has trailing axis of length ``params.dim``."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != params.dim:
        raise ValueError(f"expected trailing dimension {params.dim}, got {v.shape}")
    s = np.sum(v * v, axis=-1)
    out = confinement(params.alpha, s) - u * v[..., 0]
    return float(out) if out.ndim == 0 else out


def _cubic(alpha, u, x):
    return alpha * x**3 + (1.0 - alpha) * x - u


def positive_root(alpha: float, u: float) -> float:
    """Unique positive root of ``alpha x^3 + (1-alpha) x - u`` for ``u > 0``.

    Cardano's formula gives the root; Newton steps then polish it (the
    two cube roots nearly cancel when ``u`` is small and ``alpha < 1``).
    """
    if not u > 0:
        raise ValueError(f"u must be positive, got {u}")
    p = (1.0 - alpha) / alpha
    q = -u / alpha
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    if disc >= 0:
        sq = math.sqrt(disc)
        x = np.cbrt(-q / 2.0 + sq) + np.cbrt(-q / 2.0 - sq)
    else:
        # three real roots (only possible for alpha > 1); the largest is positive
        rho = math.sqrt(-p / 3.0)
        arg = (3.0 * q / (2.0 * p)) * math.sqrt(-3.0 / p)
        x = 2.0 * rho * math.cos(math.acos(max(-1.0, min(1.0, arg))) / 3.0)
    x = float(x)
    for _ in range(3):
        f = _cubic(alpha, u, x)
        fp = 3.0 * alpha * x * x + 1.0 - alpha
        if f == 0.0 or fp <= 0.0:
            break
        step = f / fp
        x -= step
        if abs(step) <= 1e-16 * abs(x):
            break
    return x


def critical_points(alpha: float, u: float) -> np.ndarray:
    """All real critical points of P_u along the first axis, sorted."""
    roots = np.roots([alpha, 0.0, 1.0 - alpha, -u])
    real = roots[np.abs(roots.imag) <= 1e-9 * (1.0 + np.abs(roots.real))].real
    return np.sort(real)


@dataclass(frozen=True)
class PotentialDecomposition:
    """Minimum location, minimum value and Hessian spectrum of P_u (u > 0).

    Around the minimiser, ``P_u = a0 + lambda1 z_1^2 + lambda_perp |z_perp|^2
    + alpha vstar z_1 |z|^2 + alpha |z|^4 / 4``.
    """

    u: float
    vstar: float
    a0: float
    lambda1: float
    lambda_perp: float

    def lambdas(self, dim: int) -> np.ndarray:
        return np.array([self.lambda1] + [self.lambda_perp] * (dim - 1))


def positive_minimum(params: ModelParams, u: float) -> PotentialDecomposition:
    """Global minimum structure of P_u for ``u > 0``."""
    if not u > 0:
        raise ValueError("positive_minimum needs u > 0; the u = 0 minimum is a sphere")
    a = params.alpha
    vs = positive_root(a, u)
    a0 = float(radial_potential(a, u, vs))
    lam1 = (1.0 - a) / 2.0 + 1.5 * a * vs * vs
    lam_perp = (1.0 - a) / 2.0 + 0.5 * a * vs * vs
    return PotentialDecomposition(u=float(u), vstar=vs, a0=a0, lambda1=lam1, lambda_perp=lam_perp)


@dataclass(frozen=True)
class StationaryDensity:
    """Stationary density with mean velocity ``ubar_magnitude * e_1``.

    Build one with :func:`csphase.quadrature.stationary_density`, which
    fills in ``logZ``.
    """

    params: ModelParams
    ubar_magnitude: float
    logZ: float

    def log_density(self, v):
        return stationary_log_density(self, v)

    def density(self, v):
        return np.exp(stationary_log_density(self, v))


def stationary_log_density(sd: StationaryDensity, v):
    """``-P_u(v)/D - log Z``."""
    D = sd.params.noise
    if D <= 0:
        raise ValueError("stationary density is a Dirac mass at D = 0")
    return -potential_value(sd.params, sd.ubar_magnitude, v) / D - sd.logZ


def free_energy(params: ModelParams, density, edges: Sequence[np.ndarray], mass_tol: float = 1e-6) -> float:
    """Free energy of a density sampled on a rectangular grid.

    Parameters
    ----------
    params : ModelParams
    density : ndarray, shape ``(n_1, ..., n_dim)``
        Density values (not masses) per cell.
    edges : sequence of ndarray
        Bin edges along each axis.
    mass_tol : float
        Allowed deviation of the total mass from 1.

    Midpoint quadrature throughout; empty cells contribute nothing to the
    entropy.
    """
    f = np.asarray(density, dtype=float)
    if len(edges) != params.dim or f.ndim != params.dim:
        raise ValueError("density and edges must match params.dim")
    if np.any(f < 0):
        raise ValueError("density has negative entries")
    widths = [np.diff(np.asarray(e, dtype=float)) for e in edges]
    mids = [0.5 * (np.asarray(e[1:], dtype=float) + np.asarray(e[:-1], dtype=float)) for e in edges]
    vol = widths[0]
    for w in widths[1:]:
        vol = np.multiply.outer(vol, w)
    mass = f * vol
    total = mass.sum()
    if abs(total - 1.0) > mass_tol:
        raise ValueError(f"density mass {total!r} deviates from 1 by more than {mass_tol}")
    grids = np.meshgrid(*mids, indexing="ij")
    s = sum(g * g for g in grids)
    conf = float(np.sum(confinement(params.alpha, s) * mass))
    mean = np.array([np.sum(g * mass) for g in grids])
    pos = f > 0
    entropy = float(np.sum(mass[pos] * np.log(f[pos])))
    return conf - 0.5 * float(mean @ mean) + params.noise * entropy
