"""Small-noise (Laplace) asymptotics of the moments of exp(-P_u/D).

Around the minimiser ``vstar(u) e_1`` the potential reads
``a0 + Qbar(z) + alpha vstar z_1 |z|^2 + alpha |z|^4 / 4`` with the
diagonal quadratic form ``Qbar(z) = lambda1 z_1^2 + lambda_perp |z_perp|^2``.
Expanding ``exp(-R/D)`` to first order gives, with ``c_k`` the leading
coefficients,

    F_0 ~ e^{-a0/D} D^{N/2} c_0,   F_1 ~ e^{-a0/D} D^{N/2} c_1 D,
    F_2 ~ e^{-a0/D} D^{N/2} c_2 D,

and similarly ``k_1``, ``k_2`` for the two P-weighted integrals entering
``dH/dD``.  At ``u = 1`` (``lambda1 = 1/2 + alpha``, ``lambda_perp = 1/2``)
everything reduces to powers of ``1 + 2 alpha``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, positive_minimum
from .quadrature import QuadratureConfig, centered_moment, gaussian_moment

__all__ = [
    "LaplaceCoefficients",
    "ExpansionReport",
    "MOMENT_INDICES",
    "moment_table",
    "moment_table_from_gaussian",
    "k1_closed_form",
    "k1_from_moments",
    "coefficients",
    "leading_coefficients",
    "extended_H_at_zero_noise",
    "expansion_check",
]

# multi-indices of the Gaussian moment table (leading entries; rest zero)
MOMENT_INDICES = {
    "m2": (2,),
    "m4": (4,),
    "m22": (2, 2),
    "m222": (2, 2, 2),
    "m24": (2, 4),
    "m42": (4, 2),
    "m6": (6,),
}


def _check(alpha, dim):
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if dim not in (1, 2, 3):
        raise ValueError("dim must be 1, 2 or 3")


def moment_table(alpha: float, dim: int) -> dict[str, float]:
    """Closed forms of ``int z^beta exp(-Qbar_1(z)) dz``; entries needing more axes than ``dim`` are omitted."""
    _check(alpha, dim)
    g = (2.0 * math.pi) ** (dim / 2.0)
    s = 1.0 + 2.0 * alpha
    table = {
        "m2": g * s**-1.5,
        "m4": 3.0 * g * s**-2.5,
        "m22": g * s**-1.5,
        "m222": g * s**-1.5,
        "m24": 3.0 * g * s**-1.5,
        "m42": 3.0 * g * s**-2.5,
        "m6": 15.0 * g * s**-3.5,
    }
    return {k: v for k, v in table.items() if len(MOMENT_INDICES[k]) <= dim}


def _lambdas_u1(alpha, dim):
    return [0.5 + alpha] + [0.5] * (dim - 1)


def _beta(name, dim):
    b = MOMENT_INDICES[name]
    return tuple(b) + (0,) * (dim - len(b))


def moment_table_from_gaussian(alpha: float, dim: int, lambdas=None) -> dict[str, float]:
    """The same table evaluated through :func:`gaussian_moment` (any diagonal form)."""
    _check(alpha, dim)
    lam = _lambdas_u1(alpha, dim) if lambdas is None else list(lambdas)
    return {
        name: gaussian_moment(lam, _beta(name, dim), 1.0)
        for name in MOMENT_INDICES
        if len(MOMENT_INDICES[name]) <= dim
    }


def k1_closed_form(alpha: float, dim: int) -> float:
    s = 1.0 + 2.0 * alpha
    N = dim
    bracket = -4.5 - 3.0 * (N - 1) * (1.0 + alpha) - 0.5 * (N - 1) ** 2 * s
    return (2.0 * math.pi) ** (N / 2.0) * alpha * s**-2.5 * bracket


def _moment_sums(lam, dim):
    """``I1 = int z1^2|z|^2 e^{-Qbar}`` and ``I2 = int z1^2|z|^2 Qbar e^{-Qbar}``."""
    lam = list(lam)
    m = {name: gaussian_moment(lam, _beta(name, dim), 1.0) if len(MOMENT_INDICES[name]) <= dim else 0.0
         for name in MOMENT_INDICES}
    N = dim
    l1, lp = lam[0], (lam[1] if dim > 1 else 0.0)
    I1 = m["m4"] + (N - 1) * m["m22"]
    I2 = (l1 * m["m6"] + (N - 1) * (l1 + lp) * m["m42"]
          + lp * ((N - 1) * m["m24"] + (N - 1) * (N - 2) * m["m222"]))
    return I1, I2


def k1_from_moments(alpha: float, dim: int) -> float:
    """``alpha (I1 - I2)`` with both integrals assembled from Gaussian moments."""
    _check(alpha, dim)
    I1, I2 = _moment_sums(_lambdas_u1(alpha, dim), dim)
    return alpha * (I1 - I2)


@dataclass(frozen=True)
class LaplaceCoefficients:
    alpha: float
    dim: int
    c0: float
    c1: float
    c2: float
    k1: float
    k2: float
    dH_du_limit: float
    dH_dD_limit: float
    bif_slope: float


def coefficients(alpha: float, dim: int) -> LaplaceCoefficients:
    """Leading coefficients at ``u = 1`` and the derived zero-noise limits."""
    _check(alpha, dim)
    N = dim
    g = (2.0 * math.pi) ** (N / 2.0)
    s = 1.0 + 2.0 * alpha
    c0 = g * s**-0.5
    c1 = -alpha * g * s**-2.5 * (N + 2 + 2 * (N - 1) * alpha)
    c2 = g * s**-1.5
    k2 = g * N / (2.0 * math.sqrt(s))
    k1 = k1_closed_form(alpha, N)
    dH_du = c2 / c0 - 1.0
    dH_dD = (c0 * k1 - c1 * k2) / (c0 * c0)
    return LaplaceCoefficients(alpha, dim, c0, c1, c2, k1, k2, dH_du, dH_dD, -dH_dD / dH_du)


def leading_coefficients(alpha: float, dim: int, u: float) -> dict[str, float]:
    """``c0, c1, c2, k1, k2`` at any ``u > 0`` from the Hessian at the minimiser."""
    _check(alpha, dim)
    dec = positive_minimum(ModelParams(dim, alpha), u)
    lam = dec.lambdas(dim)
    zero = (0,) * dim
    e1sq = (2,) + (0,) * (dim - 1)
    c0 = gaussian_moment(lam, zero, 1.0)
    c2 = gaussian_moment(lam, e1sq, 1.0)
    I1, I2 = _moment_sums(lam, dim)
    cubic = alpha * dec.vstar  # coefficient of z1 |z|^2 in the remainder
    return {
        "c0": c0,
        "c1": -cubic * I1,
        "c2": c2,
        "k1": cubic * (I1 - I2),
        "k2": 0.5 * dim * c0,
    }


def extended_H_at_zero_noise(alpha: float, u: float) -> float:
    """``H(u, 0) = vstar(u) - u``, the continuous extension of H to zero noise."""
    return positive_minimum(ModelParams(1, alpha), u).vstar - u


@dataclass
class ExpansionReport:
    """Scaled quadrature moments against their leading Laplace terms.

    For each ``k``, ``scaled[k][i] = D^{-N/2} e^{a0/D} F_k / D^{min(k,1)}``
    at ``D_values[i]`` and ``residual = scaled - leading``; ``slope`` is the
    log-log regression slope of ``|residual|`` against ``D``.
    """

    alpha: float
    dim: int
    u: float
    order: int
    D_values: list
    leading: dict = field(default_factory=dict)
    scaled: dict = field(default_factory=dict)
    residual: dict = field(default_factory=dict)
    slope: dict = field(default_factory=dict)

    def passed(self, tol: float = 0.1) -> bool:
        return all(abs(s - self.order) <= tol for s in self.slope.values())


def expansion_check(params: ModelParams, u: float, order: int = 1, cfg: QuadratureConfig | None = None,
                    D_values=(1e-2, 5e-3, 2.5e-3, 1.25e-3)) -> ExpansionReport:
    """Empirical convergence order of the remainders of F_0, F_1, F_2.

    ``order`` is the number of expansion terms subtracted; only the leading
    term is available, so it must be 1.  ``params.noise`` is ignored in
    favour of ``D_values``.
    """
    if order != 1:
        raise ValueError("only the leading term is implemented (order=1)")
    if abs(u - 1.0) >= 0.2:
        raise ValueError("expansion_check works in the window |u - 1| < 0.2")
    Ds = [float(d) for d in D_values]
    if any(not 1e-6 <= d <= 1e-2 for d in Ds):
        raise ValueError("D values must lie in [1e-6, 1e-2]")
    cfg = cfg or QuadratureConfig()
    lead = leading_coefficients(params.alpha, params.dim, u)
    rep = ExpansionReport(params.alpha, params.dim, float(u), order, Ds)
    N = params.dim
    for k in (0, 1, 2):
        vals = []
        for D in Ds:
            F = centered_moment(params.with_noise(D), u, k, cfg)
            # log_scale is exactly -a0/D, so the mantissa already carries e^{a0/D}
            vals.append(F.mantissa * D ** (-N / 2.0) / (D if k else 1.0))
        name = f"c{k}"
        res = np.array(vals) - lead[name]
        rep.leading[name] = lead[name]
        rep.scaled[name] = vals
        rep.residual[name] = list(res)
        rep.slope[name] = float(np.polyfit(np.log(Ds), np.log(np.abs(res)), 1)[0])
    return rep
