"""Integrals against exp(-P_u(v)/D) in shifted (log-scale) form.

All integrands here are polynomials in ``v_1`` whose coefficients depend
on ``s = |v|^2``.  An integrand is given as a callable ``s -> [b_0, b_1,
...]`` meaning ``sum_n b_n(s) v_1^n``.  In one dimension the integral is
taken directly on ``(-R, R)``; in two and three dimensions the angular
part is done in closed form,

    int_{S^{N-1}} cos^n(theta) exp(z cos theta) dS
        = |S^{N-2}| int_0^pi cos^n(theta) exp(z cos theta) sin^{N-2}(theta) dtheta,

with modified Bessel functions (N = 2) or modified spherical Bessel
functions (N = 3), leaving one radial integral.

The peak of the integrand sits at the global minimum of P_u, where
``exp(-P_u/D)`` can be as large as ``exp(1e5)``.  Every result therefore
carries the subtracted exponent explicitly, see :class:`ShiftedIntegral`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy import special

from .errors import QuadratureError
from .model import (
    ModelParams,
    StationaryDensity,
    confinement,
    critical_points,
    positive_minimum,
    radial_potential,
)

__all__ = [
    "QuadratureConfig",
    "ShiftedIntegral",
    "MIN_NOISE",
    "adaptive_gk",
    "angular_integral",
    "scaled_angular",
    "sphere_measure",
    "radial_weight",
    "log_radial_weight",
    "potential_floor",
    "truncation_radius",
    "weighted_integrals",
    "partition_function",
    "centered_moment",
    "stationary_density",
    "stationary_free_energy",
    "gaussian_moment",
    "gaussian_1d_moment",
]

MIN_NOISE = 1e-6

Integrand = Callable[[np.ndarray], Sequence]


@dataclass(frozen=True)
class QuadratureConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-14
    max_subdivisions: int = 2000
    truncation_margin: float = 60.0  # decades below the peak

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_subdivisions < 10:
            raise ValueError("max_subdivisions must be at least 10")
        if not self.truncation_margin > 0:
            raise ValueError("truncation_margin must be positive")


@dataclass(frozen=True)
class ShiftedIntegral:
    """The number ``mantissa * exp(log_scale)``."""

    log_scale: float
    mantissa: float

    @property
    def value(self) -> float:
        if self.mantissa == 0.0:
            return 0.0
        lg = self.log_scale + math.log(abs(self.mantissa))
        if lg > 700.0:
            raise OverflowError(f"value exp({lg:.1f}) overflows; use log_value")
        return self.mantissa * math.exp(self.log_scale)

    @property
    def log_value(self) -> float:
        """log of the absolute value."""
        return self.log_scale + math.log(abs(self.mantissa))


# ---------------------------------------------------------------------------
# adaptive Gauss-Kronrod (10-point Gauss embedded in 21-point Kronrod)

_XK = np.array([
    0.995657163025808080735527280689003,
    0.973906528517171720077964012084452,
    0.930157491355708226001207180059508,
    0.865063366688984510732096688423493,
    0.780817726586416897063717578345042,
    0.679409568299024406234327365114874,
    0.562757134668604683339000099272694,
    0.433395394129247190799265943165784,
    0.294392862701460198131126603103866,
    0.148874338981631210884826001129720,
    0.0,
])
_WK = np.array([
    0.011694638867371874278064396062192,
    0.032558162307964727478818972459390,
    0.054755896574351996031381300244580,
    0.075039674810919952767043140916190,
    0.093125454583697605535065465083366,
    0.109387158802297641899210590325805,
    0.123491976262065851077600525836893,
    0.134709217311473325928054001771707,
    0.142775938577060080797094273138717,
    0.147739104901338491374841515972068,
    0.149445554002916905664936468389821,
])
_WG = np.array([
    0.066671344308688137593568809893332,
    0.149451349150580593145776339657697,
    0.219086362515982043995534934228163,
    0.269266719309996355091226921569469,
    0.295524224714752870173892994651338,
])

# full 21-point rule on [-1, 1]
KRONROD_NODES = np.concatenate([-_XK[:-1], _XK[::-1]])
KRONROD_WEIGHTS = np.concatenate([_WK[:-1], _WK[::-1]])
GAUSS_WEIGHTS = np.zeros(21)
_odd = np.arange(1, 10, 2)  # Gauss nodes are the odd-indexed Kronrod nodes
GAUSS_WEIGHTS[_odd] = _WG
GAUSS_WEIGHTS[20 - _odd] = _WG


def _apply_rule(f, a, b):
    """Kronrod estimate, error estimate and |f| integral for each interval."""
    c = 0.5 * (a + b)
    h = 0.5 * (b - a)
    x = c[:, None] + h[:, None] * KRONROD_NODES[None, :]
    vals = np.asarray(f(x.ravel()), dtype=float)
    vals = vals.reshape(vals.shape[0], len(a), 21)
    k = h * (vals @ KRONROD_WEIGHTS)
    g = h * (vals @ GAUSS_WEIGHTS)
    absint = h * (np.abs(vals) @ KRONROD_WEIGHTS)
    mean = k / np.where(h > 0, 2 * h, 1.0)
    resasc = h * (np.abs(vals - mean[..., None]) @ KRONROD_WEIGHTS)
    diff = np.abs(k - g)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(resasc > 0, 200.0 * diff / resasc, 0.0)
        err = np.where(resasc > 0, resasc * np.minimum(1.0, ratio**1.5), diff)
    # roundoff floor
    err = np.maximum(err, 50.0 * np.finfo(float).eps * absint)
    return k, err, absint


def adaptive_gk(
    f: Callable[[np.ndarray], np.ndarray],
    breakpoints: Sequence[float],
    rel_tol: float = 1e-10,
    abs_tol: float = 1e-14,
    max_subdivisions: int = 2000,
):
    """Globally adaptive Gauss-Kronrod quadrature of a vector-valued integrand.

    ``f`` maps a 1-D array of abscissae to an array of shape
    ``(n_components, len(x))``.  Component ``j`` is converged when its
    error estimate is below ``max(abs_tol, rel_tol * int |f_j|)``.

    Returns ``(values, errors, abs_integrals)``, each of length
    ``n_components``.
    """
    pts = np.unique(np.asarray(breakpoints, dtype=float))
    if len(pts) < 2:
        raise ValueError("need at least two breakpoints")
    a, b = pts[:-1], pts[1:]
    k, err, absint = _apply_rule(f, a, b)
    while True:
        total = k.sum(axis=1)
        tol = np.maximum(abs_tol, rel_tol * absint.sum(axis=1))
        total_err = err.sum(axis=1)
        if np.all(total_err <= tol):
            return total, total_err, absint.sum(axis=1)
        if len(a) >= max_subdivisions:
            raise QuadratureError(
                f"adaptive quadrature hit {max_subdivisions} subintervals; "
                f"error {total_err.max():.3e} exceeds tolerance {tol.min():.3e}"
            )
        # normalised error per interval; split the worst ones until the rest
        # would meet tolerance
        score = (err / tol[:, None]).max(axis=0)
        order = np.argsort(score)[::-1]
        cum = np.cumsum(score[order])
        excess = score.sum() - 0.5
        n_split = int(np.searchsorted(cum, excess) + 1)
        n_split = max(1, min(n_split, len(order), max_subdivisions - len(a)))
        split = order[:n_split]
        keep = np.ones(len(a), dtype=bool)
        keep[split] = False
        mid = 0.5 * (a[split] + b[split])
        na = np.concatenate([a[split], mid])
        nb = np.concatenate([mid, b[split]])
        nk, nerr, nabs = _apply_rule(f, na, nb)
        a = np.concatenate([a[keep], na])
        b = np.concatenate([b[keep], nb])
        k = np.concatenate([k[:, keep], nk], axis=1)
        err = np.concatenate([err[:, keep], nerr], axis=1)
        absint = np.concatenate([absint[:, keep], nabs], axis=1)


# ---------------------------------------------------------------------------
# angular integrals


def sphere_measure(n: int) -> float:
    """Surface measure of the unit sphere S^n in R^(n+1); |S^0| = 2."""
    return 2.0 * math.pi ** ((n + 1) / 2.0) / math.gamma((n + 1) / 2.0)


def angular_integral(n: int, dim: int, z: float, scaled: bool = False, rel_tol: float = 1e-13) -> float:
    """``int_0^pi cos^n(t) exp(z cos t) sin^(dim-2)(t) dt`` by adaptive quadrature.

    With ``scaled=True`` the result is multiplied by ``exp(-|z|)``, which
    keeps it finite for large ``|z|``.
    """
    if dim not in (2, 3) or n < 0:
        raise ValueError("angular_integral needs n >= 0 and dim in {2, 3}")
    z = float(z)
    az = abs(z)

    def f(t):
        c = np.cos(t)
        return (c**n * np.exp(z * c - az) * np.sin(t) ** (dim - 2))[None, :]

    pts = [0.0, math.pi]
    if az > 1.0:
        w = 1.0 / math.sqrt(az)
        edge = 0.0 if z > 0 else math.pi
        for m in (1.0, 4.0, 16.0):
            pts.append(abs(edge - min(math.pi, m * w)))
    val, _, _ = adaptive_gk(f, pts, rel_tol=rel_tol, abs_tol=1e-300, max_subdivisions=500)
    return float(val[0]) if scaled else float(val[0]) * math.exp(az)


@lru_cache(maxsize=None)
def _chebyshev_weights(n: int):
    # cos^n = 2^-n sum_k C(n,k) cos((n-2k) t)
    w = {}
    for k in range(n + 1):
        m = abs(n - 2 * k)
        w[m] = w.get(m, 0.0) + math.comb(n, k) / 2.0**n
    return tuple(sorted(w.items()))


@lru_cache(maxsize=None)
def _legendre_weights(n: int):
    # t^n = sum_l c_l P_l(t)
    coef = npleg.poly2leg([0.0] * n + [1.0])
    return tuple((l, float(c)) for l, c in enumerate(coef) if abs(c) > 1e-15)


def _scaled_spherical_in(l: int, z: np.ndarray) -> np.ndarray:
    """exp(-z) i_l(z) for z >= 0."""
    small = z < 1e-4
    zs = np.where(small, 1.0, z)
    out = np.sqrt(np.pi / (2.0 * zs)) * special.ive(l + 0.5, zs)
    # two-term series z^l / (2l+1)!! (1 + z^2 / (2 (2l + 3))); next term is O(z^4)
    zt = np.where(small, z, 0.0)
    series = zt**l / special.factorial2(2 * l + 1) * (1.0 + zt * zt / (2.0 * (2 * l + 3))) * np.exp(-zt)
    return np.where(small, series, out)


def scaled_angular(n: int, dim: int, z) -> np.ndarray:
    """``exp(-z) * angular_integral(n, dim, z)`` for ``z >= 0`` in closed form."""
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    if dim == 2:
        for m, w in _chebyshev_weights(n):
            out = out + w * special.ive(m, z)
        return math.pi * out
    if dim == 3:
        for l, c in _legendre_weights(n):
            out = out + c * _scaled_spherical_in(l, z)
        return 2.0 * out
    raise ValueError("closed-form angular integrals need dim in {2, 3}")


# ---------------------------------------------------------------------------
# radial weight and truncation


def log_radial_weight(params: ModelParams, r):
    D = params.noise
    if not D > 0:
        raise ValueError("radial weight needs D > 0")
    return -confinement(params.alpha, np.asarray(r, dtype=float) ** 2) / D


def radial_weight(params: ModelParams, r):
    """``exp(alpha/D (r^2/2 - r^4/4) - r^2/(2D))``."""
    lw = log_radial_weight(params, r)
    if np.any(lw > 700.0):
        raise OverflowError("radial weight overflows; use log_radial_weight")
    out = np.exp(lw)
    return float(out) if np.ndim(out) == 0 else out


def potential_floor(alpha: float, u: float) -> tuple[float, float]:
    """Minimiser ``r* >= 0`` and minimum of P_u over the positive first axis.

    For ``u > 0`` this is the global minimum of P_u; for ``u = 0`` it is
    the radius and value of the sphere of minima (or the origin).
    """
    if u > 0:
        d = positive_minimum(ModelParams(1, alpha), u)
        return d.vstar, d.a0
    r0 = math.sqrt(max(0.0, 1.0 - 1.0 / alpha))
    return r0, float(confinement(alpha, r0 * r0))


def truncation_radius(params: ModelParams, u: float, cfg: QuadratureConfig) -> float:
    """Radius beyond which the integrand is ``truncation_margin`` decades below its peak.

    P_u(v) >= radial_potential(|v|) and the latter is increasing past its
    minimiser, so bisection on the positive axis is enough.
    """
    D = params.noise
    rstar, m = potential_floor(params.alpha, u)
    target = cfg.truncation_margin * math.log(10.0)

    def excess(r):
        return (radial_potential(params.alpha, u, r) - m) / D - target

    lo = rstar
    hi = max(1.0, 2.0 * rstar)
    while excess(hi) < 0:
        lo, hi = hi, 2.0 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if excess(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    return hi


def _peak_width(alpha: float, x: float, D: float) -> float:
    curv = 3.0 * alpha * x * x + 1.0 - alpha  # second derivative of P along axis 1
    quad = math.sqrt(2.0 * D / curv) if curv > 0 else math.inf
    return min(quad, (4.0 * D / alpha) ** 0.25)


def _breakpoints(params: ModelParams, u: float, R: float) -> np.ndarray:
    a, D = params.alpha, params.noise
    lo = -R if params.dim == 1 else 0.0
    pts = list(np.linspace(lo, R, 9))
    crit = list(critical_points(a, u))
    if u == 0:
        crit.append(0.0)
    for c in crit:
        if params.dim > 1 and c < 0:
            continue
        curv = 3.0 * a * c * c + 1.0 - a
        pts.append(c)
        if curv > 0 or u == 0:
            w = _peak_width(a, c, D)
            pts.extend(c + m * w for m in (-8, -3, -1, 1, 3, 8))
    pts = np.clip(np.asarray(pts), lo, R)
    return np.unique(pts)


# ---------------------------------------------------------------------------
# shifted integrals


def _check_noise(params: ModelParams):
    if params.noise < MIN_NOISE:
        raise ValueError(
            f"quadrature needs D >= {MIN_NOISE:g} (got {params.noise:g}); "
            "use csphase.asymptotics for smaller noise"
        )


def weighted_integrals(
    params: ModelParams,
    u: float,
    integrands: Sequence[Integrand],
    cfg: QuadratureConfig | None = None,
    radius: float | None = None,
) -> list[ShiftedIntegral]:
    """Integrals ``int g_j(v) exp(-P_u(v)/D) dv`` for polynomial weights ``g_j``.

    Each ``g_j`` is a callable ``s -> [b_0(s), b_1(s), ...]`` standing for
    ``sum_n b_n(|v|^2) v_1^n``.  All results share ``log_scale = -m/D``
    where ``m`` is the minimum of P_u (``a0(u)`` for ``u > 0``).
    """
    cfg = cfg or QuadratureConfig()
    _check_noise(params)
    if u < 0:
        raise ValueError("u must be non-negative")
    a, D, N = params.alpha, params.noise, params.dim
    _, m = potential_floor(a, u)
    R = truncation_radius(params, u, cfg) if radius is None else float(radius)
    pts = _breakpoints(params, u, R)

    if N == 1:
        def f(x):
            s = x * x
            w = np.exp(np.maximum(-(confinement(a, s) - u * x - m) / D, -700.0))
            rows = []
            for g in integrands:
                acc = np.zeros_like(x)
                xp = np.ones_like(x)
                for bn in g(s):
                    acc = acc + bn * xp
                    xp = xp * x
                rows.append(acc * w)
            return np.array(rows)
    else:
        shell = sphere_measure(N - 2)

        def f(r):
            s = r * r
            expo = -(radial_potential(a, u, r) - m) / D
            w = shell * r ** (N - 1) * np.exp(np.maximum(expo, -700.0))
            z = u * r / D
            cache = {}
            rows = []
            for g in integrands:
                acc = np.zeros_like(r)
                rp = np.ones_like(r)
                for n, bn in enumerate(g(s)):
                    if n not in cache:
                        cache[n] = scaled_angular(n, N, z)
                    acc = acc + bn * rp * cache[n]
                    rp = rp * r
                rows.append(acc * w)
            return np.array(rows)

    vals, _, _ = adaptive_gk(f, pts, cfg.rel_tol, cfg.abs_tol, cfg.max_subdivisions)
    return [ShiftedIntegral(-m / D, float(v)) for v in vals]


def partition_function(params: ModelParams, u: float, cfg: QuadratureConfig | None = None) -> ShiftedIntegral:
    """Normalisation constant Z of the stationary density with mean speed ``u``."""
    return weighted_integrals(params, u, [lambda s: [1.0]], cfg)[0]


def centered_moment(params: ModelParams, u: float, k: int, cfg: QuadratureConfig | None = None) -> ShiftedIntegral:
    """``int (v_1 - vstar(u))^k exp(-P_u/D) dv`` for k in {0, 1, 2}."""
    if k not in (0, 1, 2):
        raise ValueError("k must be 0, 1 or 2")
    if not u > 0:
        raise ValueError("centered moments are defined for u > 0")
    c = positive_minimum(params, u).vstar
    coeffs = [math.comb(k, n) * (-c) ** (k - n) for n in range(k + 1)]
    return weighted_integrals(params, u, [lambda s: coeffs], cfg)[0]


def stationary_density(params: ModelParams, u: float, cfg: QuadratureConfig | None = None) -> StationaryDensity:
    Z = partition_function(params, u, cfg)
    return StationaryDensity(params=params, ubar_magnitude=float(u), logZ=Z.log_value)


def stationary_free_energy(params: ModelParams, u: float, cfg: QuadratureConfig | None = None) -> float:
    """Free energy of ``f_u``: ``<conf> - |<v>|^2 / 2 + D int f log f``.

    The entropy term uses ``log f = -P_u / D - log Z``.
    """
    a = params.alpha
    Z, M1, C = weighted_integrals(params, u, [lambda s: [1.0], lambda s: [0.0, 1.0],
                                              lambda s: [confinement(a, s)]], cfg)
    mean = M1.mantissa / Z.mantissa
    conf = C.mantissa / Z.mantissa
    entropy = -(conf - u * mean) / params.noise - Z.log_value
    return conf - 0.5 * mean * mean + params.noise * entropy


# ---------------------------------------------------------------------------
# Gaussian moments


def gaussian_1d_moment(n: int) -> float:
    """``int_R exp(-r^2) r^n dr``: ``sqrt(pi) (n-1)!! / 2^(n/2)`` for even n, else 0."""
    if n % 2:
        return 0.0
    dfact = 1
    for j in range(n - 1, 0, -2):
        dfact *= j
    return math.sqrt(math.pi) * dfact / 2.0 ** (n // 2)


def gaussian_moment(lambdas: Sequence[float], beta: Sequence[int], D: float) -> float:
    """``int exp(-sum lambda_i x_i^2 / D) x^beta dx`` in closed form."""
    lambdas = [float(l) for l in lambdas]
    beta = [int(b) for b in beta]
    if len(lambdas) != len(beta):
        raise ValueError("lambdas and beta must have the same length")
    if any(l <= 0 for l in lambdas):
        raise ValueError("all lambdas must be positive")
    if any(b < 0 for b in beta):
        raise ValueError("multi-index entries must be non-negative")
    if any(b % 2 for b in beta):
        return 0.0
    order = len(beta) + sum(beta)
    out = D ** (order / 2.0)
    for l, b in zip(lambdas, beta):
        out *= l ** (-(1.0 + b) / 2.0) * gaussian_1d_moment(b)
    return out
