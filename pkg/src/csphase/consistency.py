"""The self-consistency map H(u, D), its derivatives, roots and critical noise.

A stationary density with mean speed ``u`` exists iff ``H(u, D) = 0``
where ``H(u, D) = int (v_1 - u) f_u(v) dv``.  ``u = 0`` is always a root;
the ordered phase is the positive root ``u(D)``, which merges into zero at
the critical noise ``D_c`` where ``dH/du(0, D)`` changes sign.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .errors import AmbiguousBracketError, NoSignChangeError
from .model import ModelParams, confinement, positive_minimum
from .quadrature import QuadratureConfig, potential_floor, weighted_integrals

log = logging.getLogger(__name__)

__all__ = [
    "ConsistencyPoint",
    "BifurcationCurve",
    "PhaseDiagram",
    "U_LO",
    "U_HI",
    "evaluate_H",
    "evaluate_dH_du",
    "evaluate_dH_dD",
    "evaluate_point",
    "h_tilde_direct",
    "h_tilde_by_parts",
    "find_positive_root",
    "has_positive_root",
    "trace_bifurcation",
    "critical_noise",
    "phase_scan",
]

U_LO = 1e-4
U_HI = 3.0


@dataclass(frozen=True)
class ConsistencyPoint:
    u: float
    D: float
    H: float
    dH_du: float
    dH_dD: Optional[float] = None


@dataclass
class BifurcationCurve:
    """Positive branch ``u(D)`` sampled with increasing ``D``.

    ``dH_du`` holds ``dH/du(u(D), D)`` for each sample.
    """

    alpha: float
    dim: int
    samples: list = field(default_factory=list)
    dH_du: list = field(default_factory=list)
    d_critical: float = math.nan
    slope_at_zero: float = math.nan

    @property
    def D(self) -> np.ndarray:
        return np.array([d for d, _ in self.samples])

    @property
    def u(self) -> np.ndarray:
        return np.array([u for _, u in self.samples])


@dataclass
class PhaseDiagram:
    """Grid classification plus the continuation boundary ``D_c(alpha)``.

    ``n_states`` is 1 when only the disordered state exists and 2 when a
    polarised family exists as well.
    """

    dim: int
    grid: list = field(default_factory=list)  # (alpha, D, n_states)
    boundary: list = field(default_factory=list)  # (alpha, D_c)
    errors: list = field(default_factory=list)  # (alpha, D, message)


def _poly_terms(alpha, u, c, m):
    """Integrand coefficient lists for F0, F1, F2, int (P-m), int (v1-c)(P-m)."""

    def shifted(s):
        return confinement(alpha, s) - m

    return [
        lambda s: [1.0],
        lambda s: [-c, 1.0],
        lambda s: [c * c, -2.0 * c, 1.0],
        lambda s: [shifted(s), -u],
        lambda s: [-c * shifted(s), shifted(s) + c * u, -u],
    ]


def _moments(params: ModelParams, u: float, cfg: QuadratureConfig, with_energy: bool = False):
    """F_0, F_1, F_2 centred at vstar(u) (at 0 when u = 0), optionally the P-moments.

    All values share one log scale, which cancels in every ratio used here.
    """
    if u > 0:
        c = positive_minimum(params, u).vstar
    else:
        c = 0.0
    _, m = potential_floor(params.alpha, u)
    terms = _poly_terms(params.alpha, u, c, m)
    if not with_energy:
        terms = terms[:3]
    vals = weighted_integrals(params, u, terms, cfg)
    return c, m, [v.mantissa for v in vals]


def _check(params: ModelParams, u: float):
    if u < 0:
        raise ValueError("u must be non-negative")
    if params.noise <= 0:
        raise ValueError("quadrature-based H needs D > 0; use asymptotics.extended_H_at_zero_noise")


def evaluate_H(params: ModelParams, u: float, cfg: QuadratureConfig | None = None) -> float:
    """``H(u, D) = F_1/F_0 + vstar(u) - u``; exactly 0 at ``u = 0``.

    At ``D = 0`` the continuous extension ``vstar(u) - u`` is returned.
    """
    if u == 0:
        return 0.0
    if params.noise == 0:
        return positive_minimum(params, u).vstar - u
    _check(params, u)
    cfg = cfg or QuadratureConfig()
    c, _, (F0, F1, _F2) = _moments(params, u, cfg)
    return F1 / F0 + (c - u)


def evaluate_dH_du(params: ModelParams, u: float, cfg: QuadratureConfig | None = None) -> float:
    """``(F0 F2 - F1^2) / (D F0^2) - 1``; at ``u = 0`` this is ``<v_1^2>/D - 1``."""
    _check(params, u)
    cfg = cfg or QuadratureConfig()
    _, _, (F0, F1, F2) = _moments(params, u, cfg)
    D = params.noise
    if u == 0:
        return F2 / F0 / D - 1.0
    return (F0 * F2 - F1 * F1) / (F0 * F0) / D - 1.0


def evaluate_dH_dD(params: ModelParams, u: float, cfg: QuadratureConfig | None = None) -> float:
    """Noise derivative of H, from the centred form of the P-weighted integrals."""
    _check(params, u)
    if u == 0:
        return 0.0
    cfg = cfg or QuadratureConfig()
    return evaluate_point(params, u, cfg, with_dD=True).dH_dD


def evaluate_point(params: ModelParams, u: float, cfg: QuadratureConfig | None = None,
                   with_dD: bool = False) -> ConsistencyPoint:
    """H and its derivatives from one shared quadrature pass."""
    _check(params, u)
    cfg = cfg or QuadratureConfig()
    D = params.noise
    c, _, F = _moments(params, u, cfg, with_energy=with_dD and u > 0)
    F0, F1, F2 = F[:3]
    if u == 0:
        return ConsistencyPoint(0.0, D, 0.0, F2 / F0 / D - 1.0, 0.0 if with_dD else None)
    H = F1 / F0 + (c - u)
    dH_du = (F0 * F2 - F1 * F1) / (F0 * F0) / D - 1.0
    dH_dD = None
    if with_dD:
        J0, J1 = F[3], F[4]
        dH_dD = (F0 * J1 - F1 * J0) / (D * D * F0 * F0)
    return ConsistencyPoint(float(u), D, H, dH_du, dH_dD)


def h_tilde_direct(params: ModelParams, u: float, cfg: QuadratureConfig | None = None):
    """``Z H = int (v_1 - u) exp(-P_u/D) dv`` as a shifted integral."""
    return weighted_integrals(params, u, [lambda s: [-u, 1.0]], cfg)[0]


def h_tilde_by_parts(params: ModelParams, u: float, cfg: QuadratureConfig | None = None):
    """The same quantity after integrating by parts in ``v_1``:
    ``-alpha int v_1 (|v|^2 - 1) exp(-P_u/D) dv``."""
    a = params.alpha
    return weighted_integrals(params, u, [lambda s: [0.0, -a * (s - 1.0)]], cfg)[0]


# ---------------------------------------------------------------------------
# roots in u


def _refine_root(params, cfg, lo, hi, root_tol, guess=None, max_iter=100):
    """Newton on H safeguarded by the bracket ``H(lo) > 0 > H(hi)``."""
    x = 0.5 * (lo + hi) if guess is None or not lo < guess < hi else guess
    best = None
    for _ in range(max_iter):
        pt = evaluate_point(params, x, cfg)
        if best is None or abs(pt.H) < abs(best.H):
            best = pt
        if abs(pt.H) < root_tol:
            return pt
        if pt.H > 0:
            lo = x
        else:
            hi = x
        step_ok = pt.dH_du < 0
        if step_ok:
            xn = x - pt.H / pt.dH_du
            step_ok = lo < xn < hi
        x = xn if step_ok else 0.5 * (lo + hi)
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
    log.debug("root refinement stopped at |H|=%.3e (tol %.1e)", abs(best.H), root_tol)
    return best


def find_positive_root(params: ModelParams, cfg: QuadratureConfig | None = None,
                       root_tol: float = 1e-10, u_lo: float = U_LO, u_hi: float = U_HI,
                       n_scan: int = 64) -> Optional[float]:
    """Positive root of ``H(., D)`` or ``None`` in the disordered regime.

    Scans ``n_scan`` equally spaced points of ``[u_lo, u_hi]`` for sign
    changes, then refines with safeguarded Newton.  More than one sign
    change raises :class:`AmbiguousBracketError` listing every bracket.
    """
    pt = find_positive_root_point(params, cfg, root_tol, u_lo, u_hi, n_scan)
    return None if pt is None else pt.u


def find_positive_root_point(params, cfg=None, root_tol=1e-10, u_lo=U_LO, u_hi=U_HI, n_scan=64):
    cfg = cfg or QuadratureConfig()
    grid = np.linspace(u_lo, u_hi, n_scan)
    hs = np.array([evaluate_H(params, float(x), cfg) for x in grid])
    sign = np.sign(hs)
    idx = np.nonzero(sign[:-1] * sign[1:] < 0)[0]
    exact = np.nonzero(hs == 0.0)[0]
    if len(idx) + len(exact) > 1:
        brackets = [(float(grid[i]), float(grid[i + 1])) for i in idx]
        brackets += [(float(grid[i]), float(grid[i])) for i in exact]
        raise AmbiguousBracketError(
            f"H(., D={params.noise:g}) changes sign {len(brackets)} times on [{u_lo}, {u_hi}]", brackets
        )
    if len(exact):
        return evaluate_point(params, float(grid[exact[0]]), cfg)
    if not len(idx):
        return None
    i = idx[0]
    if hs[i] < 0:
        # H increasing through zero: not the branch emanating from u = 1
        raise AmbiguousBracketError("H crosses zero upwards; unexpected root structure",
                                    [(float(grid[i]), float(grid[i + 1]))])
    return _refine_root(params, cfg, float(grid[i]), float(grid[i + 1]), root_tol)


def has_positive_root(params: ModelParams, cfg: QuadratureConfig | None = None, u_lo: float = U_LO) -> bool:
    """Cheap existence test: ``H(u_lo, D) > 0`` (H is negative for large u)."""
    return evaluate_H(params, u_lo, cfg) > 0


def _continue_root(params, cfg, u_prev, root_tol, u_lo=U_LO, u_hi=U_HI):
    """Root near ``u_prev`` by local bracketing; ``None`` if the branch is gone."""
    if not has_positive_root(params, cfg, u_lo):
        return None
    h = evaluate_H(params, u_prev, cfg)
    if h == 0:
        return evaluate_point(params, u_prev, cfg)
    if h > 0:
        lo, hi = u_prev, min(u_hi, u_prev * 1.1 + 1e-3)
        while evaluate_H(params, hi, cfg) > 0:
            if hi >= u_hi:
                raise NoSignChangeError(f"H > 0 up to u={u_hi} at D={params.noise:g}")
            lo, hi = hi, min(u_hi, hi * 1.5)
    else:
        lo, hi = max(u_lo, u_prev / 1.1), u_prev
        while evaluate_H(params, lo, cfg) <= 0:
            lo, hi = max(u_lo, lo / 2.0), lo
    return _refine_root(params, cfg, lo, hi, root_tol, guess=u_prev)


def trace_bifurcation(alpha: float, dim: int, d_min: float = 1e-3, d_max: float | None = None,
                      cfg: QuadratureConfig | None = None, d_step: float = 1e-3, max_step: float = 0.02,
                      growth: float = 1.5, root_tol: float = 1e-10, d_tol: float = 1e-7,
                      tail: Sequence[float] = (0.3, 0.05, 0.005)) -> BifurcationCurve:
    """Follow the positive branch upward in ``D`` from ``d_min``.

    The first five samples are ``d_step`` apart (they feed the slope
    estimate at ``D = 0``); later steps grow by ``growth`` up to
    ``max_step`` and are halved whenever the root moves by more than 0.1.
    When the branch disappears, ``D_c`` is refined by bisection on
    existence and extra samples are placed at ``D_c - t (D_c - D_last)``
    for ``t`` in ``tail``.
    """
    if d_min < 1e-4:
        raise ValueError("d_min must be at least 1e-4")
    cfg = cfg or QuadratureConfig()
    base = ModelParams(dim, alpha)
    d_cap = 10.0 if d_max is None else d_max
    curve = BifurcationCurve(alpha=alpha, dim=dim)
    D, step = d_min, d_step
    u_prev = None
    d_fail = None
    while D <= d_cap + 1e-15:
        p = base.with_noise(D)
        try:
            pt = find_positive_root_point(p, cfg, root_tol) if u_prev is None else \
                _continue_root(p, cfg, u_prev, root_tol)
        except Exception as exc:  # attach the offending noise level
            raise type(exc)(f"{exc} (alpha={alpha}, dim={dim}, D={D:g})") from exc
        if pt is None:
            d_fail = D
            break
        if u_prev is not None and abs(pt.u - u_prev) > 0.1 and step > 1e-6 and len(curve.samples) >= 5:
            D -= step
            step /= 2.0
            D += step
            continue
        curve.samples.append((D, pt.u))
        curve.dH_du.append(pt.dH_du)
        u_prev = pt.u
        if len(curve.samples) >= 5:
            step = min(max_step, step * growth)
        D += step
    if not curve.samples:
        raise NoSignChangeError(f"no positive root at D={d_min:g} (alpha={alpha}, dim={dim})")
    n = min(5, len(curve.samples))
    if n >= 2:
        curve.slope_at_zero = float(np.polyfit(curve.D[:n], curve.u[:n], 1)[0])
    if d_fail is None:
        return curve
    lo, hi = curve.samples[-1][0], d_fail
    while hi - lo > d_tol:
        mid = 0.5 * (lo + hi)
        if has_positive_root(base.with_noise(mid), cfg):
            lo = mid
        else:
            hi = mid
    curve.d_critical = 0.5 * (lo + hi)
    d_last = curve.samples[-1][0]
    for t in tail:
        Dt = curve.d_critical - t * (curve.d_critical - d_last)
        if Dt <= curve.samples[-1][0] or Dt >= lo:
            continue
        pt = _continue_root(base.with_noise(Dt), cfg, curve.samples[-1][1], root_tol)
        if pt is None:
            break
        curve.samples.append((Dt, pt.u))
        curve.dH_du.append(pt.dH_du)
    return curve


# ---------------------------------------------------------------------------
# critical noise and the phase diagram


def critical_noise(alpha: float, dim: int, cfg: QuadratureConfig | None = None, tol: float = 1e-8,
                   guess: float | None = None, d_lo: float = 1e-2, d_hi: float = 1.0,
                   cap: float = 64.0) -> float:
    """Noise at which ``dH/du(0, D)`` changes sign from positive to negative."""
    cfg = cfg or QuadratureConfig()
    base = ModelParams(dim, alpha)

    def slope(D):
        return evaluate_dH_du(base.with_noise(D), 0.0, cfg)

    if guess is not None:
        lo, hi = guess / 1.2, guess * 1.2
        if slope(lo) > 0 > slope(hi):
            return optimize.brentq(slope, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps)
    lo, hi = d_lo, d_hi
    while slope(lo) <= 0:
        lo /= 2.0
        if lo < 1e-4:
            raise NoSignChangeError(f"dH/du(0, D) <= 0 down to D={lo:g} (alpha={alpha})")
    while slope(hi) >= 0:
        lo, hi = hi, 2.0 * hi
        if hi > cap:
            raise NoSignChangeError(f"dH/du(0, D) >= 0 up to D={cap:g} (alpha={alpha})")
    return optimize.brentq(slope, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps)


def phase_scan(alpha_grid: Sequence[float], D_grid: Sequence[float], dim: int,
               cfg: QuadratureConfig | None = None, threads: int = 1) -> PhaseDiagram:
    """Classify every ``(alpha, D)`` and trace ``D_c(alpha)`` by continuation in alpha."""
    cfg = cfg or QuadratureConfig()
    alphas = [float(a) for a in alpha_grid]
    Ds = [float(d) for d in D_grid]
    if not alphas or not Ds:
        raise ValueError("grids must be non-empty")
    if alphas != sorted(alphas) or Ds != sorted(Ds):
        raise ValueError("grids must be sorted")

    def row(alpha):
        out, errs = [], []
        for D in Ds:
            try:
                root = find_positive_root(ModelParams(dim, alpha, D), cfg)
                out.append((alpha, D, 1 if root is None else 2))
            except Exception as exc:
                errs.append((alpha, D, str(exc)))
        return out, errs

    diagram = PhaseDiagram(dim=dim)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, alphas))
    else:
        rows = [row(a) for a in alphas]
    for out, errs in rows:
        diagram.grid.extend(out)
        diagram.errors.extend(errs)

    guess = None
    for alpha in alphas:
        try:
            dc = critical_noise(alpha, dim, cfg, guess=guess)
        except Exception as exc:
            diagram.errors.append((alpha, math.nan, str(exc)))
            continue
        diagram.boundary.append((alpha, dc))
        guess = dc
    return diagram
