"""Euler-Maruyama simulation of the mean-field particle system.

Each particle obeys

    dv_i = -[alpha (|v_i|^2 - 1) v_i + (v_i - ubar)] dt + sqrt(2 D) dW_i,

with ``ubar`` the empirical mean velocity of its own run.  Runs in an
ensemble are independent; their Gaussian increments come from Philox
streams keyed by ``(seed, run)`` whose counter's high word is the step
number, so a run's trajectory does not depend on how runs are scheduled.
"""
from __future__ import annotations

import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit
from scipy.signal import find_peaks

from .errors import BlowUpError, SupportMismatchError
from .model import ModelParams, confinement, free_energy
from .quadrature import QuadratureConfig, stationary_density

log = logging.getLogger(__name__)

__all__ = [
    "InitialLaw",
    "SimConfig",
    "ObservableTrace",
    "CounterNoise",
    "PRESETS",
    "preset_config",
    "step",
    "simulate_run",
    "run_ensemble",
    "histogram_vs_analytic",
    "histogram_modes",
]


@dataclass(frozen=True)
class InitialLaw:
    """Gaussian ``N(mean, std^2 I)`` (``std = 0`` is a point mass at ``mean``).

    A scalar ``mean`` is placed along the first axis.
    """

    mean: tuple = (0.5,)
    std: float = 1.0

    @classmethod
    def gaussian(cls, mean, std: float) -> "InitialLaw":
        return cls(tuple(np.atleast_1d(np.asarray(mean, dtype=float)).tolist()), float(std))

    @classmethod
    def point(cls, velocity) -> "InitialLaw":
        return cls.gaussian(velocity, 0.0)

    def mean_vector(self, dim: int) -> np.ndarray:
        m = np.zeros(dim)
        vals = np.asarray(self.mean, dtype=float)
        if len(vals) == 1:
            m[0] = vals[0]
        elif len(vals) == dim:
            m[:] = vals
        else:
            raise ValueError(f"initial mean {self.mean} does not match dim={dim}")
        return m


@dataclass(frozen=True)
class SimConfig:
    params: ModelParams
    n_particles: int = 2000
    dt: float = 0.01
    t_end: float = 200.0
    n_runs: int = 10
    seed: int = 0
    init: InitialLaw = InitialLaw()
    record_every: int = 100
    hist_bins: int = 200
    hist_range: tuple = (-2.5, 2.5)
    blowup_speed: float = 10.0

    def __post_init__(self):
        if self.n_particles < 1 or self.n_runs < 1:
            raise ValueError("n_particles and n_runs must be positive")
        if not (self.dt > 0 and self.t_end > 0):
            raise ValueError("dt and t_end must be positive")
        if self.record_every < 1 or self.hist_bins < 1:
            raise ValueError("record_every and hist_bins must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def snapshot_steps(self) -> np.ndarray:
        steps = np.arange(0, self.n_steps + 1, self.record_every)
        if steps[-1] != self.n_steps:
            steps = np.append(steps, self.n_steps)
        return steps

    def edges(self) -> list[np.ndarray]:
        e = np.linspace(self.hist_range[0], self.hist_range[1], self.hist_bins + 1)
        return [e] * self.params.dim


PRESETS = {
    # reduced sizes that fit a test budget
    "stability": dict(alpha=3.0, dim=1, n_particles=2000, dt=0.01, t_end=200.0, n_runs=10,
                      init=InitialLaw.gaussian(0.5, 1.0), record_every=100),
    # dt below 0.01: the Euler bias in the mean speed is visible near D_c
    "histogram": dict(alpha=2.0, dim=1, noise=0.1, n_particles=5000, dt=0.0025, t_end=200.0, n_runs=20,
                      init=InitialLaw.gaussian(0.5, 1.0), record_every=800),
    "free-energy": dict(alpha=2.0, dim=1, noise=0.1, n_particles=2000, dt=0.001, t_end=25.0, n_runs=20,
                        init=InitialLaw.gaussian(0.5, 1.0), record_every=100),
    # full scale
    "stability-full": dict(alpha=3.0, dim=1, n_particles=10000, dt=0.01, t_end=6000.0, n_runs=10,
                           init=InitialLaw.gaussian(0.5, 1.0), record_every=1000),
    "histogram-full": dict(alpha=2.0, dim=1, noise=0.1, n_particles=10000, dt=0.01, t_end=500.0, n_runs=100,
                           init=InitialLaw.gaussian(0.5, 1.0), record_every=1000),
    "free-energy-full": dict(alpha=2.0, dim=1, noise=0.1, n_particles=10000, dt=0.001, t_end=25.0,
                             n_runs=100, init=InitialLaw.gaussian(0.5, 1.0), record_every=100),
}


def preset_config(name: str, **overrides) -> SimConfig:
    """Build a :class:`SimConfig` from a named preset; keyword arguments win."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    opts = dict(PRESETS[name])
    opts.update({k: v for k, v in overrides.items() if v is not None})
    params = ModelParams(int(opts.pop("dim")), float(opts.pop("alpha")), float(opts.pop("noise", 0.1)))
    return SimConfig(params=params, **opts)


class CounterNoise:
    """Counter-addressed Philox streams for one run.

    The key is derived from ``(seed, run)``; the high counter word selects a
    block.  Block 0 draws the initial condition and block ``j >= 1`` drives
    the steps between snapshots ``j - 1`` and ``j``, particles and steps
    consuming it in order.  A run therefore depends only on its own
    ``(seed, run)`` and the snapshot schedule.
    """

    def __init__(self, seed: int, run: int):
        self.key = np.random.SeedSequence([int(seed), int(run)]).generate_state(2, np.uint64)

    def generator(self, block: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key, counter=[0, 0, 0, int(block)]))

    def normals(self, block: int, shape) -> np.ndarray:
        return self.generator(block).standard_normal(shape)

    def increments(self, step_index: int, n_particles: int, dim: int, dt: float) -> np.ndarray:
        """Per-step increments for the reference loop (one block per step)."""
        return math.sqrt(dt) * self.normals(step_index, (n_particles, dim))


@njit(nogil=True, cache=True)
def _advance(v, rng, n_steps, alpha, noise, dt, limit):
    """``n_steps`` fused Euler-Maruyama steps in place; returns the step of a blow-up or -1."""
    M, N = v.shape
    amp = math.sqrt(2.0 * noise) * math.sqrt(dt)
    ubar = np.empty(N)
    for k in range(n_steps):
        ubar[:] = 0.0
        for i in range(M):
            for d in range(N):
                ubar[d] += v[i, d]
        ubar /= M
        for i in range(M):
            s = 0.0
            for d in range(N):
                s += v[i, d] * v[i, d]
            if not s <= limit:
                return k
            c = alpha * (s - 1.0)
            for d in range(N):
                x = v[i, d]
                v[i, d] = x - (c * x + (x - ubar[d])) * dt + amp * rng.standard_normal()
    return -1


def step(v: np.ndarray, params: ModelParams, dt: float, dW: np.ndarray) -> np.ndarray:
    """One explicit Euler-Maruyama step; ``dW`` has covariance ``dt I`` per particle."""
    ubar = v.mean(axis=0)
    s = np.einsum("ij,ij->i", v, v)[:, None]
    drift = params.alpha * (s - 1.0) * v + (v - ubar)
    return v - drift * dt + math.sqrt(2.0 * params.noise) * dW


@dataclass
class RunRecord:
    run: int
    mean_velocity: np.ndarray  # (n_snap, dim)
    counts: np.ndarray  # (n_snap, bins...) in-range histogram counts
    final: np.ndarray  # final velocities


def _bin_counts(v, lo, hi, bins, dim):
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < bins), axis=1)
    idx = idx[inside]
    flat = np.zeros(len(idx), dtype=np.int64)
    for d in range(dim):
        flat = flat * bins + idx[:, d]
    return np.bincount(flat, minlength=bins**dim).reshape((bins,) * dim)


def simulate_run(cfg: SimConfig, run: int, noise: Optional[Callable] = None,
                 v0: Optional[np.ndarray] = None) -> RunRecord:
    """Integrate one run and record snapshots.

    By default the steps run in a compiled loop fed by :class:`CounterNoise`.
    Passing ``noise(k, M, dim, dt)``, returning the increments of step ``k``
    (1-based), switches to the plain :func:`step` loop.  ``v0`` overrides
    the initial law.
    """
    p = cfg.params
    M, N, dt = cfg.n_particles, p.dim, cfg.dt
    stream = CounterNoise(cfg.seed, run)
    if v0 is None:
        v = cfg.init.mean_vector(N) + cfg.init.std * stream.normals(0, (M, N))
    else:
        v = np.array(v0, dtype=float).reshape(M, N)
    snaps = cfg.snapshot_steps
    lo, hi = cfg.hist_range
    means = np.empty((len(snaps), N))
    counts = np.zeros((len(snaps),) + (cfg.hist_bins,) * N, dtype=np.int64)
    limit = cfg.blowup_speed**2
    for j, k in enumerate(snaps):
        if j:
            n = int(k - snaps[j - 1])
            if noise is None:
                hit = _advance(v, stream.generator(j), n, p.alpha, p.noise, dt, limit)
                if hit >= 0:
                    raise BlowUpError(f"run {run}: |v| exceeded {cfg.blowup_speed} at step {snaps[j - 1] + hit}")
            else:
                for kk in range(int(snaps[j - 1]), int(k)):
                    if np.max(np.einsum("ij,ij->i", v, v)) > limit:
                        raise BlowUpError(f"run {run}: |v| exceeded {cfg.blowup_speed} at step {kk}")
                    v = step(v, p, dt, noise(kk + 1, M, N, dt))
        means[j] = v.mean(axis=0)
        counts[j] = _bin_counts(v, lo, hi, cfg.hist_bins, N)
    if not np.all(np.isfinite(v)) or np.max(np.einsum("ij,ij->i", v, v)) > limit:
        raise BlowUpError(f"run {run}: |v| exceeded {cfg.blowup_speed} at the final step")
    return RunRecord(run, means, counts, v)


@dataclass
class ObservableTrace:
    """Ensemble observables at the snapshot times.

    ``run_mean_velocity`` is NaN for runs that blew up (listed in
    ``failed_runs``); every other field pools the completed runs only.
    """

    times: np.ndarray
    mean_velocity: np.ndarray
    run_mean_velocity: np.ndarray
    free_energy: np.ndarray
    histogram: np.ndarray
    edges: list
    failed_runs: list = field(default_factory=list)
    outside_fraction: float = 0.0

    def terminal_velocities(self, fraction: float = 0.1) -> np.ndarray:
        """Per-run mean velocity averaged over the final ``fraction`` of snapshots."""
        n = len(self.times)
        k = max(1, int(math.ceil(fraction * n)))
        ok = np.all(np.isfinite(self.run_mean_velocity[:, -1, :]), axis=1)
        return self.run_mean_velocity[ok, n - k:, :].mean(axis=1)

    def terminal_summary(self, fraction: float = 0.1):
        """Ensemble mean of the terminal velocity and its standard error."""
        tv = self.terminal_velocities(fraction)
        se = tv.std(axis=0, ddof=1) / math.sqrt(len(tv)) if len(tv) > 1 else np.full(tv.shape[1], np.nan)
        return tv.mean(axis=0), se

    def bin_masses(self) -> np.ndarray:
        vol = 1.0
        for e in self.edges:
            vol = np.multiply.outer(vol, np.diff(e)) if np.ndim(vol) else np.diff(e)
        return self.histogram * vol


def run_ensemble(cfg: SimConfig, threads: int = 1) -> ObservableTrace:
    """Simulate ``cfg.n_runs`` independent runs and pool their observables."""
    p = cfg.params
    snaps = cfg.snapshot_steps
    n_snap = len(snaps)
    run_means = np.full((cfg.n_runs, n_snap, p.dim), np.nan)
    pooled = np.zeros((n_snap,) + (cfg.hist_bins,) * p.dim, dtype=np.int64)
    failed = []
    lock = threading.Lock()

    def work(r):
        try:
            rec = simulate_run(cfg, r)
        except BlowUpError as exc:
            log.warning("%s", exc)
            with lock:
                failed.append(r)
            return
        with lock:
            run_means[r] = rec.mean_velocity
            pooled[...] += rec.counts  # integer sums: order independent

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(cfg.n_runs)))
    else:
        for r in range(cfg.n_runs):
            work(r)
    failed.sort()
    n_ok = cfg.n_runs - len(failed)
    if n_ok == 0:
        raise BlowUpError("every run in the ensemble blew up")

    edges = cfg.edges()
    widths = np.diff(edges[0])
    vol = np.prod([widths[0]] * p.dim)
    fe = np.empty(n_snap)
    for j in range(n_snap):
        c = pooled[j]
        dens = c / (c.sum() * vol)
        fe[j] = free_energy(p, dens, edges, mass_tol=1e-9)
    final = pooled[-1]
    total = n_ok * cfg.n_particles
    ok = [r for r in range(cfg.n_runs) if r not in failed]
    return ObservableTrace(
        times=snaps * cfg.dt,
        mean_velocity=run_means[ok].mean(axis=0),
        run_mean_velocity=run_means,
        free_energy=fe,
        histogram=final / (final.sum() * vol),
        edges=edges,
        failed_runs=failed,
        outside_fraction=1.0 - final.sum() / total,
    )


# ---------------------------------------------------------------------------
# comparison with the analytic stationary density


def _cell_masses(params, u_vec, logZ, edges, nodes):
    x, w = np.polynomial.legendre.leggauss(nodes)
    D = params.noise
    axes = []
    for e in edges:
        e = np.asarray(e, dtype=float)
        c = 0.5 * (e[1:] + e[:-1])
        h = 0.5 * np.diff(e)
        axes.append((c[:, None] + h[:, None] * x[None, :], h[:, None] * w[None, :]))
    if params.dim == 1:
        pts, wts = axes[0]
        logf = -(confinement(params.alpha, pts**2) - u_vec[0] * pts) / D - logZ
        return np.sum(np.exp(logf) * wts, axis=1)
    if params.dim == 2:
        (px, wx), (py, wy) = axes
        X = px[:, None, :, None]
        Y = py[None, :, None, :]
        logf = -(confinement(params.alpha, X**2 + Y**2) - u_vec[0] * X - u_vec[1] * Y) / D - logZ
        W = wx[:, None, :, None] * wy[None, :, None, :]
        return np.sum(np.exp(logf) * W, axis=(2, 3))
    raise ValueError("histogram comparison supports dim 1 and 2")


def histogram_vs_analytic(trace: ObservableTrace, params: ModelParams, u_root: float,
                          cfg: QuadratureConfig | None = None, nodes: int = 16,
                          support_tol: float = 1e-6) -> float:
    """L1 distance between the final histogram and the bin masses of ``f_{u_root}``.

    The analytic mean velocity points along the ensemble's terminal mean
    (along ``e_1`` when that vanishes).
    """
    sd = stationary_density(params, u_root, cfg)
    mean, _ = trace.terminal_summary()
    norm = float(np.linalg.norm(mean))
    direction = mean / norm if norm > 0 else np.eye(params.dim)[0]
    masses = _cell_masses(params, u_root * direction, sd.logZ, trace.edges, nodes)
    outside = 1.0 - masses.sum()
    if outside > support_tol:
        raise SupportMismatchError(f"analytic mass {outside:.2e} lies outside the histogram range")
    return float(np.abs(trace.bin_masses() - masses).sum())


def histogram_modes(density: np.ndarray, edges: Sequence[np.ndarray], smooth_bins: int = 9,
                    prominence: float = 0.1) -> np.ndarray:
    """Locations of prominent local maxima of a 1-D histogram.

    The histogram is smoothed with a centred moving average first; peaks
    must stand out by ``prominence`` times the maximum.
    """
    h = np.asarray(density, dtype=float)
    if h.ndim != 1:
        raise ValueError("histogram_modes works on 1-D histograms")
    kernel = np.ones(smooth_bins) / smooth_bins
    sm = np.convolve(h, kernel, mode="same")
    idx, _ = find_peaks(sm, prominence=prominence * sm.max())
    e = np.asarray(edges[0], dtype=float)
    mids = 0.5 * (e[1:] + e[:-1])
    return mids[idx]


def with_noise(cfg: SimConfig, noise: float) -> SimConfig:
    return replace(cfg, params=cfg.params.with_noise(noise))
