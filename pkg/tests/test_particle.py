import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from csphase.consistency import critical_noise, find_positive_root
from csphase.errors import BlowUpError, SupportMismatchError
from csphase.model import ModelParams
from csphase.particle import (CounterNoise, InitialLaw, ObservableTrace, SimConfig, _advance, _cell_masses,
                             histogram_modes, histogram_vs_analytic, preset_config, run_ensemble, simulate_run,
                             step)
from csphase.quadrature import stationary_density, stationary_free_energy


def small_config(**kw):
    base = dict(params=ModelParams(1, 2.0, 0.2), n_particles=200, dt=0.01, t_end=2.0, n_runs=3, seed=5,
                record_every=20)
    base.update(kw)
    return SimConfig(**base)


class TestStep:
    def test_single_particle_relaxes_to_unit_speed(self):
        p = ModelParams(1, 2.0, 0.0)
        v = np.array([[0.5]])
        prev = 0.5
        for k in range(200_000):
            v = step(v, p, 1e-4, np.zeros((1, 1)))
            if k % 10_000 == 0:
                assert v[0, 0] >= prev
                prev = v[0, 0]
        assert abs(v[0, 0] - 1.0) < 1e-6

    def test_aligned_unit_state_is_stationary(self):
        p = ModelParams(2, 3.0, 0.0)
        v = np.tile([0.0, -1.0], (7, 1))
        assert np.array_equal(step(v, p, 0.05, np.zeros_like(v)), v)

    def test_alignment_alone_conserves_mean(self):
        shim = SimpleNamespace(alpha=0.0, noise=0.0, dim=2)
        v = np.random.default_rng(3).normal(size=(1000, 2))
        mean0 = v.mean(axis=0)
        for _ in range(50):
            v = step(v, shim, 0.05, np.zeros_like(v))
        assert np.allclose(v.mean(axis=0), mean0, atol=1e-14)

    def test_compiled_loop_matches_reference(self):
        p = ModelParams(2, 2.0, 0.0)
        v0 = np.random.default_rng(4).normal(size=(300, 2))
        ref = v0.copy()
        for _ in range(100):
            ref = step(ref, p, 0.01, np.zeros_like(ref))
        fast = v0.copy()
        rng = CounterNoise(0, 0).generator(1)
        assert _advance(fast, rng, 100, p.alpha, p.noise, 0.01, 100.0) == -1
        assert np.allclose(fast, ref, rtol=0, atol=1e-12)

    def test_compiled_loop_noise_statistics(self):
        # pure diffusion check: alpha tiny, no alignment pull on a single particle
        p = ModelParams(1, 1e-12, 0.5)
        v = np.zeros((200_000, 1))
        _advance(v, CounterNoise(1, 0).generator(1), 1, p.alpha, p.noise, 0.01, 100.0)
        assert v.var() == pytest.approx(2 * 0.5 * 0.01, rel=0.02)


class TestEnsemble:
    def test_deterministic_across_thread_counts(self):
        cfg = small_config()
        a = run_ensemble(cfg, threads=1)
        b = run_ensemble(cfg, threads=3)
        for name in ("times", "mean_velocity", "run_mean_velocity", "free_energy", "histogram"):
            assert np.array_equal(getattr(a, name), getattr(b, name)), name

    def test_runs_are_decorrelated_and_seed_dependent(self):
        tr = run_ensemble(small_config())
        rm = tr.run_mean_velocity[:, -1, 0]
        assert len(set(rm.tolist())) == 3
        other = run_ensemble(small_config(seed=6))
        assert not np.array_equal(other.run_mean_velocity, tr.run_mean_velocity)

    def test_run_independent_of_ensemble_size(self):
        a = run_ensemble(small_config(n_runs=2))
        b = run_ensemble(small_config(n_runs=4))
        assert np.array_equal(a.run_mean_velocity, b.run_mean_velocity[:2])

    def test_histogram_normalised(self):
        tr = run_ensemble(small_config())
        assert tr.bin_masses().sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.isfinite(tr.free_energy))
        assert tr.times[0] == 0.0 and tr.times[-1] == pytest.approx(2.0)

    def test_rotation_equivariance_2d(self):
        theta = 0.7
        R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        cfg = small_config(params=ModelParams(2, 2.0, 0.3), n_particles=100, t_end=0.5, record_every=10)
        stream = CounterNoise(cfg.seed, 0)
        v0 = stream.normals(0, (100, 2)) + np.array([0.5, 0.2])
        plain = simulate_run(cfg, 0, noise=stream.increments, v0=v0)
        rotated = simulate_run(cfg, 0, noise=lambda k, M, N, dt: stream.increments(k, M, N, dt) @ R.T,
                               v0=v0 @ R.T)
        assert np.allclose(rotated.final, plain.final @ R.T, atol=1e-11)
        assert np.allclose(rotated.mean_velocity, plain.mean_velocity @ R.T, atol=1e-11)

    def test_partial_blow_up_is_reported(self):
        cfg = small_config(n_particles=50, n_runs=6, seed=2, init=InitialLaw.gaussian(0.0, 4.0), t_end=0.1,
                           record_every=5)
        tr = run_ensemble(cfg)
        assert 0 < len(tr.failed_runs) < cfg.n_runs
        for r in range(cfg.n_runs):
            assert np.isnan(tr.run_mean_velocity[r]).all() == (r in tr.failed_runs)
        ok = [r for r in range(cfg.n_runs) if r not in tr.failed_runs]
        assert np.allclose(tr.mean_velocity, tr.run_mean_velocity[ok].mean(axis=0))

    def test_total_blow_up_raises(self):
        cfg = small_config(init=InitialLaw.point(9.0), dt=0.5)
        with pytest.raises(BlowUpError):
            run_ensemble(cfg)

    def test_matches_root_in_3_standard_errors(self):
        p = ModelParams(1, 2.0, 0.2)
        cfg = SimConfig(params=p, n_particles=10_000, dt=0.01, t_end=100.0, n_runs=4, seed=1, record_every=100)
        mean, se = run_ensemble(cfg).terminal_summary()
        assert abs(mean[0] - find_positive_root(p)) < max(3 * se[0], 0.01)

    def test_weak_convergence_in_dt(self):
        dc = critical_noise(3.0, 1)
        base = preset_config("stability", noise=0.25 * dc)
        coarse = run_ensemble(base).terminal_summary()
        fine = run_ensemble(replace(base, dt=base.dt / 2, record_every=2 * base.record_every)).terminal_summary()
        se = math.hypot(coarse[1][0], fine[1][0])
        assert abs(coarse[0][0] - fine[0][0]) < max(se, 1e-3)

    def test_free_energy_trace(self):
        p = ModelParams(1, 2.0, 0.1)
        cfg = preset_config("free-energy", noise=0.1, n_runs=10)
        tr = run_ensemble(cfg)
        fe = tr.free_energy
        assert fe[0] - fe[len(fe) // 10] > 0.5 * (fe[0] - fe[-1])  # swift initial decline
        target = stationary_free_energy(p, find_positive_root(p))
        assert fe[-1] == pytest.approx(target, rel=0.02)


class TestHistogramComparison:
    def _exact_trace(self, params, u, edges):
        sd = stationary_density(params, u)
        masses = _cell_masses(params, np.array([u]), sd.logZ, [edges], 16)
        hist = masses / np.diff(edges)
        run_means = np.full((1, 3, 1), u)
        return ObservableTrace(np.arange(3.0), run_means[0], run_means, np.zeros(3), hist, [edges])

    def test_identity_case(self):
        p = ModelParams(1, 2.0, 0.3)
        u = find_positive_root(p)
        edges = np.linspace(-2.5, 2.5, 201)
        tr = self._exact_trace(p, u, edges)
        tr.histogram /= tr.bin_masses().sum()
        assert histogram_vs_analytic(tr, p, u) < 1e-10

    def test_support_mismatch(self):
        p = ModelParams(1, 2.0, 0.5)
        edges = np.linspace(-1.0, 1.0, 81)
        tr = self._exact_trace(p, 0.3, edges)
        with pytest.raises(SupportMismatchError):
            histogram_vs_analytic(tr, p, 0.3)

    def test_modes_of_symmetric_density(self):
        edges = np.linspace(-2.5, 2.5, 201)
        mids = 0.5 * (edges[1:] + edges[:-1])
        h = np.exp(-((np.abs(mids) - 1.0) ** 2) / 0.05)
        h /= h.sum() * (edges[1] - edges[0])
        modes = histogram_modes(h, [edges])
        assert len(modes) == 2
        assert np.allclose(np.abs(modes), 1.0, atol=0.03)

    def test_single_mode(self):
        edges = np.linspace(-2.5, 2.5, 201)
        mids = 0.5 * (edges[1:] + edges[:-1])
        h = np.exp(-((mids - 0.9) ** 2) / 0.05)
        assert len(histogram_modes(h, [edges])) == 1


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(n_particles=0), dict(dt=0.0), dict(t_end=-1.0), dict(n_runs=0),
                                    dict(record_every=0), dict(seed=-1)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            small_config(**kw)

    def test_presets(self):
        cfg = preset_config("stability", noise=0.3, n_runs=2)
        assert (cfg.params.alpha, cfg.params.noise, cfg.n_runs, cfg.n_particles) == (3.0, 0.3, 2, 2000)
        with pytest.raises(KeyError):
            preset_config("nope")

    def test_snapshot_schedule_includes_end(self):
        cfg = small_config(t_end=1.05, record_every=20)
        assert cfg.snapshot_steps[-1] == 105
        assert cfg.snapshot_steps[0] == 0

    def test_initial_law(self):
        assert np.array_equal(InitialLaw.gaussian(0.5, 1.0).mean_vector(3), [0.5, 0.0, 0.0])
        assert np.array_equal(InitialLaw.point([0.1, 0.2]).mean_vector(2), [0.1, 0.2])
        with pytest.raises(ValueError):
            InitialLaw.point([0.1, 0.2]).mean_vector(3)
