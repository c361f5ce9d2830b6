import math

import numpy as np
import pytest

import prop_checks
from strandsim.propagators import (GridParams, PropagatorCache,
                                   RadiationProblem, sample_free_displacement,
                                   sample_radius, sample_reaction_time,
                                   sample_theta_z, solve_angular_pde,
                                   solve_radiation_pde)


@pytest.mark.parametrize("name,fn", prop_checks.ALL_CHECKS,
                         ids=[n for n, _ in prop_checks.ALL_CHECKS])
def test_suite_check(name, fn):
    ok, detail = fn()
    assert ok, f"{name}: {detail}"


class TestSolveInputs:
    def test_invalid_inputs_rejected(self):
        with pytest.raises(ValueError):
            solve_radiation_pde(RadiationProblem("3d", 1e-12, 1e-9, 1e-11,
                                                 0.5e-9, 1e-5))  # r0 < sigma
        with pytest.raises(ValueError):
            solve_radiation_pde(RadiationProblem("3d", -1e-12, 1e-9, 0.0,
                                                 2e-9, 1e-5))
        with pytest.raises(ValueError):
            solve_radiation_pde(RadiationProblem("4d", 1e-12, 1e-9, 0.0,
                                                 2e-9, 1e-5))
        with pytest.raises(ValueError):
            solve_radiation_pde(RadiationProblem("3d", 1e-12, 1e-9, 0.0,
                                                 2e-9, 1e-5),
                                GridParams(r_max_factor=3.0))

    def test_small_dt_mass_stays_at_r0(self):
        # delta initial condition: for dt -> 0 the mass stays put
        r0 = 1e-8
        prop = solve_radiation_pde(RadiationProblem("3d", 1e-12, 1e-9, 1e-11,
                                                    r0, 1e-12))
        assert prop.survival[-1] == pytest.approx(1.0, abs=1e-6)
        rng = np.random.default_rng(0)
        rs = [sample_radius(prop, 1e-12, u) for u in rng.uniform(size=2000)]
        j = np.searchsorted(prop.r_faces, r0) - 1
        cell = prop.widths[j]
        assert abs(np.mean(rs) - r0) < cell


class TestReactionTime:
    def test_no_reaction_when_rate_zero(self):
        prop = solve_radiation_pde(RadiationProblem("2d", 1e-12, 1e-9, 0.0,
                                                    2e-9, 1e-5))
        rng = np.random.default_rng(1)
        assert all(sample_reaction_time(prop, u) is None
                   for u in rng.uniform(size=100))

    def test_u_near_one_gives_early_time(self):
        prop = solve_radiation_pde(RadiationProblem("3d", 1e-12, 1e-9, math.inf,
                                                    1.1e-9, 1e-5))
        t = sample_reaction_time(prop, 1.0 - 1e-12)
        assert t <= prop.t_grid[1]

    def test_u_validation(self):
        prop = solve_radiation_pde(RadiationProblem("3d", 1e-12, 1e-9, 0.0,
                                                    2e-9, 1e-5))
        with pytest.raises(ValueError):
            sample_reaction_time(prop, 0.0)
        with pytest.raises(ValueError):
            sample_reaction_time(prop, 1.0)


class TestSampleRadius:
    def test_endpoints(self):
        prop = solve_radiation_pde(RadiationProblem("3d", 1e-12, 1e-9, 0.0,
                                                    2e-9, 1e-5))
        eps = 1e-15
        assert sample_radius(prop, 1e-5, eps) == pytest.approx(1e-9, rel=1e-3)
        assert sample_radius(prop, 1e-5, 1.0) == pytest.approx(
            prop.r_faces[-1], rel=1e-12)

    def test_mean_matches_bd_oracle(self):
        # short horizon, reflecting: D*t << (r0-sigma)^2
        from strandsim.validation import BdOracleConfig, bd_oracle
        D, sigma, r0, dt = 1e-12, 1e-9, 1e-8, 2e-7
        prop = solve_radiation_pde(RadiationProblem("3d", D, sigma, 0.0, r0, dt))
        rng = np.random.default_rng(2)
        rs = np.array([sample_radius(prop, dt, u)
                       for u in rng.uniform(size=100_000)])
        res = bd_oracle(BdOracleConfig("3d", D, sigma, 0.0, r0, dt,
                                       dt_bd=2e-9, trials=100_000, seed=3))
        se = res.final_radii.std(ddof=1) / math.sqrt(len(res.final_radii))
        se_solver = rs.std(ddof=1) / math.sqrt(len(rs))
        joint = math.hypot(se, se_solver)
        assert abs(rs.mean() - res.final_radii.mean()) < 2.0 * joint

    def test_zero_survival_raises(self):
        prop = solve_radiation_pde(RadiationProblem("1d", 1e-12, 1e-9, math.inf,
                                                    1.0001e-9, 1e-4))
        if prop.survival[-1] <= 0.0:
            with pytest.raises(ValueError):
                sample_radius(prop, 1e-4, 0.5)
        else:
            pytest.skip("survival not fully exhausted on this grid")


class TestAngular:
    def test_small_beta_concentrates_at_zero(self):
        ang = solve_angular_pde(1e-12, 1e-9, 1e-12)  # beta = 1e-9
        rng = np.random.default_rng(3)
        thetas = [ang.sample(u) for u in rng.uniform(size=5000)]
        assert np.mean(thetas) < ang.widths[0]

    def test_large_beta_is_uniform_on_sphere(self):
        ang = solve_angular_pde(1e-12, 1e-9, 1e3 * 1e-18 / 1e-12)  # beta = 1e3
        rng = np.random.default_rng(4)
        cos = np.cos([ang.sample(u) for u in rng.uniform(size=100_000)])
        se = np.std(cos, ddof=1) / math.sqrt(len(cos))
        assert abs(np.mean(cos)) < 2.0 * se

    def test_normalization(self):
        ang = solve_angular_pde(1e-12, 1e-9, 1e-7)
        assert ang.total == pytest.approx(1.0, abs=1e-6)
        assert np.all(ang.pdf >= 0.0)


class TestGaussianPieces:
    def test_free_displacement_zero_D(self):
        rng = np.random.default_rng(5)
        assert np.array_equal(sample_free_displacement(0.0, 1e-3, 3, rng),
                              np.zeros(3))

    def test_free_displacement_variance(self):
        rng = np.random.default_rng(6)
        D, dt = 1e-12, 1e-3
        draws = np.array([sample_free_displacement(D, dt, 3, rng)
                          for _ in range(100_000)])
        for axis in range(3):
            assert draws[:, axis].var() == pytest.approx(2 * D * dt, rel=0.03)
        msd = (draws ** 2).sum(axis=1).mean()
        assert msd == pytest.approx(6 * D * dt, rel=0.03)

    def test_theta_z_zero_D(self):
        rng = np.random.default_rng(7)
        assert sample_theta_z(0.0, 1e-9, 1e-3, rng) == (0.0, 0.0)

    def test_theta_z_variance_and_independence(self):
        rng = np.random.default_rng(8)
        D, dt, r = 1e-12, 5e-9, 1e-8  # 2 D dt / r^2 = 0.1
        draws = np.array([sample_theta_z(D, r, dt, rng) for _ in range(100_000)])
        assert draws[:, 0].var() == pytest.approx(2 * D * dt / r ** 2, rel=0.03)
        assert draws[:, 1].var() == pytest.approx(2 * D * dt, rel=0.03)
        rho = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
        assert abs(rho) < 0.01


class TestCache:
    def test_exact_mode_hits_on_repeat(self):
        cache = PropagatorCache(GridParams(n_cells=100, n_substeps=30))
        p1, _ = cache.radial("2d", 1e-12, 1e-9, 1e-11, 1e-4, 2e-9)
        p2, _ = cache.radial("2d", 1e-12, 1e-9, 1e-11, 1e-4, 2e-9)
        assert p1 is p2
        assert cache.hits == 1 and cache.misses == 1

    def test_bucketed_matches_exact_within_tolerance(self):
        grid = GridParams(n_cells=200, n_substeps=60)
        exact = PropagatorCache(grid, r0_bucketing=False)
        buck = PropagatorCache(grid, r0_bucketing=True)
        rng = np.random.default_rng(9)
        for _ in range(40):
            r0 = 10 ** rng.uniform(-8.9, -7.5)
            pe, _ = exact.radial("2d", 1e-12, 1e-9, 1e-11, 1e-4, r0)
            pb, r0_used = buck.radial("2d", 1e-12, 1e-9, 1e-11, 1e-4, r0)
            # the bucket snap distance is at most one local cell width
            assert abs(r0_used - r0) <= np.diff(pb.r_faces).max()
            assert abs(pe.survival[-1] - pb.survival[-1]) < 5e-3

    def test_angular_cache_is_beta_keyed(self):
        cache = PropagatorCache(GridParams(n_cells=100, n_substeps=30))
        a1 = cache.angular(1e-12, 1e-9, 1e-7)
        a2 = cache.angular(2e-12, 1e-9, 5e-8)  # same beta = D dt / r^2
        assert a1 is a2


def test_debug_dump(tmp_path):
    prop = solve_radiation_pde(RadiationProblem("3d", 1e-12, 1e-9, 1e-11,
                                                2e-9, 1e-5))
    path = tmp_path / "prop.tsv"
    prop.dump(path)
    text = path.read_text()
    assert "pdf_final" in text and "survival" in text
