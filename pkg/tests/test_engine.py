import math

import numpy as np
import pytest

import engine_checks
import prop_checks
from strandsim import geometry as geo
from strandsim.engine import (EngineConfig, Molecule, Simulation,
                              choose_time_step, pair_decomposition,
                              propagate_pair_3d, propagate_pair_on_curve)
from strandsim.model import (BindToCurve, Bimolecular1D, ReactionNetwork,
                             Species, UnbindFromCurve, Unimolecular)
from strandsim.propagators import GridParams, PropagatorCache
from strandsim.validation import (BdOracleConfig, bd_oracle,
                                  chi2_histogram_pvalue)

FAST_GRID = engine_checks.FAST_GRID


@pytest.mark.parametrize("name,fn", engine_checks.ALL_CHECKS,
                         ids=[n for n, _ in engine_checks.ALL_CHECKS])
def test_property_check(name, fn):
    ok, detail = fn()
    assert ok, f"{name}: {detail}"


def test_determinism_and_audit(tmp_path):
    ok, detail = engine_checks.check_determinism(str(tmp_path))
    assert ok, detail
    ok, detail = engine_checks.check_conservation_audit(str(tmp_path))
    assert ok, detail


class TestChooseTimeStep:
    CFG = EngineConfig(K=25.0, dt_min=1e-8, dt_split=1e-3)

    def test_far_from_everything(self):
        assert choose_time_step(1e-12, math.inf, 4e-4, self.CFG) == 4e-4

    def test_protective_radius_formula(self):
        R = 1e-7
        dt = choose_time_step(1e-12, R, 1.0, self.CFG)
        assert dt == pytest.approx(R ** 2 / 1.5e-10, rel=1e-12)

    def test_zero_clearance_floored(self):
        assert choose_time_step(1e-12, 0.0, 1e-3, self.CFG) == 1e-8


class TestDecomposition:
    SP = {"A": Species("A", D_free=1e-12, radius=1e-9)}
    CFG = EngineConfig(dt_split=1e-3)

    def test_two_molecules_form_pair(self):
        mols = [Molecule(0, "A", position=np.zeros(3)),
                Molecule(1, "A", position=np.array([1e-7, 0, 0]))]
        g = pair_decomposition(mols, [], self.SP, self.CFG)
        assert len(g["pairs"]) == 1 and not g["singles"]

    def test_collinear_tie_pairs_lower_id(self):
        mols = [Molecule(i, "A", position=np.array([i * 1e-7, 0.0, 0.0]))
                for i in range(3)]
        g = pair_decomposition(mols, [], self.SP, self.CFG)
        assert len(g["pairs"]) == 1
        ids = sorted(m.id for m in g["pairs"][0])
        assert ids == [0, 1]
        assert [m.id for m in g["singles"]] == [2]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(12)
        mols = [Molecule(i, "A", position=rng.uniform(-1e-6, 1e-6, 3))
                for i in range(100)]
        g = pair_decomposition(mols, [], self.SP, self.CFG)
        pos = np.array([m.position for m in mols])
        d = np.sqrt(((pos[:, None] - pos[None]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        nn = d.argmin(1)
        expect_pairs = {(i, int(nn[i])) for i in range(100)
                        if int(nn[i]) > i and nn[int(nn[i])] == i}
        got_pairs = {(p[0].id, p[1].id) for p in g["pairs"]}
        assert got_pairs == expect_pairs
        assert len(g["singles"]) == 100 - 2 * len(expect_pairs)

    def test_near_curve_assignment(self):
        line = geo.line_curve(np.array([-1e-5, 0, 0]), np.array([1e-5, 0, 0]),
                              1e-9, 1, 0)
        # close to the line and nearer to it than to the other molecule
        mols = [Molecule(0, "A", position=np.array([0.0, 3e-8, 0.0])),
                Molecule(1, "A", position=np.array([0.0, 8e-7, 0.0]))]
        g = pair_decomposition(mols, [line], self.SP, self.CFG)
        assert [m.id for m, _ in g["near_curve"]] == [0]
        assert [m.id for m in g["singles"]] == [1]

    def test_on_curve_pairing_same_segment(self):
        line = geo.line_curve(np.array([-1e-5, 0, 0]), np.array([1e-5, 0, 0]),
                              1e-9, 2, 0)
        l = line.total_length
        mols = [Molecule(0, "B", bound=geo.CurveLocation(0, 0.24 * l)),
                Molecule(1, "B", bound=geo.CurveLocation(0, 0.26 * l)),
                Molecule(2, "B", bound=geo.CurveLocation(0, 0.48 * l)),
                Molecule(3, "B", bound=geo.CurveLocation(0, 0.52 * l))]
        sp = {"B": Species("B", D_bound=1e-14, radius=1e-9)}
        g = pair_decomposition(mols, [line], sp, self.CFG)
        got = {tuple(sorted(m.id for m in p)) for p in g["on_curve_pairs"]}
        # (2,3) straddles the segment boundary at l/2, so only (0,1) pairs
        assert got == {(0, 1)}
        assert sorted(m.id for m in g["on_curve_singles"]) == [2, 3]


class TestPair3D:
    def test_static_partner_stays_and_msd(self):
        cache = PropagatorCache(FAST_GRID, r0_bucketing=True)
        rng = np.random.default_rng(13)
        D1, dt = 1e-12, 1e-5
        x2 = np.array([5e-8, 0, 0])
        disp2 = []
        msd = []
        for _ in range(10_000):
            out = propagate_pair_3d(np.zeros(3), x2, D1, 0.0, 2e-9, 0.0, dt,
                                    rng, cache)
            assert out[0] == "moved"
            msd.append(((out[1]) ** 2).sum())
            disp2.append(np.abs(out[2] - x2).max())
        assert max(disp2) == 0.0
        assert np.mean(msd) == pytest.approx(6 * D1 * dt, rel=0.03)

    def test_reacted_fraction_matches_oracle(self):
        # frozen oracle: sigma=2e-9, D=2e-12, k_r=1e-11, r0=4e-9, dt=1e-5
        ref = prop_checks.PAIR3D_ORACLE
        cache = PropagatorCache(FAST_GRID, r0_bucketing=True)
        rng = np.random.default_rng(14)
        x1 = np.zeros(3)
        x2 = np.array([4e-9, 0, 0])
        n = 20_000
        reacted = 0
        for _ in range(n):
            out = propagate_pair_3d(x1, x2, 1e-12, 1e-12, 2e-9, 1e-11, 1e-5,
                                    rng, cache)
            reacted += out[0] == "reacted"
            if out[0] == "reacted":
                assert 0.0 < out[1] <= 1e-5
        frac = reacted / n
        expect = 1.0 - ref["survival"]
        joint = math.hypot(ref["se"], math.sqrt(frac * (1 - frac) / n))
        assert abs(frac - expect) < 2 * joint, (frac, expect, joint)

    def test_contact_start_reacts_almost_surely(self):
        cache = PropagatorCache(FAST_GRID, r0_bucketing=True)
        rng = np.random.default_rng(15)
        n, reacted = 2000, 0
        for _ in range(n):
            out = propagate_pair_3d(np.zeros(3), np.array([2e-9, 0, 0]),
                                    1e-12, 1e-12, 2e-9, math.inf, 1e-5,
                                    rng, cache)
            reacted += out[0] == "reacted"
        assert reacted / n > 0.99

    def test_product_alights_between_parents(self):
        cache = PropagatorCache(FAST_GRID, r0_bucketing=True)
        rng = np.random.default_rng(16)
        while True:
            out = propagate_pair_3d(np.zeros(3), np.array([3e-9, 0, 0]),
                                    1e-12, 3e-12, 2e-9, math.inf, 1e-5,
                                    rng, cache)
            if out[0] == "reacted":
                break
        # the product lies at sigma * D1/(D1+D2) = 0.5e-9 from molecule 1
        # along the contact direction; just check it is finite and 3D
        assert out[2].shape == (3,)
        assert np.all(np.isfinite(out[2]))


def _near_curve_harness(k_r, dt_split=1e-3, grid=None):
    mesh = geo.icosphere(1e-4, 1)
    line = geo.line_curve(np.array([-5e-5, 0, 0]), np.array([5e-5, 0, 0]),
                          1e-9, 1, 0)
    rules = [BindToCurve("A", "Acyl", k_r)] if k_r > 0.0 else []
    species = {"A": Species("A", D_free=1e-12, radius=1e-9),
               "Acyl": Species("Acyl", D_bound=0.0, radius=1e-9)}
    cfg = EngineConfig(dt_split=dt_split, grid=grid or FAST_GRID,
                       r0_bucketing=True)
    m = Molecule(0, "A", position=np.array([0.0, 2e-9, 0.0]))
    sim = Simulation(mesh, [line], species, ReactionNetwork(rules), [m], cfg)
    return sim, m, line


class TestNearCurve:
    def test_reflecting_radial_distribution(self):
        dt = 1e-6
        sim, m, line = _near_curve_harness(0.0, dt_split=dt)
        sp = sim.species["A"]
        rng_start = np.array([0.0, 2e-9, 0.0])
        radii = []
        for _ in range(20_000):
            m.position = rng_start.copy()
            m.bound = None
            m.species = "A"
            m.removed = False
            used = sim._near_curve_step(m, sp, line, 0, dt, 0.0)
            assert used == pytest.approx(dt)
            radii.append(math.hypot(m.position[1], m.position[2]))
        res = bd_oracle(BdOracleConfig("2d", 1e-12, 1e-9, 0.0, 2e-9, dt,
                                       dt_bd=1e-8, trials=20_000, seed=17))
        p = chi2_histogram_pvalue(np.array(radii), res.final_radii, 20)
        assert p > 0.01, p

    def test_rebinding_consistency_from_unbind_distance(self):
        # started just off contact (the unbinding placement), the reflecting
        # distribution still matches the oracle from the same start
        dt = 1e-7
        sim, m, line = _near_curve_harness(0.0, dt_split=dt)
        sp = sim.species["A"]
        eps = sim.config.grid.h0_frac * 1e-9
        start = np.array([0.0, 1e-9 + eps, 0.0])
        radii = []
        for _ in range(20_000):
            m.position = start.copy()
            sim._near_curve_step(m, sp, line, 0, dt, 0.0)
            radii.append(math.hypot(m.position[1], m.position[2]))
        res = bd_oracle(BdOracleConfig("2d", 1e-12, 1e-9, 0.0, 1e-9 + eps, dt,
                                       dt_bd=1e-9, trials=20_000, seed=18))
        p = chi2_histogram_pvalue(np.array(radii), res.final_radii, 20)
        assert p > 0.01, p

    def test_contact_binds_almost_surely_at_huge_rate(self):
        dt = 1e-5
        sim, m, line = _near_curve_harness(math.inf, dt_split=dt)
        sp = sim.species["A"]
        bound = 0
        n = 2000
        for _ in range(n):
            m.position = np.array([0.0, 1.0005e-9, 0.0])
            m.bound = None
            m.species = "A"
            m.removed = False
            sim._near_curve_step(m, sp, line, 0, dt, 0.0)
            bound += m.bound is not None
        assert bound / n > 0.99

    def test_binding_arclength_near_axial_position(self):
        sim, m, line = _near_curve_harness(math.inf, dt_split=1e-6)
        sp = sim.species["A"]
        hits = []
        for _ in range(500):
            m.position = np.array([1e-6, 1.1e-9, 0.0])
            m.bound = None
            m.species = "A"
            m.removed = False
            sim._near_curve_step(m, sp, line, 0, 1e-6, 0.0)
            if m.bound is not None:
                hits.append(m.bound.s)
        hits = np.array(hits)
        # axial spread over tau <= 1e-6 is sqrt(2 D tau) ~ 1.4e-9 around
        # the starting axial coordinate s = 5e-5 + 1e-6
        assert len(hits) > 450
        assert np.abs(hits - 5.1e-5).max() < 2e-8


class TestOnCurve:
    def test_deterministic_transport_step_count(self):
        from strandsim.model import TransportSpec
        mesh = geo.icosphere(1e-4, 1)
        line = geo.line_curve(np.array([-1e-5, 0, 0]), np.array([1e-5, 0, 0]),
                              1e-9, 1, 0)
        delta = 1e-9
        sp = {"T": Species("T", D_bound=0.0, radius=1e-12,
                           transport=TransportSpec(target=np.zeros(3),
                                                   step=delta))}
        cfg = EngineConfig(dt_split=1e-3, dt_on_curve=1e-4, grid=FAST_GRID)
        m = Molecule(0, "T", bound=geo.CurveLocation(0, 2e-6))
        sim = Simulation(mesh, [line], sp, ReactionNetwork(), [m], cfg)
        sim.advance_window()
        # 10 steps of delta toward the curve point nearest the origin (s = l/2)
        assert m.bound.s == pytest.approx(2e-6 + 10 * delta, rel=1e-9)

    def test_transport_stops_at_target(self):
        from strandsim.model import TransportSpec
        mesh = geo.icosphere(1e-4, 1)
        line = geo.line_curve(np.array([-1e-5, 0, 0]), np.array([1e-5, 0, 0]),
                              1e-9, 1, 0)
        sp = {"T": Species("T", D_bound=0.0, radius=1e-12,
                           transport=TransportSpec(target=np.zeros(3),
                                                   step=1e-5))}
        cfg = EngineConfig(dt_split=1e-3, dt_on_curve=1e-3, grid=FAST_GRID)
        m = Molecule(0, "T", bound=geo.CurveLocation(0, 2e-6))
        sim = Simulation(mesh, [line], sp, ReactionNetwork(), [m], cfg)
        sim.advance_window()
        assert m.bound.s == pytest.approx(1e-5, rel=1e-12)  # s of the origin


class TestPairOnCurve:
    def test_reflecting_separation_vs_oracle(self):
        from scipy import stats as sps
        cache = PropagatorCache(FAST_GRID, r0_bucketing=True)
        rng = np.random.default_rng(19)
        D, sigma, y0, dt = 1e-14, 2e-9, 6e-9, 1e-4
        seps = []
        for _ in range(20_000):
            out = propagate_pair_on_curve(0.0, y0, D, D, sigma, 0.0, dt, rng,
                                          cache)
            assert out[0] == "moved"
            seps.append(abs(out[2] - out[1]))
        res = bd_oracle(BdOracleConfig("1d", 2 * D, sigma, 0.0, y0, dt,
                                       dt_bd=2e-7, trials=20_000, seed=20))
        p = sps.ks_2samp(np.array(seps), res.final_radii).pvalue
        assert p > 0.01, p

    def test_contact_start_reacts_immediately(self):
        cache = PropagatorCache(FAST_GRID, r0_bucketing=True)
        rng = np.random.default_rng(21)
        n, early = 2000, 0
        first_cell = 1e-4 / FAST_GRID.n_substeps
        for _ in range(n):
            out = propagate_pair_on_curve(0.0, 2e-9, 1e-14, 1e-14, 2e-9,
                                          math.inf, 1e-4, rng, cache)
            if out[0] == "reacted" and out[1] <= first_cell:
                early += 1
        assert early / n > 0.99

    def test_reversible_pair_vs_line_oracle(self):
        """Engine C population vs a fine-step walk at the 1D reaction rates
        (k_r = 1e-6, dissociation 20, D = 1e-14 each)."""
        mesh = geo.icosphere(1e-3, 1)
        line = geo.line_curve(np.array([-0.5e-3, 0, 0]),
                              np.array([0.5e-3, 0, 0]), 1e-9, 1, 0)
        species = {"Ac": Species("Ac", D_bound=1e-14, radius=1e-9),
                   "Bc": Species("Bc", D_bound=1e-14, radius=1e-9),
                   "Cc": Species("Cc", D_bound=1e-14, radius=2e-9)}
        net = ReactionNetwork([Bimolecular1D("Ac", "Bc", "Cc", 1e-6),
                               Unimolecular("Cc", ("Ac", "Bc"), 20.0)])
        cfg = EngineConfig(dt_split=2.5e-3, grid=FAST_GRID, r0_bucketing=True)
        t_f, y0 = 0.05, 1e-8
        n_tr = 400
        mid = line.total_length / 2.0
        c_at_end = 0
        for k in range(n_tr):
            rng = np.random.default_rng(np.random.SeedSequence(100, spawn_key=(k,)))
            mols = [Molecule(0, "Ac", bound=geo.CurveLocation(0, mid)),
                    Molecule(1, "Bc", bound=geo.CurveLocation(0, mid + y0))]
            sim = Simulation(mesh, [line], species, net, mols, cfg, rng=rng)
            sim.run(t_f)
            c_at_end += sim.counts().get("Cc", 0)
        frac_engine = c_at_end / n_tr
        frac_oracle, se_oracle = _line_pair_oracle(y0, t_f, trials=4000, seed=23)
        se_engine = math.sqrt(frac_engine * (1 - frac_engine) / n_tr)
        joint = math.hypot(se_engine, se_oracle)
        assert abs(frac_engine - frac_oracle) < 2 * joint, \
            (frac_engine, frac_oracle, joint)


def _line_pair_oracle(y0, t_f, trials, seed, D=1e-14, sigma=2e-9, k_r=1e-6,
                      k_d=20.0, dt=2e-7):
    """Vectorized fine-step walk of a reversible 1D pair; returns the final
    bound fraction and its standard error."""
    rng = np.random.default_rng(seed)
    D_rel = 2 * D
    p1 = k_r * math.sqrt(math.pi * dt / D_rel)
    p_acc = p1 * (1.0 - 0.6 * p1)
    n_steps = int(round(t_f / dt))
    y = np.full(trials, y0)
    bound = np.zeros(trials, dtype=bool)
    std = math.sqrt(2 * D_rel * dt)
    for _ in range(n_steps):
        free = ~bound
        y[free] += rng.normal(0.0, std, free.sum())
        contact = free & (y < sigma)
        if contact.any():
            accept = rng.uniform(size=contact.sum()) < p_acc
            idx = np.flatnonzero(contact)
            bound[idx[accept]] = True
            refl = idx[~accept]
            y[refl] = 2 * sigma - y[refl]
        if bound.any():
            unbind = bound & (rng.uniform(size=trials) < 1 - math.exp(-k_d * dt))
            y[unbind] = sigma
            bound[unbind] = False
    frac = bound.mean()
    return frac, math.sqrt(frac * (1 - frac) / trials)


class TestDissociation:
    def test_zero_rate_never_fires(self):
        mesh = geo.icosphere(1e-4, 1)
        line = geo.line_curve(np.array([-1e-5, 0, 0]), np.array([1e-5, 0, 0]),
                              1e-9, 1, 0)
        sp = {"B": Species("B", D_bound=1e-14, radius=1e-12),
              "A": Species("A", D_free=0.0, radius=1e-12)}
        net = ReactionNetwork([UnbindFromCurve("B", "A", 0.0)])
        mols = [Molecule(i, "B", bound=geo.CurveLocation(0, 1e-6 + i * 1e-7))
                for i in range(50)]
        cfg = EngineConfig(dt_split=1e-3, grid=FAST_GRID)
        sim = Simulation(mesh, [line], sp, net, mols, cfg)
        for _ in range(50):
            sim.advance_window()
        assert not sim.events

    def test_mean_bound_lifetime(self):
        # 1e4 unbinding events at k_d = 50: mean lifetime within 2% of 0.02 s
        mesh = geo.icosphere(1.0, 1)
        curves = [geo.line_curve(np.array([-0.4, 2e-3 * k, 0]),
                                 np.array([0.4, 2e-3 * k, 0]), 1e-9, 1, k)
                  for k in range(100)]
        sp = {"B": Species("B", D_bound=0.0, radius=1e-12),
              "Gone": Species("Gone", D_free=0.0, radius=1e-12)}
        net = ReactionNetwork([UnbindFromCurve("B", "Gone", 50.0)])
        mols = []
        for k in range(100):
            for j in range(100):
                mols.append(Molecule(len(mols), "B",
                                     bound=geo.CurveLocation(k, 0.05 + j * 1e-3)))
        cfg = EngineConfig(dt_split=5e-3, grid=FAST_GRID)
        sim = Simulation(mesh, curves, sp, net, mols, cfg,
                         rng=np.random.default_rng(24))
        while len(sim.events) < 10_000 and sim.t < 0.5:
            sim.advance_window()
        times = np.array([e[0] for e in sim.events])
        assert len(times) >= 10_000
        # lifetimes of the observed events, corrected for censoring by
        # conditioning on the observation horizon
        horizon = sim.t
        expect = 0.02 - horizon * math.exp(-50 * horizon) / (1 - math.exp(-50 * horizon))
        assert times.mean() == pytest.approx(expect, rel=0.02)


class TestStepWindow:
    def test_empty_system_noop(self):
        mesh = geo.icosphere(1e-6, 2)
        cfg = EngineConfig(dt_split=1e-3, grid=FAST_GRID)
        sim = Simulation(mesh, [], {"A": Species("A", D_free=1e-12)},
                         ReactionNetwork(), [], cfg)
        sim.advance_window()
        assert sim.t == pytest.approx(1e-3)
        assert not sim.events
