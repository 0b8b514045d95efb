"""The fourteen acceptance criteria, one test each, at their stated tolerances.

Every test records a one-line verdict (see ``conftest.py``) before asserting.
"""
import math

import numpy as np
import pytest

from glue_setup import TREND_DELTAS, TREND_M, trend_increments
from helpers import glue_contract_violations, inequality_trial, poincare_trial
from oracles import (
    LAYERED_FIXTURE_E1, LAYERED_FIXTURE_E2, LAYERED_FIXTURE_OMEGA, MU_HEAVY_DIRECT, MU_UNIT, P4_FIXTURE_BOUND,
    P4_FIXTURE_OMEGA, arithmetic_mean, constant_coefficient_value, harmonic_mean,
)
from stochhom.energy import Field, assemble_energy, energy_gradient
from stochhom.environment import LAYERED, Distribution, EnvironmentSpec, TabulatedSample, estimate_moments
from stochhom.homogenize import estimate_W0, gamma_gap_experiment, growth_bounds_check, m_F, whom_k
from stochhom.inequalities import (
    coercivity_diagnostic, iid_mu, mu_edge_inequality_check, path_edges, path_family, poincare_check,
)
from stochhom.lattice import Region, preset
from stochhom.potentials import PotentialSpec
from stochhom.solver import CG, LBFGS, Dirichlet, Periodic, SolverConfig, minimize, oracle_dense, oracle_grid

LAT = preset("zd-nn")
QUAD = PotentialSpec.quadratic()
DW = PotentialSpec.double_well()
TWO_POINT = Distribution.two_point(1.0, 4.0, 0.5)

# frozen from 3000 pilot trials on disjoint trial indices: max implied C = 0.21923953485202305, plus 10%
POINCARE_C = 0.21923953485202305 * 1.1
# frozen from pilot seeds 100..104: the smallest decrease over m was 0.0135
GLUE_TREND_SLACK = 1e-3
GLUE_TREND_SEEDS = (200, 201, 202)


def test_01_layered_closed_forms(criterion):
    rng = np.random.default_rng(101)
    worst = 0.0
    s = TabulatedSample.layered(LAT, LAYERED_FIXTURE_OMEGA)
    fixture = (whom_k(s, QUAD, [[1, 0]], 2).value, whom_k(s, QUAD, [[0, 1]], 2).value)
    fixture_ok = fixture == (LAYERED_FIXTURE_E1, LAYERED_FIXTURE_E2)
    for k in (2, 4, 16, 64):
        for _ in range(20):
            om = rng.choice([1.0, 4.0], size=k)
            s = TabulatedSample.layered(LAT, om)
            e1 = whom_k(s, QUAD, [[1, 0]], k).value
            e2 = whom_k(s, QUAD, [[0, 1]], k).value
            worst = max(worst, abs(e1 - harmonic_mean(om)), abs(e2 - arithmetic_mean(om)))
    ok = criterion(1, worst <= 1e-8 and fixture_ok,
                   f"max |W - closed form| = {worst:.2e} over 160 solves; fixture = {fixture}")
    assert ok


def test_02_layered_p4_upper_bound(criterion):
    pot = PotentialSpec.p_power(4.0)
    rng = np.random.default_rng(102)
    s = TabulatedSample.layered(LAT, P4_FIXTURE_OMEGA)
    fix_bound = harmonic_mean(P4_FIXTURE_OMEGA, 4.0)
    fix_val = whom_k(s, pot, [[1, 0]], 2).value
    worst = fix_val - P4_FIXTURE_BOUND
    for k in (2, 4, 8):
        for _ in range(20):
            om = rng.uniform(0.5, 8.0, size=k)
            ell = rng.uniform(0.5, 2.0)
            v = whom_k(TabulatedSample.layered(LAT, om), pot, [[ell, 0]], k).value
            worst = max(worst, v - ell**4 * harmonic_mean(om, 4.0))
    ok = criterion(2, worst <= 1e-6 and fix_bound == pytest.approx(P4_FIXTURE_BOUND, rel=1e-15),
                   f"max (W - bound) = {worst:.2e} over 61 solves; fixture W = {fix_val!r}, bound 64/27")
    assert ok


def test_03_constant_coefficients(criterion):
    rng = np.random.default_rng(103)
    families = [QUAD, PotentialSpec.p_power(1.5), PotentialSpec.p_power(3.0), PotentialSpec.p_power(4.0)]
    worst = 0.0
    count = 0
    for name in ("zd-nn", "zd-range2"):
        lat = preset(name)
        for pot in families:
            for _ in range(10):
                lam = rng.uniform(0.5, 3.0)
                F = rng.normal(size=(1, 2))
                expect = constant_coefficient_value(lat.directions, lam, F, pot.eval)
                for k in (1, 2, 4):
                    got = whom_k(TabulatedSample.constant(lat, lam), pot, F, k).value
                    worst = max(worst, abs(got - expect))
                    count += 1
    ok = criterion(3, worst <= 1e-10, f"max |whom_k - sum_b lam |F e_b|^p| = {worst:.2e} over {count} solves")
    assert ok


def test_04_sandwich(criterion):
    rng = np.random.default_rng(104)
    worst = -math.inf
    n = 0
    for t in range(120):
        # the last 20 use k = 16, the smallest size whose Dirichlet problem has free nodes
        k = int(rng.choice([2, 4, 8])) if t < 100 else 16
        law = [TWO_POINT, Distribution.lognormal(0, 1), Distribution.uniform(0.2, 5)][t % 3]
        s = EnvironmentSpec(law, seed=int(rng.integers(2**31))).sample(LAT)
        F = rng.normal(size=(1, 2))
        w = whom_k(s, QUAD, F, k).value
        m = m_F(s, QUAD, F, Region.cube(k, 2)).value
        worst = max(worst, w - m)
        n += 1
    dw_ok = True
    for t in range(10):
        env = EnvironmentSpec(Distribution.uniform(0.5, 2.0), seed=900 + t)
        est = estimate_W0(env, DW, rng.normal(size=(1, 2)) * 0.6, [4, 16], samples_per_k=2, lattice=LAT,
                          config=SolverConfig(n_starts=2, seed=t))
        dw_ok &= est.sandwich_ok
    ok = criterion(4, worst <= 2e-8 and dw_ok,
                   f"max (whom_k - m_F/k^d) = {worst:.2e} over {n} quadratic instances; double-well sandwich ok = {dw_ok}")
    assert ok


def test_05_subadditive_doubling(criterion):
    rng = np.random.default_rng(105)
    worst = -math.inf
    for t in range(60):
        k = int(rng.choice([2, 4])) if t < 50 else 16
        law = [TWO_POINT, Distribution.lognormal(0, 1)][t % 2]
        s = EnvironmentSpec(law, seed=int(rng.integers(2**31))).sample(LAT)
        F = rng.normal(size=(1, 2))
        big = Region.cube(2 * k, 2)
        whole = m_F(s, QUAD, F, big).energy
        parts = math.fsum(m_F(s, QUAD, F, q).energy for q in big.dyadic_split())
        worst = max(worst, whole - parts)
    ok = criterion(5, worst <= 2**3 * 1e-8, f"max (m_F(2kY) - sum of 4 translates) = {worst:.2e} over 60 instances")
    assert ok


def test_06_gradient_finite_differences(criterion):
    rng = np.random.default_rng(106)
    cases = [(QUAD, "zd-nn"), (PotentialSpec.p_power(3.0), "kagome"), (DW, "zd-range2"),
             (PotentialSpec.vector_well(), "zd-diag")]
    worst = 0.0
    h = 1e-5
    for t in range(100):
        pot, name = cases[t % 4]
        lat = preset(name)
        s = EnvironmentSpec(Distribution.lognormal(0, 0.5), seed=t).sample(lat)
        fld = Field.periodic(lat, 4, rng.normal(size=(lat.n, 2)))
        fld.values = rng.normal(size=fld.values.shape)
        g = energy_gradient(s, pot, fld)
        fd = np.zeros_like(fld.values)
        flat = fld.values.reshape(-1)
        for i in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[i] += h
            dn[i] -= h
            fd.reshape(-1)[i] = (assemble_energy(s, pot, fld.with_values(up.reshape(fld.values.shape)))
                                 - assemble_energy(s, pot, fld.with_values(dn.reshape(fld.values.shape)))) / (2 * h)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(1.0, np.linalg.norm(fd))))
    ok = criterion(6, worst <= 1e-5, f"max relative gradient error = {worst:.2e} over 100 trials, 4 families")
    assert ok


def test_07_oracle_equivalence(criterion):
    rng = np.random.default_rng(107)
    gap = 0.0
    largest = 0
    for t in range(50):
        law = [TWO_POINT, Distribution.lognormal(0, 1)][t % 2]
        s = EnvironmentSpec(law, seed=t).sample(preset(["zd-nn", "kagome", "zd-range2"][t % 3]))
        F = rng.normal(size=(1, 2))
        con = Periodic(int(rng.integers(2, 33)), F) if t % 2 else Dirichlet(F, Region.cube(int(rng.integers(13, 40)), 2))
        a = minimize(s, QUAD, con, SolverConfig(method=CG))
        if a.n_unknowns > 4096:
            con = Periodic(16, F)
            a = minimize(s, QUAD, con, SolverConfig(method=CG))
        b = oracle_dense(s, QUAD, con)
        gap = max(gap, abs(a.value - b.value) / (1 + abs(b.value)))
        largest = max(largest, a.n_unknowns)
    # engine defaults on both sides: 21-point grid, 8 descent starts; the descent value must lie within the
    # grid's own discretisation error, i.e. not above the best grid node
    grid_ok = True
    below = 0
    worst_grid = 0.0
    for t in range(20):
        s = EnvironmentSpec(Distribution.uniform(0.5, 2.0), seed=300 + t).sample(LAT)
        # 3 unknowns once node 0 is pinned
        con = Periodic(2, rng.normal(size=(1, 2)) * 0.7)
        g = oracle_grid(s, DW, con, SolverConfig(seed=t))
        d = minimize(s, DW, con, SolverConfig(method=LBFGS, seed=t))
        grid_ok &= d.value <= g.extra["grid_value"] + 1e-12
        below += d.value <= g.value + 1e-9
        worst_grid = max(worst_grid, d.value - g.value)
    ok = criterion(7, gap <= 1e-7 and grid_ok,
                   f"CG vs dense gap {gap:.2e} (largest {largest} unknowns); descent <= best grid node in all 20: "
                   f"{grid_ok}; descent <= polished grid in {below}/20 (largest excess {worst_grid:.3f})")
    assert ok


def test_08_exact_inequalities(criterion):
    bad_coer = bad_edge = 0
    for t in range(1000):
        s, fld, A, p, beta = inequality_trial(t)
        bad_coer += not coercivity_diagnostic(s, fld, A, p, beta).ok
        bad_edge += not mu_edge_inequality_check(s, fld, A, p).ok
    ok = criterion(8, bad_coer == 0 and bad_edge == 0,
                   f"violations: coercivity {bad_coer}/1000, path-weight edge inequality {bad_edge}/1000")
    assert ok


def test_09_path_families(criterion):
    ok_struct = True
    longest = 0
    for d in (2, 3):
        for i in range(d):
            seen = set()
            for path in path_family(d, i):
                es = {(e[0], e[1]) for e in path_edges(path)}
                ok_struct &= len(es) == len(path) - 1 and not (es & seen)
                seen |= es
                longest = max(longest, len(es))
    mu1 = iid_mu(TabulatedSample.constant(LAT, 1.0), (0, 0), 0, 2).mu
    tab = np.ones((4, 4, 2))
    tab[0, 0, 0] = 16.0
    mu16 = iid_mu(TabulatedSample(LAT, tab), (0, 0), 0, 2).mu
    ok = criterion(9, ok_struct and longest <= 9 and mu1 == MU_UNIT and mu16 == MU_HEAVY_DIRECT,
                   f"disjoint = {ok_struct}, longest path {longest}, mu(omega=1) = {mu1}, mu(fixture) = {mu16}")
    assert ok


def test_10_degeneracy_trend(criterion):
    v4, v32 = [], []
    for seed in range(50):
        s = EnvironmentSpec(Distribution.pareto_inverse(1.0), LAYERED, seed=5000 + seed).sample(LAT)
        v4.append(whom_k(s, QUAD, [[1, 0]], 4).value)
        v32.append(whom_k(s, QUAD, [[1, 0]], 32).value)
    v4, v32 = np.array(v4), np.array(v32)
    frac = float(np.mean(v32 < v4))
    ratio = float(np.median(v32) / np.median(v4))
    ok = criterion(10, frac >= 0.9 and ratio < 0.5,
                   f"k=32 below k=4 in {frac:.0%} of 50 seeds (need >= 90%); median ratio {ratio:.3f} (need < 0.5)")
    assert ok


def test_11_gamma_gap_trend(criterion):
    env = EnvironmentSpec(Distribution.lognormal(0.0, 0.5), seed=2024)
    tab = gamma_gap_experiment(env, QUAD, None, 1.0, Region.cube(1, 2), [8, 32], lattice=LAT, n_samples=50)
    g8, g32 = tab.gaps(8), tab.gaps(32)
    frac = float(np.mean(g32 < g8))
    ok = criterion(11, frac >= 0.9, f"gap at eps=1/32 below eps=1/8 in {frac:.0%} of 50 seeds; "
                                    f"median gaps {np.median(g8):.3e} -> {np.median(g32):.3e}")
    assert ok


def test_12_gluing(criterion):
    bad = [(t, v) for t in range(200) for v in [glue_contract_violations(t)] if v]
    trend_bad = []
    incs = []
    for seed in GLUE_TREND_SEEDS:
        by_m, by_delta = trend_increments(seed)
        incs.append(by_m)
        if any(b > a + GLUE_TREND_SLACK for a, b in zip(by_m, by_m[1:])):
            trend_bad.append(("m", seed, by_m))
        if any(b > a + GLUE_TREND_SLACK for a, b in zip(by_delta, by_delta[1:])):
            trend_bad.append(("delta", seed, by_delta))
    ok = criterion(12, not bad and not trend_bad,
                   f"contract failures {len(bad)}/200; increments over m={TREND_M}: "
                   f"{[[round(x, 4) for x in r] for r in incs]}; trend failures (m and delta={TREND_DELTAS}) "
                   f"{len(trend_bad)} with slack {GLUE_TREND_SLACK}")
    assert ok, (bad[:3], trend_bad)


def test_13_poincare(criterion):
    worst = 0.0
    for t in range(1000):
        s, fld, Q, (p, q, a, b) = poincare_trial(t)
        worst = max(worst, poincare_check(s, fld, Q, p, q, a, b).implied_C)
    exact = True
    for t in range(0, 1000, 50):
        s, fld, Q, (p, q, a, b) = poincare_trial(t)
        base = poincare_check(s, fld, Q, p, q, a, b).implied_C
        for c in (2.0**-7, 0.5, 8.0, 2.0**20):
            exact &= poincare_check(s.scaled(c), fld, Q, p, q, a, b).implied_C == base
    ok = criterion(13, worst <= POINCARE_C and exact,
                   f"max implied C = {worst:.4f} <= {POINCARE_C:.4f} over 1000 trials; weight scaling exact: {exact}")
    assert ok


def test_14_growth_envelope(criterion):
    rng = np.random.default_rng(114)
    laws = [TWO_POINT, Distribution.lognormal(0, 0.5), Distribution.uniform(0.5, 3.0)]
    pots = [QUAD, PotentialSpec.p_power(3.0), DW]
    worst = 0.0
    n = 0
    all_ok = True
    for li, law in enumerate(laws):
        for pot in pots:
            env = EnvironmentSpec(law, seed=40 + li)
            F = rng.normal(size=(1, 2))
            est = estimate_W0(env, pot, F, [2, 4], samples_per_k=6, lattice=LAT,
                              config=SolverConfig(n_starts=2))
            mom = estimate_moments(env, LAT, 1, 1, pot.p, n_samples=20_000)
            cert = growth_bounds_check(est, mom, pot.p, pot.growth_c1, raise_on_fail=False)
            all_ok &= cert.ok
            worst = max(worst, cert.estimate / cert.upper)
            n += 1
    ok = criterion(14, all_ok, f"{n} estimates inside (0, envelope]; largest estimate/envelope {worst:.3f}")
    assert ok
