import math

import numpy as np
import pytest

from oracles import LAYERED_FIXTURE_E1, LAYERED_FIXTURE_E2, LAYERED_FIXTURE_OMEGA, TWO_POINT_MEAN
from stochhom.energy import Field, affine, assemble_energy
from stochhom.environment import Distribution, EnvironmentSpec, TabulatedSample, estimate_moments
from stochhom.errors import BoundViolated, ConfigInvalid, NotQuadratic
from stochhom.homogenize import (
    affine_value, corrector_from_dirichlet, estimate_W0, extract_tensor, gamma_gap_experiment, growth_bounds_check,
    m_F, tensor_reference_min, two_scale_field, whom_k,
)
from stochhom.lattice import Region, preset
from stochhom.potentials import PotentialSpec

LAT = preset("zd-nn")
QUAD = PotentialSpec.quadratic()


def test_m_F_without_free_nodes_is_affine_energy():
    s = EnvironmentSpec(Distribution.two_point(1, 4), seed=1).sample(LAT)
    res = m_F(s, QUAD, [[1.0, 0.5]], Region.cube(4, 2))
    assert res.solve.n_unknowns == 0
    fld = Field.for_region(LAT, 1, Region.cube(4, 2), affine([[1.0, 0.5]]))
    assert res.energy == assemble_energy(s, QUAD, fld, Region.cube(4, 2))


def test_dirichlet_corrector_extends_periodically():
    s = EnvironmentSpec(Distribution.lognormal(0, 1), seed=2).sample(LAT)
    res = m_F(s, QUAD, [[1.0, -0.3]], Region.cube(16, 2))
    assert res.solve.n_unknowns > 0
    per = corrector_from_dirichlet(res, 16)
    assert assemble_energy(s, QUAD, per) == pytest.approx(res.energy, rel=1e-12)
    assert whom_k(s, QUAD, [[1.0, -0.3]], 16).value <= res.value + 1e-10


def test_two_scale_field_values():
    tab = TabulatedSample.layered(LAT, LAYERED_FIXTURE_OMEGA)
    res = whom_k(tab, QUAD, [[1.0, 0.0]], 2)
    u = two_scale_field(res.solve.field, 16, Region.cube(1, 2))
    pos = u.positions()[0]
    phi = res.solve.field.values[0]
    cells = np.mod(u.cells(), 2)
    expect = pos[..., 0] + phi[cells[..., 0], cells[..., 1], 0] / 16
    assert np.allclose(u.values[0, ..., 0], expect, atol=1e-15)
    with pytest.raises(ConfigInvalid):
        two_scale_field(u, 16, Region.cube(1, 2))


def test_estimate_W0_constant_environment():
    env = EnvironmentSpec(Distribution.constant(2.0))
    est = estimate_W0(env, QUAD, [[1.0, 1.0]], [2, 4], samples_per_k=2, lattice=LAT)
    assert est.estimate == pytest.approx(4.0, abs=1e-12)
    assert est.sandwich_ok and est.uncertainty == pytest.approx(0.0, abs=1e-12)
    assert est.to_csv().count("\n") == 5
    mom = estimate_moments(env, LAT, 1, 1, 2)
    cert = growth_bounds_check(est, mom, 2, QUAD.growth_c1)
    assert cert.ok and cert.upper == pytest.approx(2 * QUAD.growth_c1 * (1 + 2 * 3))
    with pytest.raises(ConfigInvalid):
        estimate_W0(env, QUAD, [[1.0, 1.0]], [4, 2], lattice=LAT)


def test_growth_bounds_violation():
    env = EnvironmentSpec(Distribution.two_point(1, 4), seed=3)
    est = estimate_W0(env, QUAD, [[1.0, 0.0]], [2], samples_per_k=4, lattice=LAT)
    mom = estimate_moments(env, LAT, 1, 1, 2)
    assert mom.mean_lambda(0) == TWO_POINT_MEAN
    est.estimate = 1e6
    with pytest.raises(BoundViolated):
        growth_bounds_check(est, mom, 2, 1.0)


def test_double_well_sandwich_uses_dirichlet_start():
    env = EnvironmentSpec(Distribution.uniform(0.5, 2), seed=4)
    est = estimate_W0(env, PotentialSpec.double_well(), [[0.3, 0.2]], [2, 4], samples_per_k=3, lattice=LAT)
    assert est.sandwich_ok


def test_tensor_of_layered_fixture():
    tab = TabulatedSample.layered(LAT, LAYERED_FIXTURE_OMEGA)
    T = extract_tensor([tab], QUAD, 2)
    assert np.allclose(T.L, np.diag([2 * LAYERED_FIXTURE_E1, 2 * LAYERED_FIXTURE_E2]), atol=1e-10)
    assert T.energy([1.0, 0.0]) == pytest.approx(LAYERED_FIXTURE_E1)
    with pytest.raises(NotQuadratic):
        extract_tensor([tab], PotentialSpec.double_well(), 2)


def test_tensor_reference_affine_data():
    L = np.array([[3.0, 0.5], [0.5, 2.0]])
    F = np.array([[1.0, -2.0]])
    val = tensor_reference_min(LAT, L, F, 0.0, Region.cube(1, 2), 32)
    assert val == pytest.approx(0.5 * float(F[0] @ L @ F[0]), rel=1e-10)


def test_gap_experiment_constant_weights():
    env = EnvironmentSpec(Distribution.constant(1.0))
    tab = gamma_gap_experiment(env, QUAD, None, 1.0, Region.cube(1, 2), [16, 32], lattice=LAT, n_samples=1,
                               tensor=2 * np.eye(2))
    g16, g32 = tab.gaps(16), tab.gaps(32)
    assert len(g16) == len(g32) == 1
    assert g32[0] < g16[0]
    assert tab.to_csv().startswith("sample,eps,min_J,min_J_hom,gap")
    assert all(math.isfinite(r.min_J) for r in tab.rows)


def test_affine_value():
    assert affine_value(LAT, QUAD, [[1.0, 2.0]], [1.0, 3.0]) == 13.0
