import numpy as np
import pytest

from stochhom.errors import ConfigInvalid, EnvelopeViolated, NotConvex, NotScalar
from stochhom.potentials import Companion, PotentialSpec, convex_companion_check, growth_envelope_check

FAMILIES = [
    PotentialSpec.quadratic(),
    PotentialSpec.p_power(3.0),
    PotentialSpec.double_well(),
    PotentialSpec.vector_well(),
]
TABLE = PotentialSpec.tabulated([0, 0.5, 1, 2], [1, 0, 0.5, 4], p=2)


def test_eval_examples():
    assert PotentialSpec.quadratic().eval(2.0, [3.0]) == 18.0
    assert PotentialSpec.double_well().eval(1.0, [1.0]) == 0.0
    assert PotentialSpec.vector_well().eval(1.0, [0.6, 0.8]) == pytest.approx(0.0, abs=1e-15)


def test_grad_examples():
    assert PotentialSpec.quadratic().grad(2.0, [3.0]).tolist() == [12.0]
    assert PotentialSpec.double_well().grad(1.0, [1.0]).tolist() == [0.0]
    assert PotentialSpec.vector_well().grad(1.0, [0.0, 0.0]).tolist() == [0.0, 0.0]
    with pytest.raises(ConfigInvalid):
        TABLE.grad(1.0, [0.3])


@pytest.mark.parametrize("pot", FAMILIES + [TABLE], ids=lambda p: p.family)
def test_nonnegative_and_linear_in_lambda(pot):
    rng = np.random.default_rng(1)
    lam = rng.uniform(0.01, 10, size=500)
    r = rng.normal(size=(500, 2)) * 3
    V = pot.eval(lam, r)
    assert np.all(V >= 0)
    c = 2.0 ** rng.integers(-5, 5, size=500)  # powers of two keep the product exact
    assert np.array_equal(pot.eval(c * lam, r), c * V)


def test_p_homogeneity():
    pot = PotentialSpec.p_power(3.0)
    rng = np.random.default_rng(2)
    r = rng.normal(size=(200, 2))
    t = 2.0 ** rng.integers(-3, 4, size=(200, 1))
    assert np.allclose(pot.eval(1.0, t * r), t[:, 0] ** 3 * pot.eval(1.0, r), rtol=1e-14, atol=0)


@pytest.mark.parametrize("pot", FAMILIES, ids=lambda p: p.family)
def test_grad_matches_central_differences(pot):
    rng = np.random.default_rng(3)
    h = 1e-5
    for _ in range(1000 // len(FAMILIES)):
        lam = rng.uniform(0.1, 5)
        r = rng.normal(size=2) * 2
        g = pot.grad(lam, r)
        fd = np.array([(pot.eval(lam, r + h * e) - pot.eval(lam, r - h * e)) / (2 * h) for e in np.eye(2)])
        assert np.linalg.norm(g - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))


@pytest.mark.parametrize("pot", FAMILIES, ids=lambda p: p.family)
def test_growth_envelope_holds_with_default_c1(pot):
    r = np.linspace(-10, 10, 2001)
    rep = growth_envelope_check(pot, 1.7, r)
    assert rep.ok and rep.tightest_c1 <= pot.growth_c1


def test_growth_envelope_violation_witness():
    with pytest.raises(EnvelopeViolated) as err:
        growth_envelope_check(PotentialSpec.double_well(c1=0.1), 1.0, np.linspace(-10, 10, 2001))
    assert abs(err.value.witness[0]) < 0.05


def test_convex_companion():
    grid = np.linspace(-3, 3, 601)
    rep = convex_companion_check(PotentialSpec.double_well(), 1.0, grid)
    assert rep.companion_growth_ok and rep.min_curvature >= -1e-9
    with pytest.raises(NotConvex):
        convex_companion_check(PotentialSpec.double_well(), 1.0, grid, companion=None)
    convex_companion_check(PotentialSpec.quadratic(), 1.0, grid, companion=None)
    with pytest.raises(NotScalar):
        convex_companion_check(PotentialSpec.quadratic(), 1.0, grid, n=2)


def test_companion_parsing_and_json():
    c = Companion.parse("2*lambda*r^2", 2, 2)
    assert (c.coef, c.power) == (2.0, 2.0)
    with pytest.raises(ConfigInvalid):
        Companion.parse("lambda squared", 2, 2)
    doc = {"family": "double_well", "p": 4, "c1": 4, "companion": {"form": "2*lambda*r^2", "q": 2, "c2": 2}}
    pot = PotentialSpec.from_json(doc)
    assert pot == PotentialSpec.double_well(4)
    assert PotentialSpec.from_json(pot.to_json()) == pot
    assert PotentialSpec.from_json(TABLE.to_json()) == TABLE


def test_invalid_specs():
    with pytest.raises(ConfigInvalid):
        PotentialSpec("quadratic", 3.0)
    with pytest.raises(ConfigInvalid):
        PotentialSpec.p_power(1.0)
    with pytest.raises(ConfigInvalid):
        PotentialSpec.tabulated([0.5, 1], [0, 1])
    with pytest.raises(ConfigInvalid):
        PotentialSpec("double_well", 4.0, None, Companion(2, 2, 5, 1))  # q outside (1, p)


def test_tabulated_interpolation_and_tail():
    assert TABLE.eval(1.0, [0.25]) == pytest.approx(0.5)
    assert TABLE.eval(1.0, [4.0]) == pytest.approx(16.0)  # 4 * (4/2)^2
