"""Shared trial generators for the randomized suites and their pilots."""
from __future__ import annotations

import numpy as np

from stochhom.energy import Field, affine, sample_data
from stochhom.environment import Distribution, EnvironmentSpec
from stochhom.gluing import GlueParams, glue_cutoff, glue_truncate, truncation_factors
from stochhom.lattice import Region, preset
from stochhom.potentials import PotentialSpec

# (p, q, alpha, beta) with (1 - 1/alpha)/q >= (1 + 1/beta)/p - 1/d for d = 2
POINCARE_EXPONENTS = [
    (2.0, 2.0, 2.0, 2.0),
    (2.0, 1.0, 2.0, 1.0),
    (3.0, 2.0, 3.0, 2.0),
    (2.0, 2.0, np.inf, np.inf),
]
POINCARE_EPS = [4, 8, 16, 32]
LAWS = {
    "two_point": Distribution.two_point(1.0, 4.0, 0.5),
    "lognormal": Distribution.lognormal(0.0, 0.5),
}


def poincare_trial(t: int):
    """Sample, field, cube and exponents of trial ``t`` (deterministic in ``t``)."""
    rng = np.random.default_rng([7, t])
    lat = preset("zd-nn")
    law = list(LAWS.values())[t % 2]
    env = EnvironmentSpec(law, seed=int(rng.integers(2**31)))
    eps = POINCARE_EPS[(t // 2) % len(POINCARE_EPS)]
    p, q, alpha, beta = POINCARE_EXPONENTS[(t // 8) % len(POINCARE_EXPONENTS)]
    Q = Region.cube(1, 2)
    freq = rng.uniform(0.2, 3.0, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    noise = rng.choice([0.0, 0.01, 0.1])

    def g(x):
        return np.sin(np.pi * (x @ freq) + phase)[..., None]

    fld = Field.for_region(lat, eps, Q, g)
    fld.values = fld.values + noise * rng.standard_normal(fld.values.shape)
    return env.sample(lat, int(rng.integers(1000))), fld, Q, (p, q, alpha, beta)


GLUE_EPS = 400  # delta/(8m) >= 2 eps R for every (delta, m) drawn below


def glue_trial(t: int):
    """Sample, potential, field, data, region and parameters of gluing trial ``t``."""
    rng = np.random.default_rng([11, t])
    lat = preset("zd-nn")
    law = list(LAWS.values())[t % 2]
    sample = EnvironmentSpec(law, seed=int(rng.integers(2**31))).sample(lat)
    pot = [PotentialSpec.quadratic(), PotentialSpec.double_well(), PotentialSpec.p_power(3.0)][t % 3]
    A = Region.cube(1, 2)
    F = rng.normal(size=(1, 2))
    freq = rng.uniform(0.5, 4.0, size=2)
    amp = rng.uniform(0.05, 1.0)

    def g(x):
        return (x @ F[0] + amp * np.sin(2 * np.pi * (x @ freq)))[..., None]

    fld = Field.for_region(lat, GLUE_EPS, A, g)
    fld.values = fld.values + 0.01 * rng.standard_normal(fld.values.shape)
    m = int(rng.integers(1, 3))
    delta = float(rng.uniform(0.3, 0.5)) if m == 1 else float(rng.uniform(0.46, 0.5))
    s = float(rng.uniform(0.05, 0.5))
    return sample, pot, fld, affine(F), A, GlueParams(delta, m, s)


def glue_contract_violations(t: int) -> list[str]:
    """Exact checks of both constructions on trial ``t``; returns the failed checks."""
    sample, pot, fld, ubar_fn, A, params = glue_trial(t)
    pos = fld.positions()
    ubar = sample_data(ubar_fn, pos, 1)
    raw = fld.nodal() - ubar
    tdist = A.boundary_distance(pos) * A.contains(pos)
    outer = tdist <= params.delta / 2  # every candidate cutoff vanishes here
    inner = tdist >= params.delta
    bad = []
    for name, fn in (("cutoff", glue_cutoff), ("truncate", glue_truncate)):
        out, rep = fn(sample, pot, fld, ubar_fn, A, params)
        v = out.values
        if not np.array_equal(v[outer], ubar[outer]):
            bad.append(f"{name}: boundary")
        cap = np.abs(raw) if name == "cutoff" else np.minimum(np.abs(raw), params.s)
        if np.any(np.abs(v - ubar) > cap):
            bad.append(f"{name}: non-expansive")
        target = raw if name == "cutoff" else np.clip(raw, -params.s, params.s)
        # interior nodes keep u up to the ulp the blend may give up to stay non-expansive
        if not np.allclose(v[inner], (ubar + target)[inner], rtol=0, atol=1e-12):
            bad.append(f"{name}: interior")
        if rep.energy_out != min(rep.energies):
            bad.append(f"{name}: choice")
    tf = truncation_factors(fld, ubar_fn, params.s, A)
    if np.any((tf < 0) | (tf > 1)):
        bad.append("truncation factor")
    return bad


def inequality_trial(t: int):
    """Random ``(sample, field, region, p, beta)`` for the exact inequality suites (``zd-nn``, scalar or vector)."""
    rng = np.random.default_rng([13, t])
    lat = preset("zd-nn")
    law = [LAWS["two_point"], LAWS["lognormal"], Distribution.uniform(0.01, 5.0), Distribution.pareto_inverse(2.0)][t % 4]
    sample = EnvironmentSpec(law, seed=int(rng.integers(2**31))).sample(lat)
    eps = int(rng.choice([4, 8, 16]))
    n = int(rng.integers(1, 3))
    fld = Field.for_region(lat, eps, Region.cube(1, 2), None, n=n)
    fld.values = rng.normal(size=fld.values.shape) * rng.choice([1e-3, 1.0, 1e3])
    p = float(rng.uniform(1.2, 4.0))
    beta = float(rng.uniform(1 / (p - 1), 6.0))
    return sample, fld, Region.box([0.25, 0.25], [0.75, 0.75]), p, beta
