"""Minimum energies of the random problem approach the homogenized one.

For lognormal weights we minimise ``J_eps(u) = H_eps(u) - eps^d sum f u`` with
``u = 0`` on the boundary of the unit square and ``f = 1``, and compare with
the minimum of the quadratic energy built from the homogenized tensor.

    python3 demos/gamma_gap.py
"""
import numpy as np

from stochhom.environment import Distribution, EnvironmentSpec
from stochhom.homogenize import extract_tensor, gamma_gap_experiment
from stochhom.lattice import Region, preset
from stochhom.potentials import PotentialSpec

lat = preset("zd-nn")
quad = PotentialSpec.quadratic()
env = EnvironmentSpec(Distribution.lognormal(0.0, 0.5), seed=7)

T = extract_tensor(env.with_seed(99), quad, k=16, samples=8, lattice=lat)
print("homogenized tensor:")
print(np.round(T.L, 4))

tab = gamma_gap_experiment(env, quad, None, 1.0, Region.cube(1, 2), [8, 16, 32, 64], lattice=lat, n_samples=4,
                           tensor=T)
for eps in (8, 16, 32, 64):
    g = tab.gaps(eps)
    print(f"eps = 1/{eps:<3} mean gap {g.mean():.3e}  max gap {g.max():.3e}")
