"""Fitting an oscillating field to affine boundary data.

A two-scale field ``g_F + eps phi(x/eps)`` built from a periodic corrector is
blended into ``g_F`` across one of ``m`` thin boundary layers.  The energy
paid for the blend shrinks as the layers get thinner or more numerous.

    python3 demos/gluing.py
"""
import numpy as np

from stochhom.energy import affine
from stochhom.environment import Distribution, EnvironmentSpec, TabulatedSample
from stochhom.gluing import GlueParams, glue_cutoff
from stochhom.homogenize import two_scale_field, whom_k
from stochhom.lattice import Region, preset
from stochhom.potentials import PotentialSpec

lat = preset("zd-nn")
quad = PotentialSpec.quadratic()
F = np.array([[1.0, 0.5]])
per = TabulatedSample.from_sample(EnvironmentSpec(Distribution.two_point(1, 4), seed=3).sample(lat), (8, 8))
corr = whom_k(per, quad, F, 8)
print(f"cell value W^(8)(F) = {corr.value:.6f}")

A = Region.cube(1, 2)
u = two_scale_field(corr.solve.field, 1024, A)
for delta, m in ((0.4, 1), (0.4, 2), (0.2, 1), (0.1, 1)):
    out, rep = glue_cutoff(per, quad, u, affine(F), A, GlueParams(delta, m))
    print(f"delta = {delta:<4} m = {m}: energy {rep.energy_in:.5f} -> {rep.energy_out:.5f} (layer {rep.chosen})")
