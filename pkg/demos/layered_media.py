"""Layered media: the periodic cell problem against its closed forms.

Weights that depend only on the first coordinate make the quadratic cell
problem explicit: across the layers the effective coefficient is the harmonic
mean of the weights, along them it is the arithmetic mean.  We draw random
layer stacks, solve the periodic problem and print both sides.

    python3 demos/layered_media.py
"""
import numpy as np

from stochhom.environment import TabulatedSample
from stochhom.homogenize import extract_tensor, whom_k
from stochhom.lattice import preset
from stochhom.potentials import PotentialSpec

lat = preset("zd-nn")
quad = PotentialSpec.quadratic()
rng = np.random.default_rng(0)

print(f"{'k':>4} {'W(e1)':>10} {'harmonic':>10} {'W(e2)':>10} {'arithmetic':>10}")
for k in (2, 8, 32):
    om = rng.choice([1.0, 4.0], size=k)
    s = TabulatedSample.layered(lat, om)
    w1 = whom_k(s, quad, [[1, 0]], k).value
    w2 = whom_k(s, quad, [[0, 1]], k).value
    print(f"{k:>4} {w1:10.6f} {1 / np.mean(1 / om):10.6f} {w2:10.6f} {np.mean(om):10.6f}")

# the tensor from polarisation is diagonal, with the two means on the diagonal
T = extract_tensor([TabulatedSample.layered(lat, (1.0, 4.0))], quad, 2)
print("tensor for omega = (1, 4):")
print(T.L)
