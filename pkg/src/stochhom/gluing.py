"""Boundary fitting by cutoff averaging and by truncation.

Both constructions blend a field ``u`` into prescribed data ``ubar`` across
one of ``m`` nested boundary layers of total width ``delta`` and keep the
candidate with the least energy.  With ``t(x) = dist(x, ∂A)`` the cutoff of
layer ``k`` (``k = 0..m-1``) is 1 for ``t >= delta (2m-k-1/4)/(2m)``, 0 for
``t <= delta (2m-k-3/4)/(2m)`` and linear in ``t`` in between, so its
Lipschitz constant is ``4m/delta``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .energy import Field, edge_list, sample_data
from .environment import WeightField
from .errors import ConfigInvalid, LayersTooThin, NotScalar
from .lattice import ANCHORED, Region, compute_range
from .potentials import PotentialSpec


@dataclass(frozen=True)
class GlueParams:
    delta: float
    m: int
    s: float | None = None  # value truncation level
    M: float | None = None  # weight truncation level (diagnostic only)

    def __post_init__(self):
        if not self.delta > 0 or self.m < 1:
            raise ConfigInvalid("gluing needs delta > 0 and m >= 1")
        if self.s is not None and not self.s > 0:
            raise ConfigInvalid("truncation level s must be positive")


@dataclass
class CandidateRow:
    k: int
    energy: float
    boundary_nodes_changed: int
    clamp_active_fraction: float


@dataclass
class GlueReport:
    chosen: int
    rows: list = field(default_factory=list)
    energy_in: float = math.nan
    heavy_edge_fraction: float = math.nan

    @property
    def energies(self) -> np.ndarray:
        return np.array([r.energy for r in self.rows])

    @property
    def energy_out(self) -> float:
        return self.rows[self.chosen].energy

    @property
    def increment(self) -> float:
        return self.energy_out - self.energy_in

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "energy", "boundary_nodes_changed", "clamp_active_fraction"])
        for r in self.rows:
            w.writerow([r.k, repr(r.energy), r.boundary_nodes_changed, repr(r.clamp_active_fraction)])
        return buf.getvalue()


def cutoff(t: np.ndarray, k: int, delta: float, m: int) -> np.ndarray:
    """Piecewise-linear cutoff of layer ``k`` as a function of the boundary distance ``t``."""
    lo = delta * (2 * m - k - 0.75) / (2 * m)
    hi = delta * (2 * m - k - 0.25) / (2 * m)
    return np.clip((t - lo) / (hi - lo), 0.0, 1.0)


class _EdgeEnergy:
    """Energy of many fields sharing one layout: edges and weights are computed once."""

    def __init__(self, sample: WeightField, potential: PotentialSpec, fld: Field, region: Region, convention: str):
        self.edges = edge_list(fld, region, convention)
        self.lam = sample.weights(self.edges.Z, self.edges.B)
        self.potential = potential
        self.scale = float(fld.eps) ** fld.d
        self.n = fld.n

    def __call__(self, values: np.ndarray) -> float:
        v = values.reshape(-1, self.n)
        G = (v[self.edges.head] - v[self.edges.tail]) * self.edges.inv[:, None]
        return self.scale * math.fsum(self.potential.eval(self.lam, G).tolist())


def _check_layers(fld: Field, params: GlueParams, R: float):
    if params.delta / (8 * params.m) < 2 * float(fld.eps) * R:
        raise LayersTooThin(
            f"layer gap delta/(8m) = {params.delta / (8 * params.m):.4g} is below 2 eps R = {2 * float(fld.eps) * R:.4g}"
        )


def _blend(ubar: np.ndarray, diff: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """``ubar + phi * diff`` with exact end cases and ``|v - ubar| <= |diff|`` nodewise."""
    v = ubar + phi[..., None] * diff
    v = np.where(phi[..., None] == 1.0, ubar + diff, v)
    v = np.where(phi[..., None] == 0.0, ubar, v)
    # rounding can push v a few ulps past ubar + diff; step such nodes back towards ubar
    for _ in range(8):
        over = np.abs(v - ubar) > np.abs(diff)
        if not np.any(over):
            return v
        v = np.where(over, np.nextafter(v, ubar), v)
    return np.where(np.abs(v - ubar) > np.abs(diff), ubar, v)


def _glue(sample, potential, u_eps: Field, u_bar, region: Region, params: GlueParams, convention, diff_fn, R):
    R = compute_range(u_eps.lattice) if R is None else R
    _check_layers(u_eps, params, R)
    pos = u_eps.positions()
    ubar = sample_data(u_bar, pos, u_eps.n)
    u = u_eps.nodal()
    raw = u - ubar
    diff, active = diff_fn(raw)
    t = region.boundary_distance(pos) * region.contains(pos)
    inA = region.contains(pos)
    energy = _EdgeEnergy(sample, potential, u_eps, region, convention)
    rows, cands = [], []
    for k in range(params.m):
        phi = cutoff(t, k, params.delta, params.m)
        v = _blend(ubar, diff, phi)
        changed = int(np.count_nonzero(np.any(v != u, axis=-1)))
        frac = float(np.count_nonzero(active & inA) / max(1, np.count_nonzero(inA)))
        rows.append(CandidateRow(k, energy(v), changed, frac))
        cands.append(v)
    # least energy wins, ties go to the smallest k
    chosen = int(np.argmin([r.energy for r in rows]))
    out = u_eps.copy()
    out.F = None
    out.period = None
    out.values = cands[chosen]
    rep = GlueReport(chosen, rows, energy(u))
    if params.M is not None:
        rep.heavy_edge_fraction = float(np.mean(energy.lam > params.M)) if energy.lam.size else 0.0
    return out, rep


def glue_cutoff(sample: WeightField, potential: PotentialSpec, u_eps: Field, u_bar, region: Region,
                params: GlueParams, convention: str = ANCHORED, R: float | None = None):
    """Candidates ``ubar + phi_k (u - ubar)``; returns the least-energy one and a report."""
    return _glue(sample, potential, u_eps, u_bar, region, params, convention,
                 lambda raw: (raw, np.zeros(raw.shape[:-1], bool)), R)


def glue_truncate(sample: WeightField, potential: PotentialSpec, u_eps: Field, u_bar, region: Region,
                  params: GlueParams, convention: str = ANCHORED, R: float | None = None):
    """Candidates ``ubar + phi_k clamp(u - ubar, -s, s)`` (scalar fields only)."""
    if u_eps.n != 1:
        raise NotScalar("truncation gluing needs scalar fields (n = 1)")
    if params.s is None:
        raise ConfigInvalid("truncation gluing needs the level s")
    s = float(params.s)

    def trunc(raw):
        return np.clip(raw, -s, s), np.abs(raw[..., 0]) > s

    return _glue(sample, potential, u_eps, u_bar, region, params, convention, trunc, R)


def truncation_factors(u_eps: Field, u_bar, s: float, region: Region, convention: str = ANCHORED) -> np.ndarray:
    """Per edge ``t`` with ``d_b w = t d_b (u - ubar)`` for ``w = clamp(u - ubar, -s, s)``.

    Edges where ``u - ubar`` has zero difference get ``t = 1``.
    """
    if u_eps.n != 1:
        raise NotScalar("truncation needs scalar fields (n = 1)")
    e = edge_list(u_eps, region, convention)
    raw = (u_eps.nodal() - sample_data(u_bar, u_eps.positions(), 1)).reshape(-1)
    w = np.clip(raw, -s, s)
    dr = raw[e.head] - raw[e.tail]
    dw = w[e.head] - w[e.tail]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dr != 0, dw / dr, 1.0)
    return t
