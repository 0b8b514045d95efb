"""Numerical checks of the norm comparisons and weighted inequalities.

Some checks are exact consequences of the triangle and Hölder inequalities
(constant 1); others involve unknown constants and report the implied
constant so that it can be compared with a calibrated bound.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .energy import Field
from .environment import IID, EnvironmentSpec, WeightField
from .errors import ExponentViolation, HypothesisViolation, NotHypercubic
from .lattice import LatticeSpec, Region, compute_range, grow_region

# ---------------------------------------------------------------------------
# discrete gradients on anchors


def _anchor_gradients(field: Field, anchors: np.ndarray, edges_idx: np.ndarray) -> np.ndarray:
    """``d_b u(z)`` for every anchor and listed edge, shape ``(N, len(edges_idx), n)``."""
    lat = field.lattice
    Nz, nb = len(anchors), len(edges_idx)
    Z = np.repeat(anchors, nb, axis=0)
    B = np.tile(edges_idx, Nz)
    t = field.node_index(Z, lat.tail_offset[B])
    h = field.node_index(Z + lat.head_shift[B], lat.head_offset[B])
    vals = field.values.reshape(-1, field.n)
    G = (vals[h] - vals[t]) / (float(field.eps) * lat.lengths[B])[:, None]
    if field.F is not None:
        G = G + lat.directions[B] @ field.F.T
    return G.reshape(Nz, nb, field.n)


def _anchors_in(field: Field, box_lo, box_hi, open_box: bool) -> np.ndarray:
    """Integer anchors ``z`` with ``eps z`` in the box (open or half-open)."""
    e = float(field.eps)
    lo = np.asarray(box_lo, dtype=float) / e
    hi = np.asarray(box_hi, dtype=float) / e
    # snap values within round-off of an integer so grid-aligned faces are classified exactly
    lo = np.where(np.isclose(lo, np.round(lo), rtol=0, atol=1e-9), np.round(lo), lo)
    hi = np.where(np.isclose(hi, np.round(hi), rtol=0, atol=1e-9), np.round(hi), hi)
    if open_box:
        a = np.floor(lo).astype(np.int64) + 1
        b = np.ceil(hi).astype(np.int64) - 1
    else:
        a = np.ceil(lo).astype(np.int64)
        b = np.ceil(hi).astype(np.int64) - 1
    axes = [np.arange(x, y + 1) for x, y in zip(a, b)]
    if any(len(ax) == 0 for ax in axes):
        return np.zeros((0, field.d), dtype=np.int64)
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, field.d)


def _nn_idx(lat: LatticeSpec) -> np.ndarray:
    return np.flatnonzero(lat.nn0_mask)


# ---------------------------------------------------------------------------
# norm comparison


@dataclass
class SumIntReport:
    integral: float
    discrete_sum: float

    @property
    def ratio(self) -> float:
        if self.discrete_sum == 0:
            return 0.0 if self.integral == 0 else math.inf
        return self.integral / self.discrete_sum


def sumint_check(field: Field, region: Region, q: float, R: float | None = None) -> SumIntReport:
    """Compare ``int_{(A)_{-eps R}} |grad u|^q`` with ``eps^d sum_{z in A} sum_{NN0} |d_b u|^q``.

    The continuum gradient of each cell is the least-squares fit to the NN
    difference quotients at its anchor; the integral uses one quadrature
    point per cell.
    """
    lat = field.lattice
    R = compute_range(lat) if R is None else R
    nn = _nn_idx(lat)
    e = float(field.eps)
    Zall = _anchors_in(field, region.lo, region.hi, open_box=False)
    Gall = _anchor_gradients(field, Zall, nn)
    rhs = e**lat.d * math.fsum((np.linalg.norm(Gall, axis=-1) ** q).ravel().tolist())
    Zin = _anchors_in(field, region.lo + e * R, region.hi - e * R, open_box=True)
    if len(Zin) == 0:
        return SumIntReport(0.0, rhs)
    Gin = _anchor_gradients(field, Zin, nn)  # (N, nb, n)
    P = np.linalg.pinv(lat.directions[nn])  # (d, nb)
    grad = np.einsum("kb,Nbi->Nik", P, Gin)  # (N, n, d)
    lhs = e**lat.d * math.fsum((np.linalg.norm(grad.reshape(len(Zin), -1), axis=-1) ** q).tolist())
    return SumIntReport(lhs, rhs)


# ---------------------------------------------------------------------------
# weighted Poincare inequality


def check_exponents(p: float, q: float, alpha: float, beta: float, d: int):
    if not alpha > 1:
        raise ExponentViolation(f"Poincaré exponents: alpha = {alpha} must exceed 1")
    if q < 1:
        raise ExponentViolation("Poincaré exponents: q must be at least 1")
    lhs = (1 - 1 / alpha) / q
    rhs = (1 + 1 / beta) / p - 1 / d
    if lhs < rhs - 1e-15:
        raise ExponentViolation(f"Poincaré exponents: (1 - 1/alpha)/q = {lhs:.6g} < (1 + 1/beta)/p - 1/d = {rhs:.6g}")


@dataclass
class PoincareEntry:
    Q: tuple
    eps: str
    lhs: float
    rhs: float
    m_alpha: float
    m_beta: float
    weight_scale: float = 1.0  # lhs, rhs and the moments refer to the weights divided by this

    @property
    def implied_C(self) -> float:
        if self.lhs == 0:
            return 0.0
        return self.lhs / self.rhs if self.rhs > 0 else math.inf


@dataclass
class PoincareReport:
    entries: list = field(default_factory=list)

    @property
    def max_C(self) -> float:
        return max((e.implied_C for e in self.entries), default=0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Q_lo", "Q_hi", "eps", "lhs", "rhs", "implied_C", "m_alpha", "m_beta", "weight_scale"])
        for e in self.entries:
            w.writerow([" ".join(map(str, e.Q[0])), " ".join(map(str, e.Q[1])), e.eps, repr(e.lhs), repr(e.rhs),
                        repr(e.implied_C), repr(e.m_alpha), repr(e.m_beta), repr(e.weight_scale)])
        return buf.getvalue()


def poincare_check(sample: WeightField, field: Field, Q: Region, p: float, q: float, alpha: float, beta: float,
                   R: float | None = None) -> PoincareEntry:
    """Both sides of the weighted Poincaré inequality on the cube ``Q`` (constant omitted).

    ``alpha`` or ``beta`` equal to ``inf`` selects the bounded-weight form, with
    the supremum taken over the weights of the window that enters the sum.
    Both sides are homogeneous of degree ``1/q`` in the weights, so they are
    evaluated for the weights divided by their maximum over the window; the
    implied constant is then unchanged bit-for-bit under scaling by powers of two.
    """
    lat = field.lattice
    d = lat.d
    check_exponents(p, q, alpha, beta, d)
    R = compute_range(lat) if R is None else R
    e = float(field.eps)
    volQ = Q.volume
    nb = lat.n_edges
    nn = _nn_idx(lat)
    allb = np.arange(nb)
    # nodes of eps L in Q with the weight sum of their cell
    pos = field.positions()
    inQ = Q.contains(pos)
    u = field.nodal()[inQ]  # (M, n)
    cells = field.cells()[inQ]
    lam_cells = sample.weights(np.repeat(cells, nb, axis=0), np.tile(allb, len(cells))).reshape(len(cells), nb)
    # moment factors
    ZQ = _anchors_in(field, Q.lo, Q.hi, open_box=False)
    lamQ = sample.weights(np.repeat(ZQ, nb, axis=0), np.tile(allb, len(ZQ)))
    grown = grow_region(Q, e * R)
    ZG = _anchors_in(field, grown.lo, grown.hi, open_box=True)
    lamG = sample.weights(np.repeat(ZG, len(nn), axis=0), np.tile(nn, len(ZG))).reshape(len(ZG), len(nn))
    scale = float(max(lam_cells.max(), lamQ.max(), lamG.max()))
    lam_cells, lamQ, lamG = lam_cells / scale, lamQ / scale, lamG / scale
    Lam = lam_cells.sum(axis=1)
    ubar = u.mean(axis=0)
    lhs = (np.mean(np.linalg.norm(u - ubar, axis=-1) ** q * Lam)) ** (1 / q)
    if math.isinf(alpha):
        m_a = float(lamQ.reshape(-1, nb).max(axis=0).sum())
    else:
        m_a = (e**d / volQ * math.fsum((lamQ**alpha).tolist())) ** (1 / alpha)
    if math.isinf(beta):
        m_b = float((1 / lamG).max(axis=0).sum())
    else:
        m_b = (e**d / volQ * math.fsum((lamG.ravel() ** -beta).tolist())) ** (1 / beta)
    G = _anchor_gradients(field, ZG, nn)
    energy = e**d / volQ * math.fsum((lamG * np.linalg.norm(G, axis=-1) ** p).ravel().tolist())
    rhs = volQ ** (1 / d) * m_a ** (1 / q) * m_b ** (1 / p) * energy ** (1 / p)
    return PoincareEntry((tuple(Q.lo.tolist()), tuple(Q.hi.tolist())), str(field.eps), float(lhs), float(rhs), m_a, m_b, scale)


# ---------------------------------------------------------------------------
# coercivity Hölder bound


@dataclass
class CoercivityResult:
    ok: bool
    lhs: float
    rhs: float


def coercivity_diagnostic(sample: WeightField, field: Field, region: Region, p: float, beta: float,
                          rel_tol: float = 1e-12) -> CoercivityResult:
    """``(eps^d sum |du|^s)^((beta+1)/beta) <= (eps^d sum lam^-beta)^(1/beta) eps^d sum lam |du|^p``,
    ``s = beta p / (beta + 1)``, summed over NN edges anchored in ``region``."""
    if not (0 < beta < math.inf):
        raise ExponentViolation("the coercivity diagnostic needs 0 < beta < inf")
    lat = field.lattice
    e = float(field.eps) ** lat.d
    nn = _nn_idx(lat)
    Z = _anchors_in(field, region.lo, region.hi, open_box=False)
    G = np.linalg.norm(_anchor_gradients(field, Z, nn), axis=-1).ravel()
    lam = sample.weights(np.repeat(Z, len(nn), axis=0), np.tile(nn, len(Z)))
    s = beta * p / (beta + 1)
    lhs = (e * math.fsum((G**s).tolist())) ** ((beta + 1) / beta)
    rhs = (e * math.fsum((lam**-beta).tolist())) ** (1 / beta) * (e * math.fsum((lam * G**p).tolist()))
    return CoercivityResult(bool(lhs <= rhs * (1 + rel_tol)), lhs, rhs)


# ---------------------------------------------------------------------------
# disjoint paths and the path weight


def path_family(d: int, i: int) -> list[list[tuple[int, ...]]]:
    """``2d`` edge-disjoint paths from ``0`` to ``e_i`` as node sequences.

    * the edge ``[0, e_i]`` itself;
    * for every ``j != i`` and sign ``+-``, the staple ``0, ±e_j, ±e_j + e_i, e_i``;
    * a loop leaving through ``-e_i``: with ``j`` the first axis other than ``i``,
      ``0, -e_i, -e_i+e_j, -e_i+2e_j, 2e_j, e_i+2e_j, 2e_i+2e_j, 2e_i+e_j, 2e_i, e_i``.
    """
    def v(**c):
        out = [0] * d
        for ax, val in c.items():
            out[int(ax[1:])] += val
        return tuple(out)

    ei = f"a{i}"
    paths = [[v(), v(**{ei: 1})]]
    for j in range(d):
        if j == i:
            continue
        ej = f"a{j}"
        for sgn in (1, -1):
            paths.append([v(), v(**{ej: sgn}), v(**{ej: sgn, ei: 1}), v(**{ei: 1})])
    j = 0 if i != 0 else 1
    ej = f"a{j}"
    loop = [(0, 0), (-1, 0), (-1, 1), (-1, 2), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0)]
    paths.append([v(**{ei: a, ej: b}) for a, b in loop])
    return paths


def path_edges(path) -> list[tuple[tuple[int, ...], int, int]]:
    """Unit edges of a node path as ``(lower endpoint, axis, orientation sign)``."""
    out = []
    for a, b in zip(path, path[1:]):
        diff = np.subtract(b, a)
        if np.abs(diff).sum() != 1:
            raise ValueError("path steps must be unit lattice steps")
        ax = int(np.flatnonzero(diff)[0])
        sgn = int(diff[ax])
        low = a if sgn > 0 else b
        out.append((tuple(int(c) for c in low), ax, sgn))
    return out


def path_family_json(d: int, i: int) -> str:
    return json.dumps([[list(n) for n in p] for p in path_family(d, i)])


@dataclass
class PathWeight:
    z: tuple
    i: int
    paths: list
    sums: list
    mu: float
    argmin: int


def _require_hypercubic(lat: LatticeSpec):
    if not lat.is_hypercubic():
        raise NotHypercubic("path weights are defined on the hyper-cubic lattice zd-nn")


def _path_tables(lat: LatticeSpec, i: int):
    fam = path_family(lat.d, i)
    unit = [lat.unit_edge_index(j) for j in range(lat.d)]
    tabs = []
    for p in fam:
        es = path_edges(p)
        tabs.append((np.array([e[0] for e in es], dtype=np.int64), np.array([unit[e[1]] for e in es]),
                     np.array([e[1] for e in es]), np.array([e[2] for e in es])))
    return fam, tabs


def iid_mu_many(sample: WeightField, Z, i: int, p: float):
    """Vectorised path weights for edges ``[z, z+e_i]``: returns ``(mu, argmin, sums)``."""
    lat = sample.lattice
    _require_hypercubic(lat)
    Z = np.asarray(Z, dtype=np.int64).reshape(-1, lat.d)
    _, tabs = _path_tables(lat, i)
    sums = []
    for low, bidx, _ax, _s in tabs:
        W = sample.weights((Z[:, None, :] + low[None]).reshape(-1, lat.d), np.tile(bidx, len(Z))).reshape(len(Z), -1)
        sums.append((W ** (-1 / (p - 1))).sum(axis=1))
    sums = np.stack(sums, axis=1)
    arg = np.argmin(sums, axis=1)
    best = sums[np.arange(len(Z)), arg]
    mu = best ** (-(p - 1) / p)
    return mu, arg, sums


def iid_mu(sample: WeightField, z, i: int, p: float) -> PathWeight:
    """``mu^(-p/(p-1)) = min_l sum_{b in l} omega(b)^(-1/(p-1))`` over the path family of ``[z, z+e_i]``."""
    lat = sample.lattice
    _require_hypercubic(lat)
    mu, arg, sums = iid_mu_many(sample, [z], i, p)
    fam = path_family(lat.d, i)
    shifted = [[tuple(int(a + b) for a, b in zip(node, z)) for node in path] for path in fam]
    return PathWeight(tuple(int(c) for c in z), i, shifted, sums[0].tolist(), float(mu[0]), int(arg[0]))


@dataclass
class EdgeInequalityResult:
    ok: bool
    n_edges: int
    worst_ratio: float


def mu_edge_inequality_check(sample: WeightField, field: Field, region: Region, p: float,
                             rel_tol: float = 1e-12) -> EdgeInequalityResult:
    """``|grad v(e)| <= mu(e)^-1 (sum_{b in l(e)} omega(b) |grad v(b)|^p)^(1/p)`` for every unit edge
    anchored in ``region``; ``l(e)`` is the minimising path."""
    lat = field.lattice
    _require_hypercubic(lat)
    Z = _anchors_in(field, region.lo, region.hi, open_box=False)
    vals = field.nodal().reshape(-1, field.n)
    e = float(field.eps)

    worst = 0.0
    ok = True
    total = 0
    for i in range(lat.d):
        mu, arg, _ = iid_mu_many(sample, Z, i, p)
        _, tabs = _path_tables(lat, i)
        ei = np.eye(lat.d, dtype=np.int64)[i]
        g_e = np.linalg.norm(vals[field.node_index(Z + ei, 0)] - vals[field.node_index(Z, 0)], axis=-1) / e
        rhs_sum = np.zeros(len(Z))
        for li, (low, bidx, axes, _s) in enumerate(tabs):
            sel = arg == li
            if not np.any(sel):
                continue
            Zs = Z[sel]
            acc = np.zeros(len(Zs))
            for lo_off, b, ax in zip(low, bidx, axes):
                tail = Zs + lo_off
                head = tail + np.eye(lat.d, dtype=np.int64)[ax]
                gv = np.linalg.norm(vals[field.node_index(head, 0)] - vals[field.node_index(tail, 0)], axis=-1) / e
                w = sample.weights(tail, np.full(len(tail), b))
                acc += w * gv**p
            rhs_sum[sel] = acc
        rhs = rhs_sum ** (1 / p) / mu
        bad = g_e > rhs * (1 + rel_tol) + 1e-300
        ok &= not bool(np.any(bad))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(rhs > 0, g_e / rhs, np.where(g_e > 0, np.inf, 0.0))
        worst = max(worst, float(r.max()) if r.size else 0.0)
        total += len(Z)
    return EdgeInequalityResult(bool(ok), total, worst)


@dataclass
class MuMoment:
    estimate: float
    se: float
    n: int
    wide_ci: bool
    values: np.ndarray = field(repr=False, default=None)


def mu_moment_estimate(spec: EnvironmentSpec, lattice: LatticeSpec, p: float, beta: float, gamma: float,
                       n_samples: int = 10_000) -> MuMoment:
    """Monte Carlo ``E[mu^(-beta p)]`` for the edge ``[0, e_1]`` over independent samples."""
    _require_hypercubic(lattice)
    d = lattice.d
    if spec.mode != IID:
        raise HypothesisViolation("the path-weight moment bound needs i.i.d. weights")
    if not gamma > 1 / (2 * d * (p - 1)):
        raise HypothesisViolation(f"gamma = {gamma} must exceed 1/(2d(p-1)) = {1 / (2 * d * (p - 1)):.6g}")
    if beta >= 2 * d * gamma:
        raise HypothesisViolation(f"beta = {beta} must be below 2 d gamma = {2 * d * gamma:.6g}")
    if beta < 1 / (p - 1):
        raise HypothesisViolation(f"beta = {beta} must be at least 1/(p-1)")
    for law in spec.laws(lattice.n_edges):
        m = law.moment(-gamma)
        if m is not None and math.isinf(m):
            raise HypothesisViolation(f"E[omega^-gamma] diverges for {law.kind}{law.params}")
    vals = np.empty(n_samples)
    z0 = np.zeros((1, d), dtype=np.int64)
    for s in range(n_samples):
        mu, _, _ = iid_mu_many(spec.sample(lattice, s), z0, 0, p)
        vals[s] = mu[0] ** (-beta * p)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else math.nan
    wide = bool(se > 0.1 * abs(est)) if est else False
    return MuMoment(est, se, n_samples, wide, vals)
