"""Cell problems, Monte Carlo estimates of the homogenized density and tensor.

All cell problems live at scale 1 on integer boxes: ``m_F`` fixes the affine
data ``g_F(x) = F x`` outside ``(A)_{-R}``; ``W^(k)`` minimises over
``k Z^d``-periodic correctors.  Values are reported per unit volume.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .energy import Field, affine, sample_data
from .environment import EnvironmentSpec, MomentReport, WeightField
from .errors import BoundViolated, ConfigInvalid, NoConvergence, NotQuadratic
from .lattice import CONTAINED, LatticeSpec, Region, as_eps
from .potentials import PotentialSpec
from .solver import Dirichlet, Periodic, SolveResult, SolverConfig, minimize


@dataclass
class CellProblemResult:
    F: np.ndarray
    value: float  # energy per unit volume
    energy: float
    k: int | None = None
    region: Region | None = None
    solve: SolveResult | None = field(default=None, repr=False)


def _F(F, lattice: LatticeSpec) -> np.ndarray:
    return np.asarray(F, dtype=float).reshape(lattice.n, lattice.d)


def m_F(sample: WeightField, potential: PotentialSpec, F, region: Region, config: SolverConfig | None = None) -> CellProblemResult:
    """``inf { E_1(g_F + phi, A) : phi = 0 outside (A)_{-R} } / |A|``."""
    lat = sample.lattice
    F = _F(F, lat)
    res = minimize(sample, potential, Dirichlet(F, region), config, eps=1)
    return CellProblemResult(F, res.value / region.volume, res.value, None, region, res)


def corrector_from_dirichlet(res: CellProblemResult, k: int) -> Field:
    """Periodic extension of the corrector ``u - g_F`` of an ``m_F(kY)`` minimiser."""
    fld = res.solve.field
    lat = fld.lattice
    c0 = -fld.lo
    sl = (slice(None),) + tuple(slice(int(c), int(c) + k) for c in c0)
    phi = (fld.values - sample_data(res.F, fld.positions(), fld.n))[sl]
    return Field.periodic(lat, k, res.F, phi=phi)


def whom_k(sample: WeightField, potential: PotentialSpec, F, k: int, config: SolverConfig | None = None,
           start_fields=()) -> CellProblemResult:
    """``k^-d min { E_1(g_F + phi, kY) : phi k Z^d-periodic }``."""
    lat = sample.lattice
    F = _F(F, lat)
    res = minimize(sample, potential, Periodic(int(k), F), config, eps=1, start_fields=start_fields)
    vol = float(k) ** lat.d
    return CellProblemResult(F, res.value / vol, res.value, int(k), None, res)


def two_scale_field(corrector: Field, eps, region: Region, R: float | None = None) -> Field:
    """``g_F(x) + eps phi(x/eps)`` on ``region`` from a periodic corrector ``phi`` with affine part ``F``.

    The weights at scale ``eps`` must be the periodic ones the corrector was computed for.
    """
    if corrector.period is None:
        raise ConfigInvalid("two_scale_field needs a periodic corrector")
    lat = corrector.lattice
    e = as_eps(eps)
    F = corrector.F
    fld = Field.for_region(lat, e, region, affine(F), corrector.n, R)
    cells = np.mod(fld.cells(), corrector.period)
    K = lat.k
    idx = (np.arange(K).reshape((K,) + (1,) * lat.d),) + tuple(cells[..., j] for j in range(lat.d))
    fld.values = fld.values + float(e) * corrector.values[idx]
    return fld


def affine_value(lattice: LatticeSpec, potential: PotentialSpec, F, lam) -> float:
    """``sum_b V_b(lam_b; F e_b)``: energy density of the zero corrector with weights ``lam``."""
    F = _F(F, lattice)
    r = lattice.directions @ F.T
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (lattice.n_edges,))
    return math.fsum(potential.eval(lam, r).tolist())


def _samples(env, lattice: LatticeSpec | None, n: int) -> list[WeightField]:
    if isinstance(env, EnvironmentSpec):
        if lattice is None:
            raise ConfigInvalid("a lattice is needed to sample an environment")
        return [env.sample(lattice, s) for s in range(n)]
    if isinstance(env, WeightField):
        return [env]
    return list(env)


def _pmap(fn, items, workers: int):
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


# ---------------------------------------------------------------------------
# W0 estimation


@dataclass
class EstimateRow:
    k: int
    sample: int
    value: float
    m_F_value: float
    sandwich_ok: bool
    iterations: int


@dataclass
class WhomEstimate:
    F: np.ndarray
    schedule: list
    means: dict
    ses: dict
    counts: dict
    estimate: float
    uncertainty: float
    rows: list = field(default_factory=list)
    tol: float = 1e-8

    @property
    def sandwich_ok(self) -> bool:
        return all(r.sandwich_ok for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["F_flat", "k", "sample", "value", "m_F_value", "sandwich_ok", "iterations"])
        fl = " ".join(repr(float(x)) for x in self.F.ravel())
        for r in self.rows:
            w.writerow([fl, r.k, r.sample, repr(r.value), repr(r.m_F_value), int(r.sandwich_ok), r.iterations])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "F": self.F.tolist(),
            "schedule": self.schedule,
            "means": {str(k): v for k, v in self.means.items()},
            "standard_errors": {str(k): v for k, v in self.ses.items()},
            "estimate": self.estimate,
            "uncertainty": self.uncertainty,
            "sandwich_ok": self.sandwich_ok,
        }


def estimate_W0(env, potential: PotentialSpec, F, k_schedule: Sequence[int], samples_per_k: int = 32,
                config: SolverConfig | None = None, lattice: LatticeSpec | None = None, sandwich: bool = True,
                workers: int = 1) -> WhomEstimate:
    """Monte Carlo means of ``W^(k)`` with the per-sample bound ``W^(k) <= m_F(kY)/k^d``.

    The estimate is the mean at the largest ``k``; its uncertainty is the
    larger of the standard error and the change from the previous ``k``.
    """
    config = config or SolverConfig()
    ks = [int(k) for k in k_schedule]
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ConfigInvalid("k schedule must be increasing")
    samples = _samples(env, lattice, samples_per_k)
    lat = samples[0].lattice
    F = _F(F, lat)
    tol = config.tol

    def one(item):
        k, s, smp = item
        mres = None
        mval = math.nan
        starts = ()
        if sandwich:
            mres = m_F(smp, potential, F, Region.cube(k, lat.d), config)
            mval = mres.value
            if not potential.is_quadratic:
                starts = (corrector_from_dirichlet(mres, k),)
        w = whom_k(smp, potential, F, k, config, start_fields=starts)
        ok = (not sandwich) or w.value <= mval + 2 * tol
        return EstimateRow(k, s, w.value, mval, bool(ok), w.solve.iterations)

    items = [(k, s, smp) for k in ks for s, smp in enumerate(samples)]
    rows = _pmap(one, items, workers)
    means, ses, counts = {}, {}, {}
    for k in ks:
        v = np.array([r.value for r in rows if r.k == k])
        means[k] = float(v.mean())
        ses[k] = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        counts[k] = len(v)
    kmax = ks[-1]
    prev = kmax // 2 if kmax // 2 in means else (ks[-2] if len(ks) > 1 else None)
    drift = abs(means[kmax] - means[prev]) if prev is not None else 0.0
    return WhomEstimate(F, ks, means, ses, counts, means[kmax], max(ses[kmax], drift), rows, tol)


@dataclass
class GrowthCertificate:
    estimate: float
    upper: float
    upper_ok: bool
    positive_ok: bool

    @property
    def ok(self) -> bool:
        return self.upper_ok and self.positive_ok


def growth_bounds_check(estimate: WhomEstimate, moments: MomentReport, p: float, c1: float,
                        raise_on_fail: bool = True) -> GrowthCertificate:
    """``0 < W0(F) <= sum_b c1 (1 + E[lambda_b] (|F|^p + 1))`` (positivity only for ``F != 0``)."""
    Fn = float(np.linalg.norm(estimate.F))
    lam = [r.alpha_moment for r in moments.rows]
    if moments.alpha != 1:
        raise ConfigInvalid("growth envelope needs first moments (alpha = 1)")
    if not all(math.isfinite(x) for x in lam):
        raise ConfigInvalid("moment estimates must be finite")
    upper = math.fsum(c1 * (1 + m * (Fn**p + 1)) for m in lam)
    up_ok = estimate.estimate <= upper
    pos_ok = estimate.estimate > 0 if Fn > 0 else estimate.estimate >= -estimate.tol
    cert = GrowthCertificate(estimate.estimate, upper, bool(up_ok), bool(pos_ok))
    if raise_on_fail and not cert.ok:
        raise BoundViolated(f"W0 estimate {estimate.estimate:.6g} outside (0, {upper:.6g}]")
    return cert


# ---------------------------------------------------------------------------
# homogenized tensor


@dataclass
class HomTensor:
    L: np.ndarray  # (nd, nd)
    min_eig: float
    W_single: np.ndarray
    W_pair: np.ndarray

    def energy(self, F) -> float:
        f = np.asarray(F, dtype=float).ravel()
        return 0.5 * float(f @ self.L @ f)

    def to_json(self) -> str:
        return json.dumps({"L": self.L.tolist(), "min_eig": self.min_eig})


def extract_tensor(env, potential: PotentialSpec, k: int, samples: int = 32, config: SolverConfig | None = None,
                   lattice: LatticeSpec | None = None, workers: int = 1) -> HomTensor:
    """Polarisation of ``W(F) = F.L F / 2`` from ``W`` on the basis matrices and their pairwise sums.

    The same samples are used for every ``F`` so the identity holds per sample.
    """
    if not potential.is_quadratic:
        raise NotQuadratic(f"tensor extraction needs a quadratic potential, got {potential.family}")
    smp = _samples(env, lattice, samples)
    lat = smp[0].lattice
    nd = lat.n * lat.d
    basis = np.eye(nd)

    def W(f):
        vals = _pmap(lambda s: whom_k(s, potential, f.reshape(lat.n, lat.d), k, config).value, smp, workers)
        return math.fsum(vals) / len(vals)

    Ws = np.array([W(basis[a]) for a in range(nd)])
    Wp = np.zeros((nd, nd))
    L = np.diag(2 * Ws)
    for a in range(nd):
        for b in range(a + 1, nd):
            Wp[a, b] = Wp[b, a] = W(basis[a] + basis[b])
            L[a, b] = L[b, a] = Wp[a, b] - Ws[a] - Ws[b]
    L = 0.5 * (L + L.T)
    return HomTensor(L, float(np.linalg.eigvalsh(L).min()), Ws, Wp)


# ---------------------------------------------------------------------------
# convergence of minima


def tensor_reference_min(lattice: LatticeSpec, L: np.ndarray, g, force, region: Region, eps,
                         tol: float = 1e-12, R: float | None = None) -> float:
    """Minimum of ``eps^d sum_z (1/2) Du(z).L Du(z) - K eps^d sum f.u`` on the ``q_1`` nodes.

    ``Du(z)`` are forward differences along the coordinate axes, anchored at
    every ``z in eps Z^d ∩ A``; boundary nodes and the free set are those of the
    lattice problem, and the force is weighted by the number ``K`` of node
    offsets so that both force terms approximate ``K int f u``.
    """
    eps = as_eps(eps)
    d, n = lattice.d, lattice.n
    fld = Field.for_region(lattice, eps, region, g, R=R)
    shape = fld.shape
    vals = fld.values[0].reshape(-1, n)
    free = fld.free[0].reshape(-1)
    pos = fld.positions()[0].reshape(-1, d)
    lo, hi = region.grid_bounds(eps)
    anchors_local = np.stack(np.meshgrid(*[np.arange(a, b) - l for a, b, l in zip(lo, hi, fld.lo)], indexing="ij"), -1).reshape(-1, d)
    T = len(anchors_local)
    tail = np.ravel_multi_index(tuple(anchors_local.T), shape)
    free_nodes = np.flatnonzero(free)
    col = np.full(len(free), -1)
    col[free_nodes] = np.arange(len(free_nodes))
    N = len(free_nodes)
    h = float(eps)
    blocks, cvec = [], []
    for j in range(d):
        sh = anchors_local.copy()
        sh[:, j] += 1
        head = np.ravel_multi_index(tuple(sh.T), shape)
        ht, tt = col[head], col[tail]
        rows = np.concatenate([np.flatnonzero(ht >= 0), np.flatnonzero(tt >= 0)])
        cols = np.concatenate([ht[ht >= 0], tt[tt >= 0]])
        data = np.concatenate([np.full((ht >= 0).sum(), 1 / h), np.full((tt >= 0).sum(), -1 / h)])
        Dj = sp.csr_matrix((data, (rows, cols)), shape=(T, N))
        cj = (np.where(ht < 0, 1, 0)[:, None] * vals[head] - np.where(tt < 0, 1, 0)[:, None] * vals[tail]) / h
        blocks.append(Dj)
        cvec.append(cj)
    # gradient components ordered a = i*d + j, rows grouped by a
    M = sp.bmat([[blocks[j] if i2 == i else None for i2 in range(n)] for i in range(n) for j in range(d)],
                format="csr") if N else sp.csr_matrix((T * n * d, 0))
    c = np.concatenate([cvec[j][:, i] for i in range(n) for j in range(d)])
    scale = h**d
    LT = sp.kron(sp.csr_matrix(L), sp.identity(T), format="csr")
    K = lattice.k
    fvals = sample_data(force, pos.reshape(-1, d), n) if callable(force) else np.broadcast_to(np.asarray(force, float), (len(pos), n))
    inA = region.contains(pos)
    flin = (K * scale * fvals * inA[:, None])  # (nodes, n)
    fv = np.concatenate([flin[free_nodes, i] for i in range(n)])
    fconst = math.fsum((flin[~free] * vals[~free]).ravel().tolist())

    def energy(v):
        G = M @ v + c if N else c
        return 0.5 * scale * float(G @ (LT @ G)) - float(fv @ v) - fconst

    if N == 0:
        return energy(np.zeros(0))
    H = (scale * (M.T @ LT @ M)).tocsr()
    rhs = fv - scale * (M.T @ (LT @ c))
    diag = H.diagonal()
    Mop = LinearOperator(H.shape, matvec=lambda x: x / diag, dtype=float)
    v, info = cg(H, rhs, rtol=tol, atol=0.0, maxiter=50_000, M=Mop)
    if info > 0:
        raise NoConvergence("reference tensor problem did not converge")
    return energy(v)


@dataclass
class GapRow:
    sample: int
    eps: str
    min_J: float
    min_J_hom: float
    gap: float


@dataclass
class GapTable:
    rows: list
    L: np.ndarray

    def gaps(self, eps) -> np.ndarray:
        key = str(as_eps(eps))
        return np.array([r.gap for r in self.rows if r.eps == key])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "eps", "min_J", "min_J_hom", "gap"])
        for r in self.rows:
            w.writerow([r.sample, r.eps, repr(r.min_J), repr(r.min_J_hom), repr(r.gap)])
        return buf.getvalue()


def gamma_gap_experiment(env, potential: PotentialSpec, g, f, region: Region, eps_schedule: Sequence,
                         config: SolverConfig | None = None, lattice: LatticeSpec | None = None,
                         n_samples: int = 1, tensor: HomTensor | np.ndarray | None = None,
                         tensor_k: int = 16, tensor_samples: int = 16, workers: int = 1) -> GapTable:
    """``|min J_eps - min J_hom|`` for each sample and scale.

    ``J_eps = H_eps - F_eps`` uses edges with both endpoints in ``A``.  The
    homogenized reference uses the tensor energy at the finest scale; ``L`` is
    extracted from independent samples unless given.
    """
    if not potential.is_quadratic:
        raise NotQuadratic("the gap experiment needs a quadratic potential")
    smp = _samples(env, lattice, n_samples)
    lat = smp[0].lattice
    if tensor is None:
        src = env.with_seed(env.seed + 0x5EED) if isinstance(env, EnvironmentSpec) else smp
        tensor = extract_tensor(src, potential, tensor_k, tensor_samples, config, lattice=lat, workers=workers)
    L = tensor.L if isinstance(tensor, HomTensor) else np.asarray(tensor, dtype=float)
    epss = [as_eps(e) for e in eps_schedule]
    finest = min(epss)
    ref = tensor_reference_min(lat, L, g, f, region, finest)
    g_arg = g if g is not None else np.zeros((lat.n, lat.d))

    def one(item):
        s, sample = item
        out = []
        for e in epss:
            res = minimize(sample, potential, Dirichlet(g_arg, region), config, eps=e, convention=CONTAINED, force=f)
            out.append(GapRow(s, str(e), res.value, ref, abs(res.value - ref)))
        return out

    rows = [r for rs in _pmap(one, list(enumerate(smp)), workers) for r in rs]
    return GapTable(rows, L)
