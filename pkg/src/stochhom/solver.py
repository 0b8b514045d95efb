"""Minimisation of constrained lattice energies.

Quadratic problems go through the normal equations (Jacobi-preconditioned
conjugate gradients, or a dense factorisation as an oracle).  General
potentials use a multistart limited-memory BFGS with Armijo backtracking;
tabulated potentials use a derivative-free compass search.  For nonconvex
potentials the returned value is the best local minimum found, i.e. an upper
bound on the infimum.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import LinearOperator, cg

from .energy import EnergySystem, Field, build_system
from .environment import WeightField
from .errors import ConfigInvalid, NoConvergence, NullSpace, TooLarge
from .lattice import ANCHORED, Region
from .potentials import PotentialSpec

AUTO = "auto"
CG = "conjugate-gradient"
LBFGS = "lbfgs"
DENSE = "oracle-dense"
GRID = "oracle-grid"
COMPASS = "compass"
METHODS = (AUTO, CG, LBFGS, DENSE, GRID, COMPASS)

DENSE_LIMIT = 4096
GRID_UNKNOWNS = 6
GRID_POINTS = 41
GRID_PRODUCT = 3_000_000


@dataclass
class SolverConfig:
    method: str = AUTO
    tol: float = 1e-8
    max_iter: int = 20_000
    n_starts: int = 8
    amplitude: float | None = None
    backtrack: float = 0.5
    armijo: float = 1e-4
    memory: int = 10
    seed: int = 0
    raise_on_fail: bool = True
    trace: Any = None  # writable text stream for JSON-lines diagnostics
    grid_points: int = 21
    grid_halfwidth: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigInvalid(f"unknown solver method {self.method!r}")
        if not self.tol > 0:
            raise ConfigInvalid("solver tolerance must be positive")
        if not (0 < self.backtrack < 1 and 0 < self.armijo < 1):
            raise ConfigInvalid("line-search parameters must lie in (0, 1)")


@dataclass
class SolveResult:
    value: float
    field: Field
    iterations: int
    grad_norm: float
    start_index: int
    converged: bool
    status: str = "converged"
    n_unknowns: int = 0
    history: list = field(default_factory=list, repr=False)
    start_values: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Dirichlet:
    """``u = g`` outside ``(A)_{-eps R}``; ``g`` is an ``(n, d)`` matrix or a callable."""

    g: Any
    region: Region


@dataclass(frozen=True)
class Periodic:
    """``u = F x + phi`` with ``phi`` ``k Z^d``-periodic."""

    k: int
    F: Any = None


def build_problem(sample: WeightField, potential: PotentialSpec, constraint, eps=1, convention=ANCHORED,
                  force=None, pin=False, R=None) -> tuple[EnergySystem, bool]:
    lat = sample.lattice
    if isinstance(constraint, Dirichlet):
        fld = Field.for_region(lat, eps, constraint.region, constraint.g, R=R)
        return build_system(sample, potential, fld, constraint.region, convention, force), False
    if isinstance(constraint, Periodic):
        if constraint.k < 1:
            raise ConfigInvalid("period k must be at least 1")
        fld = Field.periodic(lat, constraint.k, constraint.F, eps=eps)
        return build_system(sample, potential, fld, None, convention, force, pin=pin), True
    raise ConfigInvalid(f"unknown constraint {constraint!r}")


def minimize(sample: WeightField, potential: PotentialSpec, constraint, config: SolverConfig | None = None,
             eps=1, convention=ANCHORED, force=None, R=None, start_fields=()) -> SolveResult:
    """Minimise the energy over fields satisfying ``constraint``.

    ``start_fields`` are extra initial fields (same layout as the problem's
    field) appended after the regular multistart set.
    """
    config = config or SolverConfig()
    method = config.method
    if method == AUTO:
        if potential.is_quadratic:
            method = CG
        elif not potential.differentiable:
            method = COMPASS
        else:
            method = LBFGS
    periodic = isinstance(constraint, Periodic)
    pin = periodic and method in (LBFGS, GRID, COMPASS) and not potential.is_convex
    sys, periodic = build_problem(sample, potential, constraint, eps, convention, force, pin, R)
    F = constraint.F if periodic else (constraint.g if not callable(constraint.g) else None)
    fnorm = 0.0 if F is None else float(np.linalg.norm(np.asarray(F, dtype=float)))
    extra = [np.asarray(f.values).reshape(-1, sys.n)[sys.free_nodes] for f in start_fields]
    return solve_system(sys, config, method, periodic=periodic and not pin, amp_scale=fnorm, extra_starts=extra)


def solve_system(sys: EnergySystem, config: SolverConfig, method: str, periodic: bool = False,
                 amp_scale: float = 0.0, extra_starts=()) -> SolveResult:
    if method in (CG, DENSE) and not sys.potential.is_quadratic:
        raise ConfigInvalid(f"{method} needs a quadratic potential")
    if sys.n_unknowns == 0:
        x = sys.x0()
        return SolveResult(sys.energy(x, exact=True), sys.field(x), 0, 0.0, 0, True, "converged", 0)
    if method == CG:
        return _solve_cg(sys, config, periodic)
    if method == DENSE:
        return oracle_dense_system(sys, periodic)
    if method == GRID:
        return oracle_grid_system(sys, config)
    if method == COMPASS:
        return _multistart(sys, config, amp_scale, _compass, extra_starts)
    if method == LBFGS:
        return _multistart(sys, config, amp_scale, _lbfgs, extra_starts)
    raise ConfigInvalid(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# quadratic path


def check_null_space(sys: EnergySystem, periodic: bool):
    """Raise NullSpace when the quadratic form is singular beyond translations.

    Nodes are joined by every counted edge with positive weight; each component
    containing an unknown must also contain a fixed node, except for a fully
    periodic problem, which may form a single free component.
    """
    tmpl = sys.template
    nn = tmpl.n_nodes
    e = sys.edges
    keep = sys.lam > 0
    g = sp.coo_matrix((np.ones(int(keep.sum())), (e.tail[keep], e.head[keep])), shape=(nn, nn))
    _, lab = connected_components(g, directed=False)
    is_free = np.zeros(nn, bool)
    is_free[sys.free_nodes] = True
    fixed_labels = set(np.unique(lab[~is_free]).tolist())
    free_labels = set(np.unique(lab[is_free]).tolist())
    if periodic and not fixed_labels:
        if len(free_labels) > 1:
            raise NullSpace(f"periodic quadratic form splits into {len(free_labels)} components")
        return
    floating = free_labels - fixed_labels
    if floating:
        raise NullSpace(f"{len(floating)} groups of free nodes are not tied to fixed values (zero-weight cut)")


def _normal_equations(sys: EnergySystem):
    A = sys.hessian_quadratic()
    b = -sys.scale * (sys.Dt @ (sys.lam[:, None] * sys.c))
    if sys.force_lin is not None:
        b = b + 0.5 * sys.force_lin
    return A, b


def _solve_cg(sys: EnergySystem, config: SolverConfig, periodic: bool) -> SolveResult:
    check_null_space(sys, periodic)
    A, b = _normal_equations(sys)
    diag = A.diagonal()
    M = LinearOperator(A.shape, matvec=lambda v: v / diag, dtype=float)
    N = sys.n_unknowns
    x = np.zeros((N, sys.n))
    iters = 0
    for j in range(sys.n):
        rhs = b[:, j]
        if periodic:
            rhs = rhs - rhs.mean()
        if not np.any(rhs):
            continue
        count = [0]

        def cb(_xk, count=count):
            count[0] += 1

        xj, info = cg(A, rhs, rtol=min(config.tol, 1e-10), atol=0.0, maxiter=config.max_iter, M=M, callback=cb)
        iters += count[0]
        if info > 0 and config.raise_on_fail:
            raise NoConvergence(f"conjugate gradients stopped after {info} iterations")
        if periodic:
            xj = xj - xj.mean()
        x[:, j] = xj
    gn = _rel_norm(sys.gradient(x), sys.gradient(sys.x0()))
    val = sys.energy(x, exact=True)
    _trace(config, {"method": CG, "iterations": iters, "objective": val, "grad_norm": gn})
    return SolveResult(val, sys.field(x), iters, gn, 0, gn <= max(config.tol, 1e-7), "converged", N, [val], [val])


def oracle_dense_system(sys: EnergySystem, periodic: bool) -> SolveResult:
    """Dense factorisation of the normal equations (ground truth for CG)."""
    N = sys.n_unknowns
    if N > DENSE_LIMIT:
        raise TooLarge(f"{N} unknowns exceed the dense oracle limit {DENSE_LIMIT}")
    check_null_space(sys, periodic)
    A, b = _normal_equations(sys)
    A = A.toarray()
    if periodic:
        # gauge: fix the first unknown, then shift to mean zero
        x = np.zeros((N, sys.n))
        if N > 1:
            x[1:] = sla.solve(A[1:, 1:], b[1:], assume_a="pos")
        x -= x.mean(axis=0)
    else:
        x = sla.solve(A, b, assume_a="pos")
    val = sys.energy(x, exact=True)
    gn = _rel_norm(sys.gradient(x), sys.gradient(sys.x0()))
    return SolveResult(val, sys.field(x), 1, gn, 0, True, "converged", N, [val], [val])


def oracle_dense(sample, potential, constraint, eps=1, convention=ANCHORED, force=None, R=None) -> SolveResult:
    if not potential.is_quadratic:
        raise ConfigInvalid("the dense oracle needs a quadratic potential")
    sys, periodic = build_problem(sample, potential, constraint, eps, convention, force, False, R)
    if sys.n_unknowns == 0:
        return solve_system(sys, SolverConfig(), DENSE)
    return oracle_dense_system(sys, periodic)


# ---------------------------------------------------------------------------
# descent methods


def _rel_norm(g, g0) -> float:
    return float(np.max(np.abs(g))) / max(1.0, float(np.max(np.abs(g0))) if np.size(g0) else 1.0)


def _trace(config: SolverConfig, rec: dict):
    if config.trace is not None:
        config.trace.write(json.dumps(rec) + "\n")


def _multistart(sys: EnergySystem, config: SolverConfig, amp_scale: float, local, extra_starts=()) -> SolveResult:
    convex = sys.potential.is_convex
    n_starts = 1 if convex else max(1, config.n_starts)
    amp = config.amplitude if config.amplitude is not None else 0.5 * (1.0 + amp_scale)
    amp *= float(sys.template.eps)
    x0 = sys.x0()
    best = None
    values = []
    for s in range(n_starts + len(extra_starts)):
        if s == 0:
            start = x0.copy()
        elif s < n_starts:
            rng = np.random.default_rng([config.seed, s])
            start = x0 + amp * rng.standard_normal(x0.shape)
        else:
            start = np.array(extra_starts[s - n_starts], dtype=float).reshape(x0.shape)
        res = local(sys, start, config, s)
        values.append(res.value)
        # lowest value wins, ties go to the lowest start index
        if best is None or res.value < best.value:
            best = res
    best.start_values = values
    if best.status == "maxiter" and config.raise_on_fail:
        raise NoConvergence(f"best start {best.start_index} hit the iteration cap ({config.max_iter})")
    return best


def _lbfgs(sys: EnergySystem, x, config: SolverConfig, start: int) -> SolveResult:
    """Limited-memory BFGS with Armijo backtracking; every accepted step is non-increasing."""
    shape = x.shape
    x = x.ravel().copy()

    def fg(v):
        e, g = sys.value_and_gradient(v.reshape(shape))
        return e, g.ravel()

    f, g = fg(x)
    gscale = max(1.0, float(np.max(np.abs(g))))
    S, Y = [], []
    hist = [f]
    status = "maxiter"
    it = 0
    flat = 0
    for it in range(1, config.max_iter + 1):
        if np.max(np.abs(g)) <= config.tol * gscale:
            status = "converged"
            it -= 1
            break
        # two-loop recursion
        q = g.copy()
        alph = []
        for s_, y_ in reversed(list(zip(S, Y))):
            a = (s_ @ q) / (y_ @ s_)
            alph.append(a)
            q -= a * y_
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        for (s_, y_), a in zip(zip(S, Y), reversed(alph)):
            bcoef = (y_ @ q) / (y_ @ s_)
            q += (a - bcoef) * s_
        p = -q
        slope = p @ g
        if slope >= 0:
            S.clear()
            Y.clear()
            p = -g
            slope = -(g @ g)
        t = 1.0
        accepted = False
        for _ in range(60):
            xn = x + t * p
            fn, gn = fg(xn)
            if fn <= f + config.armijo * t * slope:
                accepted = True
                break
            t *= config.backtrack
        if not accepted:
            # no sufficient decrease at round-off level; accept only a strictly helpful step
            if fn <= f and np.max(np.abs(gn)) < np.max(np.abs(g)):
                accepted = True
            else:
                status = "stalled"
                break
        s_vec, y_vec = xn - x, gn - g
        if s_vec @ y_vec > 1e-12 * math.sqrt((s_vec @ s_vec) * (y_vec @ y_vec)):
            S.append(s_vec)
            Y.append(y_vec)
            if len(S) > config.memory:
                S.pop(0)
                Y.pop(0)
        # stagnation: objective no longer moves beyond round-off
        flat = flat + 1 if f - fn <= 1e-15 * max(1.0, abs(f)) else 0
        x, f, g = xn, fn, gn
        hist.append(f)
        if flat >= 25:
            status = "stalled"
            break
        if config.trace is not None:
            _trace(config, {"method": LBFGS, "start": start, "iteration": it, "objective": f,
                            "grad_norm": float(np.max(np.abs(g))) / gscale})
    gn_rel = float(np.max(np.abs(g))) / gscale
    if status == "stalled" and gn_rel <= math.sqrt(config.tol):
        status = "converged"
    x = x.reshape(shape)
    val = sys.energy(x, exact=True)
    return SolveResult(val, sys.field(x), it, gn_rel, start, status == "converged", status,
                       sys.n_unknowns, hist)


def _compass(sys: EnergySystem, x, config: SolverConfig, start: int) -> SolveResult:
    """Derivative-free coordinate search: try +-h per unknown, halve h when stuck."""
    shape = x.shape
    n = sys.n
    x = x.copy()
    G = sys.grads(x)
    D = sys.D.tocsc()
    h = max(float(np.max(np.abs(x))) if x.size else 0.0, 1.0) * 0.25 * float(sys.template.eps)
    hmin = config.tol * float(sys.template.eps)
    f = sys.energy(x)
    hist = [f]
    it = 0
    lin = sys.force_lin if sys.force_lin is not None else np.zeros_like(x)
    while h > hmin and it < config.max_iter:
        it += 1
        improved = False
        for j in range(x.shape[0]):
            lo, hi = D.indptr[j], D.indptr[j + 1]
            rows, coef = D.indices[lo:hi], D.data[lo:hi]
            base = sys.potential.eval(sys.lam[rows], G[rows])
            for c in range(n):
                for step in (h, -h):
                    Gn = G[rows].copy()
                    Gn[:, c] += step * coef
                    delta = sys.scale * float(np.sum(sys.potential.eval(sys.lam[rows], Gn) - base))
                    delta -= lin[j, c] * step
                    if delta < 0:
                        x[j, c] += step
                        G[rows] = Gn
                        f += delta
                        base = sys.potential.eval(sys.lam[rows], Gn)
                        improved = True
                        break
        hist.append(f)
        if not improved:
            h *= 0.5
    status = "converged" if h <= hmin else "maxiter"
    val = sys.energy(x, exact=True)
    return SolveResult(val, sys.field(x.reshape(shape)), it, h, start, status == "converged", status,
                       sys.n_unknowns, hist)


# ---------------------------------------------------------------------------
# exhaustive grid oracle


def oracle_grid_system(sys: EnergySystem, config: SolverConfig, polish: bool = True) -> SolveResult:
    N = sys.n_unknowns * sys.n
    pts = config.grid_points
    if sys.n != 1 or N > GRID_UNKNOWNS or pts > GRID_POINTS or pts ** N > GRID_PRODUCT:
        raise TooLarge(f"grid oracle limited to {GRID_UNKNOWNS} scalar unknowns, "
                       f"{GRID_POINTS} points each and {GRID_PRODUCT} grid points in total")
    x0 = sys.x0().ravel()
    hw = config.grid_halfwidth
    if hw is None:
        cmax = float(np.max(np.abs(sys.c))) if sys.c.size else 0.0
        hw = 2.0 * float(sys.template.eps) * (1.0 + cmax)
    axis = np.linspace(-hw, hw, pts)
    step = axis[1] - axis[0] if pts > 1 else hw
    best_v, best_x = math.inf, None
    Dd = sys.D.toarray()
    lin = sys.force_lin.ravel() if sys.force_lin is not None else np.zeros(N)
    combos = itertools.product(range(pts), repeat=N)
    chunk = 50_000
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        X = x0[None, :] + axis[block]
        Gs = X @ Dd.T + sys.c[:, 0][None, :]
        E = sys.scale * sys.potential.eval(sys.lam[None, :], Gs[..., None]).sum(axis=1) - X @ lin - sys.force_const
        i = int(np.argmin(E))
        if E[i] < best_v:
            best_v, best_x = float(E[i]), X[i].copy()
    grid_val = sys.energy(best_x.reshape(-1, 1), exact=True)
    res = SolveResult(grid_val, sys.field(best_x.reshape(-1, 1)), 1, math.nan, 0, True, "converged", sys.n_unknowns,
                      [grid_val], [grid_val], {"grid_value": grid_val, "grid_step": step})
    if polish and sys.potential.differentiable:
        pol = _lbfgs(sys, best_x.reshape(-1, 1), SolverConfig(tol=config.tol, max_iter=config.max_iter), 0)
        if pol.value <= grid_val:
            pol.extra = res.extra
            pol.start_values = [pol.value]
            return pol
    return res


def oracle_grid(sample, potential, constraint, config: SolverConfig | None = None, eps=1, convention=ANCHORED,
                force=None, R=None) -> SolveResult:
    config = config or SolverConfig(method=GRID)
    pin = isinstance(constraint, Periodic)
    sys, _ = build_problem(sample, potential, constraint, eps, convention, force, pin, R)
    if sys.n_unknowns == 0:
        x = sys.x0()
        v = sys.energy(x, exact=True)
        return SolveResult(v, sys.field(x), 0, 0.0, 0, True, "converged", 0, [v], [v], {"grid_value": v, "grid_step": 0.0})
    return oracle_grid_system(sys, config)
