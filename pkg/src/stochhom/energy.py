"""Fields on scaled lattices and the assembled pair energies.

A :class:`Field` stores node values on a box of unit cells.  For a Dirichlet
field the box is the region plus a halo and the values are the full map
``u``.  For a periodic field the box is one period ``[0, k)^d`` and the values
are the corrector ``phi``; the affine part ``F x`` is added analytically when
forming edge differences, so it is never wrapped.

Every energy is reduced to an :class:`EnergySystem`: edge gradients are an
affine function ``G = D x + c`` of the free unknowns ``x``, and the energy is
``eps^d sum_t V(lambda_t; G_t)`` minus an optional linear body-force term.
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .environment import WeightField
from .errors import ConfigInvalid, OutOfHalo
from .lattice import ANCHORED, LatticeSpec, Region, as_eps, compute_range, edges_in_region
from .potentials import PotentialSpec

_MAGIC = b"SHF1"


@dataclass(eq=False)
class Field:
    lattice: LatticeSpec
    eps: Fraction
    lo: np.ndarray  # integer cell index of the first stored cell
    values: np.ndarray  # (K, *shape, n)
    free: np.ndarray  # (K, *shape) bool
    period: int | None = None
    F: np.ndarray | None = None  # affine part of a periodic field, shape (n, d)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape[1:-1]

    @property
    def n(self) -> int:
        return self.values.shape[-1]

    @property
    def d(self) -> int:
        return self.lattice.d

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.values.shape[:-1]))

    @property
    def hi(self) -> np.ndarray:
        return self.lo + np.asarray(self.shape)

    def copy(self) -> "Field":
        F = None if self.F is None else self.F.copy()
        return replace(self, lo=self.lo.copy(), values=self.values.copy(), free=self.free.copy(), F=F)

    def with_values(self, values) -> "Field":
        out = self.copy()
        out.values = np.asarray(values, dtype=float).reshape(self.values.shape).copy()
        return out

    # -- geometry ------------------------------------------------------------

    def cells(self) -> np.ndarray:
        """Global integer cell index of every stored node, shape ``(K, *shape, d)``."""
        axes = [np.arange(l, l + s) for l, s in zip(self.lo, self.shape)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return np.broadcast_to(mesh, (self.lattice.k,) + mesh.shape)

    def positions(self) -> np.ndarray:
        """Physical node positions ``eps (z + q_i)``, shape ``(K, *shape, d)``."""
        q = np.array([[float(c) for c in off] for off in self.lattice.offsets])
        q = q.reshape((self.lattice.k,) + (1,) * self.d + (self.d,))
        return float(self.eps) * (self.cells() + q)

    def nodal(self) -> np.ndarray:
        """Node values including the affine part for periodic fields."""
        if self.F is None:
            return self.values
        return self.values + np.einsum("...j,ij->...i", self.positions(), self.F)

    # -- constructors ----------------------------------------------------------

    @classmethod
    def for_region(cls, lattice: LatticeSpec, eps, region: Region, g=None, n: int | None = None,
                   R: float | None = None) -> "Field":
        """Field on ``region`` plus a halo, equal to ``g`` everywhere, free in ``(A)_{-eps R}``.

        ``g`` is an ``(n, d)`` matrix (affine data ``F x``), a callable mapping
        positions ``(..., d)`` to values ``(..., n)``, or ``None`` for zero.
        """
        eps = as_eps(eps)
        n = lattice.n if n is None else n
        R = compute_range(lattice) if R is None else R
        lo, hi = region.grid_bounds(eps)
        # anchors up to R cells outside the region still need their edge heads
        h = int(math.ceil(R)) + max(lattice.max_shift, 1)
        lo_h, hi_h = lo - h, hi + h
        shape = tuple(int(x) for x in hi_h - lo_h)
        tmp = cls(lattice, eps, lo_h, np.zeros((lattice.k,) + shape + (n,)), np.zeros((lattice.k,) + shape, bool))
        pos = tmp.positions()
        tmp.values = sample_data(g, pos, n)
        inner_lo = region.lo + float(eps) * R
        inner_hi = region.hi - float(eps) * R
        tmp.free = np.all((pos > inner_lo) & (pos < inner_hi), axis=-1)
        return tmp

    @classmethod
    def periodic(cls, lattice: LatticeSpec, k: int, F=None, eps=1, n: int | None = None, phi=None) -> "Field":
        """``k Z^d``-periodic corrector field (zero unless ``phi`` given) with affine part ``F``."""
        n = lattice.n if n is None else n
        F = np.zeros((n, lattice.d)) if F is None else np.asarray(F, dtype=float).reshape(n, lattice.d)
        shape = (lattice.k,) + (int(k),) * lattice.d
        vals = np.zeros(shape + (n,)) if phi is None else np.asarray(phi, dtype=float).reshape(shape + (n,)).copy()
        eps = Fraction(1) if eps == 1 else as_eps(eps)
        return cls(lattice, eps, np.zeros(lattice.d, dtype=np.int64), vals, np.ones(shape, bool), int(k), F)

    # -- indexing --------------------------------------------------------------

    def node_index(self, Z, i) -> np.ndarray:
        """Flat index into ``values[..., :]`` of node ``(Z, i)``; raises OutOfHalo."""
        Z = np.asarray(Z, dtype=np.int64)
        c = Z - self.lo
        if self.period is not None:
            c = np.mod(c, self.period)
        elif np.any(c < 0) or np.any(c >= np.asarray(self.shape)):
            raise OutOfHalo("edge endpoint lies outside the stored halo")
        return np.ravel_multi_index((np.asarray(i),) + tuple(c.T), (self.lattice.k,) + self.shape)

    # -- I/O -------------------------------------------------------------------

    def to_bytes(self) -> bytes:
        d, n, K = self.d, self.n, self.lattice.k
        head = _MAGIC + struct.pack("<5q", d, n, self.eps.denominator, K, self.period or 0)
        head += struct.pack(f"<{d}q", *map(int, self.lo)) + struct.pack(f"<{d}q", *map(int, self.hi))
        body = np.ascontiguousarray(self.values, dtype="<f8").tobytes()
        tail = np.ascontiguousarray(self.free, dtype=np.uint8).tobytes()
        if self.F is not None:
            tail += np.ascontiguousarray(self.F, dtype="<f8").tobytes()
        return head + body + tail

    @classmethod
    def from_bytes(cls, lattice: LatticeSpec, data: bytes) -> "Field":
        if data[:4] != _MAGIC:
            raise ConfigInvalid("not a field file")
        d, n, m, K, period = struct.unpack_from("<5q", data, 4)
        off = 4 + 40
        lo = np.array(struct.unpack_from(f"<{d}q", data, off), dtype=np.int64)
        hi = np.array(struct.unpack_from(f"<{d}q", data, off + 8 * d), dtype=np.int64)
        off += 16 * d
        if d != lattice.d or K != lattice.k:
            raise ConfigInvalid("field file does not match the lattice")
        shape = (K,) + tuple(int(x) for x in hi - lo)
        cnt = int(np.prod(shape)) * n
        vals = np.frombuffer(data, dtype="<f8", count=cnt, offset=off).reshape(shape + (n,)).astype(float)
        off += 8 * cnt
        free = np.frombuffer(data, dtype=np.uint8, count=int(np.prod(shape)), offset=off).reshape(shape).astype(bool)
        off += int(np.prod(shape))
        F = None
        if period:
            F = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(float)
        return cls(lattice, Fraction(1, m), lo, vals, free, period or None, F)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d, n = self.d, self.n
        w.writerow(["offset"] + [f"z{j}" for j in range(d)] + [f"x{j}" for j in range(d)]
                   + [f"u{j}" for j in range(n)] + ["free"])
        cells = self.cells().reshape(-1, d)
        pos = self.positions().reshape(-1, d)
        vals = self.nodal().reshape(-1, n)
        offs = np.repeat(np.arange(self.lattice.k), int(np.prod(self.shape)))
        for i, z, x, u, f in zip(offs, cells, pos, vals, self.free.reshape(-1)):
            w.writerow([int(i)] + z.tolist() + [repr(float(c)) for c in x] + [repr(float(c)) for c in u] + [int(f)])
        return buf.getvalue()


def sample_data(g, pos: np.ndarray, n: int) -> np.ndarray:
    """Evaluate boundary data at node positions ``(..., d)`` giving ``(..., n)``."""
    if g is None:
        return np.zeros(pos.shape[:-1] + (n,))
    if callable(g):
        out = np.asarray(g(pos), dtype=float)
        return out.reshape(pos.shape[:-1] + (n,))
    F = np.asarray(g, dtype=float).reshape(n, pos.shape[-1])
    return np.einsum("...j,ij->...i", pos, F)


def affine(F) -> Callable:
    F = np.atleast_2d(np.asarray(F, dtype=float))
    return lambda x: np.einsum("...j,ij->...i", x, F)


# ---------------------------------------------------------------------------
# edge geometry


@dataclass
class EdgeList:
    Z: np.ndarray  # integer anchors (T, d)
    B: np.ndarray  # edge indices (T,)
    tail: np.ndarray  # flat node index
    head: np.ndarray
    inv: np.ndarray  # 1 / (eps |y_b - x_b|)


def edge_list(field: Field, region: Region | None = None, convention: str = ANCHORED) -> EdgeList:
    """Edges counted on ``region`` in canonical order with endpoint node indices."""
    lat = field.lattice
    if region is None:
        region = default_region(field)
    Z, B = edges_in_region(lat, field.eps, region, convention)
    # within each anchor, order edges by their geometric key so that relabelling E0 is invisible
    if convention == ANCHORED:
        nb = lat.n_edges
        order = (np.arange(len(Z)) // nb) * nb + np.tile(lat.canonical_order, len(Z) // nb if nb else 0)
    else:
        anchor_id = np.ravel_multi_index(tuple((Z - Z.min(axis=0)).T), tuple(Z.max(axis=0) - Z.min(axis=0) + 1)) if len(Z) else np.zeros(0, int)
        order = np.lexsort((lat.edge_keys[B], anchor_id))
    Z, B = Z[order], B[order]
    tail = field.node_index(Z, lat.tail_offset[B])
    head = field.node_index(Z + lat.head_shift[B], lat.head_offset[B])
    inv = 1.0 / (float(field.eps) * lat.lengths[B])
    return EdgeList(Z, B, tail, head, inv)


def default_region(field: Field) -> Region:
    if field.period is not None:
        return Region.box([0] * field.d, [field.eps * field.period] * field.d)
    raise ConfigInvalid("a region is required for non-periodic fields")


def discrete_gradient(field: Field, z, b: int) -> np.ndarray:
    """``(u(z + eps y_b) - u(z + eps x_b)) / (eps |y_b - x_b|)`` for the integer anchor ``z``."""
    lat = field.lattice
    z = np.asarray(z, dtype=np.int64).reshape(1, -1)
    t = field.node_index(z, np.array([lat.tail_offset[b]]))
    h = field.node_index(z + lat.head_shift[b], np.array([lat.head_offset[b]]))
    vals = field.values.reshape(-1, field.n)
    g = (vals[h[0]] - vals[t[0]]) / (float(field.eps) * lat.lengths[b])
    if field.F is not None:
        g = g + field.F @ lat.directions[b]
    return g


def gradients(field: Field, edges: EdgeList) -> np.ndarray:
    vals = field.values.reshape(-1, field.n)
    G = (vals[edges.head] - vals[edges.tail]) * edges.inv[:, None]
    if field.F is not None:
        G = G + field.lattice.directions[edges.B] @ field.F.T
    return G


# ---------------------------------------------------------------------------
# assembled system


@dataclass(eq=False)
class EnergySystem:
    """Energy as a function of the free unknowns ``x`` (shape ``(N, n)``).

    Edge gradients are ``(I x + c0) * inv + aff``: the node difference is formed
    first and scaled once, so adding a constant to every node value leaves them
    unchanged whenever the differences are exact.
    """

    potential: PotentialSpec
    I: sp.csr_matrix  # (T, N) signed incidence, entries +-1
    c0: np.ndarray  # (T, n) fixed-node part of the node differences
    inv: np.ndarray  # (T,) 1 / (eps |y_b - x_b|)
    aff: np.ndarray  # (T, n) affine part F e_b of periodic fields
    lam: np.ndarray  # (T,)
    scale: float
    free_nodes: np.ndarray  # flat node indices of the unknowns
    template: Field
    edges: EdgeList
    force_lin: np.ndarray | None = None  # (N, n) coefficient of x in the force functional
    force_const: float = 0.0

    def __post_init__(self):
        self.D = (sp.diags(self.inv) @ self.I).tocsr()
        self.Dt = self.D.T.tocsr()
        self.c = self.c0 * self.inv[:, None] + self.aff

    @property
    def n_unknowns(self) -> int:
        return len(self.free_nodes)

    @property
    def n(self) -> int:
        return self.c0.shape[1]

    def x0(self) -> np.ndarray:
        return self.template.values.reshape(-1, self.n)[self.free_nodes].copy()

    def grads(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.n)
        return (self.I @ x + self.c0) * self.inv[:, None] + self.aff

    def terms(self, x) -> np.ndarray:
        return self.scale * self.potential.eval(self.lam, self.grads(x))

    def force(self, x) -> float:
        if self.force_lin is None:
            return 0.0
        x = np.asarray(x, dtype=float).reshape(-1, self.n)
        return float(np.sum(self.force_lin * x)) + self.force_const

    def energy(self, x, exact: bool = False) -> float:
        """``E(x) - F(x)``; ``exact`` uses correctly rounded summation."""
        t = self.terms(x)
        if exact:
            e = math.fsum(t.tolist())
            if self.force_lin is not None:
                x = np.asarray(x, dtype=float).reshape(-1, self.n)
                e = math.fsum([e, -math.fsum((self.force_lin * x).ravel().tolist()), -self.force_const])
            return e
        return float(np.sum(t)) - self.force(x)

    def gradient(self, x) -> np.ndarray:
        """Gradient with respect to the unknowns, shape ``(N, n)``."""
        G = self.grads(x)
        g = self.scale * (self.Dt @ self.potential.grad(self.lam, G))
        if self.force_lin is not None:
            g = g - self.force_lin
        return g

    def value_and_gradient(self, x):
        G = self.grads(x)
        e = float(np.sum(self.scale * self.potential.eval(self.lam, G)))
        g = self.scale * (self.Dt @ self.potential.grad(self.lam, G))
        if self.force_lin is not None:
            e -= self.force(x)
            g = g - self.force_lin
        return e, g

    def field(self, x) -> Field:
        out = self.template.copy()
        vals = out.values.reshape(-1, self.n)
        vals[self.free_nodes] = np.asarray(x, dtype=float).reshape(-1, self.n)
        return out

    def hessian_quadratic(self) -> sp.csr_matrix:
        """``A`` with ``E = x^T A x + ...`` per component for the quadratic family (``A = s D^T diag(lam) D``)."""
        return (self.scale * (self.Dt @ sp.diags(self.lam) @ self.D)).tocsr()


def build_system(sample: WeightField, potential: PotentialSpec, field: Field, region: Region | None = None,
                 convention: str = ANCHORED, force=None, pin: bool = False) -> EnergySystem:
    """Reduce the energy of ``field`` on ``region`` to an :class:`EnergySystem`.

    ``force`` is a callable ``f(x)`` on positions or an array of nodal values
    shaped like ``field.values``; it enters as ``- eps^d sum_{x in A} f(x) u(x)``.
    ``pin`` fixes the first node (offset ``q_1`` of the first stored cell) of a
    periodic field, removing the translation invariance.
    """
    if region is None:
        region = default_region(field)
    edges = edge_list(field, region, convention)
    lat = field.lattice
    n = field.n
    free = field.free.reshape(-1).copy()
    if pin:
        free[0] = False
    free_nodes = np.flatnonzero(free)
    col = np.full(field.n_nodes, -1, dtype=np.int64)
    col[free_nodes] = np.arange(len(free_nodes))
    vals = field.values.reshape(-1, n)
    T = len(edges.B)
    ht, tt = col[edges.head], col[edges.tail]
    c0 = np.zeros((T, n))
    hfix, tfix = ht < 0, tt < 0
    c0[hfix] += vals[edges.head[hfix]]
    c0[tfix] -= vals[edges.tail[tfix]]
    aff = lat.directions[edges.B] @ field.F.T if field.F is not None else np.zeros((T, n))
    rows = np.concatenate([np.flatnonzero(~hfix), np.flatnonzero(~tfix)])
    cols = np.concatenate([ht[~hfix], tt[~tfix]])
    data = np.concatenate([np.ones((~hfix).sum()), -np.ones((~tfix).sum())])
    I = sp.csr_matrix((data, (rows, cols)), shape=(T, len(free_nodes)))
    I.sum_duplicates()
    lam = sample.weights(edges.Z, edges.B)
    scale = float(field.eps) ** lat.d
    sys = EnergySystem(potential, I, c0, edges.inv, aff, lam, scale, free_nodes, field, edges)
    if force is not None:
        fvals = _force_values(force, field)
        inA = region.contains(field.positions()).reshape(-1)
        fl = scale * fvals.reshape(-1, n) * inA[:, None]
        sys.force_lin = fl[free_nodes]
        fixed = np.flatnonzero(~free)
        sys.force_const = math.fsum((fl[fixed] * vals[fixed]).ravel().tolist())
    return sys


def _force_values(force, field: Field) -> np.ndarray:
    if callable(force):
        return sample_data(force, field.positions(), field.n)
    arr = np.asarray(force, dtype=float)
    if arr.ndim == 0 or arr.shape == (field.n,):
        return np.broadcast_to(arr, field.values.shape).copy()
    return arr.reshape(field.values.shape)


# ---------------------------------------------------------------------------
# public energy functionals


def assemble_energy(sample: WeightField, potential: PotentialSpec, field: Field, region: Region | None = None,
                    convention: str = ANCHORED) -> float:
    """``eps^d sum V_b(lambda; d_b u(z))`` over the edges counted on ``region``."""
    sys = build_system(sample, potential, field, region, convention)
    return sys.energy(sys.x0(), exact=True)


def energy_gradient(sample: WeightField, potential: PotentialSpec, field: Field, region: Region | None = None,
                    convention: str = ANCHORED) -> np.ndarray:
    """Gradient with respect to node values, shaped like ``field.values``; zero at fixed nodes."""
    sys = build_system(sample, potential, field, region, convention)
    g = np.zeros((field.n_nodes, field.n))
    g[sys.free_nodes] = sys.gradient(sys.x0())
    return g.reshape(field.values.shape)


def body_force_functional(force, field: Field, region: Region) -> float:
    """``eps^d sum_{x in eps L ∩ A} f(x) . u(x)``."""
    fvals = _force_values(force, field).reshape(-1, field.n)
    inA = region.contains(field.positions()).reshape(-1)
    u = field.nodal().reshape(-1, field.n)
    return float(field.eps) ** field.d * math.fsum((fvals[inA] * u[inA]).ravel().tolist())


def lq_norm(field: Field, q: float, region: Region | None = None, values=None) -> float:
    """Nodal quadrature ``(eps^d sum_{x in A} |u(x)|^q)^(1/q)``."""
    u = field.nodal() if values is None else np.asarray(values)
    u = u.reshape(-1, field.n)
    mask = np.ones(len(u), bool) if region is None else region.contains(field.positions()).reshape(-1)
    s = math.fsum((np.linalg.norm(u[mask], axis=-1) ** q).tolist())
    return (float(field.eps) ** field.d * s) ** (1.0 / q)
