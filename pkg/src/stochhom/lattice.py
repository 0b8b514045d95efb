"""Periodic multi-lattices, edge enumeration in boxes and the interaction range.

A lattice is the vertex set ``L = U_i (q_i + Z^d)`` with a finite generating
edge list ``E0``; every edge instance is ``z + b`` for an anchor ``z`` in
``Z^d`` and ``b`` in ``E0``.  Coordinates are kept as :class:`Fraction` so that
membership of nodes in grid-aligned boxes is decided in exact integer
arithmetic.
"""
from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .errors import BadOffset, DisconnectedNN, EmptyShrink, MisalignedRegion

_WINDOW = (-2, 3)


def as_fraction(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, str):
        return Fraction(v)
    if isinstance(v, int):
        return Fraction(v)
    return Fraction(v).limit_denominator(10**6)


def as_eps(eps) -> Fraction:
    """Normalise a scale parameter to a unit fraction ``1/m``."""
    if isinstance(eps, int) and eps > 1:
        # convenience: an integer m > 1 means eps = 1/m
        eps = Fraction(1, eps)
    eps = as_fraction(eps)
    if eps <= 0 or eps.numerator != 1:
        raise MisalignedRegion(f"eps must be a unit fraction 1/m, got {eps}")
    return eps


def _point(p, d=None) -> tuple[Fraction, ...]:
    pt = tuple(as_fraction(c) for c in p)
    if d is not None and len(pt) != d:
        raise BadOffset(f"point {p} has wrong dimension (expected {d})")
    return pt


@dataclass(frozen=True)
class EdgeOffset:
    """A generating edge ``b = [x_b, y_b]`` with ``x_b`` in the unit cell."""

    x: tuple[Fraction, ...]
    y: tuple[Fraction, ...]
    nn: bool = True

    @property
    def vector(self) -> np.ndarray:
        return np.array([float(b - a) for a, b in zip(self.x, self.y)])

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.vector))

    @property
    def direction(self) -> np.ndarray:
        v = self.vector
        return v / np.linalg.norm(v)


@dataclass(frozen=True)
class LatticeSpec:
    d: int
    n: int
    offsets: tuple[tuple[Fraction, ...], ...]
    edges: tuple[EdgeOffset, ...]
    name: str = field(default="custom", compare=False)

    @classmethod
    def build(cls, d, n, offsets, edges, name="custom") -> "LatticeSpec":
        """Build from plain numbers; ``edges`` holds ``(x, y)`` or ``(x, y, nn)``."""
        offs = tuple(_point(q, d) for q in offsets)
        es = []
        for e in edges:
            if isinstance(e, EdgeOffset):
                es.append(e)
                continue
            x, y, *rest = e
            es.append(EdgeOffset(_point(x, d), _point(y, d), bool(rest[0]) if rest else True))
        return cls(int(d), int(n), offs, tuple(es), name)

    # -- derived structure -------------------------------------------------

    @property
    def k(self) -> int:
        """Number of node offsets per unit cell."""
        return len(self.offsets)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def nn0_mask(self) -> np.ndarray:
        return np.array([e.nn for e in self.edges], dtype=bool)

    @cached_property
    def denom(self) -> int:
        dens = [c.denominator for q in self.offsets for c in q]
        dens += [c.denominator for e in self.edges for c in e.x + e.y]
        return math.lcm(*dens) if dens else 1

    @cached_property
    def offsets_int(self) -> np.ndarray:
        D = self.denom
        return np.array([[int(c * D) for c in q] for q in self.offsets], dtype=np.int64).reshape(self.k, self.d)

    @cached_property
    def _edge_topology(self):
        tails, heads, shifts = [], [], []
        offs = {q: i for i, q in enumerate(self.offsets)}
        for e in self.edges:
            if e.x not in offs:
                raise BadOffset(f"edge tail {tuple(map(str, e.x))} is not a node offset q_i")
            tails.append(offs[e.x])
            for j, q in enumerate(self.offsets):
                s = [yc - qc for yc, qc in zip(e.y, q)]
                if all(c.denominator == 1 for c in s):
                    heads.append(j)
                    shifts.append([int(c) for c in s])
                    break
            else:
                raise BadOffset(f"edge head {tuple(map(str, e.y))} is not a lattice node")
        return (
            np.array(tails, dtype=np.int64),
            np.array(heads, dtype=np.int64),
            np.array(shifts, dtype=np.int64).reshape(self.n_edges, self.d),
        )

    @property
    def tail_offset(self) -> np.ndarray:
        return self._edge_topology[0]

    @property
    def head_offset(self) -> np.ndarray:
        return self._edge_topology[1]

    @property
    def head_shift(self) -> np.ndarray:
        """Integer cell shift ``s_b`` with ``y_b = q_{head} + s_b``."""
        return self._edge_topology[2]

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([e.length for e in self.edges])

    @cached_property
    def directions(self) -> np.ndarray:
        return np.array([e.direction for e in self.edges]).reshape(self.n_edges, self.d)

    @cached_property
    def edge_keys(self) -> np.ndarray:
        """Rank of each edge in the geometric sort order of ``(x_b, y_b)``.

        Random weights are keyed by this rank rather than by list position, so
        re-listing ``E0`` in another order leaves every computed value unchanged.
        """
        order = sorted(range(self.n_edges), key=lambda b: (self.edges[b].x, self.edges[b].y))
        keys = np.empty(self.n_edges, dtype=np.int64)
        keys[order] = np.arange(self.n_edges)
        return keys

    @cached_property
    def canonical_order(self) -> np.ndarray:
        return np.argsort(self.edge_keys, kind="stable")

    @cached_property
    def max_shift(self) -> int:
        return int(np.abs(self.head_shift).max()) if self.n_edges else 0

    def is_hypercubic(self) -> bool:
        """True for ``(Z^d, B^d)``: one offset and exactly the edges ``[0, e_i]``."""
        if self.k != 1 or self.n_edges != self.d:
            return False
        got = sorted(tuple(s) for s in self.head_shift.tolist())
        want = sorted(tuple(int(i == j) for j in range(self.d)) for i in range(self.d))
        return got == want and all(all(c == 0 for c in e.x) for e in self.edges)

    def unit_edge_index(self, i: int) -> int:
        """Index of the edge ``[0, e_i]`` in ``E0``."""
        target = [int(i == j) for j in range(self.d)]
        for b, s in enumerate(self.head_shift.tolist()):
            if s == target and self.tail_offset[b] == 0 and self.head_offset[b] == 0:
                return b
        raise KeyError(i)

    # -- JSON --------------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "d": self.d,
            "n": self.n,
            "offsets": [[_num(c) for c in q] for q in self.offsets],
            "edges0": [
                {"x": [_num(c) for c in e.x], "y": [_num(c) for c in e.y], "nn": e.nn}
                for e in self.edges
            ],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text) -> "LatticeSpec":
        doc = json.loads(text) if isinstance(text, str) else dict(text)
        if "preset" in doc:
            return preset(doc["preset"], d=doc.get("d", 2), n=doc.get("n"))
        edges = [(e["x"], e["y"], e.get("nn", True)) for e in doc["edges0"]]
        return cls.build(doc["d"], doc.get("n", 1), doc["offsets"], edges, doc.get("name", "custom"))


def _num(c: Fraction):
    return int(c) if c.denominator == 1 else str(c)


def _unit(d, i, scale=1):
    return tuple(Fraction(scale) if j == i else Fraction(0) for j in range(d))


def preset(name: str, d: int = 2, n: int | None = None) -> LatticeSpec:
    """Named lattices: ``zd-nn``, ``zd-range2``, ``kagome``, ``zd-diag``."""
    zero = tuple(Fraction(0) for _ in range(d))
    if name == "zd-nn":
        edges = [EdgeOffset(zero, _unit(d, i)) for i in range(d)]
        return LatticeSpec(d, n or 1, (zero,), tuple(edges), name)
    if name == "zd-range2":
        edges = [EdgeOffset(zero, _unit(d, i)) for i in range(d)]
        edges += [EdgeOffset(zero, _unit(d, i, 2), nn=False) for i in range(d)]
        return LatticeSpec(d, n or 1, (zero,), tuple(edges), name)
    if name == "kagome":
        h = Fraction(1, 2)
        offsets = [(0, 0), (h, 0), (0, h)]
        edges = [
            ((0, 0), (h, 0)),
            ((h, 0), (1, 0)),
            ((0, 0), (0, h)),
            ((0, h), (0, 1)),
            ((h, 0), (0, h)),
            ((0, h), (-h, 1)),
        ]
        return LatticeSpec.build(2, n or 1, offsets, edges, name)
    if name == "zd-diag":
        vecs = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)]
        edges = [((0, 0), v) for v in vecs]
        return LatticeSpec.build(2, n or 2, [(0, 0)], edges, name)
    raise KeyError(f"unknown lattice preset {name!r}")


PRESETS = ("zd-nn", "zd-range2", "kagome", "zd-diag")


# ---------------------------------------------------------------------------
# validation and interaction range


def _window_nodes(spec: LatticeSpec, lo: int, hi: int):
    """All nodes ``(z, i)`` with ``z`` in ``[lo, hi)^d``."""
    return [(z, i) for z in itertools.product(range(lo, hi), repeat=spec.d) for i in range(spec.k)]


def _node_pos(spec: LatticeSpec, z, i) -> tuple[Fraction, ...]:
    return tuple(zc + qc for zc, qc in zip(z, spec.offsets[i]))


def _nn_instances(spec: LatticeSpec, z):
    """NN edge instances anchored at cell ``z`` as node pairs."""
    for b in np.flatnonzero(spec.nn0_mask):
        tail = (tuple(z), int(spec.tail_offset[b]))
        head = (tuple(int(a + s) for a, s in zip(z, spec.head_shift[b])), int(spec.head_offset[b]))
        yield tail, head


def _connected(nodes, edges) -> bool:
    if not nodes:
        return True
    adj = {v: [] for v in nodes}
    for a, b in edges:
        if a in adj and b in adj:
            adj[a].append(b)
            adj[b].append(a)
    start = next(iter(adj))
    seen = {start}
    todo = deque([start])
    while todo:
        v = todo.popleft()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                todo.append(w)
    return len(seen) == len(adj)


def validate_spec(spec: LatticeSpec) -> LatticeSpec:
    """Check offsets, edge endpoints and connectivity of the NN subgraph.

    Connectivity is tested by breadth-first search on the nodes with cells in
    ``[-2, 3)^d`` using every integer translate of ``NN0`` inside that window;
    edge orientation is ignored.
    """
    if spec.d < 2:
        raise BadOffset("dimension d must be at least 2")
    if spec.n < 1:
        raise BadOffset("codomain dimension n must be at least 1")
    if not spec.offsets or any(c != 0 for c in spec.offsets[0]):
        raise BadOffset("the first offset q_1 must be the origin")
    if len(set(spec.offsets)) != len(spec.offsets):
        raise BadOffset("node offsets q_i must be pairwise distinct")
    for q in spec.offsets:
        if len(q) != spec.d or any(not (0 <= c < 1) for c in q):
            raise BadOffset(f"offset {tuple(map(str, q))} is not in [0,1)^d")
    for e in spec.edges:
        if len(e.x) != spec.d or len(e.y) != spec.d:
            raise BadOffset("edge endpoints have wrong dimension")
        if e.x == e.y:
            raise BadOffset("degenerate edge with x_b == y_b")
    spec._edge_topology  # raises BadOffset on foreign endpoints
    if not spec.nn0_mask.any():
        raise DisconnectedNN("NN0 is empty")
    nodes = _window_nodes(spec, *_WINDOW)
    node_set = set(nodes)
    edges = []
    for z in itertools.product(range(_WINDOW[0] - spec.max_shift, _WINDOW[1]), repeat=spec.d):
        for a, b in _nn_instances(spec, z):
            if a in node_set and b in node_set:
                edges.append((a, b))
    if not _connected(nodes, edges):
        raise DisconnectedNN("the NN subgraph does not connect the window [-2,3)^d")
    return spec


def _check_property_a(spec: LatticeSpec, R: float, tol=1e-12) -> bool:
    r = R / 4 + tol
    reach = int(math.ceil(r)) + 1
    nodes = [
        v for v in _window_nodes(spec, -reach, reach + 1)
        if math.sqrt(sum(float(c) ** 2 for c in _node_pos(spec, *v))) <= r
    ]
    node_set = set(nodes)
    targets = [v for v in _window_nodes(spec, -1, 2) if all(0 <= c <= 1 for c in _node_pos(spec, *v))]
    if any(t not in node_set for t in targets):
        return False
    edges = []
    for z in itertools.product(range(-reach - spec.max_shift, reach + 1), repeat=spec.d):
        for a, b in _nn_instances(spec, z):
            if a in node_set and b in node_set:
                edges.append((a, b))
    adj_nodes = set(nodes)
    # only the component structure restricted to the targets matters
    comp = {}
    parent = {v: v for v in adj_nodes}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    comp = {find(t) for t in targets}
    return len(comp) <= 1


def compute_range(spec: LatticeSpec) -> float:
    """Smallest ``R`` with (a) NN edges inside the closed ball ``B_{R/4}(0)``
    connecting ``L ∩ [0,1]^d`` and (b) ``R >= max |y_b|``.

    The ball is taken closed so that the infimum is attained; candidates are
    ``4|x|`` over window nodes, ``|y_b|`` and ``4 sqrt(d)``.
    """
    ymax = max(math.sqrt(sum(float(c) ** 2 for c in e.y)) for e in spec.edges)
    floor = max(4 * math.sqrt(spec.d), ymax)
    cands = {4 * math.sqrt(spec.d), ymax}
    for v in _window_nodes(spec, *_WINDOW):
        cands.add(4 * math.sqrt(sum(float(c) ** 2 for c in _node_pos(spec, *v))))
    for R in sorted(c for c in cands if c >= floor - 1e-12):
        if _check_property_a(spec, R):
            return R
    # property (a) holds for large R because NN is connected; widen the search
    R = max(cands)
    while not _check_property_a(spec, R):
        R *= 1.5
    return R


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Region:
    """Axis-aligned box.  ``kind='halfopen'`` is ``[a, b)``, ``'open'`` is ``(a, b)``."""

    a: tuple
    b: tuple
    kind: str = "halfopen"

    def __post_init__(self):
        if len(self.a) != len(self.b) or any(x >= y for x, y in zip(self.a, self.b)):
            raise EmptyShrink(f"region [{self.a}, {self.b}) has no volume")

    @classmethod
    def box(cls, a, b) -> "Region":
        return cls(tuple(as_fraction(x) for x in a), tuple(as_fraction(x) for x in b))

    @classmethod
    def cube(cls, k, d, origin=None) -> "Region":
        o = origin if origin is not None else (0,) * d
        return cls.box(o, [oc + k for oc in o])

    @property
    def d(self) -> int:
        return len(self.a)

    @property
    def lo(self) -> np.ndarray:
        return np.array([float(x) for x in self.a])

    @property
    def hi(self) -> np.ndarray:
        return np.array([float(x) for x in self.b])

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    @property
    def sides(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.kind == "open":
            return np.all((pts > self.lo) & (pts < self.hi), axis=-1)
        return np.all((pts >= self.lo) & (pts < self.hi), axis=-1)

    def boundary_distance(self, pts) -> np.ndarray:
        """Distance to the boundary for points inside, 0 outside."""
        pts = np.asarray(pts, dtype=float)
        t = np.minimum(pts - self.lo, self.hi - pts).min(axis=-1)
        return np.maximum(t, 0.0)

    def translated(self, w) -> "Region":
        return Region(tuple(x + as_fraction(c) for x, c in zip(self.a, w)),
                      tuple(x + as_fraction(c) for x, c in zip(self.b, w)), self.kind)

    def scaled(self, t) -> "Region":
        t = as_fraction(t)
        return Region(tuple(x * t for x in self.a), tuple(x * t for x in self.b), self.kind)

    def grid_bounds(self, eps) -> tuple[np.ndarray, np.ndarray]:
        """Integer anchor range ``[lo, hi)`` of ``eps Z^d ∩ [a, b)``; corners must be aligned."""
        eps = as_eps(eps)
        m = eps.denominator
        lo, hi = [], []
        for x, y in zip(self.a, self.b):
            xm, ym = as_fraction(x) * m, as_fraction(y) * m
            if xm.denominator != 1 or ym.denominator != 1:
                raise MisalignedRegion(f"corner not on the eps={eps} grid")
            lo.append(int(xm))
            hi.append(int(ym))
        return np.array(lo, dtype=np.int64), np.array(hi, dtype=np.int64)

    def dyadic_split(self) -> list["Region"]:
        """The ``2^d`` congruent sub-boxes obtained by halving every side."""
        mids = [(x + y) / 2 for x, y in zip(self.a, self.b)]
        parts = []
        for corner in itertools.product((0, 1), repeat=self.d):
            a = tuple(self.a[i] if c == 0 else mids[i] for i, c in enumerate(corner))
            b = tuple(mids[i] if c == 0 else self.b[i] for i, c in enumerate(corner))
            parts.append(Region(a, b, self.kind))
        return parts


def shrink_region(region: Region, delta: float) -> Region:
    """``(A)_{-delta}``: points of ``A`` farther than ``delta`` from the complement (open box)."""
    if 2 * delta >= float(min(region.sides)):
        raise EmptyShrink(f"shrinking by {delta} empties the region")
    return Region(tuple(float(x) + delta for x in region.a), tuple(float(y) - delta for y in region.b), "open")


def grow_region(region: Region, delta: float) -> Region:
    """``(A)_delta``: points at distance less than ``delta`` from ``A`` (open box)."""
    return Region(tuple(float(x) - delta for x in region.a), tuple(float(y) + delta for y in region.b), "open")


# ---------------------------------------------------------------------------
# edge enumeration


ANCHORED = "anchored"
CONTAINED = "contained"


def _grid(lo: Sequence[int], hi: Sequence[int]) -> np.ndarray:
    axes = [np.arange(a, b, dtype=np.int64) for a, b in zip(lo, hi)]
    if any(len(ax) == 0 for ax in axes):
        return np.zeros((0, len(axes)), dtype=np.int64)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def edges_in_region(spec: LatticeSpec, eps, region: Region, convention: str = ANCHORED):
    """Edge instances ``z + eps*b`` counted by an energy on ``region``.

    ``anchored`` takes every anchor ``z`` in ``eps Z^d ∩ A`` with all ``b``;
    ``contained`` keeps only edges with both endpoints in ``A``.  Returns the
    integer anchors ``Z`` (cell indices, so the physical anchor is ``eps*Z``)
    and edge indices ``B``, ordered lexicographically in ``z`` then ``b``.
    """
    eps = as_eps(eps)
    lo, hi = region.grid_bounds(eps)
    anchors = _grid(lo, hi)
    nb = spec.n_edges
    Z = np.repeat(anchors, nb, axis=0)
    B = np.tile(np.arange(nb, dtype=np.int64), len(anchors))
    if convention == ANCHORED:
        return Z, B
    if convention != CONTAINED:
        raise ValueError(f"unknown convention {convention!r}")
    D = spec.denom
    m = eps.denominator
    a = np.array([int(as_fraction(x) * m * D) for x in region.a])
    b = np.array([int(as_fraction(x) * m * D) for x in region.b])
    tail = Z * D + spec.offsets_int[spec.tail_offset[B]]
    head = (Z + spec.head_shift[B]) * D + spec.offsets_int[spec.head_offset[B]]
    keep = np.all((tail >= a) & (tail < b) & (head >= a) & (head < b), axis=1)
    return Z[keep], B[keep]


def iter_edges(spec: LatticeSpec, eps, region: Region, convention: str = ANCHORED) -> Iterator[tuple[tuple[int, ...], int]]:
    Z, B = edges_in_region(spec, eps, region, convention)
    for z, b in zip(Z.tolist(), B.tolist()):
        yield tuple(z), b
