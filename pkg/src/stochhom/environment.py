"""Stationary random edge weights generated by counter-based hashing.

A weight ``lambda_b(tau_z omega)`` is a pure function of ``(seed, sample,
z, b)``: the tuple is hashed with a SplitMix64 finalizer and the resulting
uniform variate is pushed through the inverse CDF of the edge distribution.
Nothing is stored, so any sub-window of the infinite field can be evaluated
in any order or in parallel and always gives the same numbers.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtri

from .errors import ConfigInvalid, DivergentMoment, NotHypercubic
from .lattice import LatticeSpec, Region, as_eps, edges_in_region

IID = "iid"
LAYERED = "layered-e1"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(h: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = h + _GOLDEN
        h = (h ^ (h >> np.uint64(30))) * _M1
        h = (h ^ (h >> np.uint64(27))) * _M2
        return h ^ (h >> np.uint64(31))


def hash_uniform(*parts) -> np.ndarray:
    """Uniform variates in (0, 1) from a broadcastable tuple of integer arrays."""
    parts = [np.asarray(p).astype(np.int64).view(np.uint64) if np.asarray(p).dtype != np.uint64
             else np.asarray(p) for p in parts]
    shape = np.broadcast_shapes(*[p.shape for p in parts])
    h = np.zeros(shape, dtype=np.uint64)
    for p in parts:
        h = _mix(h ^ p)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


# ---------------------------------------------------------------------------
# distributions


@dataclass(frozen=True)
class Distribution:
    """Law of one edge weight.  ``kind`` is one of

    * ``constant(c)``
    * ``two_point(v1, v2, prob)`` with ``P(lambda = v2) = prob``
    * ``lognormal(mu, sigma)``: ``log lambda ~ N(mu, sigma^2)``
    * ``pareto_inverse(a, scale)``: ``lambda = U^(1/a) / scale`` so ``1/lambda`` is Pareto(a)
    * ``uniform(lo, hi)``
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        k, p = self.kind, self.params
        ok = {
            "constant": lambda: len(p) == 1 and p[0] > 0,
            "two_point": lambda: len(p) == 3 and p[0] > 0 and p[1] > 0 and 0 <= p[2] <= 1,
            "lognormal": lambda: len(p) == 2 and p[1] >= 0,
            "pareto_inverse": lambda: len(p) == 2 and p[0] > 0 and p[1] > 0,
            "uniform": lambda: len(p) == 2 and 0 < p[0] <= p[1],
        }
        if k not in ok:
            raise ConfigInvalid(f"unknown distribution {k!r}")
        if not ok[k]():
            raise ConfigInvalid(f"Assumption 2.2: {k}{p} is not a law on (0, inf)")

    @classmethod
    def constant(cls, c):
        return cls("constant", (float(c),))

    @classmethod
    def two_point(cls, v1, v2, prob=0.5):
        return cls("two_point", (float(v1), float(v2), float(prob)))

    @classmethod
    def lognormal(cls, mu=0.0, sigma=1.0):
        return cls("lognormal", (float(mu), float(sigma)))

    @classmethod
    def pareto_inverse(cls, a, scale=1.0):
        return cls("pareto_inverse", (float(a), float(scale)))

    @classmethod
    def uniform(cls, lo, hi):
        return cls("uniform", (float(lo), float(hi)))

    def ppf(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        k, p = self.kind, self.params
        if k == "constant":
            return np.full(u.shape, p[0])
        if k == "two_point":
            return np.where(u < p[2], p[1], p[0])
        if k == "lognormal":
            return np.exp(p[0] + p[1] * ndtri(u))
        if k == "pareto_inverse":
            return u ** (1.0 / p[0]) / p[1]
        return p[0] + (p[1] - p[0]) * u

    def moment(self, gamma: float) -> float | None:
        """Closed form of ``E[lambda^gamma]`` where one is used, else ``None``.

        Returns ``inf`` when the moment diverges.
        """
        k, p = self.kind, self.params
        if k == "constant":
            return p[0] ** gamma
        if k == "two_point":
            return (1 - p[2]) * p[0] ** gamma + p[2] * p[1] ** gamma
        if k == "uniform":
            lo, hi = p
            if lo == hi:
                return lo**gamma
            if gamma == -1:
                return math.log(hi / lo) / (hi - lo)
            return (hi ** (gamma + 1) - lo ** (gamma + 1)) / ((gamma + 1) * (hi - lo))
        if k == "pareto_inverse" and gamma <= -p[0]:
            return math.inf
        return None

    def to_dict(self) -> dict:
        names = {
            "constant": ("c",),
            "two_point": ("v1", "v2", "prob"),
            "lognormal": ("mu", "sigma"),
            "pareto_inverse": ("a", "scale"),
            "uniform": ("lo", "hi"),
        }[self.kind]
        return {"kind": self.kind, **dict(zip(names, self.params))}

    @classmethod
    def from_dict(cls, doc: dict) -> "Distribution":
        kind = doc["kind"].replace("-", "_")
        if kind == "constant":
            return cls.constant(doc.get("c", doc.get("value", 1.0)))
        if kind == "two_point":
            return cls.two_point(doc["v1"], doc["v2"], doc.get("prob", 0.5))
        if kind == "lognormal":
            return cls.lognormal(doc.get("mu", 0.0), doc.get("sigma", 1.0))
        if kind == "pareto_inverse":
            return cls.pareto_inverse(doc["a"], doc.get("scale", 1.0))
        if kind == "uniform":
            return cls.uniform(doc["lo"], doc["hi"])
        raise ConfigInvalid(f"unknown distribution {kind!r}")


# ---------------------------------------------------------------------------
# environments


@dataclass(frozen=True)
class EnvironmentSpec:
    """Edge laws (one shared or one per entry of ``E0``), correlation mode and seed."""

    dist: Distribution | tuple[Distribution, ...]
    mode: str = IID
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (IID, LAYERED):
            raise ConfigInvalid(f"unknown correlation mode {self.mode!r}")
        if self.mode == LAYERED and isinstance(self.dist, tuple) and len(set(self.dist)) > 1:
            raise ConfigInvalid("layered weights are shared across edges; give one distribution")

    def law(self, b: int) -> Distribution:
        return self.dist[b] if isinstance(self.dist, tuple) else self.dist

    def laws(self, n_edges: int) -> list[Distribution]:
        if isinstance(self.dist, tuple) and len(self.dist) != n_edges:
            raise ConfigInvalid(f"expected {n_edges} edge distributions, got {len(self.dist)}")
        return [self.law(b) for b in range(n_edges)]

    def sample(self, lattice: LatticeSpec, s: int = 0) -> "EnvironmentSample":
        return EnvironmentSample(self, lattice, int(s))

    def with_seed(self, seed: int) -> "EnvironmentSpec":
        return replace(self, seed=int(seed))

    def to_json(self) -> str:
        dist = [d.to_dict() for d in self.dist] if isinstance(self.dist, tuple) else self.dist.to_dict()
        return json.dumps({"dist": dist, "mode": self.mode, "seed": self.seed})

    @classmethod
    def from_json(cls, text) -> "EnvironmentSpec":
        doc = json.loads(text) if isinstance(text, str) else dict(text)
        d = doc["dist"]
        dist = tuple(Distribution.from_dict(x) for x in d) if isinstance(d, list) else Distribution.from_dict(d)
        return cls(dist, doc.get("mode", IID), int(doc.get("seed", 0)))


class WeightField:
    """Common interface: ``weights(Z, B)`` for integer anchors and edge indices."""

    lattice: LatticeSpec

    def weights(self, Z, B) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def weight(self, z, b: int) -> float:
        return float(self.weights(np.asarray([z]), np.asarray([b]))[0])

    def shifted(self, w) -> "WeightField":
        return _Shifted(self, np.asarray(w, dtype=np.int64))

    def scaled(self, c: float) -> "WeightField":
        """The weights multiplied by the constant ``c > 0``."""
        if not c > 0:
            raise ConfigInvalid("weight scale must be positive")
        return _Scaled(self, float(c))


@dataclass(frozen=True)
class _Shifted(WeightField):
    base: WeightField
    w: np.ndarray

    @property
    def lattice(self):
        return self.base.lattice

    def weights(self, Z, B):
        return self.base.weights(np.asarray(Z) + self.w, B)


@dataclass(frozen=True)
class _Scaled(WeightField):
    base: WeightField
    c: float

    @property
    def lattice(self):
        return self.base.lattice

    def weights(self, Z, B):
        return self.c * self.base.weights(Z, B)


@dataclass(frozen=True)
class EnvironmentSample(WeightField):
    spec: EnvironmentSpec
    lattice: LatticeSpec
    s: int = 0

    def __post_init__(self):
        if self.spec.mode == LAYERED and not self.lattice.is_hypercubic():
            raise NotHypercubic("layered weights need the hyper-cubic lattice zd-nn")
        self.spec.laws(self.lattice.n_edges)

    def uniforms(self, Z, B) -> np.ndarray:
        Z = np.asarray(Z, dtype=np.int64).reshape(-1, self.lattice.d)
        B = np.asarray(B, dtype=np.int64).reshape(-1)
        seed, s = np.int64(self.spec.seed), np.int64(self.s)
        if self.spec.mode == LAYERED:
            return hash_uniform(seed, s, Z[:, 0])
        keys = self.lattice.edge_keys[B]
        return hash_uniform(seed, s, *Z.T, keys)

    def weights(self, Z, B) -> np.ndarray:
        B = np.asarray(B, dtype=np.int64).reshape(-1)
        u = self.uniforms(Z, B)
        if not isinstance(self.spec.dist, tuple):
            return self.spec.dist.ppf(u)
        out = np.empty_like(u)
        for b in np.unique(B):
            sel = B == b
            out[sel] = self.spec.law(int(b)).ppf(u[sel])
        return out


@dataclass(frozen=True, eq=False)
class TabulatedSample(WeightField):
    """Deterministic periodic weights ``table[z mod period, b]``.

    ``table`` has shape ``period + (n_edges,)``.  Used for fixtures such as a
    layered medium with prescribed ``omega(0), ..., omega(k-1)``.
    """

    lattice: LatticeSpec
    table: np.ndarray

    @classmethod
    def layered(cls, lattice: LatticeSpec, omega: Sequence[float]) -> "TabulatedSample":
        if not lattice.is_hypercubic():
            raise NotHypercubic("layered weights need the hyper-cubic lattice zd-nn")
        om = np.asarray(omega, dtype=float)
        shape = (len(om),) + (1,) * (lattice.d - 1) + (lattice.n_edges,)
        tab = np.broadcast_to(om.reshape((len(om),) + (1,) * lattice.d), shape).copy()
        return cls(lattice, tab)

    @classmethod
    def constant(cls, lattice: LatticeSpec, c: float = 1.0) -> "TabulatedSample":
        return cls(lattice, np.full((1,) * lattice.d + (lattice.n_edges,), float(c)))

    @classmethod
    def from_sample(cls, sample: WeightField, period: Sequence[int]) -> "TabulatedSample":
        """Freeze the window ``[0, period)`` of another field as a periodic table."""
        lat = sample.lattice
        Z, B = edges_in_region(lat, 1, Region.box([0] * lat.d, list(period)))
        tab = sample.weights(Z, B).reshape(tuple(period) + (lat.n_edges,))
        return cls(lat, tab)

    @property
    def period(self) -> tuple[int, ...]:
        return self.table.shape[:-1]

    def weights(self, Z, B):
        Z = np.asarray(Z, dtype=np.int64).reshape(-1, self.lattice.d)
        B = np.asarray(B, dtype=np.int64).reshape(-1)
        idx = tuple((Z % np.asarray(self.period)).T) + (B,)
        return self.table[idx].astype(float)


# ---------------------------------------------------------------------------
# moments and averages


@dataclass
class MomentRow:
    b: int
    alpha_moment: float
    alpha_se: float
    beta_moment: float
    beta_se: float
    divergent: bool
    n: int


@dataclass
class MomentReport:
    alpha: float
    beta: float
    p: float
    d: int
    rows: list[MomentRow] = field(default_factory=list)

    @property
    def assumption_moments(self) -> bool:
        """``1 <= alpha`` and ``beta >= 1/(p-1)`` with finite moments."""
        ok = self.alpha >= 1 and self.beta >= 1 / (self.p - 1)
        return ok and not any(r.divergent for r in self.rows) and all(
            math.isfinite(r.alpha_moment) for r in self.rows
        )

    @property
    def assumption_vectorial(self) -> bool:
        """``alpha > 1`` and ``1/alpha + 1/beta <= p/d``."""
        return self.alpha > 1 and 1 / self.alpha + 1 / self.beta <= self.p / self.d + 1e-15

    def mean_lambda(self, b: int) -> float:
        return self.rows[b].alpha_moment

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["b_index", "alpha_moment", "alpha_se", "beta_moment", "beta_se", "divergent_flag"])
        for r in self.rows:
            w.writerow([r.b, repr(r.alpha_moment), repr(r.alpha_se), repr(r.beta_moment), repr(r.beta_se), int(r.divergent)])
        return buf.getvalue()


def _mc_moment(dist: Distribution, gamma: float, u: np.ndarray) -> tuple[float, float]:
    x = dist.ppf(u) ** gamma
    se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.nan
    return float(x.mean()), se


def estimate_moments(spec: EnvironmentSpec, lattice: LatticeSpec, alpha: float, beta: float,
                     p: float, d: int | None = None, n_samples: int = 100_000) -> MomentReport:
    """``E[lambda_b^alpha]`` for every ``b`` and ``E[lambda_b^-beta]`` for NN edges.

    Closed forms are used for constant, two-point and uniform laws; other laws
    are estimated from ``n_samples`` hashed draws of the sample's own generator.
    """
    if n_samples < 1:
        raise ConfigInvalid("n_samples must be positive")
    d = lattice.d if d is None else d
    report = MomentReport(alpha, beta, p, d)
    nn = lattice.nn0_mask
    # independent draws: one site per sample index
    s_idx = np.arange(n_samples, dtype=np.int64)
    for b, dist in enumerate(spec.laws(lattice.n_edges)):
        u = hash_uniform(np.int64(spec.seed), s_idx, np.int64(-1), np.int64(lattice.edge_keys[b]))
        divergent = False
        res = []
        for gamma, want in ((alpha, True), (-beta, bool(nn[b]))):
            if not want:
                res.append((math.nan, math.nan))
                continue
            exact = dist.moment(gamma)
            if exact is not None and math.isinf(exact):
                warnings.warn(f"E[lambda^{gamma:g}] diverges for edge {b} ({dist.kind}{dist.params})", DivergentMoment)
                divergent = True
                res.append((math.inf, math.nan))
            elif exact is not None and dist.kind in ("constant", "two_point", "uniform"):
                res.append((float(exact), 0.0))
            else:
                res.append(_mc_moment(dist, gamma, u))
        report.rows.append(MomentRow(b, res[0][0], res[0][1], res[1][0], res[1][1], divergent, n_samples))
    return report


def birkhoff_average(sample: WeightField, f: Callable[[np.ndarray], np.ndarray], region: Region,
                     eps_schedule: Sequence, b: int = 0) -> list[float]:
    """``eps^d sum_{z in A ∩ eps Z^d} f(lambda_b(tau_{z/eps} omega))`` for each eps."""
    out = []
    lat = sample.lattice
    for eps in eps_schedule:
        eps = as_eps(eps)
        lo, hi = region.grid_bounds(eps)
        Z, _ = edges_in_region(lat, eps, region)
        Z = Z[:: lat.n_edges]
        vals = f(sample.weights(Z, np.full(len(Z), b)))
        out.append(math.fsum(vals.tolist()) * float(eps) ** lat.d)
    return out
