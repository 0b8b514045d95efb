"""Pair interaction families ``V(lambda; r)`` and their growth/convexity checks.

Every built-in family is linear in the weight ``lambda``.  Inputs are
vectorised: ``lam`` has shape ``(N,)`` and ``r`` shape ``(N, n)``.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigInvalid, EnvelopeViolated, NotConvex, NotScalar

P_POWER = "p_power"
QUADRATIC = "quadratic"
DOUBLE_WELL = "double_well"
VECTOR_WELL = "vector_well"
TABULATED = "tabulated"

FAMILIES = (P_POWER, QUADRATIC, DOUBLE_WELL, VECTOR_WELL, TABULATED)
_DEFAULT_P = {QUADRATIC: 2.0, DOUBLE_WELL: 4.0, VECTOR_WELL: 2.0}
_DEFAULT_C1 = {P_POWER: 1.0, QUADRATIC: 1.0, DOUBLE_WELL: 4.0, VECTOR_WELL: 2.0, TABULATED: 1.0}

_COMPANION_RE = re.compile(
    r"^\s*(?P<c>[0-9.eE+-]+)\s*\*\s*lambda\s*\*\s*(?:\|r\||r)\s*\^\s*(?P<k>[0-9.eE+-]+)\s*$"
)


@dataclass(frozen=True)
class Companion:
    """Convex companion ``f(lambda; r) = c * lambda * |r|^k`` with growth data ``(q, c2)``."""

    coef: float
    power: float
    q: float
    c2: float

    @classmethod
    def parse(cls, form: str, q: float, c2: float) -> "Companion":
        if form.strip() in ("0", ""):
            return cls(0.0, 2.0, float(q), float(c2))
        m = _COMPANION_RE.match(form)
        if not m:
            raise ConfigInvalid(f"companion form {form!r} is not '<c>*lambda*r^<k>'")
        return cls(float(m["c"]), float(m["k"]), float(q), float(c2))

    def __call__(self, lam, r):
        return self.coef * lam * np.abs(r) ** self.power

    @property
    def form(self) -> str:
        return f"{self.coef:g}*lambda*r^{self.power:g}"


@dataclass(frozen=True)
class PotentialSpec:
    family: str
    p: float = 2.0
    c1: float | None = None
    companion: Companion | None = None
    table_r: tuple = ()
    table_v: tuple = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigInvalid(f"unknown potential family {self.family!r}")
        if not self.p > 1:
            raise ConfigInvalid("Assumption 2.2: growth exponent p must exceed 1")
        if self.family in _DEFAULT_P and self.p != _DEFAULT_P[self.family]:
            raise ConfigInvalid(f"{self.family} has p = {_DEFAULT_P[self.family]:g}")
        if self.family == TABULATED:
            r = np.asarray(self.table_r, dtype=float)
            if len(r) < 2 or r[0] != 0 or np.any(np.diff(r) <= 0) or np.any(np.asarray(self.table_v) < 0):
                raise ConfigInvalid("tabulated potential needs increasing radii from 0 and values >= 0")
        if self.c1 is None:
            object.__setattr__(self, "c1", _DEFAULT_C1[self.family])
        object.__setattr__(self, "c1", float(self.c1))
        if not self.c1 > 0:
            raise ConfigInvalid("Assumption 2.2: the growth constant c1 must be positive")
        if self.companion is not None and not (1 < self.companion.q < self.p):
            raise ConfigInvalid("Assumption 2.3(B): companion exponent q must lie in (1, p)")

    # -- constructors --------------------------------------------------------

    @classmethod
    def quadratic(cls, c1=None):
        return cls(QUADRATIC, 2.0, c1)

    @classmethod
    def p_power(cls, p, c1=None):
        return cls(P_POWER, float(p), c1)

    @classmethod
    def double_well(cls, c1=None, companion: Companion | None | str = "default"):
        if companion == "default":
            companion = Companion(2.0, 2.0, 2.0, 2.0)
        return cls(DOUBLE_WELL, 4.0, c1, companion)

    @classmethod
    def vector_well(cls, c1=None):
        return cls(VECTOR_WELL, 2.0, c1)

    @classmethod
    def tabulated(cls, radii, values, p=2.0, c1=None):
        return cls(TABULATED, float(p), c1, None, tuple(map(float, radii)), tuple(map(float, values)))

    # -- metadata ------------------------------------------------------------

    @property
    def growth_c1(self) -> float:
        return self.c1

    @property
    def is_quadratic(self) -> bool:
        return self.family == QUADRATIC or (self.family == P_POWER and self.p == 2)

    @property
    def is_convex(self) -> bool:
        return self.family in (QUADRATIC, P_POWER)

    @property
    def differentiable(self) -> bool:
        return self.family != TABULATED

    # -- evaluation ----------------------------------------------------------

    def eval(self, lam, r) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        r = _as_rows(r)
        s = np.einsum("...i,...i->...", r, r)
        if self.family == QUADRATIC:
            return lam * s
        if self.family == P_POWER:
            return lam * s ** (self.p / 2)
        if self.family == DOUBLE_WELL:
            return lam * (s - 1.0) ** 2
        if self.family == VECTOR_WELL:
            return lam * (np.sqrt(s) - 1.0) ** 2
        return lam * self._table(np.sqrt(s))

    def grad(self, lam, r) -> np.ndarray:
        """Exact ``dV/dr``; the vector well returns the subgradient 0 at ``r = 0``."""
        lam = np.asarray(lam, dtype=float)
        r = _as_rows(r)
        s = np.einsum("...i,...i->...", r, r)
        if self.family == QUADRATIC:
            c = 2.0 * lam
        elif self.family == P_POWER:
            with np.errstate(divide="ignore", invalid="ignore"):
                c = np.where(s > 0, self.p * lam * s ** (self.p / 2 - 1), 0.0)
        elif self.family == DOUBLE_WELL:
            c = 4.0 * lam * (s - 1.0)
        elif self.family == VECTOR_WELL:
            a = np.sqrt(s)
            with np.errstate(divide="ignore", invalid="ignore"):
                c = np.where(a > 0, 2.0 * lam * (a - 1.0) / a, 0.0)
        else:
            raise ConfigInvalid("tabulated potentials have no analytic gradient")
        return c[..., None] * r

    def _table(self, a):
        tr = np.asarray(self.table_r)
        tv = np.asarray(self.table_v)
        inside = np.interp(a, tr, tv)
        # beyond the table continue with p-homogeneous growth from the last node
        with np.errstate(divide="ignore", invalid="ignore"):
            outside = tv[-1] * (a / tr[-1]) ** self.p
        return np.where(a <= tr[-1], inside, outside)

    # -- JSON ----------------------------------------------------------------

    def to_dict(self) -> dict:
        doc = {"family": self.family, "p": self.p, "c1": self.growth_c1}
        if self.companion is not None:
            doc["companion"] = {"form": self.companion.form, "q": self.companion.q, "c2": self.companion.c2}
        if self.family == TABULATED:
            doc["radii"] = list(self.table_r)
            doc["values"] = list(self.table_v)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text) -> "PotentialSpec":
        doc = json.loads(text) if isinstance(text, str) else dict(text)
        fam = doc["family"].replace("-", "_")
        comp = doc.get("companion")
        companion = Companion.parse(comp["form"], comp.get("q", 2.0), comp.get("c2", 1.0)) if comp else None
        if fam == TABULATED:
            return cls.tabulated(doc["radii"], doc["values"], doc.get("p", 2.0), doc.get("c1"))
        p = doc.get("p", _DEFAULT_P.get(fam, 2.0))
        return cls(fam, float(p), doc.get("c1"), companion)


def _as_rows(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.ndim == 0:
        r = r.reshape(1)
    return r


# ---------------------------------------------------------------------------
# checks


@dataclass
class EnvelopeReport:
    c1: float
    tightest_c1: float
    lower_ok: bool
    upper_ok: bool
    n_samples: int

    @property
    def ok(self) -> bool:
        return self.lower_ok and self.upper_ok


def _envelope_holds(V, lam, rp, c1):
    lower = lam * (rp / c1 - c1) <= V * (1 + 1e-12) + 1e-300
    upper = V <= c1 * (1 + lam * (rp + 1)) * (1 + 1e-12)
    return lower, upper


def growth_envelope_check(spec: PotentialSpec, lam, r_samples, c1: float | None = None, raise_on_fail=True) -> EnvelopeReport:
    """Check ``lam(|r|^p/c1 - c1) <= V <= c1(1 + lam(|r|^p + 1))`` on the samples."""
    r = _as_rows(r_samples)
    if r.ndim == 1:
        r = r[:, None]
    lam = np.broadcast_to(np.asarray(lam, dtype=float), r.shape[:1])
    V = spec.eval(lam, r)
    rp = np.linalg.norm(r, axis=-1) ** spec.p
    c1 = spec.growth_c1 if c1 is None else float(c1)
    lower, upper = _envelope_holds(V, lam, rp, c1)

    def good(c):
        lo, up = _envelope_holds(V, lam, rp, c)
        return bool(lo.all() and up.all())

    hi = max(c1, 1.0)
    while not good(hi) and hi < 1e12:
        hi *= 2
    lo = 1e-12
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if good(mid):
            hi = mid
        else:
            lo = mid
        if hi / lo < 1 + 1e-12:
            break
    rep = EnvelopeReport(c1, hi, bool(lower.all()), bool(upper.all()), len(r))
    if raise_on_fail and not rep.ok:
        # report the violation closest to the origin
        idx = np.flatnonzero(~(lower & upper))
        bad = idx[np.argmin(np.linalg.norm(r[idx], axis=-1))]
        raise EnvelopeViolated(
            f"growth envelope fails with c1={c1:g} at r={r[bad].tolist()} (tightest c1 {hi:.6g})",
            witness=r[bad].copy(),
        )
    return rep


@dataclass
class ConvexityReport:
    min_curvature: float
    companion_growth_ok: bool
    n_points: int


def convex_companion_check(spec: PotentialSpec, lam: float, r_grid, companion: Companion | None | str = "spec",
                           tol: float = 1e-9, n: int = 1) -> ConvexityReport:
    """Second divided differences of ``V + f`` on a sorted grid must be >= -tol."""
    require_scalar(spec, n)
    if companion == "spec":
        companion = spec.companion
    r = np.sort(np.asarray(r_grid, dtype=float).reshape(-1))
    g = spec.eval(np.full(len(r), lam), r[:, None])
    if companion is not None:
        g = g + companion(lam, r)
    s = np.diff(g) / np.diff(r)
    dd = np.diff(s)
    scale = 1.0 + np.maximum(np.abs(s[:-1]), np.abs(s[1:]))
    bad = np.flatnonzero(dd < -tol * scale)
    if bad.size:
        i = bad[np.argmin(dd[bad])]
        raise NotConvex(
            f"V + f not convex on ({r[i]:.6g}, {r[i+1]:.6g}, {r[i+2]:.6g})",
            witness=(r[i], r[i + 1], r[i + 2]),
        )
    growth_ok = True
    if companion is not None:
        f = companion(lam, r)
        growth_ok = bool(np.all(f <= companion.c2 * (1 + lam * (np.abs(r) ** companion.q + 1)) * (1 + 1e-12)))
    return ConvexityReport(float(dd.min() if dd.size else 0.0), growth_ok, len(r))


def require_scalar(spec: PotentialSpec, n: int):
    if n != 1:
        raise NotScalar(f"{spec.family} check needs n = 1, got n = {n}")
