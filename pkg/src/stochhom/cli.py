"""Command-line entry point.

One JSON config per run, with ``--seed``, ``--samples`` and ``--out-dir``
overrides.  Every command writes ``<command>.csv`` and ``<command>.json`` to
the output directory.  CSV files start with a comment line carrying the schema
version and the SHA-256 of the effective config, and all writes are atomic.
Exit codes: 0 success, 2 config error, 3 numerical failure, 4 property failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import warnings
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .energy import Field, affine, sample_data
from .environment import EnvironmentSpec, TabulatedSample, estimate_moments
from .errors import ConfigInvalid, DivergentMoment, NumericalFailure, PropertyViolation, StochHomError
from .gluing import GlueParams, glue_cutoff, glue_truncate, truncation_factors
from .homogenize import estimate_W0, extract_tensor, gamma_gap_experiment, growth_bounds_check, whom_k
from .inequalities import (
    PoincareReport, _anchors_in, check_exponents, iid_mu_many, mu_moment_estimate, poincare_check,
)
from .lattice import LatticeSpec, Region, as_eps, preset
from .potentials import PotentialSpec
from .solver import SolverConfig

SCHEMA_VERSION = 1
COMMANDS = ("cell", "homogenize", "tensor", "layered-verify", "dirichlet", "poincare", "mu", "glue-demo", "moments")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PROPERTY = 0, 2, 3, 4

log = logging.getLogger("stochhom")

_COMMON = {"lattice", "environment", "potential", "exponents", "solver", "seed", "samples"}
_KEYS = {
    "cell": {"F", "k"},
    "homogenize": {"F", "k_schedule", "growth_check", "moment_samples"},
    "tensor": {"k"},
    "layered-verify": {"k", "omega", "F", "tol"},
    "dirichlet": {"g", "f", "region", "eps_schedule", "tensor_k", "tensor_samples"},
    "poincare": {"Q", "eps_schedule", "C", "amplitude"},
    "mu": {"window", "direction", "moment_samples"},
    "glue-demo": {"eps", "F", "region", "delta", "m", "s", "M", "amplitude"},
    "moments": {"moment_samples"},
}
_SOLVER_KEYS = {"method", "tol", "max_iter", "n_starts", "amplitude", "backtrack", "armijo", "memory", "grid_points",
                "grid_halfwidth", "trace"}


# ---------------------------------------------------------------------------
# config parsing and validation


def _num(x, what):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigInvalid(f"{what} must be a number, got {x!r}")
    return float(x)


def _int(x, what, lo=None):
    if isinstance(x, bool) or not isinstance(x, int):
        raise ConfigInvalid(f"{what} must be an integer, got {x!r}")
    if lo is not None and x < lo:
        raise ConfigInvalid(f"{what} must be at least {lo}, got {x}")
    return x


def _lattice(doc) -> LatticeSpec:
    if doc is None:
        return preset("zd-nn")
    if isinstance(doc, str):
        return preset(doc)
    if isinstance(doc, dict):
        return LatticeSpec.from_json(doc)
    raise ConfigInvalid("lattice must be a preset name or an object")


def _environment(doc, seed) -> EnvironmentSpec:
    if not isinstance(doc, dict) or "dist" not in doc:
        raise ConfigInvalid("environment must be an object with a 'dist' entry")
    try:
        env = EnvironmentSpec.from_json(doc)
    except KeyError as exc:
        raise ConfigInvalid(f"environment is missing the field {exc}") from None
    return env.with_seed(seed)


def _potential(doc) -> PotentialSpec:
    if doc is None:
        return PotentialSpec("quadratic", 2.0)
    if not isinstance(doc, dict) or "family" not in doc:
        raise ConfigInvalid("potential must be an object with a 'family' entry")
    try:
        return PotentialSpec.from_json(doc)
    except KeyError as exc:
        raise ConfigInvalid(f"potential is missing the field {exc}") from None


def _matrix(F, lat: LatticeSpec) -> np.ndarray:
    """``F`` as an ``(n, d)`` matrix; ``"e1"`` and friends name unit rows."""
    if isinstance(F, str):
        if not (F.startswith("e") and F[1:].isdigit() and 1 <= int(F[1:]) <= lat.d):
            raise ConfigInvalid(f"unknown matrix name {F!r}")
        out = np.zeros((lat.n, lat.d))
        out[:, int(F[1:]) - 1] = 1.0
        return out
    arr = np.asarray(F, dtype=float)
    if arr.size != lat.n * lat.d:
        raise ConfigInvalid(f"F must have {lat.n * lat.d} entries, got {arr.size}")
    return arr.reshape(lat.n, lat.d)


def _region(doc, d) -> Region:
    if doc is None:
        return Region.cube(1, d)
    if not isinstance(doc, dict) or "lo" not in doc or "hi" not in doc:
        raise ConfigInvalid("a region needs 'lo' and 'hi'")
    lo = [Fraction(str(x)) for x in doc["lo"]]
    hi = [Fraction(str(x)) for x in doc["hi"]]
    if len(lo) != d or len(hi) != d or any(a >= b for a, b in zip(lo, hi)):
        raise ConfigInvalid("region bounds must be d-vectors with lo < hi")
    return Region.box(lo, hi)


def _eps_list(doc, default):
    vals = default if doc is None else doc
    if not isinstance(vals, list) or not vals:
        raise ConfigInvalid("eps_schedule must be a non-empty list")
    return [as_eps(Fraction(v) if isinstance(v, str) else v) for v in vals]


def _exponents(cfg, potential: PotentialSpec, d: int) -> dict:
    ex = dict(cfg.get("exponents") or {})
    unknown = set(ex) - {"p", "q", "alpha", "beta", "gamma"}
    if unknown:
        raise ConfigInvalid(f"unknown exponent fields {sorted(unknown)}")
    p = _num(ex.get("p", potential.p), "p")
    if "p" in ex and abs(p - potential.p) > 0:
        raise ConfigInvalid(f"Assumption 2.2: exponent p = {p:g} differs from the potential's growth exponent {potential.p:g}")
    out = {"p": p}
    for key in ("q", "alpha", "beta", "gamma"):
        if key in ex:
            v = ex[key]
            out[key] = math.inf if v in ("inf", "infinity") else _num(v, key)
    out.setdefault("alpha", 1.0)
    out.setdefault("beta", 1.0 / (p - 1) if p > 1 else math.inf)
    return out


def validate_assumptions(ex: dict, potential: PotentialSpec, env: EnvironmentSpec, lat: LatticeSpec):
    """Exponent and moment relations required before solving; the message names the assumption."""
    p, alpha, beta = ex["p"], ex["alpha"], ex["beta"]
    d = lat.d
    if not 1 < p < math.inf:
        raise ConfigInvalid(f"Assumption 2.2: 1 < p < inf is violated (p = {p:g})")
    if alpha < 1:
        raise ConfigInvalid(f"Assumption 2.2: alpha >= 1 is violated (alpha = {alpha:g})")
    if beta < 1 / (p - 1):
        raise ConfigInvalid(f"Assumption 2.2: beta >= 1/(p-1) is violated (beta = {beta:g}, 1/(p-1) = {1 / (p - 1):g})")
    for b, law in enumerate(env.laws(lat.n_edges)):
        for g, name in ((alpha, "E[lambda^alpha]"), (-beta, "E[lambda^-beta]")):
            if math.isinf(g):
                continue
            m = law.moment(g)
            if m is not None and math.isinf(m):
                raise ConfigInvalid(f"Assumption 2.2 (moment condition): {name} is infinite for edge {b} ({law.kind})")
    vectorial = alpha > 1 and 1 / alpha + 1 / beta <= p / d + 1e-15
    if vectorial:
        return
    scalar = lat.n == 1 and (potential.is_convex or potential.companion is not None)
    if scalar:
        return
    if lat.n != 1:
        if alpha <= 1:
            raise ConfigInvalid(f"Assumption 2.3(A): alpha > 1 is violated (alpha = {alpha:g})")
        raise ConfigInvalid(
            f"Assumption 2.3(A): 1/α + 1/β > p/d ({1 / alpha + 1 / beta:.6g} > {p / d:.6g})")
    raise ConfigInvalid(
        "Assumption 2.3: neither (A) 1/α + 1/β <= p/d with α > 1 nor (B) a convex companion for the nonconvex "
        f"potential {potential.family!r} holds")


def _solver(cfg, seed) -> SolverConfig:
    doc = dict(cfg.get("solver") or {})
    unknown = set(doc) - _SOLVER_KEYS
    if unknown:
        raise ConfigInvalid(f"unknown solver fields {sorted(unknown)}")
    doc.pop("trace", None)
    return SolverConfig(seed=seed, **doc)


def effective_config(cfg: dict, command: str, seed=None, samples=None) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigInvalid("the config must be a JSON object")
    unknown = set(cfg) - _COMMON - _KEYS[command]
    if unknown:
        raise ConfigInvalid(f"unknown config fields for {command}: {sorted(unknown)}")
    out = json.loads(json.dumps(cfg))
    if seed is not None:
        out["seed"] = seed
    if samples is not None:
        out["samples"] = samples
    env_seed = (out.get("environment") or {}).get("seed", 0) if isinstance(out.get("environment"), dict) else 0
    out["seed"] = _int(out.get("seed", env_seed), "seed")
    out["samples"] = _int(out.get("samples", 1), "samples", 1)
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ---------------------------------------------------------------------------
# output


def atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _r(x) -> str:
    return repr(float(x))


def _fl(F) -> str:
    return " ".join(_r(x) for x in np.ravel(F))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# ---------------------------------------------------------------------------
# commands: each returns (csv text, summary dict, ok flag)


class Context:
    def __init__(self, cfg: dict, command: str, threads: int):
        self.cfg = cfg
        self.command = command
        self.threads = threads
        self.seed = cfg["seed"]
        self.samples = cfg["samples"]
        self.lattice = _lattice(cfg.get("lattice"))
        self.potential = _potential(cfg.get("potential"))
        self.solver = _solver(cfg, self.seed)
        self._env = cfg.get("environment")
        self.ex = _exponents(cfg, self.potential, self.lattice.d)

    @property
    def env(self) -> EnvironmentSpec:
        if self._env is None:
            raise ConfigInvalid(f"{self.command} needs an 'environment'")
        return _environment(self._env, self.seed)

    def check(self):
        validate_assumptions(self.ex, self.potential, self.env, self.lattice)


def cmd_cell(ctx: Context):
    ctx.check()
    F = _matrix(ctx.cfg.get("F", "e1"), ctx.lattice)
    k = _int(ctx.cfg.get("k", 4), "k", 1)
    env = ctx.env
    rows = []
    for s in range(ctx.samples):
        res = whom_k(env.sample(ctx.lattice, s), ctx.potential, F, k, ctx.solver)
        rows.append([_fl(F), k, s, _r(res.value), res.solve.iterations, int(res.solve.converged)])
    vals = [float(r[3]) for r in rows]
    summary = {"F": F, "k": k, "mean": math.fsum(vals) / len(vals), "samples": ctx.samples}
    return _csv(["F_flat", "k", "sample", "value", "iterations", "converged"], rows), summary, True


def cmd_homogenize(ctx: Context):
    ctx.check()
    F = _matrix(ctx.cfg.get("F", "e1"), ctx.lattice)
    sched = ctx.cfg.get("k_schedule", [2, 4, 8])
    if not isinstance(sched, list) or not sched:
        raise ConfigInvalid("k_schedule must be a non-empty list of integers")
    sched = [_int(k, "k_schedule entry", 1) for k in sched]
    env = ctx.env
    est = estimate_W0(env, ctx.potential, F, sched, ctx.samples, ctx.solver, lattice=ctx.lattice,
                      workers=ctx.threads)
    summary = est.summary()
    ok = est.sandwich_ok
    if ctx.cfg.get("growth_check", True):
        mom = estimate_moments(env, ctx.lattice, 1.0, ctx.ex["beta"], ctx.ex["p"],
                               n_samples=_int(ctx.cfg.get("moment_samples", 100_000), "moment_samples", 1))
        cert = growth_bounds_check(est, mom, ctx.potential.p, ctx.potential.growth_c1, raise_on_fail=False)
        summary["certificates"] = {"growth_upper": cert.upper, "upper_ok": cert.upper_ok,
                                   "positive_ok": cert.positive_ok}
        ok = ok and cert.ok
    return est.to_csv(), summary, ok


def cmd_tensor(ctx: Context):
    ctx.check()
    k = _int(ctx.cfg.get("k", 8), "k", 1)
    T = extract_tensor(ctx.env, ctx.potential, k, ctx.samples, ctx.solver, lattice=ctx.lattice, workers=ctx.threads)
    nd = T.L.shape[0]
    rows = [[a, b, _r(T.L[a, b])] for a in range(nd) for b in range(nd)]
    summary = {"L": T.L, "min_eig": T.min_eig, "k": k, "samples": ctx.samples}
    return _csv(["a", "b", "L_ab"], rows), summary, T.min_eig > 0


def layered_oracle(omega, p: float, F: np.ndarray) -> float:
    """Closed-form cell value for layered weights on the hyper-cubic lattice with ``lambda |r|^p`` edges.

    Edges across the layers see the ``1/(p-1)`` harmonic mean, edges along them the arithmetic mean.
    """
    om = np.asarray(omega, dtype=float)
    harm = float(np.mean(om ** (-1 / (p - 1)))) ** (-(p - 1))
    arith = float(np.mean(om))
    F = np.atleast_2d(F)
    return float(harm * np.sum(np.abs(F[:, 0]) ** p) + arith * np.sum(np.abs(F[:, 1:]) ** p))


def cmd_layered_verify(ctx: Context):
    lat = ctx.lattice
    if not lat.is_hypercubic():
        raise ConfigInvalid("layered-verify needs the hyper-cubic lattice zd-nn")
    if ctx.potential.family not in ("p_power", "quadratic"):
        raise ConfigInvalid("layered-verify needs the p_power or quadratic family")
    k = _int(ctx.cfg.get("k", 2), "k", 1)
    tol = _num(ctx.cfg.get("tol", 1e-8), "tol")
    Fs = ctx.cfg.get("F", ["e1", "e2"])
    Fs = Fs if isinstance(Fs, list) and Fs and isinstance(Fs[0], (str, list)) else [Fs]
    rows, ok = [], True
    if "omega" in ctx.cfg:
        om = [_num(x, "omega entry") for x in ctx.cfg["omega"]]
        if len(om) != k or min(om) <= 0:
            raise ConfigInvalid(f"omega must list {k} positive layer weights")
        layers = [(0, om)]
    else:
        env = ctx.env
        z = np.zeros((k, lat.d), dtype=np.int64)
        z[:, 0] = np.arange(k)
        layers = []
        for s in range(ctx.samples):
            layers.append((s, env.sample(lat, s).weights(z, np.zeros(k, dtype=np.int64)).tolist()))
    for s, om in layers:
        sample = TabulatedSample.layered(lat, om)
        for f in Fs:
            F = _matrix(f, lat)
            val = whom_k(sample, ctx.potential, F, k, ctx.solver).value
            orc = layered_oracle(om, ctx.potential.p, F)
            err = abs(val - orc)
            ok = ok and err < tol
            rows.append([f if isinstance(f, str) else _fl(F), k, s, " ".join(_r(x) for x in om), _r(val), _r(orc),
                         _r(err), int(err < tol)])
    summary = {"k": k, "rows": len(rows), "max_abs_err": max(float(r[6]) for r in rows), "tol": tol}
    return _csv(["F", "k", "sample", "omega", "value", "oracle", "abs_err", "ok"], rows), summary, ok


def cmd_dirichlet(ctx: Context):
    ctx.check()
    lat = ctx.lattice
    g = ctx.cfg.get("g")
    g = None if g is None else _matrix(g, lat)
    f = ctx.cfg.get("f", 1.0)
    f = np.asarray(f, dtype=float)
    if f.size not in (1, lat.n):
        raise ConfigInvalid("f must be a constant scalar or n-vector")
    region = _region(ctx.cfg.get("region"), lat.d)
    epss = _eps_list(ctx.cfg.get("eps_schedule"), [8, 16, 32])
    table = gamma_gap_experiment(ctx.env, ctx.potential, g, f if f.size > 1 else float(f), region, epss,
                                 ctx.solver, lattice=lat, n_samples=ctx.samples,
                                 tensor_k=_int(ctx.cfg.get("tensor_k", 16), "tensor_k", 1),
                                 tensor_samples=_int(ctx.cfg.get("tensor_samples", 16), "tensor_samples", 1),
                                 workers=ctx.threads)
    summary = {"L": table.L, "median_gap": {str(e): float(np.median(table.gaps(e))) for e in epss}}
    return table.to_csv(), summary, True


def _test_field(lat, eps, region, s, amplitude, seed):
    """Smooth profile plus seeded nodal noise; deterministic in ``(seed, s, eps)``."""
    fld = Field.for_region(lat, eps, region, lambda x: np.sin(3 * x[..., :1]) + np.cos(2 * x.sum(-1, keepdims=True)))
    rng = np.random.default_rng([seed, s, eps.denominator])
    fld.values = fld.values + amplitude * rng.standard_normal(fld.values.shape)
    return fld


def cmd_poincare(ctx: Context):
    lat = ctx.lattice
    ex = ctx.ex
    q = ex.get("q", ex["p"])
    check_exponents(ex["p"], q, ex["alpha"], ex["beta"], lat.d)
    Q = _region(ctx.cfg.get("Q"), lat.d)
    epss = _eps_list(ctx.cfg.get("eps_schedule"), [4, 8, 16, 32])
    amp = _num(ctx.cfg.get("amplitude", 0.1), "amplitude")
    env = ctx.env
    rep = PoincareReport()
    for s in range(ctx.samples):
        sample = env.sample(lat, s)
        for e in epss:
            fld = _test_field(lat, e, Q, s, amp, ctx.seed)
            rep.entries.append(poincare_check(sample, fld, Q, ex["p"], q, ex["alpha"], ex["beta"]))
    C = ctx.cfg.get("C")
    ok = True if C is None else rep.max_C <= _num(C, "C")
    summary = {"max_C": rep.max_C, "C": C, "entries": len(rep.entries)}
    return rep.to_csv(), summary, ok


def cmd_mu(ctx: Context):
    lat = ctx.lattice
    env = ctx.env
    ex = ctx.ex
    i = _int(ctx.cfg.get("direction", 0), "direction", 0)
    if i >= lat.d:
        raise ConfigInvalid("direction must be below d")
    win = _int(ctx.cfg.get("window", 4), "window", 1)
    fld = Field.for_region(lat, 1, Region.cube(win, lat.d), None)
    Z = _anchors_in(fld, [0] * lat.d, [win] * lat.d, open_box=False)
    rows = []
    for s in range(ctx.samples):
        mu, arg, _ = iid_mu_many(env.sample(lat, s), Z, i, ex["p"])
        for z, m, a in zip(Z, mu, arg):
            rows.append([s, " ".join(str(int(c)) for c in z), i, _r(m), int(a)])
    summary = {"samples": ctx.samples, "window": win, "direction": i}
    if "gamma" in ex:
        mm = mu_moment_estimate(env, lat, ex["p"], ex["beta"], ex["gamma"],
                                _int(ctx.cfg.get("moment_samples", 10_000), "moment_samples", 1))
        summary["moment"] = {"estimate": mm.estimate, "se": mm.se, "n": mm.n, "wide_ci": mm.wide_ci}
    return _csv(["sample", "z", "i", "mu", "argmin_path"], rows), summary, True


def cmd_glue_demo(ctx: Context):
    lat = ctx.lattice
    env = ctx.env
    eps = as_eps(ctx.cfg.get("eps", 512))
    F = _matrix(ctx.cfg.get("F", "e1"), lat)
    region = _region(ctx.cfg.get("region"), lat.d)
    amp = _num(ctx.cfg.get("amplitude", 1.0), "amplitude")
    params = GlueParams(_num(ctx.cfg.get("delta", 0.4), "delta"), _int(ctx.cfg.get("m", 2), "m", 1),
                        ctx.cfg.get("s"), ctx.cfg.get("M"))
    ubar = affine(F)
    e = float(eps)
    # u_eps: affine data plus an eps-scale oscillation, as produced by a two-scale corrector
    u = Field.for_region(lat, eps, region,
                         lambda x: ubar(x) + amp * e * np.sin(2 * np.pi * x[..., :1] / e + 0.5) * np.ones(lat.n))
    rows, ok, summary = [], True, {"eps": str(eps)}
    modes = [("cutoff", glue_cutoff)] + ([("truncate", glue_truncate)] if params.s is not None else [])
    pos = u.positions()
    ub = sample_data(ubar, pos, lat.n)
    t = region.boundary_distance(pos) * region.contains(pos)
    outer = t <= params.delta * (params.m + 0.25) / (2 * params.m)
    for name, fn in modes:
        out, rep = fn(env.sample(lat, 0), ctx.potential, u, ubar, region, params)
        exact = bool(np.all(out.values[outer] == ub[outer]))
        nonexp = bool(np.all(np.abs(out.values - ub) <= np.abs(u.nodal() - ub)))
        ok = ok and exact and nonexp
        for r in rep.rows:
            rows.append([name, r.k, _r(r.energy), r.boundary_nodes_changed, _r(r.clamp_active_fraction),
                         int(r.k == rep.chosen)])
        entry = {"chosen": rep.chosen, "energy_in": rep.energy_in, "energy_out": rep.energy_out,
                 "increment": rep.increment, "boundary_exact": exact, "non_expansive": nonexp}
        if name == "truncate":
            tf = truncation_factors(u, ubar, float(params.s), region)
            entry["truncation_factor_range"] = [float(tf.min()), float(tf.max())]
            ok = ok and tf.min() >= 0 and tf.max() <= 1
        summary[name] = entry
    return _csv(["mode", "k", "energy", "boundary_nodes_changed", "clamp_active_fraction", "chosen"], rows), summary, ok


def cmd_moments(ctx: Context):
    ex = ctx.ex
    env = ctx.env
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DivergentMoment)
        rep = estimate_moments(env, ctx.lattice, ex["alpha"], ex["beta"], ex["p"],
                               n_samples=_int(ctx.cfg.get("moment_samples", 100_000), "moment_samples", 1))
    for w in caught:
        log.warning("%s", w.message)
    summary = {"alpha": ex["alpha"], "beta": ex["beta"], "p": ex["p"], "d": ctx.lattice.d,
               "assumption_moments": rep.assumption_moments, "assumption_vectorial": rep.assumption_vectorial,
               "mean_lambda": [r.alpha_moment for r in rep.rows] if ex["alpha"] == 1 else None}
    return rep.to_csv(), summary, True


HANDLERS = {
    "cell": cmd_cell,
    "homogenize": cmd_homogenize,
    "tensor": cmd_tensor,
    "layered-verify": cmd_layered_verify,
    "dirichlet": cmd_dirichlet,
    "poincare": cmd_poincare,
    "mu": cmd_mu,
    "glue-demo": cmd_glue_demo,
    "moments": cmd_moments,
}


# ---------------------------------------------------------------------------
# entry point


def run(command: str, cfg: dict, out_dir, seed=None, samples=None, threads=None) -> int:
    """Validate, dispatch and write outputs; returns the exit status."""
    if command not in HANDLERS:
        raise ConfigInvalid(f"unknown command {command!r}")
    eff = effective_config(cfg, command, seed, samples)
    h = config_hash(eff)
    threads = threads or os.cpu_count() or 1
    ctx = Context(eff, command, threads)
    trace_path = Path(out_dir) / f"{command}.trace.jsonl"
    trace_buf = io.StringIO() if (eff.get("solver") or {}).get("trace") else None
    ctx.solver.trace = trace_buf
    text, summary, ok = HANDLERS[command](ctx)
    header = f"# stochhom schema={SCHEMA_VERSION} command={command} config_sha256={h}\n"
    out = Path(out_dir)
    atomic_write(out / f"{command}.csv", header + text)
    doc = {"schema": SCHEMA_VERSION, "command": command, "config_sha256": h, "version": __version__,
           "ok": bool(ok), "summary": _jsonable(summary)}
    atomic_write(out / f"{command}.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if trace_buf is not None:
        atomic_write(trace_path, trace_buf.getvalue())
    return EXIT_OK if ok else EXIT_PROPERTY


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochhom", description="Discrete stochastic homogenization experiments.")
    ap.add_argument("--version", action="version", version=f"stochhom {__version__}")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("config", help="JSON config file ('-' reads stdin)")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--samples", type=int, default=None, help="override the sample count")
    ap.add_argument("--out-dir", default=".", help="output directory (default: current)")
    ap.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    ap.add_argument("--verbose", "-v", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        text = sys.stdin.read() if args.config == "-" else Path(args.config).read_text()
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config is not valid JSON: {exc}") from None
        code = run(args.command, cfg, args.out_dir, args.seed, args.samples, args.threads)
        if code == EXIT_PROPERTY:
            log.error("property check failed; see %s", Path(args.out_dir) / f"{args.command}.json")
        return code
    except OSError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ConfigInvalid as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except PropertyViolation as exc:
        log.error("property check failed: %s", exc)
        return EXIT_PROPERTY
    except StochHomError as exc:  # pragma: no cover - every subclass is handled above
        log.error("%s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
