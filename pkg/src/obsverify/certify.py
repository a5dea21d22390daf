"""Terminal-reach barrier certificates: checks, bounds, validation.

A certificate V(v, t) with constants alpha > 0 and beta must satisfy
    V(v, T) <= 1_{accepting}(v)                          (terminal)
    opt_w2 E_w1[ V(v', t) ]  >=  V(v, t-1)/alpha + beta  (recursion)
with opt = inf for universal certificates and sup for existential ones.
A valid certificate yields the closed-form probability lower bound
    opt_x0' V((x0, x0', q0), 0) * alpha^-T + (sum_i alpha^-i) * beta.

Checks are numerical: points are grids or samples, the inner
expectation is quadrature or Monte Carlo, so a clean report means
"validated" in the statistical, not the formal, sense; the report
records which rule was used.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import mlp
from .interp import corner_terms, interp_flat
from .product import VerificationStructure

UNIVERSAL = "universal"
EXISTENTIAL = "existential"

DEFAULT_TOL = 1e-6


class CertificateError(ValueError):
    pass


@dataclass
class TableBacking:
    """Grid-sampled values with multilinear interpolation, 0 outside."""

    axes1: tuple[np.ndarray, ...]
    axes2: tuple[np.ndarray, ...]
    values: np.ndarray  # (T+1, nq, n1, n2)

    @property
    def n_q(self) -> int:
        return self.values.shape[1]


@dataclass
class MlpBacking:
    params: mlp.MlpParams

    @property
    def n_q(self) -> int:
        return self.params.n_q


@dataclass
class Certificate:
    backing: TableBacking | MlpBacking
    alpha: float
    beta: float
    mode: str  # UNIVERSAL | EXISTENTIAL
    horizon: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha <= 0:
            raise CertificateError("alpha must be > 0")
        if self.mode not in (UNIVERSAL, EXISTENTIAL):
            raise CertificateError(f"unknown mode {self.mode!r}")

    @property
    def kind(self) -> str:
        return "table" if isinstance(self.backing, TableBacking) else "mlp"


# ---------------------------------------------------------------------------
# evaluation


def eval_batch(cert: Certificate, model, x1: np.ndarray, x2: np.ndarray,
               q: np.ndarray, t: int) -> np.ndarray:
    """V at aligned product points; rows outside the domain evaluate to 0."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    n = x1.shape[0]
    q = np.broadcast_to(np.asarray(q, dtype=np.int64), (n,))
    if not 0 <= t <= cert.horizon:
        raise CertificateError(f"time {t} outside [0, {cert.horizon}]")
    alive = model.domain.contains(x1) & model.domain.contains(x2)
    out = np.zeros(n)
    if not np.any(alive):
        return out
    if isinstance(cert.backing, TableBacking):
        bk = cert.backing
        pts = np.concatenate([x1[alive], x2[alive]], axis=1)
        terms = corner_terms(bk.axes1 + bk.axes2, pts)
        vals = np.zeros(pts.shape[0])
        qa = q[alive]
        for qi in np.unique(qa):
            sel = qa == qi
            sub = [(flat[sel], w[sel]) for flat, w in terms]
            vals[sel] = interp_flat(bk.values[t, qi].reshape(-1), sub)
        out[alive] = vals
    else:
        X = mlp.features(cert.backing.params, x1[alive], x2[alive], q[alive], t)
        out[alive], _ = mlp.forward(cert.backing.params, X)
    return out


def eval_certificate(cert: Certificate, model, v, t: int) -> float:
    """Scalar V(v, t); v is a ProductState (SINK evaluates to 0)."""
    if not v.alive:
        return 0.0
    x1 = np.asarray(v.x1, dtype=float)[None, :]
    x2 = np.asarray(v.x2, dtype=float)[None, :]
    return float(eval_batch(cert, model, x1, x2, np.asarray([v.q]), t)[0])


# ---------------------------------------------------------------------------
# condition checks


@dataclass
class CheckReport:
    terminal_violations: int = 0
    terminal_worst: float = float("inf")   # signed margin, negative = violation
    recursion_violations: int = 0
    recursion_worst: float = float("inf")
    points_checked: int = 0
    worst_by_t: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    @property
    def clean(self) -> bool:
        return self.terminal_violations == 0 and self.recursion_violations == 0

    def to_dict(self) -> dict:
        return {
            "terminal_violations": self.terminal_violations,
            "terminal_worst_margin": _finite_or_none(self.terminal_worst),
            "recursion_violations": self.recursion_violations,
            "recursion_worst_margin": _finite_or_none(self.recursion_worst),
            "points_checked": self.points_checked,
            "worst_margin_by_t": {str(k): v for k, v in sorted(self.worst_by_t.items())},
            "settings": self.settings,
            "clean": self.clean,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


@dataclass
class InnerRule:
    """How the inner expectation over w1 is estimated."""

    kind: str                      # "quadrature" | "mc"
    nodes: np.ndarray | None = None
    weights: np.ndarray | None = None
    samples: int = 0
    seed: int = 0

    @staticmethod
    def quadrature(model, nodes_per_dim: int = 9) -> "InnerRule":
        nodes, weights = model.disturbance_quadrature(nodes_per_dim)
        return InnerRule("quadrature", nodes=nodes, weights=weights)

    @staticmethod
    def monte_carlo(samples: int, seed: int) -> "InnerRule":
        return InnerRule("mc", samples=samples, seed=seed)

    def describe(self) -> dict:
        if self.kind == "quadrature":
            return {"inner": "quadrature", "nodes": int(self.nodes.shape[0])}
        return {"inner": "mc", "samples": int(self.samples), "seed": int(self.seed)}


def check_terminal(cert: Certificate, vs: VerificationStructure,
                   x1, x2, q, tol: float = DEFAULT_TOL) -> CheckReport:
    """V(v, T) <= indicator of the accepting set, pointwise."""
    x1 = np.atleast_2d(x1)
    x2 = np.atleast_2d(x2)
    n = x1.shape[0]
    q = np.broadcast_to(np.asarray(q, dtype=np.int64), (n,))
    vals = eval_batch(cert, vs.model, x1, x2, q, cert.horizon)
    alive = np.ones(n, dtype=bool)
    acc = vs.accepting_batch(x1, x2, q, alive)
    margin = np.where(acc, 1.0 - vals, -vals)
    rep = CheckReport(points_checked=n)
    rep.terminal_violations = int(np.sum(margin < -tol))
    rep.terminal_worst = float(margin.min()) if n else float("inf")
    rep.recursion_worst = float("inf")
    rep.settings = {"tol": tol}
    return rep


def recursion_statistic(cert: Certificate, vs: VerificationStructure,
                        x1, x2, q, t: int, w2_candidates: np.ndarray,
                        inner: InnerRule) -> np.ndarray:
    """opt over w2 candidates of the estimated E_w1[ V(v', t) ]."""
    model = vs.model
    x1 = np.atleast_2d(x1)
    x2 = np.atleast_2d(x2)
    n = x1.shape[0]
    q = np.broadcast_to(np.asarray(q, dtype=np.int64), (n,))
    letters = vs.letters_for(x1, x2)
    q_next = vs.dfa.transitions[q, letters]

    if inner.kind == "quadrature":
        w1s, wts = inner.nodes, inner.weights
    else:
        rng = np.random.default_rng(inner.seed)
        w1s = model.sample_disturbance(rng, inner.samples)
        wts = np.full(inner.samples, 1.0 / inner.samples)
    m = w1s.shape[0]
    # next states for copy 1 under every w1 rule point: (n*m, d)
    nx1 = model.step(np.repeat(x1, m, axis=0), np.tile(w1s, (n, 1)))
    rep_q = np.repeat(q_next, m)

    stat = None
    for b in range(w2_candidates.shape[0]):
        w2 = np.broadcast_to(w2_candidates[b], (n, w2_candidates.shape[1]))
        nx2 = model.step(x2, w2)
        vals = eval_batch(cert, model, nx1, np.repeat(nx2, m, axis=0), rep_q, t)
        exp = (vals.reshape(n, m) * wts[None, :]).sum(axis=1)
        if stat is None:
            stat = exp
        elif cert.mode == UNIVERSAL:
            np.minimum(stat, exp, out=stat)
        else:
            np.maximum(stat, exp, out=stat)
    return stat


def check_recursion(cert: Certificate, vs: VerificationStructure,
                    x1, x2, q, ts, w2_candidates: np.ndarray,
                    inner: InnerRule, tol: float = DEFAULT_TOL) -> CheckReport:
    """Recursion condition at the given points for each t in ts."""
    x1 = np.atleast_2d(x1)
    x2 = np.atleast_2d(x2)
    n = x1.shape[0]
    q = np.broadcast_to(np.asarray(q, dtype=np.int64), (n,))
    rep = CheckReport(points_checked=0)
    rep.terminal_worst = float("inf")
    worst = float("inf")
    for t in ts:
        if not 1 <= t <= cert.horizon:
            raise CertificateError(f"recursion time {t} outside [1, T]")
        stat = recursion_statistic(cert, vs, x1, x2, q, t, w2_candidates, inner)
        prev = eval_batch(cert, vs.model, x1, x2, q, t - 1)
        margin = stat - (prev / cert.alpha + cert.beta)
        rep.recursion_violations += int(np.sum(margin < -tol))
        tmin = float(margin.min()) if n else float("inf")
        rep.worst_by_t[int(t)] = tmin
        worst = min(worst, tmin)
        rep.points_checked += n
    rep.recursion_worst = worst
    rep.settings = {"tol": tol, "w2_candidates": int(w2_candidates.shape[0]),
                    **inner.describe()}
    return rep


def merge_reports(a: CheckReport, b: CheckReport) -> CheckReport:
    out = CheckReport()
    out.terminal_violations = a.terminal_violations + b.terminal_violations
    out.terminal_worst = min(a.terminal_worst, b.terminal_worst)
    out.recursion_violations = a.recursion_violations + b.recursion_violations
    out.recursion_worst = min(a.recursion_worst, b.recursion_worst)
    out.points_checked = a.points_checked + b.points_checked
    out.worst_by_t = {**a.worst_by_t, **b.worst_by_t}
    out.settings = {**a.settings, **b.settings}
    return out


def product_grid_points(vs: VerificationStructure, per_dim: int):
    """Dense grid over domain x domain, replicated across automaton states."""
    pts = vs.model.domain.grid_points(per_dim)
    n = pts.shape[0]
    nq = vs.dfa.n_states
    x1 = np.repeat(pts, n, axis=0)
    x2 = np.tile(pts, (n, 1))
    x1 = np.tile(x1, (nq, 1))
    x2 = np.tile(x2, (nq, 1))
    q = np.repeat(np.arange(nq), n * n)
    return x1, x2, q


def validate_dense(cert: Certificate, vs: VerificationStructure, per_dim: int,
                   t_range=None, w2_candidates: np.ndarray | None = None,
                   inner: InnerRule | None = None,
                   tol: float = DEFAULT_TOL,
                   w2_candidates_per_dim: int = 21) -> CheckReport:
    """Terminal + recursion checks over a dense product grid and all q."""
    if w2_candidates is None:
        w2_candidates = vs.model.truncated_support().grid_points(w2_candidates_per_dim)
    if inner is None:
        inner = InnerRule.quadrature(vs.model)
    if t_range is None:
        t_range = range(1, cert.horizon + 1)
    x1, x2, q = product_grid_points(vs, per_dim)
    rep_t = check_terminal(cert, vs, x1, x2, q, tol)
    rep_r = check_recursion(cert, vs, x1, x2, q, t_range, w2_candidates, inner, tol)
    rep = merge_reports(rep_t, rep_r)
    rep.settings["per_dim"] = per_dim
    rep.settings["mode"] = cert.mode
    rep.settings["validated"] = (
        "validated (quadrature)" if inner.kind == "quadrature"
        else "validated (statistical)")
    return rep


# ---------------------------------------------------------------------------
# probability bound


def bound(cert: Certificate, vs: VerificationStructure,
          x0_points: np.ndarray | None = None,
          x0p_points: np.ndarray | None = None,
          scan_per_dim: int = 201) -> dict:
    """Closed-form lower bound from Lemma-style conditions.

    Per initial state x0: opt over the companion's initial choice x0' of
    V((x0, x0', q0), 0) * alpha^-T + (geometric sum) * beta; `overall`
    takes the worst x0 (the properties quantify over all initial states).
    """
    model = vs.model
    if x0_points is None:
        x0_points = _region_scan(model.initial, scan_per_dim)
    if x0p_points is None:
        x0p_points = _region_scan(model.initial, scan_per_dim)
    x0_points = np.atleast_2d(x0_points)
    x0p_points = np.atleast_2d(x0p_points)
    m, k = x0_points.shape[0], x0p_points.shape[0]
    x1 = np.repeat(x0_points, k, axis=0)
    x2 = np.tile(x0p_points, (m, 1))
    v0 = eval_batch(cert, model, x1, x2, vs.dfa.q0, 0).reshape(m, k)
    opt = v0.min(axis=1) if cert.mode == UNIVERSAL else v0.max(axis=1)
    T = cert.horizon
    geom = sum(cert.alpha ** (-i) for i in range(T))
    bounds = opt * cert.alpha ** (-T) + geom * cert.beta
    return {
        "per_x0": bounds,
        "x0_points": x0_points,
        "overall": float(bounds.min()),
        "alpha": cert.alpha,
        "beta": cert.beta,
        "mode": cert.mode,
    }


def _region_scan(region, per_dim: int) -> np.ndarray:
    pts = [b.grid_points(per_dim) if np.all(b.widths() > 0) else b.center()[None, :]
           for b in region.boxes]
    return np.concatenate(pts, axis=0)


# ---------------------------------------------------------------------------
# serialization


FORMAT_VERSION = 1


def certificate_to_json(cert: Certificate, table_blob: str | None = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": cert.kind,
        "alpha": cert.alpha,
        "beta": cert.beta,
        "mode": cert.mode,
        "horizon": cert.horizon,
        "meta": cert.meta,
    }
    if isinstance(cert.backing, MlpBacking):
        p = cert.backing.params
        doc["mlp"] = {
            "d_x": p.d_x, "n_q": p.n_q, "horizon": p.horizon, "slope": p.slope,
            "weights": [w.tolist() for w in p.weights],
            "biases": [b.tolist() for b in p.biases],
        }
    else:
        if table_blob is None:
            raise CertificateError("table-backed certificates need a blob path")
        doc["table_blob"] = table_blob
    return doc


def certificate_from_json(doc: dict, blob_loader=None) -> Certificate:
    if doc.get("format_version") != FORMAT_VERSION:
        raise CertificateError("unsupported certificate format version")
    if doc["kind"] == "mlp":
        m = doc["mlp"]
        params = mlp.MlpParams(
            weights=[np.asarray(w, dtype=float) for w in m["weights"]],
            biases=[np.asarray(b, dtype=float) for b in m["biases"]],
            d_x=m["d_x"], n_q=m["n_q"], horizon=m["horizon"], slope=m["slope"])
        backing = MlpBacking(params)
    else:
        if blob_loader is None:
            raise CertificateError("need a blob loader for table certificates")
        table = blob_loader(doc["table_blob"])
        backing = TableBacking(axes1=table.grid.axes1, axes2=table.grid.axes2,
                               values=table.values)
    return Certificate(backing=backing, alpha=doc["alpha"], beta=doc["beta"],
                       mode=doc["mode"], horizon=doc["horizon"],
                       meta=doc.get("meta", {}))
