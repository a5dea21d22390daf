"""Named observational properties and their empirical evaluation.

Detectability asks that the observer can pin the initial/current state
down to a set of diameter <= lam with probability >= p; opacity asks
that the state estimate never resolves inside the secret region with
probability >= p.  Both reduce to two-trace hyperformulas; satisfaction
of a sampled trajectory is decided through its state estimate
(diam(X_hat) <= lam, X_hat not a subset of X_S).

State estimates over continuous spaces are approximated either by a
grid-filter observer (cells consistent with the output sequence under
the truncated disturbance, refined monotonically by the grid pitch) or
by a sampled-companion observer (final/initial states of sampled
trajectories whose outputs shadow the observed ones).  The sampled
observer statistically under-approximates the estimate; it is the knob
that mirrors how case-study-style Monte Carlo figures are produced, and
every probability report carries the estimator settings used.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .boxes import BoxUnion, as_region
from .ltlf import (Always, And, Atom, Eventually, HyperFormula, FORALL, EXISTS,
                   NonsecSecond, Or, OutClose, Not, SecFirst, StateClose,
                   compile_body, implies)
from .product import letters_matrix
from .system import Poss, Trajectory

INITIAL = "initial"
CURRENT = "current"

DIAM_EXACT_LIMIT = 4096


class PropertyError(ValueError):
    pass


class EstimateEmptyError(PropertyError):
    """Raised when the discretized observer returns no consistent cell."""


# ---------------------------------------------------------------------------
# property specifications


INITIAL_DETECT = "initial_detect"
CURRENT_DETECT = "current_detect"
INITIAL_OPACITY = "initial_opacity"
CURRENT_OPACITY = "current_opacity"
CUSTOM = "custom"

_KINDS = (INITIAL_DETECT, CURRENT_DETECT, INITIAL_OPACITY, CURRENT_OPACITY, CUSTOM)


@dataclass(frozen=True)
class PropertySpec:
    kind: str
    p: float
    eps: float | None = None
    lam: float | None = None
    secret: BoxUnion | None = None
    formula: HyperFormula | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise PropertyError(f"unknown property kind {self.kind!r}")
        if not 0.0 < self.p <= 1.0:
            raise PropertyError("threshold p must be in (0, 1]")
        if self.kind in (INITIAL_DETECT, CURRENT_DETECT):
            if self.eps is None or self.lam is None:
                raise PropertyError("detectability needs eps and lam")
            if self.eps < 0 or self.lam < 0:
                raise PropertyError("eps and lam must be >= 0")
        if self.kind in (INITIAL_OPACITY, CURRENT_OPACITY):
            if self.eps is None or self.secret is None:
                raise PropertyError("opacity needs eps and a secret region")
        if self.kind == CUSTOM and self.formula is None:
            raise PropertyError("custom property needs a formula")


def to_formula(spec: PropertySpec) -> HyperFormula:
    """The hyperformula encoding of a named property (custom passes through)."""
    if spec.kind == CUSTOM:
        return spec.formula
    out_close = Atom(OutClose(spec.eps))
    if spec.kind == INITIAL_DETECT:
        body = implies(Always(out_close), Atom(StateClose(spec.lam)))
        return HyperFormula(FORALL, body)
    if spec.kind == CURRENT_DETECT:
        body = implies(Always(out_close),
                       Eventually(Always(Atom(StateClose(spec.lam)))))
        return HyperFormula(FORALL, body)
    sec = Atom(SecFirst(spec.secret))
    nonsec = Atom(NonsecSecond(spec.secret))
    if spec.kind == INITIAL_OPACITY:
        body = implies(sec, And(Always(out_close), nonsec))
        return HyperFormula(EXISTS, body)
    body = implies(Eventually(Always(sec)),
                   And(Always(out_close), Eventually(Always(nonsec))))
    return HyperFormula(EXISTS, body)


# ---------------------------------------------------------------------------
# trajectory-level predicates


def indistinguishable(model: Poss, s: Trajectory, s2: Trajectory,
                      eps: float) -> bool:
    """Outputs within eps (L2) at every step."""
    if s.states.shape != s2.states.shape:
        raise PropertyError("trajectories must have equal length")
    y1 = model.output_trace(s)
    y2 = model.output_trace(s2)
    gaps = np.linalg.norm(y1 - y2, axis=1)
    return bool(np.all(gaps <= eps))


@dataclass(frozen=True)
class PointSet:
    """A finite state-point set plus the grid pitch used to generate it."""

    points: np.ndarray
    resolution: float

    def __post_init__(self):
        object.__setattr__(self, "points", np.atleast_2d(self.points))


def diam(pset: PointSet | np.ndarray) -> float:
    """Max pairwise L2 distance; exact up to DIAM_EXACT_LIMIT points,
    bounding-box diagonal (a valid upper bound) with a warning beyond."""
    pts = pset.points if isinstance(pset, PointSet) else np.atleast_2d(pset)
    if pts.shape[0] == 0:
        raise PropertyError("diameter of an empty set")
    n = pts.shape[0]
    if n > DIAM_EXACT_LIMIT:
        warnings.warn("diam: falling back to bounding-box diagonal upper bound")
        spans = pts.max(axis=0) - pts.min(axis=0)
        return float(np.sqrt(np.sum(spans ** 2)))
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    return float(np.sqrt(max(d2.max(), 0.0)))


# ---------------------------------------------------------------------------
# grid-filter observer


@dataclass
class ObserverGrid:
    """Cell-center discretization of the domain with one-step reachability."""

    model: Poss
    centers: np.ndarray          # (n_cells, d)
    pitch: float
    reach: np.ndarray            # (n_cells, n_cells) float 0/1, reach[i, j]: i -> j
    outputs: np.ndarray          # (n_cells, d_y)
    x0_mask: np.ndarray          # (n_cells,) bool

    @staticmethod
    def build(model: Poss, cells_per_dim: int = 201,
              w_points_per_dim: int = 9) -> "ObserverGrid":
        dom = model.domain
        axes = []
        for k in range(dom.dim):
            edges = np.linspace(dom.lo[k], dom.hi[k], cells_per_dim + 1)
            axes.append(0.5 * (edges[:-1] + edges[1:]))
        mesh = np.meshgrid(*axes, indexing="ij")
        centers = np.stack([m.ravel() for m in mesh], axis=-1)
        pitch = float(max((dom.hi[k] - dom.lo[k]) / cells_per_dim
                          for k in range(dom.dim)))

        support = model.truncated_support()
        w_nodes, _ = model.disturbance_quadrature(w_points_per_dim)
        w_pts = np.concatenate([w_nodes, support.grid_points(2)], axis=0)

        n = centers.shape[0]
        nw = w_pts.shape[0]
        succ = model.step(np.repeat(centers, nw, axis=0),
                          np.tile(w_pts, (n, 1))).reshape(n, nw, dom.dim)
        # orthotope hull of the successor samples per cell, mapped to cell ranges
        reach = np.zeros((n, n))
        lo_idx = []
        hi_idx = []
        dims = [len(a) for a in axes]
        for k in range(dom.dim):
            ax = axes[k]
            smin = succ[:, :, k].min(axis=1)
            smax = succ[:, :, k].max(axis=1)
            lo_idx.append(np.clip(np.searchsorted(ax, smin, side="left") - 1, 0, dims[k] - 1))
            hi_idx.append(np.clip(np.searchsorted(ax, smax, side="right"), 0, dims[k] - 1))
        if dom.dim == 1:
            for i in range(n):
                reach[i, lo_idx[0][i]:hi_idx[0][i] + 1] = 1.0
        else:
            strides = np.ones(dom.dim, dtype=np.int64)
            for k in range(dom.dim - 2, -1, -1):
                strides[k] = strides[k + 1] * dims[k + 1]
            for i in range(n):
                ranges = [np.arange(lo_idx[k][i], hi_idx[k][i] + 1) for k in range(dom.dim)]
                grids = np.meshgrid(*ranges, indexing="ij")
                flat = np.zeros_like(grids[0])
                for k in range(dom.dim):
                    flat = flat + grids[k] * strides[k]
                reach[i, flat.ravel()] = 1.0

        outputs = model.output_of(centers)
        x0_mask = model.initial.contains(centers)
        return ObserverGrid(model=model, centers=centers, pitch=pitch,
                            reach=reach, outputs=outputs, x0_mask=x0_mask)

    def output_consistent(self, y: np.ndarray, eps: float) -> np.ndarray:
        """Cells whose output is eps-close to y: y (n_t, d_y) -> (n_t, n_cells)."""
        y = np.atleast_2d(y)
        d2 = (np.sum(y * y, axis=1)[:, None]
              + np.sum(self.outputs * self.outputs, axis=1)[None, :]
              - 2.0 * y @ self.outputs.T)
        return d2 <= eps ** 2 + 1e-15


def _filter_masks(grid: ObserverGrid, ys: np.ndarray, eps: float):
    """Forward-filtered alive masks per time: ys (n, T+1, d_y) -> list of (n, n_cells)."""
    n, tlen, _ = ys.shape
    alive = []
    cur = grid.x0_mask[None, :] & grid.output_consistent(ys[:, 0], eps)
    alive.append(cur)
    for t in range(1, tlen):
        reached = (cur.astype(float) @ grid.reach) > 0.0
        cur = reached & grid.output_consistent(ys[:, t], eps)
        alive.append(cur)
    return alive


def estimate_masks(grid: ObserverGrid, ys: np.ndarray, eps: float,
                   which: str) -> np.ndarray:
    """Batched state-estimate cell masks for output traces ys (n, T+1, d_y)."""
    alive = _filter_masks(grid, ys, eps)
    if which == CURRENT:
        return alive[-1]
    if which != INITIAL:
        raise PropertyError(f"unknown estimate kind {which!r}")
    surv = alive[-1]
    for t in range(len(alive) - 2, -1, -1):
        has_future = (surv.astype(float) @ grid.reach.T) > 0.0
        surv = alive[t] & has_future
    return surv


def state_estimate(model: Poss, traj: Trajectory, eps: float, which: str,
                   grid: ObserverGrid) -> PointSet:
    """Grid-filter observer for one trajectory; errors on an empty estimate."""
    ys = model.output_trace(traj)[None, :, :]
    mask = estimate_masks(grid, ys, eps, which)[0]
    if not mask.any():
        raise EstimateEmptyError(
            "state estimate is empty at this grid resolution; refine the grid "
            "or relax the disturbance truncation")
    return PointSet(points=grid.centers[mask], resolution=grid.pitch)


# ---------------------------------------------------------------------------
# empirical probability


@dataclass
class EstimatorConfig:
    """How X_hat is approximated when deciding satisfaction per sample."""

    method: str = "grid"            # "grid" | "sampled"
    grid_cells_per_dim: int = 201
    w_points_per_dim: int = 9
    companions: int = 256           # sampled method: companion rollouts per batch

    def describe(self) -> dict:
        if self.method == "grid":
            return {"estimator": "grid", "cells_per_dim": self.grid_cells_per_dim,
                    "w_points_per_dim": self.w_points_per_dim}
        return {"estimator": "sampled", "companions": self.companions}


def clopper_pearson(successes: int, n: int, conf: float = 0.95):
    alpha = 1.0 - conf
    lo = 0.0 if successes == 0 else float(
        stats.beta.ppf(alpha / 2, successes, n - successes + 1))
    hi = 1.0 if successes == n else float(
        stats.beta.ppf(1 - alpha / 2, successes + 1, n - successes))
    return lo, hi


def empirical_probability(model: Poss, spec: PropertySpec, x0, n_samples: int,
                          rng: np.random.Generator,
                          estimator: EstimatorConfig | None = None,
                          chunk: int = 2048) -> dict:
    """Monte Carlo estimate of P_x0(s satisfies the property's formula).

    Satisfaction per sampled trajectory is decided through the state
    estimate (diam for detectability, secret containment for opacity);
    custom formulas are decided by the grid-filter product over
    (cell, automaton state) pairs.  Returns the estimate with a 95%
    Clopper-Pearson interval and the estimator settings.
    """
    if n_samples < 1:
        raise PropertyError("need at least one sample")
    estimator = estimator or EstimatorConfig()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    successes = 0
    remaining = n_samples
    ctx = _EstimatorContext.build(model, spec, estimator, rng)
    while remaining > 0:
        m = min(chunk, remaining)
        x0s = np.broadcast_to(x0, (m, model.state_dim))
        states, _ = model.sample_paths(x0s, rng)
        successes += int(ctx.count_satisfied(states))
        remaining -= m
    lo, hi = clopper_pearson(successes, n_samples)
    return {
        "estimate": successes / n_samples,
        "ci_low": lo,
        "ci_high": hi,
        "n": n_samples,
        "satisfied": successes,
        "settings": estimator.describe(),
    }


@dataclass
class _EstimatorContext:
    model: Poss
    spec: PropertySpec
    estimator: EstimatorConfig
    grid: ObserverGrid | None = None
    companions_y: np.ndarray | None = None   # (mc, T+1, d_y)
    companions_states: np.ndarray | None = None
    dfa: object = None
    quantifier: str | None = None

    @staticmethod
    def build(model, spec, estimator, rng) -> "_EstimatorContext":
        ctx = _EstimatorContext(model=model, spec=spec, estimator=estimator)
        if spec.kind == CUSTOM or estimator.method == "grid":
            ctx.grid = ObserverGrid.build(model, estimator.grid_cells_per_dim,
                                          estimator.w_points_per_dim)
        if spec.kind == CUSTOM:
            hf = spec.formula
            ctx.dfa = compile_body(hf.body)
            ctx.quantifier = hf.quantifier
        elif estimator.method == "sampled":
            mc = estimator.companions
            x0p = model.initial.sample(rng, mc)
            states, _ = model.sample_paths(x0p, rng)
            ctx.companions_states = states
            ctx.companions_y = _outputs_along(model, states)
        return ctx

    def count_satisfied(self, states: np.ndarray) -> int:
        spec = self.spec
        if spec.kind == CUSTOM:
            return int(np.sum(_custom_satisfied(self, states)))
        which = INITIAL if spec.kind in (INITIAL_DETECT, INITIAL_OPACITY) else CURRENT
        if self.estimator.method == "grid":
            ys = _outputs_along(self.model, states)
            masks = estimate_masks(self.grid, ys, spec.eps, which)
            if not masks.any(axis=1).all():
                bad = int(np.flatnonzero(~masks.any(axis=1))[0])
                raise EstimateEmptyError(
                    f"empty state estimate for sample {bad}; refine the grid")
            if spec.kind in (INITIAL_DETECT, CURRENT_DETECT):
                return int(np.sum(_mask_diams(self.grid, masks) <= spec.lam))
            secret_cells = spec.secret.contains(self.grid.centers)
            inside_only = ~np.any(masks & ~secret_cells[None, :], axis=1)
            return int(np.sum(~inside_only))
        return int(np.sum(_sampled_satisfied(self, states, which)))


def _outputs_along(model: Poss, states: np.ndarray) -> np.ndarray:
    n, tlen, _ = states.shape
    return model.output_of(states.reshape(n * tlen, -1)).reshape(n, tlen, -1)


def _mask_diams(grid: ObserverGrid, masks: np.ndarray) -> np.ndarray:
    """Diameter of the cell-center set per row mask."""
    n = masks.shape[0]
    out = np.empty(n)
    if grid.centers.shape[1] == 1:
        c = grid.centers[:, 0]
        lo = np.where(masks, c[None, :], np.inf).min(axis=1)
        hi = np.where(masks, c[None, :], -np.inf).max(axis=1)
        out = hi - lo
        out[~masks.any(axis=1)] = np.nan
        return out
    for i in range(n):
        pts = grid.centers[masks[i]]
        out[i] = diam(pts) if pts.shape[0] else np.nan
    return out


def _sampled_satisfied(ctx: _EstimatorContext, states: np.ndarray,
                       which: str) -> np.ndarray:
    """Companion-sampling decision per trajectory (detect/opacity kinds)."""
    spec = ctx.spec
    model = ctx.model
    ys = _outputs_along(model, states)                       # (n, T+1, dy)
    cy = ctx.companions_y                                     # (mc, T+1, dy)
    n = ys.shape[0]
    t_idx = 0 if which == INITIAL else states.shape[1] - 1
    own_pt = states[:, t_idx, :]
    comp_pts = ctx.companions_states[:, t_idx, :]            # (mc, d)
    sat = np.empty(n, dtype=bool)
    # worst-case output gap per (sample, companion) over time
    gaps = np.linalg.norm(ys[:, None, :, :] - cy[None, :, :, :], axis=3).max(axis=2)
    indist = gaps <= spec.eps                                 # (n, mc)
    if spec.kind in (INITIAL_DETECT, CURRENT_DETECT):
        if own_pt.shape[1] == 1:
            cx = comp_pts[:, 0]
            lo = np.minimum(own_pt[:, 0],
                            np.where(indist, cx[None, :], np.inf).min(axis=1))
            hi = np.maximum(own_pt[:, 0],
                            np.where(indist, cx[None, :], -np.inf).max(axis=1))
            return hi - lo <= spec.lam
        for i in range(n):
            pts = np.concatenate([own_pt[i][None, :], comp_pts[indist[i]]], axis=0)
            sat[i] = diam(pts) <= spec.lam
        return sat
    own_secret = spec.secret.contains(own_pt)
    comp_nonsecret = ~spec.secret.contains(comp_pts)
    witness = indist & comp_nonsecret[None, :]
    escape = witness.any(axis=1)
    # the trajectory itself witnesses opacity when it is not secret-resolved
    return ~own_secret | escape


def _custom_satisfied(ctx: _EstimatorContext, states: np.ndarray) -> np.ndarray:
    """Quantified satisfaction via the grid-filter (cell, q) product."""
    grid = ctx.grid
    dfa = ctx.dfa
    model = ctx.model
    n, tlen, _ = states.shape
    n_cells = grid.centers.shape[0]
    nq = dfa.n_states
    cell_y = grid.outputs
    out = np.empty(n, dtype=bool)
    for i in range(n):
        # letters between the sampled state and every cell, per time
        active = np.zeros((n_cells, nq), dtype=bool)
        active[grid.x0_mask, dfa.q0] = True
        for t in range(tlen):
            x = states[i, t][None, :]
            y = model.output_of(x)
            letters = letters_matrix(dfa.atoms, x, y, grid.centers, cell_y)[0]
            qn = dfa.transitions[:, letters].T      # (n_cells, nq): q -> q'
            if t == tlen - 1:
                if ctx.quantifier == EXISTS:
                    out[i] = bool((dfa.accepting[qn] & active).any())
                else:
                    out[i] = not bool((active & ~dfa.accepting[qn]).any())
                break
            stepped = np.zeros_like(active)
            for q in range(nq):
                if not active[:, q].any():
                    continue
                for qn_val in np.unique(qn[active[:, q], q]):
                    src = active[:, q] & (qn[:, q] == qn_val)
                    reached = (src.astype(float) @ grid.reach) > 0.0
                    stepped[:, qn_val] |= reached
            active = stepped
    return out
