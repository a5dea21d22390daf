"""Dynamic-programming value functions over the verification structure.

The backward recursion computes, per product grid node and time, the
optimal (inf or sup over the adversary) probability of reaching the
accepting set at the horizon.  On finite instances the recursion is
exact; on continuous models it runs over a product grid with fixed
quadrature for the stochastic disturbance and a finite candidate set
for the adversarial one.  The tables serve as the brute-force oracle
for the certificate machinery and as a certificate source themselves.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import certify
from .interp import corner_terms
from .ltlf import FORALL, EXISTS, HyperFormula, compile_body
from .product import TRAILING, LITERAL, VerificationStructure, letters_matrix

INF_MODE = "inf"
SUP_MODE = "sup"


class OracleError(ValueError):
    pass


def mode_for(quantifier: str) -> str:
    return INF_MODE if quantifier == FORALL else SUP_MODE


# ---------------------------------------------------------------------------
# grids


@dataclass
class GridSpec:
    """Discretization of the product space plus disturbance rules.

    `resolution` counts grid nodes per state dimension (both copies use
    the same working box).  w1 is integrated by fixed quadrature; w2
    ranges over a finite candidate list inside the truncated support.
    """

    axes1: tuple[np.ndarray, ...]
    axes2: tuple[np.ndarray, ...]
    w1_nodes: np.ndarray
    w1_weights: np.ndarray
    w2_candidates: np.ndarray

    def __post_init__(self):
        if any(len(a) < 2 for a in self.axes1 + self.axes2):
            raise OracleError("grid needs at least 2 nodes per dimension")
        if abs(self.w1_weights.sum() - 1.0) > 1e-12:
            raise OracleError("quadrature weights must sum to 1")

    @staticmethod
    def for_structure(vs: VerificationStructure, resolution: int,
                      w1_quad_per_dim: int = 9,
                      w2_candidates_per_dim: int = 21) -> "GridSpec":
        model = vs.model
        axes = tuple(model.domain.grid_axes(resolution))
        nodes, weights = model.disturbance_quadrature(w1_quad_per_dim)
        support = model.truncated_support()
        cand = support.grid_points(w2_candidates_per_dim)
        return GridSpec(axes1=axes, axes2=axes, w1_nodes=nodes,
                        w1_weights=weights, w2_candidates=cand)

    @property
    def points1(self) -> np.ndarray:
        return _grid_points(self.axes1)

    @property
    def points2(self) -> np.ndarray:
        return _grid_points(self.axes2)

    @property
    def n1(self) -> int:
        return int(np.prod([len(a) for a in self.axes1]))

    @property
    def n2(self) -> int:
        return int(np.prod([len(a) for a in self.axes2]))


def _grid_points(axes) -> np.ndarray:
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass
class ValueTable:
    """DP values u_t over (time, automaton state, x1 node, x2 node)."""

    grid: GridSpec
    mode: str
    acceptance: str
    values: np.ndarray  # (T+1, nq, n1, n2), all entries in [0, 1]

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1

    @property
    def n_q(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# grid DP

MEMORY_CAP_BYTES = 4 << 30


def dp_backward(vs: VerificationStructure, grid: GridSpec, mode: str | None = None,
                memory_cap: int = MEMORY_CAP_BYTES) -> ValueTable:
    """Backward recursion on the product grid.

    Terminal layer is the accepting indicator; earlier layers take the
    quadrature expectation over w1 of the multilinearly interpolated
    next layer (zero outside the box), optimized over the adversary
    candidates.  Values are clamped to [0, 1].
    """
    model = vs.model
    if mode is None:
        mode = mode_for(vs.quantifier)
    if mode not in (INF_MODE, SUP_MODE):
        raise OracleError(f"unknown mode {mode!r}")
    T = model.horizon
    nq = vs.dfa.n_states
    n1, n2 = grid.n1, grid.n2
    need = (T + 1) * nq * n1 * n2 * 8
    if need > memory_cap:
        raise OracleError(
            f"value table would need {need / 1e9:.1f} GB; use a coarser resolution")

    pts1, pts2 = grid.points1, grid.points2
    letters = vs.letter_grid(pts1, pts2)  # (n1, n2)
    trans = vs.dfa.transitions
    qnext = np.stack([trans[q, letters] for q in range(nq)])  # (nq, n1, n2)
    if vs.acceptance == TRAILING:
        acc = vs.dfa.accepting[qnext].astype(float)
    else:
        acc = np.broadcast_to(
            vs.dfa.accepting.astype(float)[:, None, None], (nq, n1, n2)).copy()

    values = np.empty((T + 1, nq, n1, n2))
    values[T] = acc

    # interpolation structures: the two copies move independently, so the
    # w1 expectation touches only the x1 axis and each w2 candidate only x2
    side1 = []  # per quadrature node: corner terms of f(pts1, w1)
    for a in range(grid.w1_nodes.shape[0]):
        w = np.broadcast_to(grid.w1_nodes[a], (n1, grid.w1_nodes.shape[1]))
        side1.append(corner_terms(grid.axes1, model.step(pts1, w)))
    side2 = []
    for b in range(grid.w2_candidates.shape[0]):
        w = np.broadcast_to(grid.w2_candidates[b], (n2, grid.w2_candidates.shape[1]))
        side2.append(corner_terms(grid.axes2, model.step(pts2, w)))

    wts = grid.w1_weights
    for t in range(T - 1, -1, -1):
        u_next = values[t + 1]  # (nq, n1, n2)
        # average over w1 along the x1 axis, once per automaton state
        ubar = np.zeros((nq, n1, n2))
        for a, terms in enumerate(side1):
            for flat, w in terms:
                ubar += (wts[a] * w)[None, :, None] * u_next[:, flat, :]
        best = None
        for terms in side2:
            cb = np.zeros((nq, n1, n2))
            for flat, w in terms:
                cb += w[None, None, :] * ubar[:, :, flat]
            # cb[q', i, j] is the expected next value if the automaton is
            # in q' after the current label; select per current q
            vals_b = _select_by_qnext(cb, qnext)
            if best is None:
                best = vals_b
            elif mode == INF_MODE:
                np.minimum(best, vals_b, out=best)
            else:
                np.maximum(best, vals_b, out=best)
        values[t] = np.clip(best, 0.0, 1.0)
    return ValueTable(grid=grid, mode=mode, acceptance=vs.acceptance, values=values)


def _select_by_qnext(cb: np.ndarray, qnext: np.ndarray) -> np.ndarray:
    """cb (nq, n1, n2) indexed per current-q via qnext (nq, n1, n2)."""
    nq, n1, n2 = cb.shape
    i = np.arange(n1)[None, :, None]
    j = np.arange(n2)[None, None, :]
    return cb[qnext, i, j]


# ---------------------------------------------------------------------------
# finite instances (desk-scale exact oracle)


@dataclass
class FiniteInstance:
    """Tiny fully-enumerable system used for exact cross-checks.

    States carry coordinates (for distance atoms) and output vectors;
    the disturbance is a finite distribution; dynamics are a lookup
    table state x disturbance -> state.
    """

    points: np.ndarray     # (n_s, d_x) state coordinates
    outputs: np.ndarray    # (n_s, d_y)
    trans: np.ndarray      # (n_s, n_w) int successor indices
    w_probs: np.ndarray    # (n_w,)
    initial: np.ndarray    # (k,) int indices into points
    horizon: int

    def __post_init__(self):
        if abs(self.w_probs.sum() - 1.0) > 1e-12:
            raise OracleError("disturbance probabilities must sum to 1")
        if self.trans.shape != (self.points.shape[0], self.w_probs.shape[0]):
            raise OracleError("transition table shape mismatch")

    @property
    def n_states(self) -> int:
        return self.points.shape[0]

    @property
    def n_w(self) -> int:
        return self.w_probs.shape[0]

    def letter_grid(self, atoms) -> np.ndarray:
        return letters_matrix(atoms, self.points, self.outputs,
                              self.points, self.outputs)

    def enumerate_paths(self, x0_idx: int):
        """All length-(T+1) state-index paths from x0 with their probabilities."""
        paths = np.array([[x0_idx]], dtype=np.int64)
        probs = np.ones(1)
        for _t in range(self.horizon):
            cur = paths[:, -1]
            nxt = self.trans[cur]                    # (m, n_w)
            m = paths.shape[0]
            paths = np.repeat(paths, self.n_w, axis=0)
            paths = np.concatenate([paths, nxt.reshape(-1, 1)], axis=1)
            probs = (probs[:, None] * self.w_probs[None, :]).reshape(-1)
        return paths, probs

    def enumerate_all_paths(self):
        """Paths from every initial state (uniform over nothing: possibilistic)."""
        chunks = [self.enumerate_paths(int(i))[0] for i in self.initial]
        return np.concatenate(chunks, axis=0)


def exact_values(inst: FiniteInstance, dfa, mode: str,
                 acceptance: str = TRAILING) -> np.ndarray:
    """Exact backward recursion on a finite instance.

    Returns values (T+1, nq, n_s, n_s): the optimal probability of
    acceptance at the horizon from (x1=i, x2=j, q) at each time.
    """
    n, nw, nq, T = inst.n_states, inst.n_w, dfa.n_states, inst.horizon
    letters = inst.letter_grid(dfa.atoms)          # (n, n)
    qnext = np.stack([dfa.transitions[q, letters] for q in range(nq)])  # (nq,n,n)
    if acceptance == TRAILING:
        acc = dfa.accepting[qnext].astype(float)
    elif acceptance == LITERAL:
        acc = np.broadcast_to(dfa.accepting.astype(float)[:, None, None],
                              (nq, n, n)).copy()
    else:
        raise OracleError(f"unknown acceptance convention {acceptance!r}")

    values = np.empty((T + 1, nq, n, n))
    values[T] = acc
    i_next = inst.trans  # (n, nw)
    for t in range(T - 1, -1, -1):
        u = values[t + 1]  # (nq, n, n)
        best = None
        for b in range(nw):
            j_next = i_next[:, b]  # (n,)
            exp = np.zeros((nq, n, n))
            for a in range(nw):
                # u[qnext[q,i,j], trans[i,a], trans[j,b]]
                exp += inst.w_probs[a] * u[qnext,
                                           i_next[:, a][None, :, None],
                                           j_next[None, None, :]]
            if best is None:
                best = exp
            elif mode == INF_MODE:
                np.minimum(best, exp, out=best)
            else:
                np.maximum(best, exp, out=best)
        values[t] = best
    return values


def finite_satisfaction(inst: FiniteInstance, hf: HyperFormula, dfa=None,
                        acceptance: str = TRAILING):
    """Per-initial-state satisfaction probability by full enumeration.

    Quantifies the companion trajectory exhaustively over all system
    trajectories (from every initial state), the direct reading of the
    trace semantics.  Returns dict x0_idx -> probability.
    """
    if dfa is None:
        dfa = compile_body(hf.body)
    letters = inst.letter_grid(dfa.atoms)
    companions = inst.enumerate_all_paths()        # (mc, T+1)
    out = {}
    for x0 in inst.initial:
        paths, probs = inst.enumerate_paths(int(x0))
        shape = (paths.shape[0], companions.shape[0])
        q = np.full(shape, dfa.q0, dtype=np.int64)
        last = inst.horizon + 1 if acceptance == TRAILING else inst.horizon
        for t in range(last):
            lt = letters[paths[:, t][:, None], companions[:, t][None, :]]
            q = dfa.transitions[q, lt]
        acc = dfa.accepting[q]
        sat = acc.all(axis=1) if hf.quantifier == FORALL else acc.any(axis=1)
        out[int(x0)] = float(probs @ sat)
    return out


def theorem1_check(inst: FiniteInstance, hf: HyperFormula,
                   acceptance: str = TRAILING, tol: float = 1e-12) -> dict:
    """Compare the policy-optimized product value (LHS) with the direct
    per-trajectory quantification (RHS) on a finite instance.

    The claimed reduction needs LHS <= RHS: certifying LHS >= p would
    then imply the property RHS >= p.  The report carries both numbers
    per initial state and flags GAP (strict <) and VIOLATION (>).
    """
    dfa = compile_body(hf.body)
    mode = mode_for(hf.quantifier)
    values = exact_values(inst, dfa, mode, acceptance)
    rhs = finite_satisfaction(inst, hf, dfa, acceptance)
    per_x0 = []
    for x0 in inst.initial:
        inits = values[0, dfa.q0, int(x0), inst.initial]
        lhs = float(inits.min() if mode == INF_MODE else inits.max())
        r = rhs[int(x0)]
        per_x0.append({
            "x0": int(x0),
            "lhs": lhs,
            "rhs": r,
            "gap": bool(lhs < r - tol),
            "violation": bool(lhs > r + tol),
        })
    return {
        "quantifier": hf.quantifier,
        "mode": mode,
        "per_x0": per_x0,
        "lhs_le_rhs": all(not e["violation"] for e in per_x0),
        "any_gap": any(e["gap"] for e in per_x0),
    }


# ---------------------------------------------------------------------------
# tables as certificates


def table_to_certificate(table: ValueTable, vs: VerificationStructure,
                         safety_margin: float = 0.0) -> "certify.Certificate":
    """Turn a DP table into a table-backed certificate.

    V(v, t) = max(u_t(v) - margin, 0) with alpha = 1; beta is the
    (clamped to <= 0) worst recursion residual re-measured on the grid
    nodes with the grid's own quadrature, so the certificate conditions
    hold by construction.
    """
    if safety_margin < 0:
        raise OracleError("safety margin must be >= 0")
    cert_values = np.clip(table.values - safety_margin, 0.0, 1.0)
    backing = certify.TableBacking(
        axes1=table.grid.axes1, axes2=table.grid.axes2, values=cert_values)
    mode = certify.UNIVERSAL if table.mode == INF_MODE else certify.EXISTENTIAL
    cert = certify.Certificate(backing=backing, alpha=1.0, beta=0.0, mode=mode,
                               horizon=table.horizon)
    residual = _table_recursion_residual(cert_values, table, vs)
    cert.beta = min(0.0, float(residual))
    return cert


def _table_recursion_residual(cert_values: np.ndarray, table: ValueTable,
                              vs: VerificationStructure) -> float:
    """min over nodes and t of (opt_w2 E_w1[V(next, t)] - V(node, t-1))."""
    grid = table.grid
    model = vs.model
    nq, n1, n2 = cert_values.shape[1:]
    pts1, pts2 = grid.points1, grid.points2
    letters = vs.letter_grid(pts1, pts2)
    qnext = np.stack([vs.dfa.transitions[q, letters] for q in range(nq)])
    side1 = []
    for a in range(grid.w1_nodes.shape[0]):
        w = np.broadcast_to(grid.w1_nodes[a], (n1, grid.w1_nodes.shape[1]))
        side1.append(corner_terms(grid.axes1, model.step(pts1, w)))
    side2 = []
    for b in range(grid.w2_candidates.shape[0]):
        w = np.broadcast_to(grid.w2_candidates[b], (n2, grid.w2_candidates.shape[1]))
        side2.append(corner_terms(grid.axes2, model.step(pts2, w)))
    worst = np.inf
    wts = grid.w1_weights
    for t in range(1, table.horizon + 1):
        u_next = cert_values[t]
        ubar = np.zeros((nq, n1, n2))
        for a, terms in enumerate(side1):
            for flat, w in terms:
                ubar += (wts[a] * w)[None, :, None] * u_next[:, flat, :]
        best = None
        for terms in side2:
            cb = np.zeros((nq, n1, n2))
            for flat, w in terms:
                cb += w[None, None, :] * ubar[:, :, flat]
            vals_b = _select_by_qnext(cb, qnext)
            if best is None:
                best = vals_b
            elif table.mode == INF_MODE:
                np.minimum(best, vals_b, out=best)
            else:
                np.maximum(best, vals_b, out=best)
        worst = min(worst, float((best - cert_values[t - 1]).min()))
    return worst


# ---------------------------------------------------------------------------
# binary table export

_MAGIC = b"OVTB"
_VERSION = 1
_MODES = {INF_MODE: 0, SUP_MODE: 1}
_CONVS = {TRAILING: 0, LITERAL: 1}


def write_table(path, table: ValueTable) -> None:
    """Binary layout: header (dims, axis lengths + nodes, disturbance rules,
    horizon, mode, convention) followed by row-major float64 values."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<HHBB", _VERSION, table.values.shape[1],
                          _MODES[table.mode], _CONVS[table.acceptance]))
    buf.write(struct.pack("<I", table.horizon))
    for axes in (table.grid.axes1, table.grid.axes2):
        buf.write(struct.pack("<I", len(axes)))
        for ax in axes:
            buf.write(struct.pack("<I", len(ax)))
            buf.write(np.asarray(ax, dtype="<f8").tobytes())
    for arr in (table.grid.w1_nodes, table.grid.w1_weights, table.grid.w2_candidates):
        a = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<II", a.shape[0], a.shape[1] if a.ndim > 1 else 0))
        buf.write(a.tobytes())
    buf.write(np.ascontiguousarray(table.values, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_table(path) -> ValueTable:
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n):
        nonlocal off
        out = data[off:off + n]
        off += n
        return out

    if take(4) != _MAGIC:
        raise OracleError("not a value-table file")
    version, nq, mode_i, conv_i = struct.unpack("<HHBB", take(6))
    if version != _VERSION:
        raise OracleError(f"unsupported table version {version}")
    (T,) = struct.unpack("<I", take(4))
    axes_pair = []
    for _ in range(2):
        (d,) = struct.unpack("<I", take(4))
        axes = []
        for _k in range(d):
            (ln,) = struct.unpack("<I", take(4))
            axes.append(np.frombuffer(take(8 * ln), dtype="<f8").copy())
        axes_pair.append(tuple(axes))
    arrs = []
    for _ in range(3):
        rows, cols = struct.unpack("<II", take(8))
        cnt = rows * (cols if cols else 1)
        a = np.frombuffer(take(8 * cnt), dtype="<f8").copy()
        arrs.append(a.reshape(rows, cols) if cols else a)
    grid = GridSpec(axes1=axes_pair[0], axes2=axes_pair[1], w1_nodes=arrs[0],
                    w1_weights=arrs[1], w2_candidates=arrs[2])
    n1, n2 = grid.n1, grid.n2
    values = np.frombuffer(take(8 * (T + 1) * nq * n1 * n2), dtype="<f8").copy()
    values = values.reshape(T + 1, nq, n1, n2)
    mode = {v: k for k, v in _MODES.items()}[mode_i]
    conv = {v: k for k, v in _CONVS.items()}[conv_i]
    return ValueTable(grid=grid, mode=mode, acceptance=conv, values=values)
