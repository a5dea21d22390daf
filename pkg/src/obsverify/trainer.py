"""Gradient-descent synthesis of MLP-backed certificates.

The loss mirrors the certificate conditions: a terminal hinge keeping
V(., T) under the accepting indicator, a recursion hinge keeping each
one-step expectation above V(., t-1)/alpha + beta (the adversary inf
approximated by the min over N sampled candidates), and a term pushing
beta positive.  The three raw components are divided by their detached
magnitudes ("dynamic normalization") so the fixed weights control
relative influence regardless of scale.

Gradients are hand-rolled reverse mode (see mlp.py) and checked against
central finite differences in the tests.  All stochasticity flows from
the config seed, so training is bitwise reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import certify, mlp
from .certify import Certificate, InnerRule, MlpBacking, UNIVERSAL, EXISTENTIAL
from .ltlf import FORALL
from .product import VerificationStructure
from .system import sample_truncated


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 2000
    dataset_size: int = 100_000
    batch_size: int = 256
    lr: float = 1e-3
    lr_final: float = 1e-5
    momentum: float = 0.9
    lambda_term: float = 1.5
    lambda_rec: float = 1.0
    lambda_beta: float = 2.5
    n_adversary: int = 30      # N: sampled w2 candidates inside the rec loss
    m_inner: int = 16          # M: Monte Carlo samples for the inner expectation
    seed: int = 0
    beta_init: float = 0.0
    hidden: tuple[int, ...] = (64, 64, 32)
    traj_fraction: float = 0.7  # rest of each batch is uniform over the domain
    alpha: float = 1.0
    target_p: float | None = None
    eval_every: int = 100
    eval_per_dim: int = 15
    eval_w2_per_dim: int = 11
    eval_quad_nodes: int = 7
    eval_x0_scan: int = 41
    early_stop: bool = True
    denom_floor: float = 1e-8
    warm_start_table: object = None  # optional oracle.ValueTable, same structure


@dataclass
class Dataset:
    """Product points harvested from rolled-out trajectory pairs."""

    x1: np.ndarray      # (n, T+1, d)
    x2: np.ndarray
    q: np.ndarray       # (n, T+1)
    alive: np.ndarray   # (n, T+1) bool


def build_dataset(vs: VerificationStructure, n_pairs: int,
                  rng: np.random.Generator) -> Dataset:
    """Roll n trajectory pairs: x0, x0' uniform on X0; w1, w2 ~ mu."""
    model = vs.model
    T = model.horizon
    x1 = np.empty((n_pairs, T + 1, model.state_dim))
    x2 = np.empty_like(x1)
    q = np.empty((n_pairs, T + 1), dtype=np.int64)
    alive = np.ones((n_pairs, T + 1), dtype=bool)
    x1[:, 0] = model.initial.sample(rng, n_pairs)
    x2[:, 0] = model.initial.sample(rng, n_pairs)
    q[:, 0] = vs.dfa.q0
    cx1, cx2 = x1[:, 0], x2[:, 0]
    cq = q[:, 0].copy()
    calive = alive[:, 0].copy()
    for t in range(T):
        w1 = model.sample_disturbance(rng, n_pairs)
        w2 = model.sample_disturbance(rng, n_pairs)
        cx1, cx2, cq, calive = vs.step_batch(cx1, cx2, cq, calive, w1, w2)
        x1[:, t + 1] = cx1
        x2[:, t + 1] = cx2
        q[:, t + 1] = cq
        alive[:, t + 1] = calive
    return Dataset(x1=x1, x2=x2, q=q, alive=alive)


@dataclass
class Batch:
    """One training batch: product points with a recursion time step."""

    x1: np.ndarray   # (B, d)
    x2: np.ndarray
    q: np.ndarray    # (B,)
    t: np.ndarray    # (B,) recursion times in [1, T]
    w2: np.ndarray   # (N, d_w) adversary draws (truncated mu), shared batch-wide
    w1: np.ndarray   # (M, d_w) inner-expectation draws (mu), shared batch-wide


def sample_batch(vs: VerificationStructure, data: Dataset, cfg: TrainConfig,
                 rng: np.random.Generator) -> Batch:
    model = vs.model
    T = model.horizon
    B = cfg.batch_size
    n_traj = int(round(B * cfg.traj_fraction))
    n_unif = B - n_traj

    idx = rng.integers(0, data.x1.shape[0], size=n_traj)
    tau = rng.integers(0, T, size=n_traj)  # v at tau, recursion time tau+1
    x1 = data.x1[idx, tau]
    x2 = data.x2[idx, tau]
    q = data.q[idx, tau]
    ok = data.alive[idx, tau]
    t = tau + 1
    if not np.all(ok):
        # resample dead points uniformly; rare once the domain is invariant
        rep = int((~ok).sum())
        x1[~ok] = model.domain.sample(rng, rep)
        x2[~ok] = model.domain.sample(rng, rep)
        q[~ok] = rng.integers(0, vs.dfa.n_states, size=rep)

    ux1 = model.domain.sample(rng, n_unif)
    ux2 = model.domain.sample(rng, n_unif)
    uq = rng.integers(0, vs.dfa.n_states, size=n_unif)
    ut = rng.integers(1, T + 1, size=n_unif)

    w2 = sample_truncated(model.disturbance, rng, cfg.n_adversary,
                          model.truncation_sigmas)
    w1 = model.sample_disturbance(rng, cfg.m_inner)
    return Batch(
        x1=np.concatenate([x1, ux1]), x2=np.concatenate([x2, ux2]),
        q=np.concatenate([q, uq]), t=np.concatenate([t, ut]),
        w2=w2, w1=w1)


# ---------------------------------------------------------------------------
# loss and gradients


@dataclass
class LossValues:
    total: float
    term: float
    rec: float
    beta_term: float


def _forward_rows(params, x1, x2, q, t_norm_num, need_cache=False):
    X = mlp.features(params, x1, x2, q, t_norm_num)
    return mlp.forward(params, X, need_cache=need_cache), X


def loss_components(params: mlp.MlpParams, beta: float, batch: Batch,
                    vs: VerificationStructure, cfg: TrainConfig):
    """Raw loss components and their gradients (before dynamic normalization).

    Returns (LossValues-without-total, grads_w, grads_b, dbeta) where the
    gradient lists are per-component dicts keyed "term"/"rec"/"beta".
    """
    model = vs.model
    B = batch.x1.shape[0]
    N, M = batch.w2.shape[0], batch.w1.shape[0]
    T = model.horizon
    zero_w = [np.zeros_like(w) for w in params.weights]
    zero_b = [np.zeros_like(b) for b in params.biases]

    # ----- terminal component ---------------------------------------------
    (vT, cacheT), _X = _forward_rows(params, batch.x1, batch.x2, batch.q, T,
                                     need_cache=True)
    acc = vs.accepting_batch(batch.x1, batch.x2, batch.q,
                             np.ones(B, dtype=bool))
    term_per_point = np.where(acc, np.maximum(vT - 1.0, 0.0), np.maximum(vT, 0.0))
    L_term = float(term_per_point.mean())
    dterm = np.where(acc, (vT > 1.0), (vT > 0.0)).astype(float) / B
    gw_term, gb_term = mlp.backward(params, cacheT, dterm)

    # ----- recursion component ---------------------------------------------
    # current-state values at t-1
    (v_prev, cache_prev), _ = _forward_rows(params, batch.x1, batch.x2, batch.q,
                                            batch.t - 1, need_cache=True)
    letters = vs.letters_for(batch.x1, batch.x2)
    q_next = vs.dfa.transitions[batch.q, letters]

    # successor coordinates: x1 under each of M draws, x2 under each of N
    d = model.state_dim
    nx1 = model.step(np.repeat(batch.x1, M, axis=0),
                     np.tile(batch.w1, (B, 1))).reshape(B, M, d)
    alive1 = model.domain.contains(nx1.reshape(-1, d)).reshape(B, M)
    nx2 = model.step(np.repeat(batch.x2, N, axis=0),
                     np.tile(batch.w2, (B, 1))).reshape(B, N, d)
    alive2 = model.domain.contains(nx2.reshape(-1, d)).reshape(B, N)

    # one forward over every (point, candidate, inner-sample) row
    nq = params.n_q
    in_dim = params.in_dim
    X = np.empty((B, N, M, in_dim))
    X[..., :d] = nx1[:, None, :, :]
    X[..., d:2 * d] = nx2[:, :, None, :]
    onehot = np.zeros((B, nq))
    onehot[np.arange(B), q_next] = 1.0
    X[..., 2 * d:2 * d + nq] = onehot[:, None, None, :]
    X[..., -1] = (batch.t / max(T, 1))[:, None, None]
    # candidate screening in float32; the chosen branch is recomputed in
    # float64 below, so loss values and gradients stay double precision
    vals32 = mlp.forward_f32(params, X.reshape(-1, in_dim)).reshape(B, N, M)
    vals32 = vals32 * (alive1[:, None, :] & alive2[:, :, None])
    inner = vals32.mean(axis=2, dtype=np.float64)
    if vs.quantifier == FORALL:
        j_star = np.argmin(inner, axis=1)
    else:
        j_star = np.argmax(inner, axis=1)

    X_star = X[np.arange(B), j_star].reshape(B * M, in_dim)
    rows_alive = (alive1 & alive2[np.arange(B), j_star][:, None]).reshape(-1)
    vals_star, cache_star = mlp.forward(params, X_star, need_cache=True)
    vals_star = vals_star * rows_alive
    stat = vals_star.reshape(B, M).mean(axis=1)
    margin = v_prev / cfg.alpha + beta - stat
    rec_per_point = np.maximum(margin, 0.0)
    L_rec = float(rec_per_point.mean())
    active = (margin > 0.0).astype(float)

    # gradient through V(v, t-1)
    gw_rec, gb_rec = mlp.backward(params, cache_prev, active / (B * cfg.alpha))
    dbeta_rec = float(active.mean())
    # gradient through the achieved min/max branch
    dvals = -np.repeat(active, M) / (B * M) * rows_alive
    gw_star, gb_star = mlp.backward(params, cache_star, dvals)
    gw_rec = [a + b for a, b in zip(gw_rec, gw_star)]
    gb_rec = [a + b for a, b in zip(gb_rec, gb_star)]

    # ----- beta component ---------------------------------------------------
    L_beta = float(np.logaddexp(0.0, -beta) - 0.01 * max(beta, 0.0))
    dbeta_beta = float(-_sigmoid(-beta) - (0.01 if beta > 0 else 0.0))

    comps = LossValues(total=0.0, term=L_term, rec=L_rec, beta_term=L_beta)
    grads_w = {"term": gw_term, "rec": gw_rec, "beta": zero_w}
    grads_b = {"term": gb_term, "rec": gb_rec, "beta": zero_b}
    dbeta = {"term": 0.0, "rec": dbeta_rec, "beta": dbeta_beta}
    return comps, grads_w, grads_b, dbeta


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x > -60 else 0.0


def total_loss_and_grads(params, beta, batch, vs, cfg,
                         frozen_denoms: tuple[float, float, float] | None = None):
    """Dynamically normalized total loss and its gradients.

    The per-component denominators |L_k| are treated as constants of the
    batch (stop-gradient); pass `frozen_denoms` to pin them, e.g. for
    finite-difference checks of the differentiated path.
    """
    comps, gw, gb, dbeta = loss_components(params, beta, batch, vs, cfg)
    raw = (comps.term, comps.rec, comps.beta_term)
    denoms = frozen_denoms if frozen_denoms is not None else tuple(
        max(abs(v), cfg.denom_floor) for v in raw)
    lams = (cfg.lambda_term, cfg.lambda_rec, cfg.lambda_beta)
    total = sum(l * v / d for l, v, d in zip(lams, raw, denoms))
    names = ("term", "rec", "beta")
    tw = [np.zeros_like(w) for w in params.weights]
    tb = [np.zeros_like(b) for b in params.biases]
    tbeta = 0.0
    for name, lam, den in zip(names, lams, denoms):
        scale = lam / den
        tw = [a + scale * g for a, g in zip(tw, gw[name])]
        tb = [a + scale * g for a, g in zip(tb, gb[name])]
        tbeta += scale * dbeta[name]
    if not np.isfinite(total):
        raise TrainError("non-finite training loss")
    comps.total = float(total)
    return comps, tw, tb, tbeta, denoms


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    certificate: Certificate
    log: list[dict]
    certified: bool
    epochs_run: int
    final_bound: float | None


def _warm_start_fit(params: mlp.MlpParams, table, vs, cfg,
                    rng: np.random.Generator, steps: int = 400) -> mlp.MlpParams:
    """Regression pre-fit of the network to a DP table (optional)."""
    model = vs.model
    T = model.horizon
    axes = table.grid.axes1 + table.grid.axes2
    from .interp import interpolate
    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    for step in range(steps):
        B = 1024
        x1 = model.domain.sample(rng, B)
        x2 = model.domain.sample(rng, B)
        q = rng.integers(0, table.values.shape[1], size=B)
        t = rng.integers(0, T + 1, size=B)
        target = np.empty(B)
        pts = np.concatenate([x1, x2], axis=1)
        for (ti, qi) in {(int(a), int(b)) for a, b in zip(t, q)}:
            sel = (t == ti) & (q == qi)
            target[sel] = interpolate(axes, table.values[ti, qi], pts[sel])
        # separate forward per time value (features need scalar-compatible t)
        X = mlp.features(params, x1, x2, q, t)
        vals, cache = mlp.forward(params, X, need_cache=True)
        diff = vals - target
        gw, gb = mlp.backward(params, cache, 2.0 * diff / B)
        lr = 1e-2
        for k in range(len(params.weights)):
            vel_w[k] = 0.9 * vel_w[k] + gw[k]
            vel_b[k] = 0.9 * vel_b[k] + gb[k]
            params.weights[k] -= lr * vel_w[k]
            params.biases[k] -= lr * vel_b[k]
    return params


def train(vs: VerificationStructure, cfg: TrainConfig) -> TrainResult:
    """Synthesize an MLP certificate; stops early once it certifies."""
    model = vs.model
    T = model.horizon
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    data_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    data = build_dataset(vs, cfg.dataset_size, data_rng)
    params = mlp.init_params(model.state_dim, vs.dfa.n_states, T, rng,
                             hidden=cfg.hidden)
    if cfg.warm_start_table is not None:
        params = _warm_start_fit(params, cfg.warm_start_table, vs, cfg, rng)
    beta = float(cfg.beta_init)
    mode = UNIVERSAL if vs.quantifier == FORALL else EXISTENTIAL

    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    vel_beta = 0.0
    log: list[dict] = []
    certified = False
    last_bound = None
    epochs_run = 0

    eval_inner = InnerRule.quadrature(model, cfg.eval_quad_nodes)
    eval_cands = model.truncated_support().grid_points(cfg.eval_w2_per_dim)

    def current_certificate() -> Certificate:
        return Certificate(backing=MlpBacking(params.copy()), alpha=cfg.alpha,
                           beta=beta, mode=mode, horizon=T,
                           meta={"seed": cfg.seed})

    for epoch in range(cfg.epochs):
        batch = sample_batch(vs, data, cfg, rng)
        comps, gw, gb, gbeta, _ = total_loss_and_grads(params, beta, batch, vs, cfg)
        lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (
            1.0 + math.cos(math.pi * epoch / max(cfg.epochs - 1, 1)))
        for k in range(len(params.weights)):
            vel_w[k] = cfg.momentum * vel_w[k] + gw[k]
            vel_b[k] = cfg.momentum * vel_b[k] + gb[k]
            params.weights[k] -= lr * vel_w[k]
            params.biases[k] -= lr * vel_b[k]
        vel_beta = cfg.momentum * vel_beta + gbeta
        beta -= lr * vel_beta
        epochs_run = epoch + 1

        entry = {"epoch": epoch, "L_total": comps.total, "L_term": comps.term,
                 "L_rec": comps.rec, "L_beta": comps.beta_term, "beta": beta,
                 "bound": None}
        if cfg.early_stop and (epoch + 1) % cfg.eval_every == 0:
            cert = current_certificate()
            rep = certify.validate_dense(cert, vs, per_dim=cfg.eval_per_dim,
                                         w2_candidates=eval_cands,
                                         inner=eval_inner)
            b = certify.bound(cert, vs, scan_per_dim=cfg.eval_x0_scan)
            entry["bound"] = b["overall"]
            last_bound = b["overall"]
            if rep.clean and (cfg.target_p is None or b["overall"] >= cfg.target_p):
                log.append(entry)
                certified = True
                break
        log.append(entry)

    cert = current_certificate()
    if not certified and cfg.early_stop:
        rep = certify.validate_dense(cert, vs, per_dim=cfg.eval_per_dim,
                                     w2_candidates=eval_cands, inner=eval_inner)
        b = certify.bound(cert, vs, scan_per_dim=cfg.eval_x0_scan)
        last_bound = b["overall"]
        certified = rep.clean and (cfg.target_p is None or b["overall"] >= cfg.target_p)
    cert.meta["certified"] = bool(certified)
    return TrainResult(certificate=cert, log=log, certified=bool(certified),
                       epochs_run=epochs_run, final_bound=last_bound)
