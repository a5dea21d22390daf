"""Partially observable discrete-time stochastic system model.

A model bundles the state/output/disturbance dimensions, a bounded
working domain, an initial region, vectorized dynamics and output
expressions, the disturbance distribution, and a finite horizon.
All sampling takes an explicit numpy Generator so runs are reproducible;
parallel work derives child generators from (seed, task index).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, BoxUnion, as_region
from .expr import ExprVector


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# disturbance distributions


@dataclass(frozen=True)
class GaussianDiag:
    """Independent Gaussian components; sampling is untruncated."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ModelError("mean/std length mismatch")
        if any(s <= 0 for s in self.std):
            raise ModelError("std components must be > 0")

    @property
    def dim(self) -> int:
        return len(self.mean)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(self.mean, self.std, size=(n, self.dim))

    def truncated_box(self, sigmas: float) -> Box:
        m, s = np.asarray(self.mean), np.asarray(self.std)
        return Box.make(m - sigmas * s, m + sigmas * s)

    def quadrature(self, nodes_per_dim: int, sigmas: float):
        axes = []
        for k in range(self.dim):
            lo = self.mean[k] - sigmas * self.std[k]
            hi = self.mean[k] + sigmas * self.std[k]
            x, w = _legendre_on(lo, hi, nodes_per_dim)
            dens = np.exp(-0.5 * ((x - self.mean[k]) / self.std[k]) ** 2)
            wk = w * dens
            axes.append((x, wk / wk.sum()))
        return _tensor_quadrature(axes)


@dataclass(frozen=True)
class UniformBox:
    box: Box

    @property
    def dim(self) -> int:
        return self.box.dim

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.box.sample(rng, n)

    def truncated_box(self, sigmas: float) -> Box:
        return self.box

    def quadrature(self, nodes_per_dim: int, sigmas: float):
        axes = []
        for k in range(self.dim):
            x, w = _legendre_on(self.box.lo[k], self.box.hi[k], nodes_per_dim)
            axes.append((x, w / w.sum()))
        return _tensor_quadrature(axes)


@dataclass(frozen=True)
class TruncatedGaussian:
    """Gaussian restricted to mean +/- sigmas*std, renormalized; rejection sampled."""

    mean: tuple[float, ...]
    std: tuple[float, ...]
    sigmas: float = 3.0

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ModelError("mean/std length mismatch")
        if any(s <= 0 for s in self.std):
            raise ModelError("std components must be > 0")
        if self.sigmas <= 0:
            raise ModelError("truncation sigmas must be > 0")

    @property
    def dim(self) -> int:
        return len(self.mean)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        m, s = np.asarray(self.mean), np.asarray(self.std)
        out = rng.normal(m, s, size=(n, self.dim))
        bad = np.any(np.abs(out - m) > self.sigmas * s, axis=1)
        while np.any(bad):
            out[bad] = rng.normal(m, s, size=(int(bad.sum()), self.dim))
            bad = np.any(np.abs(out - m) > self.sigmas * s, axis=1)
        return out

    def truncated_box(self, sigmas: float) -> Box:
        # own truncation dominates; `sigmas` from callers is ignored beyond it
        eff = min(self.sigmas, sigmas) if sigmas else self.sigmas
        m, s = np.asarray(self.mean), np.asarray(self.std)
        return Box.make(m - eff * s, m + eff * s)

    def quadrature(self, nodes_per_dim: int, sigmas: float):
        eff = min(self.sigmas, sigmas) if sigmas else self.sigmas
        axes = []
        for k in range(self.dim):
            lo = self.mean[k] - eff * self.std[k]
            hi = self.mean[k] + eff * self.std[k]
            x, w = _legendre_on(lo, hi, nodes_per_dim)
            dens = np.exp(-0.5 * ((x - self.mean[k]) / self.std[k]) ** 2)
            wk = w * dens
            axes.append((x, wk / wk.sum()))
        return _tensor_quadrature(axes)


Distribution = GaussianDiag | UniformBox | TruncatedGaussian


def _legendre_on(lo: float, hi: float, n: int):
    """Gauss-Legendre nodes/weights mapped onto [lo, hi]."""
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), w * half


def _tensor_quadrature(axes):
    """Tensor product of per-dimension (nodes, weights); weights sum to 1."""
    mesh = np.meshgrid(*[a[0] for a in axes], indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=-1)
    wmesh = np.meshgrid(*[a[1] for a in axes], indexing="ij")
    weights = np.ones(nodes.shape[0])
    for wm in wmesh:
        weights = weights * wm.ravel()
    weights = weights / weights.sum()
    return nodes, weights


# ---------------------------------------------------------------------------
# the system model


def state_vars(d: int) -> list[str]:
    return [f"x{i + 1}" for i in range(d)]


def dist_vars(d: int) -> list[str]:
    return [f"w{i + 1}" for i in range(d)]


@dataclass(frozen=True)
class Trajectory:
    """T+1 states plus (optionally) the T disturbance draws that generated them."""

    states: np.ndarray  # (T+1, d_x)
    disturbances: np.ndarray | None = None  # (T, d_w)

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1


@dataclass(frozen=True)
class Poss:
    """Stochastic system (X, X0, Y, W, mu, f, Omega, T) on a bounded working box."""

    state_dim: int
    output_dim: int
    disturbance_dim: int
    domain: Box
    initial: BoxUnion
    dynamics: ExprVector
    output: ExprVector
    disturbance: Distribution
    horizon: int
    truncation_sigmas: float = 3.0

    def __post_init__(self):
        if self.horizon < 0:
            raise ModelError("horizon must be >= 0")
        if self.domain.dim != self.state_dim:
            raise ModelError("domain dimension mismatch")
        if self.initial.dim != self.state_dim:
            raise ModelError("initial region dimension mismatch")
        for b in self.initial.boxes:
            if not self.domain.contains_box(b):
                raise ModelError("initial region must lie inside the domain")
        if len(self.dynamics) != self.state_dim:
            raise ModelError("dynamics must have state_dim components")
        if len(self.output) != self.output_dim:
            raise ModelError("output must have output_dim components")
        if self.disturbance.dim != self.disturbance_dim:
            raise ModelError("disturbance dimension mismatch")

    @staticmethod
    def make(*, dynamics: list[str], output: list[str], domain, initial,
             disturbance: Distribution, horizon: int, state_dim: int | None = None,
             truncation_sigmas: float = 3.0) -> "Poss":
        d_x = state_dim if state_dim is not None else len(dynamics)
        d_w = disturbance.dim
        allowed = set(state_vars(d_x)) | set(dist_vars(d_w))
        dyn = ExprVector.parse(dynamics, allowed)
        out = ExprVector.parse(output, set(state_vars(d_x)))
        dom = domain if isinstance(domain, Box) else Box.make(*domain)
        init = as_region(initial)
        return Poss(
            state_dim=d_x,
            output_dim=len(output),
            disturbance_dim=d_w,
            domain=dom,
            initial=init,
            dynamics=dyn,
            output=out,
            disturbance=disturbance,
            horizon=horizon,
            truncation_sigmas=truncation_sigmas,
        )

    # -- vectorized evaluation ------------------------------------------------

    def _env_state(self, x: np.ndarray) -> dict[str, np.ndarray]:
        x = np.asarray(x, dtype=float)
        return {name: x[..., i] for i, name in enumerate(state_vars(self.state_dim))}

    def step(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """x_{t+1} = f(x_t, w_t); x (..., d_x), w (..., d_w) -> (..., d_x)."""
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)
        if x.shape[-1] != self.state_dim or w.shape[-1] != self.disturbance_dim:
            raise ModelError("step: dimension mismatch")
        env = self._env_state(x)
        env.update({name: w[..., i] for i, name in enumerate(dist_vars(self.disturbance_dim))})
        return self.dynamics(env)

    def output_of(self, x: np.ndarray) -> np.ndarray:
        """Omega(x); x (..., d_x) -> (..., d_y)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.state_dim:
            raise ModelError("output: dimension mismatch")
        return self.output(self._env_state(x))

    # -- sampling ---------------------------------------------------------

    def sample_disturbance(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        return self.disturbance.sample(rng, n)

    def sample_trajectory(self, x0, rng: np.random.Generator,
                          allow_outside_initial: bool = False) -> Trajectory:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if not allow_outside_initial and not bool(self.initial.contains(x0)[0]):
            raise ModelError(f"x0={x0} is outside the initial region")
        states, dists = self.sample_paths(x0[None, :], rng)
        return Trajectory(states[0], dists[0] if dists is not None else None)

    def sample_paths(self, x0s: np.ndarray, rng: np.random.Generator):
        """Batch rollout: x0s (n, d_x) -> (states (n, T+1, d_x), dists (n, T, d_w))."""
        x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
        n = x0s.shape[0]
        T = self.horizon
        states = np.empty((n, T + 1, self.state_dim))
        states[:, 0] = x0s
        dists = np.empty((n, T, self.disturbance_dim))
        for t in range(T):
            dists[:, t] = self.sample_disturbance(rng, n)
            states[:, t + 1] = self.step(states[:, t], dists[:, t])
        return states, (dists if T > 0 else np.zeros((n, 0, self.disturbance_dim)))

    def output_trace(self, traj: Trajectory) -> np.ndarray:
        """Omega applied elementwise along the trajectory: (T+1, d_y)."""
        return self.output_of(traj.states)

    def replay(self, traj: Trajectory) -> np.ndarray:
        """Re-evaluate the recorded disturbances; must reproduce traj.states."""
        if traj.disturbances is None:
            raise ModelError("trajectory has no recorded disturbances")
        x = traj.states[0]
        out = [x]
        for t in range(traj.disturbances.shape[0]):
            x = self.step(x, traj.disturbances[t])
            out.append(x)
        return np.stack(out, axis=0)

    def truncated_support(self) -> Box:
        return self.disturbance.truncated_box(self.truncation_sigmas)

    def disturbance_quadrature(self, nodes_per_dim: int):
        return self.disturbance.quadrature(nodes_per_dim, self.truncation_sigmas)


def child_rng(seed: int, *indices: int) -> np.random.Generator:
    """Deterministic per-task generator derived from a base seed and task indices."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=indices))


def sample_truncated(dist: Distribution, rng: np.random.Generator, n: int,
                     sigmas: float) -> np.ndarray:
    """Rejection-sample the distribution restricted to its truncated support."""
    box = dist.truncated_box(sigmas)
    out = dist.sample(rng, n)
    bad = ~box.contains(out)
    while np.any(bad):
        out[bad] = dist.sample(rng, int(bad.sum()))
        bad = ~box.contains(out)
    return out
