"""Twin-system x DFA verification structure.

The product state is (x1, x2, q): two copies of the system plus the
automaton state.  The first copy's disturbance is stochastic; the
second copy's disturbance is chosen by an environment policy.  States
whose components leave the working domain collapse to an absorbing,
never-accepting SINK, which makes every probability computed on the
bounded domain a sound lower bound.

Acceptance conventions: "trailing" feeds the final state's label to the
automaton before testing acceptance (so a length-(T+1) trace consumes
all T+1 labels); "literal" tests the automaton state at time T as-is.
Trailing is the default because it makes product acceptance coincide
with direct formula satisfaction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .boxes import BoxUnion
from .ltlf import (Dfa, HyperFormula, FORALL, EXISTS, NonsecSecond, OutClose,
                   SecFirst, StateClose, compile_body)
from .system import Poss

TRAILING = "trailing"
LITERAL = "literal"


class ProductError(ValueError):
    pass


@dataclass(frozen=True)
class ProductState:
    """One product state; alive=False marks the absorbing SINK."""

    x1: tuple[float, ...]
    x2: tuple[float, ...]
    q: int
    alive: bool = True

    @staticmethod
    def make(x1, x2, q: int, alive: bool = True) -> "ProductState":
        x1 = tuple(np.atleast_1d(np.asarray(x1, dtype=float)).tolist())
        x2 = tuple(np.atleast_1d(np.asarray(x2, dtype=float)).tolist())
        return ProductState(x1, x2, int(q), alive)


SINK = ProductState((), (), -1, alive=False)


def atom_truth_matrix(atom, x1, y1, x2, y2) -> np.ndarray:
    """Vectorized atom evaluation; x1/y1 rows (n1, .), x2/y2 cols (n2, .) -> (n1, n2)."""
    if isinstance(atom, OutClose):
        d2 = _sq_dists(y1, y2)
        return d2 <= atom.eps ** 2 + 0.0
    if isinstance(atom, StateClose):
        return _sq_dists(x1, x2) <= atom.lam ** 2
    if isinstance(atom, SecFirst):
        if atom.region is None:
            raise ProductError("sec1 atom has no bound secret region")
        return np.broadcast_to(atom.region.contains(x1)[:, None],
                               (x1.shape[0], x2.shape[0])).copy()
    if isinstance(atom, NonsecSecond):
        if atom.region is None:
            raise ProductError("nonsec2 atom has no bound secret region")
        return np.broadcast_to(~atom.region.contains(x2)[None, :],
                               (x1.shape[0], x2.shape[0])).copy()
    raise TypeError(atom)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared L2 distances between row sets (n1, d) and (n2, d)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d2 = aa + bb - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def letters_matrix(atoms, x1, y1, x2, y2) -> np.ndarray:
    """Letter bitmask for every pair of rows: (n1, n2) int array."""
    n1, n2 = np.atleast_2d(x1).shape[0], np.atleast_2d(x2).shape[0]
    out = np.zeros((n1, n2), dtype=np.int64)
    for i, atom in enumerate(atoms):
        out |= atom_truth_matrix(atom, x1, y1, x2, y2).astype(np.int64) << i
    return out


def letters_pairwise(atoms, x1, y1, x2, y2) -> np.ndarray:
    """Letter bitmask per aligned row pair: inputs (n, .) -> (n,) int array."""
    x1, x2 = np.atleast_2d(x1), np.atleast_2d(x2)
    y1, y2 = np.atleast_2d(y1), np.atleast_2d(y2)
    out = np.zeros(x1.shape[0], dtype=np.int64)
    for i, atom in enumerate(atoms):
        if isinstance(atom, OutClose):
            tv = np.sum((y1 - y2) ** 2, axis=1) <= atom.eps ** 2
        elif isinstance(atom, StateClose):
            tv = np.sum((x1 - x2) ** 2, axis=1) <= atom.lam ** 2
        elif isinstance(atom, SecFirst):
            tv = atom.region.contains(x1)
        elif isinstance(atom, NonsecSecond):
            tv = ~atom.region.contains(x2)
        else:
            raise TypeError(atom)
        out |= tv.astype(np.int64) << i
    return out


@dataclass
class VerificationStructure:
    """Product of two model copies and the compiled body automaton."""

    model: Poss
    dfa: Dfa
    quantifier: str = FORALL
    acceptance: str = TRAILING

    def __post_init__(self):
        if self.acceptance not in (TRAILING, LITERAL):
            raise ProductError(f"unknown acceptance convention {self.acceptance!r}")
        if self.quantifier not in (FORALL, EXISTS):
            raise ProductError(f"unknown quantifier {self.quantifier!r}")

    @staticmethod
    def from_hyperformula(model: Poss, hf: HyperFormula,
                          acceptance: str = TRAILING,
                          state_cap: int | None = None) -> "VerificationStructure":
        kwargs = {} if state_cap is None else {"state_cap": state_cap}
        dfa = compile_body(hf.body, **kwargs)
        return VerificationStructure(model=model, dfa=dfa,
                                     quantifier=hf.quantifier,
                                     acceptance=acceptance)

    # -- labels ---------------------------------------------------------

    def letters_for(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """Aligned pairs (n, d) -> (n,) letter indices."""
        y1 = self.model.output_of(x1)
        y2 = self.model.output_of(x2)
        return letters_pairwise(self.dfa.atoms, x1, y1, x2, y2)

    def letter_grid(self, x1set: np.ndarray, x2set: np.ndarray) -> np.ndarray:
        """All pairs between two row sets -> (n1, n2) letter indices."""
        y1 = self.model.output_of(x1set)
        y2 = self.model.output_of(x2set)
        return letters_matrix(self.dfa.atoms, x1set, y1, x2set, y2)

    # -- scalar product dynamics (spec-facing API) -----------------------

    def product_step(self, v: ProductState, w1, w2) -> ProductState:
        if not v.alive:
            return SINK
        x1 = np.asarray(v.x1, dtype=float)
        x2 = np.asarray(v.x2, dtype=float)
        letter = int(self.letters_for(x1[None, :], x2[None, :])[0])
        q_next = int(self.dfa.transitions[v.q, letter])
        nx1 = self.model.step(x1[None, :], np.atleast_2d(np.asarray(w1, dtype=float)))[0]
        nx2 = self.model.step(x2[None, :], np.atleast_2d(np.asarray(w2, dtype=float)))[0]
        inside = bool(self.model.domain.contains(nx1[None, :])[0]) and \
            bool(self.model.domain.contains(nx2[None, :])[0])
        if not inside:
            return SINK
        return ProductState.make(nx1, nx2, q_next)

    def accepting_state(self, v: ProductState) -> bool:
        if not v.alive:
            return False
        if self.acceptance == LITERAL:
            return bool(self.dfa.accepting[v.q])
        x1 = np.asarray(v.x1, dtype=float)[None, :]
        x2 = np.asarray(v.x2, dtype=float)[None, :]
        letter = int(self.letters_for(x1, x2)[0])
        return bool(self.dfa.accepting[self.dfa.transitions[v.q, letter]])

    # -- batched product dynamics ----------------------------------------

    def step_batch(self, x1, x2, q, alive, w1, w2):
        """Vectorized product step over aligned arrays; returns new arrays."""
        q_next = q.copy()
        if np.any(alive):
            letters = self.letters_for(x1[alive], x2[alive])
            q_next[alive] = self.dfa.transitions[q[alive], letters]
        nx1 = np.where(alive[:, None], self.model.step(x1, w1), x1)
        nx2 = np.where(alive[:, None], self.model.step(x2, w2), x2)
        inside = self.model.domain.contains(nx1) & self.model.domain.contains(nx2)
        return nx1, nx2, q_next, alive & inside

    def accepting_batch(self, x1, x2, q, alive) -> np.ndarray:
        if self.acceptance == LITERAL:
            return alive & self.dfa.accepting[q]
        out = np.zeros(q.shape[0], dtype=bool)
        if np.any(alive):
            letters = self.letters_for(x1[alive], x2[alive])
            out[alive] = self.dfa.accepting[self.dfa.transitions[q[alive], letters]]
        return out


@dataclass
class EnvironmentPolicy:
    """Adversary: an initial choice for the second copy plus a decision rule.

    `rule(v, t)` must be a pure function of the product state and time.
    `coupled_rule(v, t, w1)` is a diagnostics-only variant that also sees
    the simultaneous stochastic draw (it models coupling experiments such
    as the diagonal policy, not an implementable adversary).
    """

    init_choice: np.ndarray
    rule: Callable[[ProductState, int], np.ndarray] | None = None
    coupled_rule: Callable[[ProductState, int, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if (self.rule is None) == (self.coupled_rule is None):
            raise ProductError("policy needs exactly one of rule / coupled_rule")

    def choose(self, v: ProductState, t: int, w1: np.ndarray) -> np.ndarray:
        if self.rule is not None:
            return np.atleast_1d(np.asarray(self.rule(v, t), dtype=float))
        return np.atleast_1d(np.asarray(self.coupled_rule(v, t, w1), dtype=float))


@dataclass
class ProductTrajectory:
    states: list[ProductState]
    accepted: bool


def rollout(vs: VerificationStructure, x0, policy: EnvironmentPolicy,
            rng: np.random.Generator, check_support: bool = True) -> ProductTrajectory:
    """Run one product trajectory under the policy; w1 sampled from mu."""
    model = vs.model
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not bool(model.initial.contains(x0[None, :])[0]):
        raise ProductError(f"x0={x0} outside the initial region")
    init2 = np.atleast_1d(np.asarray(policy.init_choice, dtype=float))
    if not bool(model.initial.contains(init2[None, :])[0]):
        raise ProductError("policy init_choice outside the initial region")
    support = model.truncated_support()
    v = ProductState.make(x0, init2, vs.dfa.q0)
    states = [v]
    for t in range(model.horizon):
        w1 = model.sample_disturbance(rng, 1)[0]
        w2 = policy.choose(v, t, w1)
        if check_support and not bool(support.contains(w2[None, :])[0]):
            raise ProductError(f"policy chose w2={w2} outside the truncated support")
        v = vs.product_step(v, w1, w2)
        states.append(v)
    return ProductTrajectory(states=states, accepted=vs.accepting_state(states[-1]))
