import itertools

import numpy as np
import pytest

from obsverify import ltlf
from obsverify.boxes import Box, BoxUnion
from obsverify.ltlf import (Always, And, Atom, Eventually, FalseF, Next, Not,
                            Or, OutClose, SecFirst, NonsecSecond, StateClose,
                            TrueF, Until)
from obsverify.oracle import FiniteInstance
from obsverify.system import GaussianDiag, Poss


@pytest.fixture(scope="session")
def case_study_model() -> Poss:
    return Poss.make(
        dynamics=["0.9*x1 + w1"], output=["x1**2"],
        domain=([-12.0], [12.0]), initial=([-2.0], [2.0]),
        disturbance=GaussianDiag((0.0,), (0.4,)), horizon=10)


def case_study_formula():
    return ltlf.parse("forall s2. (G out_close(0.5)) -> F G state_close(0.8)")


# ---------------------------------------------------------------------------
# random formulas over abstract atoms


def abstract_atoms(k: int = 2):
    pool = [OutClose(0.5), StateClose(0.8), SecFirst(BoxUnion.make([([0.0], [1.0])])),
            NonsecSecond(BoxUnion.make([([0.0], [1.0])]))]
    return pool[:k]


def random_formula(rng: np.random.Generator, atoms, depth: int):
    """Random body over the given atoms with maximum operator depth."""
    if depth == 0 or rng.random() < 0.2:
        r = rng.random()
        if r < 0.1:
            return TrueF()
        if r < 0.2:
            return FalseF()
        return Atom(atoms[rng.integers(len(atoms))])
    op = rng.integers(7)
    if op == 0:
        return Not(random_formula(rng, atoms, depth - 1))
    if op == 1:
        return Or(random_formula(rng, atoms, depth - 1),
                  random_formula(rng, atoms, depth - 1))
    if op == 2:
        return And(random_formula(rng, atoms, depth - 1),
                   random_formula(rng, atoms, depth - 1))
    if op == 3:
        return Next(random_formula(rng, atoms, depth - 1))
    if op == 4:
        return Until(random_formula(rng, atoms, depth - 1),
                     random_formula(rng, atoms, depth - 1))
    if op == 5:
        return Eventually(random_formula(rng, atoms, depth - 1))
    return Always(random_formula(rng, atoms, depth - 1))


def random_word(rng: np.random.Generator, atoms, length: int):
    letters = all_letters(atoms)
    return tuple(letters[rng.integers(len(letters))] for _ in range(length))


def all_letters(atoms):
    out = []
    for r in range(len(atoms) + 1):
        out.extend(frozenset(c) for c in itertools.combinations(atoms, r))
    return out


# ---------------------------------------------------------------------------
# random finite instances


def random_instance(rng: np.random.Generator, n_states=None, n_w=None,
                    horizon=None, d: int = 1) -> FiniteInstance:
    n_states = n_states or int(rng.integers(2, 6))
    n_w = n_w or int(rng.integers(1, 4))
    horizon = horizon or int(rng.integers(1, 5))
    points = rng.uniform(-2.0, 2.0, size=(n_states, d))
    # a coarse output map: some instances observable, some not
    if rng.random() < 0.5:
        outputs = np.round(points, 1)
    else:
        outputs = np.abs(np.round(points, 0))
    trans = rng.integers(0, n_states, size=(n_states, n_w))
    probs = rng.dirichlet(np.ones(n_w))
    k = int(rng.integers(1, n_states + 1))
    initial = rng.choice(n_states, size=k, replace=False)
    return FiniteInstance(points=points, outputs=outputs, trans=trans,
                          w_probs=probs, initial=np.sort(initial),
                          horizon=horizon)


def instance_secret_region(inst: FiniteInstance, rng: np.random.Generator) -> BoxUnion:
    """A region covering a random nonempty strict-ish subset of the states."""
    k = int(rng.integers(1, inst.n_states + 1))
    chosen = rng.choice(inst.n_states, size=k, replace=False)
    eps = 1e-9
    boxes = [(inst.points[i] - eps, inst.points[i] + eps) for i in chosen]
    return BoxUnion.make(boxes)
