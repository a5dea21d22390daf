import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import abstract_atoms, all_letters, random_formula, random_word
from obsverify import ltlf
from obsverify.boxes import BoxUnion
from obsverify.ltlf import (Always, And, Atom, Eventually, FalseF, HyperFormula,
                            Next, Not, Or, OutClose, ParseError, SecFirst,
                            StateClose, StateExplosionError, TrueF, Until,
                            canon, compile_body, evaluate_word, eval_last,
                            label, normalize, parse, parse_body, pretty,
                            pretty_hyper, progress)
from obsverify.system import GaussianDiag, Poss


def toy_model(out="x1**2"):
    return Poss.make(dynamics=["0.9*x1 + w1"], output=[out],
                     domain=([-12.0], [12.0]), initial=([-2.0], [2.0]),
                     disturbance=GaussianDiag((0.0,), (0.4,)), horizon=3)


# ---------------------------------------------------------------------------
# parsing


def test_parse_current_detect_encoding():
    h = parse("forall s2. (G out_close(0.5)) -> F G state_close(0.8)")
    assert h.quantifier == ltlf.FORALL
    expected = Or(Not(Always(Atom(OutClose(0.5)))),
                  Eventually(Always(Atom(StateClose(0.8)))))
    assert h.body == expected


def test_parse_trivial_exists_true():
    h = parse("exists s2. true")
    assert h == HyperFormula(ltlf.EXISTS, TrueF())


def test_parse_double_next_atom():
    h = parse("forall s2. X X sec1")
    assert h.body == Next(Next(Atom(SecFirst())))


def test_parse_precedence():
    b = parse_body("!sec1 & nonsec2 | sec1 U nonsec2")
    # ! > U > & > |
    assert b == Or(And(Not(Atom(SecFirst())), Atom(NonsecSecond())),
                   Until(Atom(SecFirst()), Atom(NonsecSecond())))


NonsecSecond = ltlf.NonsecSecond


def test_parse_errors_have_positions():
    with pytest.raises(ParseError) as e:
        parse("forall s2. out_close(")
    assert "position" in str(e.value)
    with pytest.raises(ParseError, match="unknown atom"):
        parse("forall s2. bogus_atom")
    with pytest.raises(ParseError, match="quantifier"):
        parse("G out_close(0.5)")
    with pytest.raises(ParseError, match="quantifier"):
        parse("forall s2. forall s2. true")


def test_pretty_roundtrip_random():
    rng = np.random.default_rng(0)
    atoms = abstract_atoms(2)
    for _ in range(300):
        f = random_formula(rng, atoms, depth=4)
        assert parse_body(pretty(f)) == f


def test_pretty_hyper_roundtrip():
    h = parse("exists s2. sec1 -> (G out_close(0.25) & nonsec2)")
    assert parse(pretty_hyper(h)) == h


# ---------------------------------------------------------------------------
# direct semantics


def letters2():
    a, b = OutClose(0.5), StateClose(0.8)
    return a, b


def test_always_on_identical_outputs():
    model = toy_model()
    body = Always(Atom(OutClose(0.5)))
    trace = [((1.0,), (-1.0,)), ((1.0,), (-1.0,))]
    assert ltlf.evaluate(body, trace, model) is True


def test_strong_next_false_at_trace_end():
    assert evaluate_word(Next(TrueF()), (frozenset(),)) is False
    assert evaluate_word(Next(TrueF()), (frozenset(), frozenset())) is True


def test_until_requires_witness_within_trace():
    a, b = letters2()
    w_a = frozenset({a})
    w_b = frozenset({b})
    body = Until(Atom(a), Atom(b))
    assert evaluate_word(body, (w_a, w_a, w_b)) is True
    assert evaluate_word(body, (w_a, w_a, w_a)) is False
    assert evaluate_word(body, (w_b,)) is True


def test_empty_trace_rejected():
    with pytest.raises(ltlf.FormulaError):
        evaluate_word(TrueF(), ())


def independent_eval(f, word, i=0):
    """Quantifier-style reference semantics, structured unlike evaluate_word."""
    n = len(word)
    if isinstance(f, TrueF):
        return True
    if isinstance(f, FalseF):
        return False
    if isinstance(f, Atom):
        return f.pred in word[i]
    if isinstance(f, Not):
        return not independent_eval(f.arg, word, i)
    if isinstance(f, Or):
        return independent_eval(f.left, word, i) or independent_eval(f.right, word, i)
    if isinstance(f, And):
        return independent_eval(f.left, word, i) and independent_eval(f.right, word, i)
    if isinstance(f, Next):
        return i + 1 < n and independent_eval(f.arg, word, i + 1)
    if isinstance(f, Until):
        return any(independent_eval(f.right, word, j)
                   and all(independent_eval(f.left, word, m) for m in range(i, j))
                   for j in range(i, n))
    if isinstance(f, Eventually):
        return any(independent_eval(f.arg, word, j) for j in range(i, n))
    if isinstance(f, Always):
        return all(independent_eval(f.arg, word, j) for j in range(i, n))
    raise TypeError(f)


def test_semantics_against_independent_checker():
    rng = np.random.default_rng(1)
    atoms = abstract_atoms(2)
    for _ in range(400):
        f = random_formula(rng, atoms, depth=4)
        w = random_word(rng, atoms, int(rng.integers(1, 7)))
        assert evaluate_word(f, w) == independent_eval(f, w)


def test_derived_operator_identities():
    rng = np.random.default_rng(2)
    atoms = abstract_atoms(2)
    for _ in range(200):
        g = random_formula(rng, atoms, depth=3)
        w = random_word(rng, atoms, int(rng.integers(1, 6)))
        assert evaluate_word(Eventually(g), w) == evaluate_word(Until(TrueF(), g), w)
        assert evaluate_word(Always(g), w) == evaluate_word(
            Not(Eventually(Not(g))), w)


# ---------------------------------------------------------------------------
# normalization, progression


def test_normalize_produces_core_operators():
    f = parse_body("F (sec1 & G nonsec2)")
    core = normalize(f)

    def only_core(g):
        if isinstance(g, (TrueF, FalseF, Atom)):
            return True
        if isinstance(g, Not):
            return only_core(g.arg)
        if isinstance(g, (Or, Until)):
            return only_core(g.left) and only_core(g.right)
        if isinstance(g, Next):
            return only_core(g.arg)
        return False

    assert only_core(core)
    rng = np.random.default_rng(3)
    atoms = ltlf.atoms_of(f)
    for _ in range(50):
        w = random_word(rng, atoms, int(rng.integers(1, 6)))
        assert evaluate_word(core, w) == evaluate_word(f, w)


def test_progress_trivial_cases():
    a = Atom(OutClose(0.5))
    b = Atom(StateClose(0.8))
    la = frozenset({a.pred})
    assert progress(a, la) == TrueF()
    assert progress(b, la) == FalseF()
    # until unrolls to itself when only the left side holds
    u = canon(Until(a, b))
    assert progress(u, la) == u
    # always(a) progresses to itself while a holds
    g = canon(normalize(Always(a)))
    assert progress(g, la) == g


def test_progression_soundness_random():
    rng = np.random.default_rng(4)
    atoms = abstract_atoms(2)
    for _ in range(300):
        f = canon(normalize(random_formula(rng, atoms, depth=4)))
        w = random_word(rng, atoms, int(rng.integers(2, 7)))
        assert evaluate_word(f, w) == evaluate_word(progress(f, w[0]), w[1:])


# ---------------------------------------------------------------------------
# DFA compilation


def test_compile_true_single_accepting_state():
    dfa = compile_body(TrueF())
    assert dfa.n_states == 1
    assert dfa.accepting.all()


def test_compile_false_never_accepts():
    dfa = compile_body(FalseF())
    assert not dfa.accepts_word([frozenset()])


def test_compile_current_detect_semantics():
    h = parse("forall s2. (G out_close(0.5)) -> F G state_close(0.8)")
    dfa = compile_body(h.body)
    assert len(dfa.atoms) == 2
    assert dfa.n_letters == 4
    a, b = OutClose(0.5), StateClose(0.8)
    for word in itertools.product(all_letters((a, b)), repeat=4):
        expect = (any(a not in l for l in word)) or (b in word[-1])
        assert dfa.accepts_word(word) == expect


def test_dfa_total_and_deterministic():
    h = parse("forall s2. (G out_close(0.5)) -> F G state_close(0.8)")
    dfa = compile_body(h.body)
    assert dfa.transitions.shape == (dfa.n_states, dfa.n_letters)
    assert (dfa.transitions >= 0).all() and (dfa.transitions < dfa.n_states).all()


def test_compile_agrees_with_evaluate_exhaustively():
    rng = np.random.default_rng(5)
    atoms = abstract_atoms(2)
    for _ in range(60):
        f = random_formula(rng, atoms, depth=4)
        dfa = compile_body(f)
        for word in itertools.product(all_letters(ltlf.atoms_of(f)), repeat=3):
            assert dfa.accepts_word(word) == evaluate_word(f, word)


def test_compile_random_pairs_thousand():
    rng = np.random.default_rng(6)
    atoms = abstract_atoms(2)
    checked = 0
    while checked < 1000:
        f = random_formula(rng, atoms, depth=5)
        dfa = compile_body(f)
        for _ in range(10):
            w = random_word(rng, atoms, int(rng.integers(1, 9)))
            assert dfa.accepts_word(w) == evaluate_word(f, w)
            checked += 1


def test_state_cap_raises():
    # alternating untils blow up fast; a tiny cap must trigger the guard
    f = parse_body("(sec1 U (nonsec2 U (out_close(0.5) U state_close(0.8))))")
    with pytest.raises(StateExplosionError):
        compile_body(f, state_cap=2)


def test_dfa_dump_format():
    dfa = compile_body(parse_body("G out_close(0.5)"))
    text = dfa.dump()
    assert "accepting:" in text
    assert any(line.count(",") >= 2 for line in text.splitlines()[2:])


# ---------------------------------------------------------------------------
# labeling


def test_label_zero_distance():
    model = toy_model()
    atoms = (OutClose(0.5),)
    assert label((0.0,), (0.0,), atoms, model) == frozenset(atoms)


def test_label_case_study_pair():
    model = toy_model()
    a, b = OutClose(0.5), StateClose(0.8)
    lt = label((1.0,), (-1.0,), (a, b), model)
    assert lt == frozenset({a})  # outputs equal under x^2, states 2 apart


def test_label_secret_atoms():
    model = toy_model()
    region = BoxUnion.make([([0.5], [1.5])])
    sec, ns = SecFirst(region), NonsecSecond(region)
    lt = label((1.0,), (1.0,), (sec, ns), model)
    assert lt == frozenset({sec})  # x in region, x' in region so nonsec2 false


def test_label_dimension_mismatch():
    model = toy_model()
    with pytest.raises(ltlf.FormulaError):
        label((1.0, 2.0), (0.0,), (OutClose(0.5),), model)


def test_unbound_secret_atom_errors():
    model = toy_model()
    with pytest.raises(ltlf.FormulaError):
        label((0.0,), (0.0,), (SecFirst(None),), model)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=40, deadline=None)
def test_progression_soundness_property(seed):
    rng = np.random.default_rng(seed)
    atoms = abstract_atoms(2)
    f = canon(normalize(random_formula(rng, atoms, depth=4)))
    w = random_word(rng, atoms, int(rng.integers(2, 8)))
    assert evaluate_word(f, w) == evaluate_word(progress(f, w[0]), w[1:])
