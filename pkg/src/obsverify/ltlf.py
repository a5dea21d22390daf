"""Two-trace finite-trace temporal formulas and their automata.

The fragment has exactly one outer trace quantifier over the companion
trace; the body is LTL over finite traces whose atoms are predicates on
a state pair (x, x').  Core operators are {atom, not, or, next, until,
true}; and/eventually/always are derived sugar.  Next is strong: at the
final trace position X(phi) is false.

The body compiles to a deterministic automaton by formula progression.
Automaton states are pairs (canonical progressed formula, accept-bit),
where the bit records whether the trace could legally have ended with
the letter just consumed; this folds the trailing-letter evaluation
into ordinary DFA acceptance.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .boxes import BoxUnion

DEFAULT_STATE_CAP = 4096


class FormulaError(ValueError):
    pass


class ParseError(FormulaError):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


class StateExplosionError(FormulaError):
    pass


# ---------------------------------------------------------------------------
# atomic predicates over a state pair


@dataclass(frozen=True)
class OutClose:
    """Outputs of the two states are within eps (L2)."""

    eps: float

    def __post_init__(self):
        if self.eps < 0:
            raise FormulaError("out_close tolerance must be >= 0")

    def holds(self, x, x2, model) -> bool:
        y1 = model.output_of(np.atleast_1d(x))
        y2 = model.output_of(np.atleast_1d(x2))
        return bool(np.linalg.norm(y1 - y2) <= self.eps)

    def name(self) -> str:
        return f"out_close({self.eps!r})"


@dataclass(frozen=True)
class StateClose:
    """The two states are within lam (L2)."""

    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise FormulaError("state_close tolerance must be >= 0")

    def holds(self, x, x2, model) -> bool:
        return bool(np.linalg.norm(np.atleast_1d(x) - np.atleast_1d(x2)) <= self.lam)

    def name(self) -> str:
        return f"state_close({self.lam!r})"


@dataclass(frozen=True)
class SecFirst:
    """First state lies in the secret region (region bound by the property)."""

    region: BoxUnion | None = None

    def holds(self, x, x2, model) -> bool:
        if self.region is None:
            raise FormulaError("sec1 atom has no bound secret region")
        return bool(self.region.contains(np.atleast_1d(x))[0])

    def name(self) -> str:
        return "sec1"


@dataclass(frozen=True)
class NonsecSecond:
    """Second state lies outside the secret region."""

    region: BoxUnion | None = None

    def holds(self, x, x2, model) -> bool:
        if self.region is None:
            raise FormulaError("nonsec2 atom has no bound secret region")
        return not bool(self.region.contains(np.atleast_1d(x2))[0])

    def name(self) -> str:
        return "nonsec2"


AtomicPredicate = OutClose | StateClose | SecFirst | NonsecSecond


def label(x, x2, atoms, model) -> frozenset:
    """The set of atoms holding on the pair (x, x2)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape[0] != model.state_dim or x2.shape[0] != model.state_dim:
        raise FormulaError("label: state dimension mismatch")
    return frozenset(a for a in atoms if a.holds(x, x2, model))


# ---------------------------------------------------------------------------
# formula AST


@dataclass(frozen=True)
class TrueF:
    pass


@dataclass(frozen=True)
class FalseF:
    pass


@dataclass(frozen=True)
class Atom:
    pred: AtomicPredicate


@dataclass(frozen=True)
class Not:
    arg: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Next:
    arg: "Formula"


@dataclass(frozen=True)
class Until:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Eventually:
    arg: "Formula"


@dataclass(frozen=True)
class Always:
    arg: "Formula"


Formula = (TrueF | FalseF | Atom | Not | Or | And | Next | Until
           | Eventually | Always)

FORALL = "forall"
EXISTS = "exists"


@dataclass(frozen=True)
class HyperFormula:
    quantifier: str  # FORALL | EXISTS
    body: Formula

    def __post_init__(self):
        if self.quantifier not in (FORALL, EXISTS):
            raise FormulaError(f"unknown quantifier {self.quantifier!r}")


def implies(a: Formula, b: Formula) -> Formula:
    return Or(Not(a), b)


def atoms_of(f: Formula) -> tuple[AtomicPredicate, ...]:
    """All atoms in the formula, deterministically ordered by display name."""
    found: set[AtomicPredicate] = set()

    def walk(g: Formula):
        if isinstance(g, Atom):
            found.add(g.pred)
        elif isinstance(g, (Not, Next, Eventually, Always)):
            walk(g.arg)
        elif isinstance(g, (Or, And, Until)):
            walk(g.left)
            walk(g.right)

    walk(f)
    return tuple(sorted(found, key=lambda a: a.name()))


def subformulas(f: Formula) -> set[Formula]:
    out = {f}
    if isinstance(f, (Not, Next, Eventually, Always)):
        out |= subformulas(f.arg)
    elif isinstance(f, (Or, And, Until)):
        out |= subformulas(f.left) | subformulas(f.right)
    return out


def bind_secret(f: Formula, region: BoxUnion) -> Formula:
    """Return a copy with sec1/nonsec2 atoms bound to the given region."""
    if isinstance(f, Atom):
        if isinstance(f.pred, SecFirst):
            return Atom(SecFirst(region))
        if isinstance(f.pred, NonsecSecond):
            return Atom(NonsecSecond(region))
        return f
    if isinstance(f, Not):
        return Not(bind_secret(f.arg, region))
    if isinstance(f, Next):
        return Next(bind_secret(f.arg, region))
    if isinstance(f, Eventually):
        return Eventually(bind_secret(f.arg, region))
    if isinstance(f, Always):
        return Always(bind_secret(f.arg, region))
    if isinstance(f, Or):
        return Or(bind_secret(f.left, region), bind_secret(f.right, region))
    if isinstance(f, And):
        return And(bind_secret(f.left, region), bind_secret(f.right, region))
    if isinstance(f, Until):
        return Until(bind_secret(f.left, region), bind_secret(f.right, region))
    return f


# ---------------------------------------------------------------------------
# concrete syntax


_KEYWORD_ATOMS = {"sec1": SecFirst, "nonsec2": NonsecSecond}


def _tokenize(text: str):
    tokens = []  # (kind, value, pos)
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if text.startswith("->", i):
            tokens.append(("ARROW", "->", i))
            i += 2
            continue
        if c in "()&|!.,":
            tokens.append((c, c, i))
            i += 1
            continue
        if c.isdigit() or (c == "-" and i + 1 < n and text[i + 1].isdigit()):
            j = i + 1
            while j < n and (text[j].isdigit() or text[j] in ".eE+-"):
                # stop a float before a '.' that is not part of a number
                if text[j] == "." and (j + 1 >= n or not text[j + 1].isdigit()):
                    break
                if text[j] in "+-" and text[j - 1] not in "eE":
                    break
                j += 1
            try:
                val = float(text[i:j])
            except ValueError:
                raise ParseError(f"bad number {text[i:j]!r}", i)
            tokens.append(("NUM", val, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            if word in ("U", "X", "F", "G"):
                tokens.append((word, word, i))
            else:
                tokens.append(("IDENT", word, i))
            i = j
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(("EOF", None, n))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.k = 0

    def peek(self):
        return self.tokens[self.k]

    def take(self, kind=None):
        tok = self.tokens[self.k]
        if kind is not None and tok[0] != kind:
            raise ParseError(f"expected {kind}, found {tok[1]!r}", tok[2])
        self.k += 1
        return tok

    def parse_hyper(self) -> HyperFormula:
        kind, val, pos = self.peek()
        if kind != "IDENT" or val not in (FORALL, EXISTS):
            raise ParseError("missing trace quantifier ('forall s2.' or 'exists s2.')", pos)
        self.take()
        kind, val, pos = self.take("IDENT")
        if val != "s2":
            raise ParseError(f"expected trace variable 's2', found {val!r}", pos)
        self.take(".")
        body = self.parse_implies()
        kind, val, pos = self.peek()
        if kind == "IDENT" and val in (FORALL, EXISTS):
            raise ParseError("duplicate trace quantifier", pos)
        if kind != "EOF":
            raise ParseError(f"unexpected trailing input {val!r}", pos)
        return HyperFormula(self.tokens[0][1], body)

    def parse_body_only(self) -> Formula:
        body = self.parse_implies()
        kind, val, pos = self.peek()
        if kind != "EOF":
            raise ParseError(f"unexpected trailing input {val!r}", pos)
        return body

    # precedence: ! > X,F,G > U > & > | > ->
    def parse_implies(self) -> Formula:
        left = self.parse_or()
        if self.peek()[0] == "ARROW":
            self.take()
            right = self.parse_implies()
            return implies(left, right)
        return left

    def parse_or(self) -> Formula:
        left = self.parse_and()
        while self.peek()[0] == "|":
            self.take()
            left = Or(left, self.parse_and())
        return left

    def parse_and(self) -> Formula:
        left = self.parse_until()
        while self.peek()[0] == "&":
            self.take()
            left = And(left, self.parse_until())
        return left

    def parse_until(self) -> Formula:
        left = self.parse_unary()
        if self.peek()[0] == "U":
            self.take()
            return Until(left, self.parse_until())
        return left

    def parse_unary(self) -> Formula:
        kind, val, pos = self.peek()
        if kind == "!":
            self.take()
            return Not(self.parse_unary())
        if kind == "X":
            self.take()
            return Next(self.parse_unary())
        if kind == "F":
            self.take()
            return Eventually(self.parse_unary())
        if kind == "G":
            self.take()
            return Always(self.parse_unary())
        return self.parse_primary()

    def parse_primary(self) -> Formula:
        kind, val, pos = self.peek()
        if kind == "(":
            self.take()
            body = self.parse_implies()
            self.take(")")
            return body
        if kind == "IDENT":
            self.take()
            if val == "true":
                return TrueF()
            if val == "false":
                return FalseF()
            if val in _KEYWORD_ATOMS:
                return Atom(_KEYWORD_ATOMS[val]())
            if val in ("out_close", "state_close"):
                self.take("(")
                num = self.take("NUM")[1]
                self.take(")")
                return Atom(OutClose(num) if val == "out_close" else StateClose(num))
            if val in (FORALL, EXISTS):
                raise ParseError("quantifier must be outermost and occur once", pos)
            raise ParseError(f"unknown atom {val!r}", pos)
        raise ParseError(f"expected a formula, found {val!r}", pos)


def parse(text: str) -> HyperFormula:
    """Parse 'forall s2. <body>' / 'exists s2. <body>' concrete syntax."""
    return _Parser(text).parse_hyper()


def parse_body(text: str) -> Formula:
    return _Parser(text).parse_body_only()


_PREC = {"->": 1, "|": 2, "&": 3, "U": 4, "unary": 5, "atom": 6}


def _prec(f: Formula) -> int:
    if isinstance(f, Or):
        # printed as | unless it is a desugared implication
        return _PREC["|"]
    if isinstance(f, And):
        return _PREC["&"]
    if isinstance(f, Until):
        return _PREC["U"]
    if isinstance(f, (Not, Next, Eventually, Always)):
        return _PREC["unary"]
    return _PREC["atom"]


def pretty(f: Formula) -> str:
    """Parser-compatible rendering; parse(pretty(f)) round-trips the AST."""
    def wrap(g: Formula, parent_prec: int) -> str:
        s = pretty(g)
        return f"({s})" if _prec(g) < parent_prec else s

    if isinstance(f, TrueF):
        return "true"
    if isinstance(f, FalseF):
        return "false"
    if isinstance(f, Atom):
        return f.pred.name()
    if isinstance(f, Not):
        return "!" + wrap(f.arg, _PREC["unary"])
    if isinstance(f, Next):
        return "X " + wrap(f.arg, _PREC["unary"])
    if isinstance(f, Eventually):
        return "F " + wrap(f.arg, _PREC["unary"])
    if isinstance(f, Always):
        return "G " + wrap(f.arg, _PREC["unary"])
    if isinstance(f, Or):
        # | parses left-associative: wrap a right child at equal precedence
        return f"{wrap(f.left, _PREC['|'])} | {wrap(f.right, _PREC['|'] + 1)}"
    if isinstance(f, And):
        return f"{wrap(f.left, _PREC['&'])} & {wrap(f.right, _PREC['&'] + 1)}"
    if isinstance(f, Until):
        return f"{wrap(f.left, _PREC['U'] + 1)} U {wrap(f.right, _PREC['U'])}"
    raise TypeError(f)


def pretty_hyper(h: HyperFormula) -> str:
    return f"{h.quantifier} s2. {pretty(h.body)}"


# ---------------------------------------------------------------------------
# direct finite-trace semantics


def evaluate_word(f: Formula, word) -> bool:
    """Truth of the body on a finite word of letters (frozensets of atoms)."""
    word = tuple(word)
    if len(word) == 0:
        raise FormulaError("evaluation requires a nonempty trace")
    memo: dict[tuple[int, Formula], bool] = {}

    def rec(g: Formula, i: int) -> bool:
        key = (i, g)
        if key in memo:
            return memo[key]
        if isinstance(g, TrueF):
            v = True
        elif isinstance(g, FalseF):
            v = False
        elif isinstance(g, Atom):
            v = g.pred in word[i]
        elif isinstance(g, Not):
            v = not rec(g.arg, i)
        elif isinstance(g, Or):
            v = rec(g.left, i) or rec(g.right, i)
        elif isinstance(g, And):
            v = rec(g.left, i) and rec(g.right, i)
        elif isinstance(g, Next):
            v = i + 1 < len(word) and rec(g.arg, i + 1)
        elif isinstance(g, Until):
            v = False
            for j in range(i, len(word)):
                if rec(g.right, j):
                    v = True
                    break
                if not rec(g.left, j):
                    break
        elif isinstance(g, Eventually):
            v = any(rec(g.arg, j) for j in range(i, len(word)))
        elif isinstance(g, Always):
            v = all(rec(g.arg, j) for j in range(i, len(word)))
        else:
            raise TypeError(g)
        memo[key] = v
        return v

    return rec(f, 0)


def evaluate(f: Formula, pairs, model) -> bool:
    """Truth of the body on a sequence of state pairs [(x, x2), ...]."""
    pairs = list(pairs)
    if not pairs:
        raise FormulaError("evaluation requires a nonempty trace")
    atoms = atoms_of(f)
    word = [label(x, x2, atoms, model) for (x, x2) in pairs]
    return evaluate_word(f, word)


# ---------------------------------------------------------------------------
# normalization


def normalize(f: Formula) -> Formula:
    """Rewrite derived operators into the core {atom, not, or, next, until, true}."""
    if isinstance(f, (TrueF, FalseF, Atom)):
        return f
    if isinstance(f, Not):
        return Not(normalize(f.arg))
    if isinstance(f, Or):
        return Or(normalize(f.left), normalize(f.right))
    if isinstance(f, And):
        return Not(Or(Not(normalize(f.left)), Not(normalize(f.right))))
    if isinstance(f, Next):
        return Next(normalize(f.arg))
    if isinstance(f, Until):
        return Until(normalize(f.left), normalize(f.right))
    if isinstance(f, Eventually):
        return Until(TrueF(), normalize(f.arg))
    if isinstance(f, Always):
        return Not(Until(TrueF(), Not(normalize(f.arg))))
    raise TypeError(f)


@lru_cache(maxsize=None)
def canon(f: Formula) -> Formula:
    """Canonical Boolean form: negations pushed to non-Boolean leaves, flat
    sorted deduplicated con/disjunctions, constant folding."""
    if isinstance(f, (TrueF, FalseF, Atom)):
        return f
    if isinstance(f, Eventually):
        return canon(Until(TrueF(), f.arg))
    if isinstance(f, Always):
        return canon(Not(Until(TrueF(), Not(f.arg))))
    if isinstance(f, Not):
        c = canon(f.arg)
        if isinstance(c, TrueF):
            return FalseF()
        if isinstance(c, FalseF):
            return TrueF()
        if isinstance(c, Not):
            return c.arg
        if isinstance(c, Or):
            return canon(And(Not(c.left), Not(c.right)))
        if isinstance(c, And):
            return canon(Or(Not(c.left), Not(c.right)))
        return Not(c)
    if isinstance(f, Next):
        c = canon(f.arg)
        if isinstance(c, FalseF):
            return FalseF()
        return Next(c)
    if isinstance(f, Until):
        a, b = canon(f.left), canon(f.right)
        if isinstance(b, (TrueF, FalseF)):
            return b
        if isinstance(a, FalseF):
            return b
        if a == b:
            return b
        return Until(a, b)
    if isinstance(f, (Or, And)):
        cls = Or if isinstance(f, Or) else And
        unit, absorber = (FalseF(), TrueF()) if cls is Or else (TrueF(), FalseF())
        members: list[Formula] = []
        stack: list[Formula] = [f.right, f.left]
        while stack:
            cg = canon(stack.pop())
            if isinstance(cg, cls):
                stack.append(cg.right)
                stack.append(cg.left)
            else:
                members.append(cg)
        seen: dict[Formula, None] = {}
        for m in members:
            if m == absorber:
                return absorber
            if m == unit:
                continue
            seen.setdefault(m, None)
        final = list(seen)
        for m in final:
            compl = m.arg if isinstance(m, Not) else Not(m)
            if compl in seen:
                return absorber
        if not final:
            return unit
        final.sort(key=pretty)
        out = final[-1]
        for m in reversed(final[:-1]):
            out = cls(m, out)
        return out
    raise TypeError(f)


# ---------------------------------------------------------------------------
# canonical truth-table forms
#
# A formula is represented as a Boolean function (truth table) over a
# sorted tuple of "temporal generators" (atoms, next- and until-terms
# whose arguments are themselves table forms).  Progression is a Boolean
# homomorphism over the generators, so progressed states stay canonical
# Boolean functions over a finite generator closure: the construction
# terminates and semantically equal states collide by construction.

GENERATOR_CAP = 20


@dataclass(frozen=True)
class TableForm:
    gens: tuple  # GAtom | GNext | GUntil, sorted by sort_key
    table: bytes  # packed truth table over 2**len(gens) minterms

    def truth(self) -> np.ndarray:
        bits = np.unpackbits(np.frombuffer(self.table, dtype=np.uint8),
                             bitorder="little")
        return bits[: 1 << len(self.gens)].astype(bool)


@dataclass(frozen=True)
class GAtom:
    pred: AtomicPredicate


@dataclass(frozen=True)
class GNext:
    arg: TableForm


@dataclass(frozen=True)
class GUntil:
    left: TableForm
    right: TableForm


@lru_cache(maxsize=None)
def _gen_key(g) -> tuple:
    if isinstance(g, GAtom):
        return ("a", g.pred.name())
    if isinstance(g, GNext):
        return ("n", _table_key(g.arg))
    return ("u", _table_key(g.left), _table_key(g.right))


def _table_key(tf: TableForm) -> tuple:
    return (tuple(_gen_key(g) for g in tf.gens), tf.table)


def _pack(truth: np.ndarray) -> bytes:
    return np.packbits(truth.astype(np.uint8), bitorder="little").tobytes()


def _make_table(gens, truth: np.ndarray) -> TableForm:
    """Normalize: drop generators the function does not depend on, sort.

    Minterm convention: bit j of a minterm index is the truth value of
    gens[j].
    """
    gens = list(gens)
    truth = np.asarray(truth, dtype=bool).reshape(-1)
    j = 0
    while j < len(gens):
        m = np.arange(truth.shape[0])
        lo = truth[((m >> j) & 1) == 0]
        hi = truth[((m >> j) & 1) == 1]
        if np.array_equal(lo, hi):
            truth = lo
            del gens[j]
        else:
            j += 1
    order = sorted(range(len(gens)), key=lambda i: _gen_key(gens[i]))
    if order != list(range(len(gens))):
        m = np.arange(truth.shape[0])
        m_old = np.zeros_like(m)
        for i, oi in enumerate(order):
            m_old |= ((m >> i) & 1) << oi
        truth = truth[m_old]
        gens = [gens[i] for i in order]
    return TableForm(tuple(gens), _pack(truth))


TF_TRUE = TableForm((), _pack(np.array([True])))
TF_FALSE = TableForm((), _pack(np.array([False])))


def _expand(tf: TableForm, gens: tuple) -> np.ndarray:
    """Truth values of tf over the minterms of a generator superset."""
    k = len(gens)
    pos = {g: i for i, g in enumerate(gens)}
    idx = np.zeros(1 << k, dtype=np.int64)
    m = np.arange(1 << k, dtype=np.int64)
    for j, g in enumerate(tf.gens):
        idx |= ((m >> pos[g]) & 1) << j
    return tf.truth()[idx]


def _combine(a: TableForm, b: TableForm, op) -> TableForm:
    gens = tuple(sorted(set(a.gens) | set(b.gens), key=_gen_key))
    if len(gens) > GENERATOR_CAP:
        raise StateExplosionError(
            f"formula needs more than {GENERATOR_CAP} temporal generators")
    return _make_table(gens, op(_expand(a, gens), _expand(b, gens)))


def tf_not(a: TableForm) -> TableForm:
    return TableForm(a.gens, _pack(~a.truth()))


def tf_or(a: TableForm, b: TableForm) -> TableForm:
    return _combine(a, b, np.logical_or)


def tf_and(a: TableForm, b: TableForm) -> TableForm:
    return _combine(a, b, np.logical_and)


def tf_next(arg: TableForm) -> TableForm:
    if arg == TF_FALSE:
        return TF_FALSE  # strong next: no nonempty suffix satisfies false
    g = GNext(arg)
    return _make_table((g,), np.array([False, True]))


def tf_until(left: TableForm, right: TableForm) -> TableForm:
    if right in (TF_TRUE, TF_FALSE):
        return right
    if left == TF_FALSE:
        return right
    g = GUntil(left, right)
    return _make_table((g,), np.array([False, True]))


@lru_cache(maxsize=None)
def to_table(f: Formula) -> TableForm:
    if isinstance(f, TrueF):
        return TF_TRUE
    if isinstance(f, FalseF):
        return TF_FALSE
    if isinstance(f, Atom):
        return _make_table((GAtom(f.pred),), np.array([False, True]))
    if isinstance(f, Not):
        return tf_not(to_table(f.arg))
    if isinstance(f, Or):
        return tf_or(to_table(f.left), to_table(f.right))
    if isinstance(f, And):
        return tf_and(to_table(f.left), to_table(f.right))
    if isinstance(f, Next):
        return tf_next(to_table(f.arg))
    if isinstance(f, Until):
        return tf_until(to_table(f.left), to_table(f.right))
    if isinstance(f, Eventually):
        return tf_until(TF_TRUE, to_table(f.arg))
    if isinstance(f, Always):
        return tf_not(tf_until(TF_TRUE, tf_not(to_table(f.arg))))
    raise TypeError(f)


def _subst(tf: TableForm, gen, replacement: TableForm) -> TableForm:
    """Substitute a generator by a table via Shannon expansion."""
    if gen not in tf.gens:
        return tf
    j = tf.gens.index(gen)
    others = tf.gens[:j] + tf.gens[j + 1:]
    truth = tf.truth()
    m = np.arange(truth.shape[0])
    lowers = m & ((1 << j) - 1)
    uppers = (m >> (j + 1)) << j
    sub_idx = lowers | uppers
    cof0 = np.zeros(1 << len(others), dtype=bool)
    cof1 = np.zeros(1 << len(others), dtype=bool)
    sel = ((m >> j) & 1) == 1
    cof1[sub_idx[sel]] = truth[sel]
    cof0[sub_idx[~sel]] = truth[~sel]
    t0 = _make_table(others, cof0)
    t1 = _make_table(others, cof1)
    return tf_or(tf_and(tf_not(replacement), t0), tf_and(replacement, t1))


@lru_cache(maxsize=None)
def _progress_gen(g, letter: frozenset) -> TableForm:
    if isinstance(g, GAtom):
        return TF_TRUE if g.pred in letter else TF_FALSE
    if isinstance(g, GNext):
        return g.arg
    # until: right now, or (left now and until again)
    again = _make_table((g,), np.array([False, True]))
    return tf_or(progress_table(g.right, letter),
                 tf_and(progress_table(g.left, letter), again))


@lru_cache(maxsize=None)
def progress_table(tf: TableForm, letter: frozenset) -> TableForm:
    out = tf
    for g in tf.gens:
        out = _subst(out, g, _progress_gen(g, letter))
    return out


@lru_cache(maxsize=None)
def _eval_last_table(tf: TableForm, letter: frozenset) -> bool:
    idx = 0
    for j, g in enumerate(tf.gens):
        if isinstance(g, GAtom):
            v = g.pred in letter
        elif isinstance(g, GNext):
            v = False  # strong next at the trace end
        else:
            v = _eval_last_table(g.right, letter)
        idx |= int(v) << j
    return bool(tf.truth()[idx])


@lru_cache(maxsize=None)
def materialize(tf: TableForm) -> Formula:
    """Back-conversion to a formula (canonical DNF over the generators)."""
    truth = tf.truth()
    if truth.all():
        return TrueF()
    if not truth.any():
        return FalseF()
    gen_formulas = [_materialize_gen(g) for g in tf.gens]
    if len(tf.gens) == 1 and truth[0] == False and truth[1] == True:  # noqa: E712
        return gen_formulas[0]
    terms = []
    for m in np.flatnonzero(truth):
        lits = []
        for j, gf in enumerate(gen_formulas):
            lits.append(gf if (int(m) >> j) & 1 else Not(gf))
        conj = lits[0]
        for lit in lits[1:]:
            conj = And(conj, lit)
        terms.append(conj)
    out = terms[0]
    for term in terms[1:]:
        out = Or(out, term)
    return out


def _materialize_gen(g) -> Formula:
    if isinstance(g, GAtom):
        return Atom(g.pred)
    if isinstance(g, GNext):
        return Next(materialize(g.arg))
    return Until(materialize(g.left), materialize(g.right))


# ---------------------------------------------------------------------------
# progression and DFA compilation


def progress(f: Formula, letter: frozenset) -> Formula:
    """Formula psi with: for every nonempty rest, letter.rest |= f iff rest |= psi.

    The result is the canonical materialization of the progressed truth
    table, so iterated progression visits finitely many distinct formulas.
    """
    return materialize(progress_table(to_table(f), letter))


def eval_last(f: Formula, letter: frozenset) -> bool:
    """Truth of f on the single-letter word (the trace ends here)."""
    return evaluate_word(f, (letter,))


@dataclass
class Dfa:
    """Total deterministic automaton over subsets of the formula's atoms.

    Letters are indexed by bitmask over `atoms` order; `transitions` has
    shape (n_states, 2**len(atoms)); acceptance of a word is membership
    of the state reached after consuming every letter.
    """

    atoms: tuple[AtomicPredicate, ...]
    transitions: np.ndarray
    accepting: np.ndarray
    state_labels: list[str]
    q0: int = 0

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_letters(self) -> int:
        return self.transitions.shape[1]

    def letter_index(self, letter) -> int:
        idx = 0
        for i, a in enumerate(self.atoms):
            if a in letter:
                idx |= 1 << i
        return idx

    def letter_set(self, idx: int) -> frozenset:
        return frozenset(a for i, a in enumerate(self.atoms) if idx & (1 << i))

    def step(self, q: int, letter) -> int:
        return int(self.transitions[q, self.letter_index(letter)])

    def run(self, word) -> int:
        q = self.q0
        for letter in word:
            q = self.step(q, letter)
        return q

    def accepts_word(self, word) -> bool:
        """word: iterable of atom subsets, one per trace position (length T+1)."""
        return bool(self.accepting[self.run(word)])

    def dump(self) -> str:
        lines = [f"states: {self.n_states}   q0: {self.q0}   atoms: "
                 + ", ".join(a.name() for a in self.atoms)]
        lines.append("accepting: " + " ".join(str(q) for q in np.flatnonzero(self.accepting)))
        for q in range(self.n_states):
            for li in range(self.n_letters):
                atoms = sorted(a.name() for a in self.letter_set(li))
                lines.append(f"{q}, {{{', '.join(atoms)}}}, {int(self.transitions[q, li])}")
        return "\n".join(lines)


def compile_body(body: Formula, state_cap: int = DEFAULT_STATE_CAP) -> Dfa:
    """Compile the quantifier-free body to a DFA via formula progression.

    States are (canonical truth table, accept-if-trace-ends-here bit);
    the bit of a state reached on a letter records whether the word
    ending with that letter satisfies the predecessor's obligation.
    """
    atoms = atoms_of(body)
    tf0 = to_table(normalize(body))
    letters = [frozenset(a for i, a in enumerate(atoms) if mask & (1 << i))
               for mask in range(1 << len(atoms))]

    q0 = (tf0, _eval_last_table(tf0, frozenset()))
    index: dict[tuple[TableForm, bool], int] = {q0: 0}
    order: list[tuple[TableForm, bool]] = [q0]
    rows: list[list[int]] = []
    k = 0
    while k < len(order):
        tf, _bit = order[k]
        row = []
        for letter in letters:
            succ = (progress_table(tf, letter), _eval_last_table(tf, letter))
            if succ not in index:
                if len(order) >= state_cap:
                    raise StateExplosionError(
                        f"DFA construction exceeded {state_cap} states; "
                        "simplify the formula or raise the cap")
                index[succ] = len(order)
                order.append(succ)
            row.append(index[succ])
        rows.append(row)
        k += 1

    transitions = np.asarray(rows, dtype=np.int64)
    accepting = np.asarray([bit for (_tf, bit) in order], dtype=bool)
    labels = [("+" if bit else "-") + pretty(materialize(tf))[:120]
              for (tf, bit) in order]
    return Dfa(atoms=atoms, transitions=transitions, accepting=accepting,
               state_labels=labels)
