"""Small fixed-operator expression language for dynamics and output maps.

Expressions are parsed from Python-syntax strings ("0.9*x1 + w1",
"x1**2", "min(x1, 2.0)") but only a fixed whitelist of operations is
admitted: constants, named variables, + - * /, integer powers, sin,
cos, exp, abs, min, max.  Evaluation is vectorized over numpy arrays
and fails loudly on division by zero or non-finite results.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass

import numpy as np


class ExprError(ValueError):
    pass


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: int


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class Call:
    func: str  # sin cos exp abs min max
    args: tuple["Node", ...]


Node = Const | Var | BinOp | Pow | Neg | Call

_UNARY_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}
_BINARY_FUNCS = {"min": np.minimum, "max": np.maximum}


def parse_expr(text: str) -> Node:
    """Parse a string into an expression tree, rejecting anything off-whitelist."""
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as e:
        raise ExprError(f"syntax error in expression {text!r}: {e.msg}") from None
    return _convert(tree.body, text)


def _convert(node: ast.expr, src: str) -> Node:
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExprError(f"non-numeric constant in {src!r}")
        return Const(float(node.value))
    if isinstance(node, ast.Name):
        return Var(node.id)
    if isinstance(node, ast.UnaryOp):
        if isinstance(node.op, ast.USub):
            return Neg(_convert(node.operand, src))
        if isinstance(node.op, ast.UAdd):
            return _convert(node.operand, src)
        raise ExprError(f"unsupported unary operator in {src!r}")
    if isinstance(node, ast.BinOp):
        if isinstance(node.op, ast.Pow):
            exp = node.right
            if not (isinstance(exp, ast.Constant) and isinstance(exp.value, int)):
                raise ExprError(f"power exponent must be an integer literal in {src!r}")
            return Pow(_convert(node.left, src), int(exp.value))
        ops = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/"}
        for a_op, sym in ops.items():
            if isinstance(node.op, a_op):
                return BinOp(sym, _convert(node.left, src), _convert(node.right, src))
        raise ExprError(f"unsupported operator in {src!r}")
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.keywords:
            raise ExprError(f"unsupported call in {src!r}")
        name = node.func.id
        args = tuple(_convert(a, src) for a in node.args)
        if name in _UNARY_FUNCS:
            if len(args) != 1:
                raise ExprError(f"{name}() takes exactly 1 argument in {src!r}")
            return Call(name, args)
        if name in _BINARY_FUNCS:
            if len(args) != 2:
                raise ExprError(f"{name}() takes exactly 2 arguments in {src!r}")
            return Call(name, args)
        raise ExprError(f"unknown function {name!r} in {src!r}")
    raise ExprError(f"unsupported syntax in {src!r}")


def free_vars(node: Node) -> set[str]:
    if isinstance(node, Const):
        return set()
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, BinOp):
        return free_vars(node.left) | free_vars(node.right)
    if isinstance(node, Pow):
        return free_vars(node.base)
    if isinstance(node, Neg):
        return free_vars(node.arg)
    if isinstance(node, Call):
        out: set[str] = set()
        for a in node.args:
            out |= free_vars(a)
        return out
    raise TypeError(node)


def eval_expr(node: Node, env: dict[str, np.ndarray]) -> np.ndarray:
    """Evaluate with numpy broadcasting; env maps variable name -> array."""
    if isinstance(node, Const):
        return np.asarray(node.value)
    if isinstance(node, Var):
        if node.name not in env:
            raise ExprError(f"unbound variable {node.name!r}")
        return np.asarray(env[node.name], dtype=float)
    if isinstance(node, Neg):
        return -eval_expr(node.arg, env)
    if isinstance(node, Pow):
        base = eval_expr(node.base, env)
        if node.exponent < 0 and np.any(base == 0.0):
            raise ExprError("zero raised to a negative power")
        return base ** node.exponent
    if isinstance(node, BinOp):
        a = eval_expr(node.left, env)
        b = eval_expr(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if np.any(b == 0.0):
            raise ExprError("division by zero")
        return a / b
    if isinstance(node, Call):
        args = [eval_expr(a, env) for a in node.args]
        fn = _UNARY_FUNCS.get(node.func) or _BINARY_FUNCS[node.func]
        return fn(*args)
    raise TypeError(node)


def to_string(node: Node) -> str:
    if isinstance(node, Const):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_string(node.arg)})"
    if isinstance(node, Pow):
        return f"({to_string(node.base)})**{node.exponent}"
    if isinstance(node, BinOp):
        return f"({to_string(node.left)} {node.op} {to_string(node.right)})"
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_string(a) for a in node.args)})"
    raise TypeError(node)


class ExprVector:
    """A vector of expressions sharing a variable environment, e.g. a dynamics map."""

    def __init__(self, exprs: list[Node], allowed_vars: set[str]):
        self.exprs = list(exprs)
        for e in self.exprs:
            extra = free_vars(e) - allowed_vars
            if extra:
                raise ExprError(f"undeclared variables {sorted(extra)}")

    @staticmethod
    def parse(texts: list[str], allowed_vars: set[str]) -> "ExprVector":
        return ExprVector([parse_expr(t) for t in texts], allowed_vars)

    def __len__(self) -> int:
        return len(self.exprs)

    def __call__(self, env: dict[str, np.ndarray]) -> np.ndarray:
        """Evaluate all components; returns (..., len(exprs)) stacked on last axis."""
        shapes = [np.asarray(v).shape for v in env.values()]
        target = np.broadcast_shapes(*shapes) if shapes else ()
        cols = [np.broadcast_to(eval_expr(e, env), target) for e in self.exprs]
        out = np.stack(cols, axis=-1)
        if not np.all(np.isfinite(out)):
            raise ExprError("expression evaluated to a non-finite value")
        return out

    def strings(self) -> list[str]:
        return [to_string(e) for e in self.exprs]
