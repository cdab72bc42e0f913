"""Expression trees for implicit equations.

Trees are built from three immutable node kinds (``Op``, ``Var``, ``Const``)
plus the ``Slot`` placeholder used in skeletons. Everything serializes to a
flat prefix token list, which is also what the decoder emits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, Union

import numpy as np

D_MAX = 3


@dataclass(frozen=True)
class Operator:
    name: str
    arity: int
    sample_weight: int


OPERATORS: dict[str, Operator] = {
    op.name: op
    for op in (
        Operator("add", 2, 10),
        Operator("mul", 2, 10),
        Operator("sub", 2, 5),
        Operator("div", 2, 5),
        Operator("sqrt", 1, 4),
        Operator("exp", 1, 4),
        Operator("ln", 1, 4),
        Operator("sin", 1, 4),
        Operator("cos", 1, 4),
        Operator("pow2", 1, 4),
        Operator("pow3", 1, 2),
        Operator("pow4", 1, 1),
        Operator("pow5", 1, 1),
    )
}

PAD, SOS, EOS = "<pad>", "<sos>", "<eos>"
SLOT = "<c>"
SLOT_ALIASES = ("<c>", "◇")
VAR_NAMES = tuple(f"x_{i}" for i in range(1, D_MAX + 1))

# id order is part of the external contract; do not reorder
VOCAB: tuple[str, ...] = (PAD, SOS, EOS, *OPERATORS, *VAR_NAMES, SLOT)
TOKEN_ID: dict[str, int] = {name: i for i, name in enumerate(VOCAB)}
PAD_ID, SOS_ID, EOS_ID = TOKEN_ID[PAD], TOKEN_ID[SOS], TOKEN_ID[EOS]

_DIV_EPS = 1e-300


class MalformedPrefix(ValueError):
    pass


class SlotCountMismatch(ValueError):
    pass


class _Node:
    __slots__ = ()

    # arithmetic sugar for building trees in code and tests
    def __add__(self, other):
        return Op("add", (self, _lift(other)))

    def __radd__(self, other):
        return Op("add", (_lift(other), self))

    def __sub__(self, other):
        return Op("sub", (self, _lift(other)))

    def __rsub__(self, other):
        return Op("sub", (_lift(other), self))

    def __mul__(self, other):
        return Op("mul", (self, _lift(other)))

    def __rmul__(self, other):
        return Op("mul", (_lift(other), self))

    def __truediv__(self, other):
        return Op("div", (self, _lift(other)))

    def __rtruediv__(self, other):
        return Op("div", (_lift(other), self))

    def __str__(self) -> str:
        return " ".join(print_prefix(self))


@dataclass(frozen=True, eq=True, repr=False)
class Op(_Node):
    name: str
    args: tuple

    def __post_init__(self):
        op = OPERATORS.get(self.name)
        if op is None:
            raise ValueError(f"unknown operator {self.name!r}")
        if len(self.args) != op.arity:
            raise ValueError(f"{self.name} takes {op.arity} children, got {len(self.args)}")

    def __repr__(self) -> str:
        return f"{self.name}({', '.join(map(repr, self.args))})"


@dataclass(frozen=True, eq=True, repr=False)
class Var(_Node):
    index: int

    def __post_init__(self):
        if not 1 <= self.index <= D_MAX:
            raise ValueError(f"variable index {self.index} outside 1..{D_MAX}")

    def __repr__(self) -> str:
        return f"x_{self.index}"


@dataclass(frozen=True, eq=True, repr=False)
class Const(_Node):
    value: float

    def __repr__(self) -> str:
        return repr(self.value)


@dataclass(frozen=True, eq=True, repr=False)
class Slot(_Node):
    def __repr__(self) -> str:
        return "◇"


Expr = Union[Op, Var, Const, Slot]


def _lift(v) -> Expr:
    if isinstance(v, _Node):
        return v
    return Const(float(v))


def unary(name: str, arg) -> Op:
    return Op(name, (_lift(arg),))


def x(i: int) -> Var:
    return Var(i)


@dataclass(frozen=True)
class Skeleton:
    """An expression whose numeric constants are all ``Slot`` placeholders."""

    expr: Expr

    def __post_init__(self):
        if any(isinstance(n, Const) for n in walk(self.expr)):
            raise ValueError("skeleton contains literal constants")

    @property
    def slot_count(self) -> int:
        return sum(isinstance(n, Slot) for n in walk(self.expr))

    def __str__(self) -> str:
        return " ".join(print_prefix(self))


def walk(e: Expr) -> Iterable[Expr]:
    """Nodes in prefix (depth-first preorder) order."""
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, Op):
            stack.extend(reversed(node.args))


def size(e: Expr) -> int:
    return sum(1 for _ in walk(e))


def depth(e: Expr) -> int:
    if isinstance(e, Op):
        return 1 + max(depth(a) for a in e.args)
    return 1


def count_ops(e: Expr) -> int:
    return sum(isinstance(n, Op) for n in walk(e))


def _unwrap(e: Expr | Skeleton) -> Expr:
    return e.expr if isinstance(e, Skeleton) else e


def print_prefix(e: Expr | Skeleton) -> list[str]:
    out = []
    for node in walk(_unwrap(e)):
        if isinstance(node, Op):
            out.append(node.name)
        elif isinstance(node, Var):
            out.append(VAR_NAMES[node.index - 1])
        elif isinstance(node, Slot):
            out.append(SLOT)
        else:
            # repr(float) is the shortest string that round-trips exactly
            out.append(repr(float(node.value)))
    return out


def _leaf_from_token(tok: str) -> Expr:
    if tok in SLOT_ALIASES:
        return Slot()
    if tok.startswith("x_"):
        try:
            return Var(int(tok[2:]))
        except ValueError:
            raise MalformedPrefix(f"unknown token {tok!r}") from None
    try:
        value = float(tok)
    except ValueError:
        raise MalformedPrefix(f"unknown token {tok!r}") from None
    if not math.isfinite(value):
        raise MalformedPrefix(f"non-finite constant {tok!r}")
    return Const(value)


def parse_prefix(tokens: Sequence[str] | str) -> Expr | Skeleton:
    """Parse a prefix token sequence (list, or whitespace-separated string).

    Returns a ``Skeleton`` when the sequence contains placeholders and no
    literal constants, otherwise a plain expression.
    """
    if isinstance(tokens, str):
        tokens = tokens.split()
    tokens = list(tokens)
    if not tokens:
        raise MalformedPrefix("empty sequence")

    pos = 0

    def build() -> Expr:
        nonlocal pos
        if pos >= len(tokens):
            raise MalformedPrefix("truncated sequence")
        tok = tokens[pos]
        pos += 1
        op = OPERATORS.get(tok)
        if op is None:
            return _leaf_from_token(tok)
        return Op(tok, tuple(build() for _ in range(op.arity)))

    # explicit arity counter first, so deep garbage fails fast without recursion
    need = 1
    for i, tok in enumerate(tokens):
        if need == 0:
            raise MalformedPrefix(f"trailing tokens starting at position {i}")
        op = OPERATORS.get(tok)
        need += (op.arity - 1) if op else -1
    if need > 0:
        raise MalformedPrefix("truncated sequence")

    tree = build()
    nodes = list(walk(tree))
    if any(isinstance(n, Slot) for n in nodes) and not any(isinstance(n, Const) for n in nodes):
        return Skeleton(tree)
    return tree


def tokens_to_ids(tokens: Sequence[str]) -> list[int]:
    try:
        return [TOKEN_ID[t if t not in SLOT_ALIASES else SLOT] for t in tokens]
    except KeyError as exc:
        raise MalformedPrefix(f"token {exc.args[0]!r} is not in the vocabulary") from None


def ids_to_tokens(ids: Iterable[int]) -> list[str]:
    return [VOCAB[i] for i in ids]


def used_dimensions(e: Expr | Skeleton) -> set[int]:
    return {n.index for n in walk(_unwrap(e)) if isinstance(n, Var)}


def extract_skeleton(e: Expr) -> tuple[Skeleton, list[float]]:
    constants: list[float] = []

    def strip(node: Expr) -> Expr:
        if isinstance(node, Const):
            constants.append(float(node.value))
            return Slot()
        if isinstance(node, Op):
            return Op(node.name, tuple(strip(a) for a in node.args))
        return node

    return Skeleton(strip(_unwrap(e))), constants


def instantiate(s: Skeleton | Expr, c: Sequence[float]) -> Expr:
    expr = _unwrap(s)
    n_slots = sum(isinstance(n, Slot) for n in walk(expr))
    if len(c) != n_slots:
        raise SlotCountMismatch(f"skeleton has {n_slots} slots, got {len(c)} constants")
    it = iter(c)

    def fill(node: Expr) -> Expr:
        if isinstance(node, Slot):
            return Const(float(next(it)))
        if isinstance(node, Op):
            return Op(node.name, tuple(fill(a) for a in node.args))
        return node

    return fill(expr)


# --------------------------------------------------------------------------
# evaluation

def _scalar_apply(name: str, a: float, b: float = 0.0) -> float:
    if name == "add":
        return a + b
    if name == "sub":
        return a - b
    if name == "mul":
        return a * b
    if name == "div":
        if abs(b) < _DIV_EPS:
            return math.nan
        return a / b
    if name == "sqrt":
        return math.sqrt(a) if a >= 0 else math.nan
    if name == "ln":
        return math.log(a) if a > 0 else math.nan
    if name == "exp":
        try:
            return math.exp(a)
        except OverflowError:
            return math.nan
    if name == "sin":
        return math.sin(a)
    if name == "cos":
        return math.cos(a)
    if name == "pow2":
        return a * a
    if name == "pow3":
        return a * a * a
    if name == "pow4":
        sq = a * a
        return sq * sq
    if name == "pow5":
        sq = a * a
        return sq * sq * a
    raise ValueError(name)


def evaluate(e: Expr, point: Sequence[float]) -> float:
    """Evaluate ``e`` at a single point.

    Domain violations and overflow give ``nan`` instead of raising; callers
    test with ``math.isfinite``.
    """
    if isinstance(e, Skeleton):
        raise ValueError("cannot evaluate a skeleton; instantiate it first")

    def rec(node: Expr) -> float:
        if isinstance(node, Const):
            return float(node.value)
        if isinstance(node, Var):
            return float(point[node.index - 1])
        if isinstance(node, Slot):
            raise ValueError("cannot evaluate a placeholder")
        vals = [rec(a) for a in node.args]
        if any(not math.isfinite(v) for v in vals):
            return math.nan
        out = _scalar_apply(node.name, *vals)
        return out if math.isfinite(out) else math.nan

    try:
        return rec(e)
    except (OverflowError, ZeroDivisionError):
        return math.nan


def _np_div(a, b):
    b = np.asarray(b)
    bad = np.abs(b) < _DIV_EPS
    return np.where(bad, np.nan, a / np.where(bad, 1.0, b))


def _np_pow4(a):
    sq = a * a
    return sq * sq


def _np_pow5(a):
    sq = a * a
    return sq * sq * a


_NP_FUNCS: dict[str, Callable] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": _np_div,
    "sqrt": np.sqrt,
    "exp": np.exp,
    "ln": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "pow2": lambda a: a * a,
    "pow3": lambda a: a * a * a,
    "pow4": _np_pow4,
    "pow5": _np_pow5,
}


def evaluate_batch(e: Expr | Skeleton, X: np.ndarray, constants=None) -> np.ndarray:
    """Vectorized evaluation over the rows of ``X`` (shape ``(N, D_MAX)``).

    ``constants`` fills placeholders in prefix order; entries may be arrays
    that broadcast against the point axis (e.g. shape ``(B, 1)`` to evaluate
    B constant vectors at once). Non-finite results are returned as ``nan``.
    """
    expr = _unwrap(e)
    X = np.asarray(X, dtype=np.float64)
    cols = [X[..., j] for j in range(X.shape[-1])]
    slot_iter = iter(constants if constants is not None else ())

    with np.errstate(all="ignore"):

        def rec(node: Expr):
            if isinstance(node, Const):
                return node.value
            if isinstance(node, Var):
                return cols[node.index - 1]
            if isinstance(node, Slot):
                try:
                    return next(slot_iter)
                except StopIteration:
                    raise SlotCountMismatch("not enough constants for placeholders") from None
            r = _NP_FUNCS[node.name](*[rec(a) for a in node.args])
            # overflow must not be rescued later (e.g. 1/inf), same as evaluate()
            return np.where(np.isfinite(r), r, np.nan)

        out = rec(expr)
        shape = np.broadcast_shapes(np.shape(out), cols[0].shape)
        out = np.broadcast_to(np.asarray(out, dtype=np.float64), shape)
        return np.where(np.isfinite(out), out, np.nan)
