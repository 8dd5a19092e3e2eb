"""S-expression predicate language for success criteria and implicit task
constraints, with an evaluator over recorded trajectories.

Grammar::

    expr     := atom | compound
    compound := "(" ("and" | "or") expr+ ")"
              | "(" "not" expr ")"
              | "(" ("Always" | "Eventually" | "AtRelease") expr ")"
    atom     := "(" PREDICATE arg* ")"
    arg      := SYMBOL | NUMBER

Combinator and temporal keywords are case-insensitive; predicate names are not.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

from elegance import ConfigError
from elegance.world import StepEvents, WorldState, wrap_angle


class ParseError(ConfigError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"{msg} at line {line}, column {col}")
        self.line, self.col = line, col


# predicate name -> argument kinds ("id" or "num")
PREDICATES: dict[str, tuple[str, ...]] = {
    "In": ("obj", "region"),
    "On": ("obj", "region"),
    "IsGrasping": ("obj",),
    "IsOnBottomOf": ("obj", "region"),
    "IsPreciselyOn": ("obj", "region", "num"),
    "IsOrientationAligned": ("obj", "num", "num"),
    "PositionUnchanged": ("obj", "num"),
}
# numeric args that are tolerances (must be > 0), by predicate
_TOLERANCE_ARGS = {"IsPreciselyOn": (2,), "IsOrientationAligned": (2,), "PositionUnchanged": (1,)}

TEMPORAL = {"always": "Always", "eventually": "Eventually", "atrelease": "AtRelease"}


@dataclass(frozen=True)
class Atom:
    name: str
    args: tuple[Union[str, float], ...]


@dataclass(frozen=True)
class And:
    children: tuple["Expr", ...]


@dataclass(frozen=True)
class Or:
    children: tuple["Expr", ...]


@dataclass(frozen=True)
class Not:
    child: "Expr"


@dataclass(frozen=True)
class Temporal:
    op: str  # "Always" | "Eventually" | "AtRelease"
    child: "Expr"


Expr = Union[Atom, And, Or, Not, Temporal]


# -- parsing -----------------------------------------------------------------

def _tokenize(text: str):
    line, col, i = 1, 1, 0
    while i < len(text):
        c = text[i]
        if c == "\n":
            line, col, i = line + 1, 1, i + 1
        elif c.isspace():
            col, i = col + 1, i + 1
        elif c in "()":
            yield c, line, col
            col, i = col + 1, i + 1
        else:
            start, start_col = i, col
            while i < len(text) and not text[i].isspace() and text[i] not in "()":
                i, col = i + 1, col + 1
            yield text[start:i], line, start_col
    yield None, line, col


def _number(tok: str):
    try:
        value = float(tok)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def parse(text: str) -> Expr:
    tokens = list(_tokenize(text))
    pos = 0

    def expect(kind: str):
        nonlocal pos
        tok, line, col = tokens[pos]
        if tok != kind:
            found = "end of input" if tok is None else repr(tok)
            raise ParseError(f"expected {kind!r}, found {found}", line, col)
        pos += 1

    def expr() -> Expr:
        nonlocal pos
        expect("(")
        head, line, col = tokens[pos]
        if head is None or head in "()":
            raise ParseError("expected operator or predicate name", line, col)
        pos += 1
        low = head.lower()
        if low in ("and", "or", "not") or low in TEMPORAL:
            children = []
            while tokens[pos][0] == "(":
                children.append(expr())
            tok, tl, tc = tokens[pos]
            if tok != ")":
                raise ParseError(f"{head}: arguments must be parenthesised expressions", tl, tc)
            pos += 1
            if low in ("and", "or"):
                if not children:
                    raise ParseError(f"{head} needs at least one operand", line, col)
                return (And if low == "and" else Or)(tuple(children))
            if len(children) != 1:
                raise ParseError(f"{head} takes exactly one operand, got {len(children)}", line, col)
            return Not(children[0]) if low == "not" else Temporal(TEMPORAL[low], children[0])
        if head not in PREDICATES:
            raise ParseError(f"unknown predicate {head!r}", line, col)
        kinds = PREDICATES[head]
        args: list[Union[str, float]] = []
        while tokens[pos][0] not in (")", "(", None):
            tok, al, ac = tokens[pos]
            args.append(tok)
            pos += 1
        tok, tl, tc = tokens[pos]
        if tok != ")":
            raise ParseError(f"{head}: expected ')'", tl, tc)
        pos += 1
        if len(args) != len(kinds):
            raise ParseError(f"{head} takes {len(kinds)} arguments, got {len(args)}", line, col)
        for i, kind in enumerate(kinds):
            if kind == "num":
                value = _number(args[i])
                if value is None:
                    raise ParseError(f"{head}: argument {i + 1} must be a number, got {args[i]!r}", line, col)
                if i in _TOLERANCE_ARGS.get(head, ()) and value <= 0:
                    raise ParseError(f"{head}: tolerance must be positive", line, col)
                args[i] = value
            elif _number(args[i]) is not None:
                raise ParseError(f"{head}: argument {i + 1} must be an identifier", line, col)
        return Atom(head, tuple(args))

    result = expr()
    tok, line, col = tokens[pos]
    if tok is not None:
        raise ParseError(f"unexpected trailing token {tok!r}", line, col)
    return result


def to_text(e: Expr) -> str:
    """Canonical text: single spaces, lowercase combinators, no rewriting."""
    if isinstance(e, Atom):
        return "(" + " ".join([e.name, *(repr(a) if isinstance(a, float) else a for a in e.args)]) + ")"
    if isinstance(e, (And, Or)):
        kw = "and" if isinstance(e, And) else "or"
        return f"({kw} " + " ".join(to_text(c) for c in e.children) + ")"
    if isinstance(e, Not):
        return f"(not {to_text(e.child)})"
    return f"({e.op} {to_text(e.child)})"


def referenced_ids(e: Expr) -> tuple[set[str], set[str]]:
    """(object ids, region ids) mentioned by the expression."""
    objs: set[str] = set()
    regions: set[str] = set()
    if isinstance(e, Atom):
        for kind, arg in zip(PREDICATES[e.name], e.args):
            if kind == "obj":
                objs.add(arg)
            elif kind == "region":
                regions.add(arg)
    else:
        for c in (e.children if isinstance(e, (And, Or)) else (e.child,)):
            o, r = referenced_ids(c)
            objs |= o
            regions |= r
    return objs, regions


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalContext:
    """``states[0]`` is the initial state; ``states[i]`` (i >= 1) is the state
    after step i, whose events are ``events[i - 1]``."""

    states: list[WorldState]
    events: list[StepEvents]
    task_object: str | None = None

    def __post_init__(self) -> None:
        if not self.states:
            raise ConfigError("empty trajectory")
        if len(self.events) != len(self.states) - 1:
            raise ConfigError("events must have exactly one entry per step")

    @property
    def final(self) -> int:
        return len(self.states) - 1

    def release_indices(self, oid: str) -> list[int]:
        """State indices at entry to each step that released ``oid``."""
        return [i for i, ev in enumerate(self.events) if ev.released and ev.released_id == oid]


AtomFn = Callable[[Atom, EvalContext, int], bool]


def _inside(state: WorldState, oid: str, rid: str) -> bool:
    o = state.obj(oid)
    return state.region(rid).contains(o.x, o.y)


def eval_atom(atom: Atom, ctx: EvalContext, i: int) -> bool:
    s = ctx.states[i]
    name, args = atom.name, atom.args
    if name in ("In", "On"):
        return _inside(s, args[0], args[1])
    if name == "IsGrasping":
        return s.obj(args[0]).held
    if name == "IsOnBottomOf":
        oid, rid = args
        if s.obj(oid).held or not _inside(s, oid, rid):
            return False
        releases = [r for r in ctx.release_indices(oid) if r < i]
        return bool(releases) and _inside(ctx.states[releases[-1]], oid, rid)
    if name == "IsPreciselyOn":
        o, r = s.obj(args[0]), s.region(args[1])
        return math.hypot(o.x - r.x, o.y - r.y) <= args[2]
    if name == "IsOrientationAligned":
        return abs(wrap_angle(s.obj(args[0]).angle - args[1])) <= args[2]
    if name == "PositionUnchanged":
        o0 = ctx.states[0].obj(args[0])
        worst = max(math.hypot(st.obj(args[0]).x - o0.x, st.obj(args[0]).y - o0.y)
                    for st in ctx.states[: i + 1])
        return worst <= args[1]
    raise ConfigError(f"unknown predicate {name!r}")


def _first_object(e: Expr) -> str | None:
    if isinstance(e, Atom):
        for kind, arg in zip(PREDICATES[e.name], e.args):
            if kind == "obj":
                return arg
        return None
    for c in (e.children if isinstance(e, (And, Or)) else (e.child,)):
        found = _first_object(c)
        if found is not None:
            return found
    return None


def evaluate(expr: Expr, ctx: EvalContext, step: int | None = None, atom_fn: AtomFn | None = None) -> bool:
    """Truth of ``expr`` on the trajectory.

    Bare atoms are checked at ``step`` (default: the final step). ``Always`` and
    ``Eventually`` range over every state; ``AtRelease`` holds iff the bound
    object was released at least once and the operand holds at the moment of
    every release (the state the releasing step started from).
    """
    i = ctx.final if step is None else step
    atom_fn = atom_fn or eval_atom
    if isinstance(expr, Atom):
        return atom_fn(expr, ctx, i)
    if isinstance(expr, And):
        return all(evaluate(c, ctx, i, atom_fn) for c in expr.children)
    if isinstance(expr, Or):
        return any(evaluate(c, ctx, i, atom_fn) for c in expr.children)
    if isinstance(expr, Not):
        return not evaluate(expr.child, ctx, i, atom_fn)
    if expr.op == "Always":
        return all(evaluate(expr.child, ctx, j, atom_fn) for j in range(len(ctx.states)))
    if expr.op == "Eventually":
        return any(evaluate(expr.child, ctx, j, atom_fn) for j in range(len(ctx.states)))
    oid = ctx.task_object or _first_object(expr.child)
    if oid is None:
        raise ConfigError("AtRelease needs a bound task object")
    releases = ctx.release_indices(oid)
    return bool(releases) and all(evaluate(expr.child, ctx, j, atom_fn) for j in releases)
