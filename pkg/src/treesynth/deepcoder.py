"""Register-based list DSL in the style of DeepCoder.

Values are either bounded integers or bounded integer lists (tuples). A
program is a sequence of statements, each applying one operator to one or two
registers and writing the result into an output register. Execution is
deterministic and failures are reported as :class:`ExecError` with a cause.

Operator table (ids are stable, they define the action space)::

    0 HEAD        1 LAST        2 TAKE        3 DROP        4 ACCESS
    5 MINIMUM     6 MAXIMUM     7 REVERSE     8 SORT        9 SUM
    10-19 MAP,{+1,-1,*2,*3,*4,/2,/3,/4,*-1,**2}
    20-23 FILTER,{>0,<0,even,odd}
    24-27 COUNT,{>0,<0,even,odd}
    28-32 ZIPWITH,{+,-,*,min,max}
    33-37 SCANL1,{+,-,*,min,max}

Text format, one statement per line::

    r1 = SORT r0
    r2 = ZIPWITH,+ r0 r1
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence, Union

import numpy as np

from .errors import InvalidStep

INT_MIN = -256
INT_MAX = 256
MAX_LIST_LEN = 20
MAX_REGISTERS = 8

INT = 0
LIST = 1

Value = Union[int, tuple]


class Cause(enum.Enum):
    TYPE_MISMATCH = "TypeMismatch"
    INDEX_OUT_OF_RANGE = "IndexOutOfRange"
    VALUE_OUT_OF_BOUNDS = "ValueOutOfBounds"
    EMPTY_LIST_ACCESS = "EmptyListAccess"
    NO_FREE_REGISTER = "NoFreeRegister"
    EMPTY_PROGRAM = "EmptyProgram"


class ExecError(InvalidStep):
    def __init__(self, cause: Cause, index: int | None = None, detail: str = ""):
        self.cause = cause
        self.index = index
        self.detail = detail
        where = "" if index is None else f" at statement {index}"
        super().__init__(f"{cause.value}{where}{': ' + detail if detail else ''}")

    def at(self, index: int) -> ExecError:
        return ExecError(self.cause, index, self.detail)


def kind_of(v: Value) -> int:
    return LIST if isinstance(v, tuple) else INT


def is_valid_value(v: Value) -> bool:
    if isinstance(v, tuple):
        return len(v) <= MAX_LIST_LEN and all(
            isinstance(x, int) and INT_MIN <= x <= INT_MAX for x in v
        )
    return isinstance(v, int) and not isinstance(v, bool) and INT_MIN <= v <= INT_MAX


def _div(d: int) -> Callable[[int], int]:
    def f(x: int) -> int:
        q = abs(x) // d
        return q if x >= 0 else -q

    return f


UNARY_LAMBDAS: dict[str, Callable[[int], int]] = {
    "+1": lambda x: x + 1,
    "-1": lambda x: x - 1,
    "*2": lambda x: x * 2,
    "*3": lambda x: x * 3,
    "*4": lambda x: x * 4,
    "/2": _div(2),
    "/3": _div(3),
    "/4": _div(4),
    "*-1": lambda x: -x,
    "**2": lambda x: x * x,
}

PREDICATES: dict[str, Callable[[int], bool]] = {
    ">0": lambda x: x > 0,
    "<0": lambda x: x < 0,
    "even": lambda x: x % 2 == 0,
    "odd": lambda x: x % 2 == 1,
}

BINARY_LAMBDAS: dict[str, Callable[[int, int], int]] = {
    "+": lambda x, y: x + y,
    "-": lambda x, y: x - y,
    "*": lambda x, y: x * y,
    "min": min,
    "max": max,
}


def _empty(name: str) -> ExecError:
    return ExecError(Cause.EMPTY_LIST_ACCESS, detail=name)


def _head(xs):
    if not xs:
        raise _empty("HEAD")
    return xs[0]


def _last(xs):
    if not xs:
        raise _empty("LAST")
    return xs[-1]


def _take(n, xs):
    return xs[:n] if n > 0 else ()


def _drop(n, xs):
    return xs[n:] if n > 0 else xs


def _access(n, xs):
    if not 0 <= n < len(xs):
        raise _empty("ACCESS")
    return xs[n]


def _minimum(xs):
    if not xs:
        raise _empty("MINIMUM")
    return min(xs)


def _maximum(xs):
    if not xs:
        raise _empty("MAXIMUM")
    return max(xs)


def _scanl1(g, xs):
    out = []
    acc = None
    for i, x in enumerate(xs):
        acc = x if i == 0 else g(acc, x)
        out.append(acc)
    return tuple(out)


@dataclass(frozen=True)
class Operator:
    id: int
    name: str
    lam: str | None
    inputs: tuple[int, ...]
    output: int
    fn: Callable

    @property
    def arity(self) -> int:
        return len(self.inputs)

    @property
    def label(self) -> str:
        return self.name if self.lam is None else f"{self.name},{self.lam}"


def _build_operators() -> tuple[Operator, ...]:
    L, I = LIST, INT
    specs: list[tuple[str, str | None, tuple[int, ...], int, Callable]] = [
        ("HEAD", None, (L,), I, _head),
        ("LAST", None, (L,), I, _last),
        ("TAKE", None, (I, L), L, _take),
        ("DROP", None, (I, L), L, _drop),
        ("ACCESS", None, (I, L), I, _access),
        ("MINIMUM", None, (L,), I, _minimum),
        ("MAXIMUM", None, (L,), I, _maximum),
        ("REVERSE", None, (L,), L, lambda xs: xs[::-1]),
        ("SORT", None, (L,), L, lambda xs: tuple(sorted(xs))),
        ("SUM", None, (L,), I, lambda xs: sum(xs)),
    ]
    for lam, f in UNARY_LAMBDAS.items():
        specs.append(("MAP", lam, (L,), L, lambda xs, f=f: tuple(f(x) for x in xs)))
    for lam, p in PREDICATES.items():
        specs.append(("FILTER", lam, (L,), L, lambda xs, p=p: tuple(x for x in xs if p(x))))
    for lam, p in PREDICATES.items():
        specs.append(("COUNT", lam, (L,), I, lambda xs, p=p: sum(1 for x in xs if p(x))))
    for lam, g in BINARY_LAMBDAS.items():
        specs.append(
            ("ZIPWITH", lam, (L, L), L, lambda xs, ys, g=g: tuple(g(x, y) for x, y in zip(xs, ys)))
        )
    for lam, g in BINARY_LAMBDAS.items():
        specs.append(("SCANL1", lam, (L,), L, lambda xs, g=g: _scanl1(g, xs)))
    return tuple(Operator(i, *s) for i, s in enumerate(specs))


OPERATORS: tuple[Operator, ...] = _build_operators()
OPS_BY_LABEL: dict[str, Operator] = {op.label: op for op in OPERATORS}
NUM_OPS = len(OPERATORS)


def op_by_label(label: str) -> Operator:
    try:
        return OPS_BY_LABEL[label]
    except KeyError:
        raise ValueError(f"unknown operator {label!r}") from None


class Statement(NamedTuple):
    """One instruction: ``out = op(arg1[, arg2])``. Unary ops duplicate arg1 into arg2."""

    op: int
    arg1: int
    arg2: int
    out: int

    def text(self) -> str:
        o = OPERATORS[self.op]
        args = f"r{self.arg1}" if o.arity == 1 else f"r{self.arg1} r{self.arg2}"
        return f"r{self.out} = {o.label} {args}"


@dataclass(frozen=True)
class Program:
    statements: tuple[Statement, ...]
    num_inputs: int

    def __len__(self) -> int:
        return len(self.statements)

    def to_text(self) -> str:
        return "\n".join(s.text() for s in self.statements)

    @classmethod
    def from_text(cls, text: str, num_inputs: int) -> Program:
        return cls(tuple(parse_statement(line) for line in text.splitlines() if line.strip()), num_inputs)


_STMT_RE = re.compile(r"^\s*r(\d+)\s*=\s*(\S+)\s+r(\d+)(?:\s+r(\d+))?\s*$")


def parse_statement(line: str) -> Statement:
    m = _STMT_RE.match(line)
    if not m:
        raise ValueError(f"cannot parse statement {line!r}")
    out, label, a1, a2 = m.groups()
    op = op_by_label(label)
    if (a2 is None) != (op.arity == 1):
        raise ValueError(f"{label} takes {op.arity} argument(s): {line!r}")
    a1 = int(a1)
    return Statement(op.id, a1, a1 if a2 is None else int(a2), int(out))


def _check_bounds(v: Value) -> Value:
    if isinstance(v, tuple):
        for x in v:
            if x < INT_MIN or x > INT_MAX:
                raise ExecError(Cause.VALUE_OUT_OF_BOUNDS, detail=str(x))
    elif v < INT_MIN or v > INT_MAX:
        raise ExecError(Cause.VALUE_OUT_OF_BOUNDS, detail=str(v))
    return v


def apply_operator(op: Operator, a: Value, b: Value | None = None) -> Value:
    """Apply ``op`` to its arguments; ``b`` is ignored for unary operators."""
    args = (a,) if op.arity == 1 else (a, b)
    for want, got in zip(op.inputs, args):
        if got is None or kind_of(got) != want:
            raise ExecError(Cause.TYPE_MISMATCH, detail=op.label)
    return _check_bounds(op.fn(*args))


def execute_statement(
    memory: Sequence[Value], stmt: Statement, max_registers: int = MAX_REGISTERS
) -> tuple[Value, ...]:
    """Return a new register file with ``stmt.out`` bound to the result."""
    n = len(memory)
    if not (0 <= stmt.op < NUM_OPS):
        raise ExecError(Cause.INDEX_OUT_OF_RANGE, detail=f"operator {stmt.op}")
    op = OPERATORS[stmt.op]
    if not (0 <= stmt.arg1 < n) or (op.arity == 2 and not (0 <= stmt.arg2 < n)):
        raise ExecError(Cause.INDEX_OUT_OF_RANGE, detail=f"{stmt}")
    if not (0 <= stmt.out <= n and stmt.out < max_registers):
        raise ExecError(Cause.NO_FREE_REGISTER, detail=f"r{stmt.out}")
    result = apply_operator(op, memory[stmt.arg1], memory[stmt.arg2] if op.arity == 2 else None)
    if stmt.out == n:
        return (*memory, result)
    regs = list(memory)
    regs[stmt.out] = result
    return tuple(regs)


def run_program(
    p: Program, inputs: Sequence[Value], max_registers: int = MAX_REGISTERS
) -> Value:
    """Execute ``p`` on a fresh register file; returns the last statement's output."""
    if len(inputs) != p.num_inputs:
        raise ValueError(f"program expects {p.num_inputs} inputs, got {len(inputs)}")
    if not p.statements:
        raise ExecError(Cause.EMPTY_PROGRAM)
    memory = tuple(inputs)
    for i, stmt in enumerate(p.statements):
        try:
            memory = execute_statement(memory, stmt, max_registers)
        except ExecError as e:
            raise e.at(i) from None
    return memory[p.statements[-1].out]


# -- action space ------------------------------------------------------------


def action_space_size(max_registers: int = MAX_REGISTERS) -> int:
    return NUM_OPS * max_registers * max_registers


def action_space_version(max_registers: int = MAX_REGISTERS) -> str:
    return f"deepcoder-v1-ops{NUM_OPS}-r{max_registers}"


def encode_action(op: int, arg1: int, arg2: int, max_registers: int = MAX_REGISTERS) -> int:
    return (op * max_registers + arg1) * max_registers + arg2


def decode_action(action: int, max_registers: int = MAX_REGISTERS) -> tuple[int, int, int]:
    rest, arg2 = divmod(action, max_registers)
    op, arg1 = divmod(rest, max_registers)
    return op, arg1, arg2


class _ActionTable:
    """Per-action required kinds, precomputed for vectorised legality masks."""

    def __init__(self, max_registers: int):
        n = action_space_size(max_registers)
        ids = np.arange(n)
        self.op, rest = np.divmod(ids, max_registers * max_registers)
        self.arg1, self.arg2 = np.divmod(rest, max_registers)
        req1 = np.array([o.inputs[0] for o in OPERATORS])
        req2 = np.array([o.inputs[-1] for o in OPERATORS])
        unary = np.array([o.arity == 1 for o in OPERATORS])
        self.req1 = req1[self.op]
        self.req2 = req2[self.op]
        self.shape_ok = ~unary[self.op] | (self.arg1 == self.arg2)


_TABLES: dict[int, _ActionTable] = {}


def _table(max_registers: int) -> _ActionTable:
    t = _TABLES.get(max_registers)
    if t is None:
        t = _TABLES[max_registers] = _ActionTable(max_registers)
    return t


def legal_action_mask(
    kinds: Sequence[int], max_registers: int = MAX_REGISTERS, ops: Iterable[int] | None = None
) -> np.ndarray:
    """Boolean mask over the action space for a memory with the given register kinds."""
    t = _table(max_registers)
    k = np.full(max_registers, -1)
    k[: len(kinds)] = kinds
    mask = (k[t.arg1] == t.req1) & (k[t.arg2] == t.req2) & t.shape_ok
    if ops is not None:
        allowed = np.zeros(NUM_OPS, dtype=bool)
        allowed[list(ops)] = True
        mask &= allowed[t.op]
    return mask


def enumerate_statements(
    memory: Sequence[Value],
    max_registers: int = MAX_REGISTERS,
    ops: Iterable[int] | None = None,
    num_inputs: int = 0,
) -> list[Statement]:
    """Type-valid statements for ``memory`` in (op, arg1, arg2) order.

    With a free register the output is the next free slot. When the file is
    full, each statement is paired with every non-input slot as the output
    (ordered by slot); the state module narrows this to its drop strategy's
    victim.
    """
    mask = legal_action_mask([kind_of(v) for v in memory], max_registers, ops)
    ids = np.flatnonzero(mask)
    n = len(memory)
    outs = [n] if n < max_registers else list(range(num_inputs, max_registers))
    stmts = []
    for a in ids.tolist():
        op, a1, a2 = decode_action(a, max_registers)
        stmts.extend(Statement(op, a1, a2, o) for o in outs)
    return stmts
