"""Search state for the DeepCoder DSL.

A :class:`SearchState` holds one register file per I/O example, advanced in
lockstep by the same statements. When the register file is full, a drop
strategy picks the register to overwrite (inputs are never dropped).

Canonical serialization (``CANONICAL_VERSION`` = 1), hashed with BLAKE2b-128
to form the shared-count key::

    b"DCS" version:u8 num_envs:u8 num_registers:u8
    for each env in example order:
        for each register in canonical order:
            kind:u8 (0 int, 1 list)
            int  -> value:i16le
            list -> length:u8 then length * value:i16le

Canonical register order sorts the register *columns* (the tuple of a
register's values across all examples) by ``(kind, payload)`` of the first
example, then the second, and so on. Targets and history are not part of the
key.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .deepcoder import (
    INT,
    MAX_REGISTERS,
    Cause,
    ExecError,
    Program,
    Statement,
    Value,
    action_space_size,
    action_space_version,
    decode_action,
    encode_action,
    execute_statement,
    kind_of,
    legal_action_mask,
    run_program,
)

CANONICAL_VERSION = 1

IOExample = tuple[tuple[Value, ...], Value]


class DropStrategy(enum.Enum):
    OLDEST_NON_INPUT = "oldest"
    LEAST_RECENTLY_USED = "lru"

    def victim(self, written: Sequence[int], used: Sequence[int], num_inputs: int) -> int:
        stamps = written if self is DropStrategy.OLDEST_NON_INPUT else used
        candidates = range(num_inputs, len(stamps))
        if not candidates:
            raise ExecError(Cause.NO_FREE_REGISTER, detail="every register is an input")
        return min(candidates, key=lambda i: (stamps[i], i))


@dataclass(frozen=True)
class ExampleEnv:
    registers: tuple[Value, ...]
    target: Value


@dataclass(frozen=True)
class StateContext:
    """Per-search constants shared by every state of one search."""

    io: tuple[IOExample, ...]
    max_registers: int = MAX_REGISTERS
    drop: DropStrategy = DropStrategy.OLDEST_NON_INPUT
    ops: frozenset[int] | None = None

    @property
    def num_inputs(self) -> int:
        return len(self.io[0][0])

    @property
    def action_space(self) -> int:
        return action_space_size(self.max_registers)

    @property
    def version(self) -> str:
        return action_space_version(self.max_registers)


@dataclass(frozen=True, eq=False)
class SearchState:
    envs: tuple[ExampleEnv, ...]
    history: tuple[Statement, ...]
    ctx: StateContext
    # per-slot step stamps (-1 for inputs) feeding the drop strategies
    written: tuple[int, ...]
    used: tuple[int, ...]
    path: tuple[int, ...] = ()
    _key: list = field(default_factory=list, repr=False)

    dsl = "deepcoder"

    @property
    def depth(self) -> int:
        return len(self.history)

    @property
    def num_registers(self) -> int:
        return len(self.envs[0].registers)

    def kinds(self) -> list[int]:
        return [kind_of(v) for v in self.envs[0].registers]

    def next_out(self) -> int:
        n = self.num_registers
        if n < self.ctx.max_registers:
            return n
        return self.ctx.drop.victim(self.written, self.used, self.ctx.num_inputs)

    # search protocol

    def legal_mask(self) -> np.ndarray:
        return legal_action_mask(self.kinds(), self.ctx.max_registers, self.ctx.ops)

    def legal_actions(self) -> np.ndarray:
        return np.flatnonzero(self.legal_mask())

    def statement_for(self, action: int) -> Statement:
        op, a1, a2 = decode_action(action, self.ctx.max_registers)
        return Statement(op, a1, a2, self.next_out())

    def child(self, action: int) -> SearchState:
        return step(self, self.statement_for(action))

    def is_solved(self) -> bool:
        return is_solved(self)

    def state_key(self) -> bytes:
        if not self._key:
            self._key.append(canonical_key(self))
        return self._key[0]

    def program(self) -> Program:
        return Program(self.history, self.ctx.num_inputs)

    def verify(self, program: Program) -> bool:
        return verify(program, self.ctx.io, self.ctx.max_registers)


def initial_state(
    io: Sequence[IOExample],
    max_registers: int = MAX_REGISTERS,
    drop: DropStrategy = DropStrategy.OLDEST_NON_INPUT,
    ops: Iterable[int] | None = None,
) -> SearchState:
    io = tuple((tuple(inp), out) for inp, out in io)
    if not io:
        raise ValueError("need at least one I/O example")
    n = len(io[0][0])
    if any(len(inp) != n for inp, _ in io):
        raise ValueError("examples disagree on the number of inputs")
    if n > max_registers:
        raise ValueError(f"{n} inputs do not fit in {max_registers} registers")
    kinds = [kind_of(v) for v in io[0][0]]
    if any([kind_of(v) for v in inp] != kinds for inp, _ in io):
        raise ValueError("examples disagree on input kinds")
    ctx = StateContext(io, max_registers, drop, None if ops is None else frozenset(ops))
    envs = tuple(ExampleEnv(inp, out) for inp, out in io)
    return SearchState(envs, (), ctx, (-1,) * n, (-1,) * n)


def step(s: SearchState, stmt: Statement, drop: DropStrategy | None = None) -> SearchState:
    """Apply ``stmt`` to every example; any failure invalidates the whole step."""
    ctx = s.ctx if drop is None or drop is s.ctx.drop else _with_drop(s.ctx, drop)
    n = s.num_registers
    if n < ctx.max_registers:
        slot = n
    else:
        slot = ctx.drop.victim(s.written, s.used, ctx.num_inputs)
    if stmt.out != slot:
        raise ExecError(Cause.NO_FREE_REGISTER, len(s.history), f"expected output r{slot}, got r{stmt.out}")
    envs = []
    for env in s.envs:
        try:
            regs = execute_statement(env.registers, stmt, ctx.max_registers)
        except ExecError as e:
            raise e.at(len(s.history)) from None
        envs.append(ExampleEnv(regs, env.target))
    t = len(s.history)
    written = list(s.written) + [t] if slot == n else list(s.written)
    written[slot] = t
    used = list(s.used) + [t] if slot == n else list(s.used)
    used[slot] = used[stmt.arg1] = used[stmt.arg2] = t
    action = encode_action(stmt.op, stmt.arg1, stmt.arg2, ctx.max_registers)
    return SearchState(tuple(envs), (*s.history, stmt), ctx, tuple(written), tuple(used), (*s.path, action))


def _with_drop(ctx: StateContext, drop: DropStrategy) -> StateContext:
    return StateContext(ctx.io, ctx.max_registers, drop, ctx.ops)


def is_solved(s: SearchState) -> bool:
    """True iff one register index holds the target in every example.

    Requiring the same index across examples keeps this in agreement with
    :func:`run_program`: the first step that solves a state must have written
    the target into its own output register.
    """
    for i in range(s.num_registers):
        if all(env.registers[i] == env.target for env in s.envs):
            return True
    return False


def _sort_key(v: Value) -> tuple:
    return (1, v) if isinstance(v, tuple) else (0, (v,))


def canonical_order(s: SearchState) -> list[int]:
    cols = range(s.num_registers)
    return sorted(cols, key=lambda i: tuple(_sort_key(env.registers[i]) for env in s.envs))


def canonical_bytes(s: SearchState) -> bytes:
    order = canonical_order(s)
    parts = [b"DCS", struct.pack("<BBB", CANONICAL_VERSION, len(s.envs), len(order))]
    for env in s.envs:
        for i in order:
            v = env.registers[i]
            if kind_of(v) == INT:
                parts.append(struct.pack("<Bh", 0, v))
            else:
                parts.append(struct.pack(f"<BB{len(v)}h", 1, len(v), *v))
    return b"".join(parts)


def canonical_key(s: SearchState) -> bytes:
    return hashlib.blake2b(canonical_bytes(s), digest_size=16).digest()


def verify(program: Program, io: Sequence[IOExample], max_registers: int = MAX_REGISTERS) -> bool:
    """True iff ``program`` maps every example input to its output."""
    try:
        return all(run_program(program, inp, max_registers) == out for inp, out in io)
    except (ExecError, ValueError):
        return False
