"""Exhaustive program enumeration, used as the solvability oracle for search tests."""

from __future__ import annotations

import itertools

from treesynth.deepcoder import OPERATORS, ExecError, Program, Statement, run_program


def all_programs(num_inputs: int, ops, max_registers: int, max_len: int):
    """Every statement sequence up to ``max_len`` with in-range indices.

    Outputs go to the next free register; once the file is full, to any
    non-input register. Type errors are left for the interpreter to reject.
    """

    def extend(prefix, n_regs):
        yield prefix
        if len(prefix) == max_len:
            return
        outs = [n_regs] if n_regs < max_registers else range(num_inputs, max_registers)
        for op in ops:
            arity = OPERATORS[op].arity
            pairs = (
                [(a, a) for a in range(n_regs)]
                if arity == 1
                else itertools.product(range(n_regs), repeat=2)
            )
            for a1, a2 in pairs:
                for out in outs:
                    yield from extend(prefix + (Statement(op, a1, a2, out),), min(n_regs + 1, max_registers))

    for prog in extend((), num_inputs):
        if prog:
            yield Program(prog, num_inputs)


def solutions(io, ops, max_registers: int, max_len: int):
    n = len(io[0][0])
    for p in all_programs(n, ops, max_registers, max_len):
        try:
            if all(run_program(p, inp, max_registers) == out for inp, out in io):
                yield p
        except ExecError:
            pass


def solvable(io, ops, max_registers: int, max_len: int) -> bool:
    return next(solutions(io, ops, max_registers, max_len), None) is not None
