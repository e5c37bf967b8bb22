"""Independent evaluator for DeepCoder program text.

Written against the documented text format and operator semantics only; it
shares no code with ``treesynth.deepcoder``. Returns the output value or the
name of the error cause.
"""

from __future__ import annotations

import re

LO, HI, MAXLEN = -256, 256, 20
LINE = re.compile(r"r(\d+) = ([A-Z0-9]+)(?:,(\S+))? r(\d+)(?: r(\d+))?$")


class Fail(Exception):
    def __init__(self, cause):
        self.cause = cause


def trunc_div(x, d):
    q = abs(x) // d
    return -q if x < 0 else q


def unary(lam, x):
    if lam == "+1":
        return x + 1
    if lam == "-1":
        return x - 1
    if lam.startswith("*") and lam[1:].lstrip("-").isdigit():
        return x * int(lam[1:])
    if lam.startswith("/"):
        return trunc_div(x, int(lam[1:]))
    if lam == "**2":
        return x * x
    raise AssertionError(lam)


def pred(lam, x):
    return {">0": x > 0, "<0": x < 0, "even": x % 2 == 0, "odd": x % 2 != 0}[lam]


def binary(lam, x, y):
    if lam == "+":
        return x + y
    if lam == "-":
        return x - y
    if lam == "*":
        return x * y
    if lam == "min":
        return x if x <= y else y
    return x if x >= y else y


def is_list(v):
    return isinstance(v, tuple)


def need(v, want_list):
    if is_list(v) != want_list:
        raise Fail("TypeMismatch")
    return v


def apply(name, lam, a, b):
    if name in ("HEAD", "LAST", "MINIMUM", "MAXIMUM"):
        xs = need(a, True)
        if len(xs) == 0:
            raise Fail("EmptyListAccess")
        if name == "HEAD":
            return xs[0]
        if name == "LAST":
            return xs[len(xs) - 1]
        best = xs[0]
        for x in xs:
            if (x < best) if name == "MINIMUM" else (x > best):
                best = x
        return best
    if name in ("TAKE", "DROP", "ACCESS"):
        n = need(a, False)
        xs = need(b, True)
        if name == "TAKE":
            return tuple(xs[i] for i in range(len(xs)) if i < n)
        if name == "DROP":
            return tuple(xs[i] for i in range(len(xs)) if i >= n)
        if n < 0 or n >= len(xs):
            raise Fail("EmptyListAccess")
        return xs[n]
    if name == "ZIPWITH":
        xs, ys = need(a, True), need(b, True)
        return tuple(binary(lam, xs[i], ys[i]) for i in range(min(len(xs), len(ys))))
    xs = need(a, True)
    if name == "REVERSE":
        return tuple(xs[len(xs) - 1 - i] for i in range(len(xs)))
    if name == "SORT":
        out = list(xs)
        for i in range(1, len(out)):  # insertion sort
            j = i
            while j > 0 and out[j - 1] > out[j]:
                out[j - 1], out[j] = out[j], out[j - 1]
                j -= 1
        return tuple(out)
    if name == "SUM":
        total = 0
        for x in xs:
            total += x
        return total
    if name == "MAP":
        return tuple(unary(lam, x) for x in xs)
    if name == "FILTER":
        return tuple(x for x in xs if pred(lam, x))
    if name == "COUNT":
        return len([x for x in xs if pred(lam, x)])
    if name == "SCANL1":
        out = []
        for x in xs:
            out.append(x if not out else binary(lam, out[-1], x))
        return tuple(out)
    raise AssertionError(name)


def bounded(v):
    for x in v if is_list(v) else (v,):
        if x < LO or x > HI:
            raise Fail("ValueOutOfBounds")
    return v


BINARY_OPS = {"TAKE", "DROP", "ACCESS", "ZIPWITH"}


def evaluate(text: str, inputs, max_registers: int = 8):
    """Return ``("ok", value)`` or ``("error", cause, statement_index)``."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        return ("error", "EmptyProgram", None)
    regs = list(inputs)
    last = None
    for i, line in enumerate(lines):
        m = LINE.match(line)
        assert m, line
        out, name, lam, a1, a2 = m.groups()
        out, a1 = int(out), int(a1)
        a2 = a1 if a2 is None else int(a2)
        try:
            if a1 >= len(regs) or a2 >= len(regs):
                raise Fail("IndexOutOfRange")
            if out > len(regs) or out >= max_registers:
                raise Fail("NoFreeRegister")
            b = regs[a2] if name in BINARY_OPS else None
            v = bounded(apply(name, lam, regs[a1], b))
        except Fail as f:
            return ("error", f.cause, i)
        if out == len(regs):
            regs.append(v)
        else:
            regs[out] = v
        last = out
    return ("ok", regs[last])
