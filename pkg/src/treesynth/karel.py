"""Karel grid world: interpreter, token grammar, search state and featurizer.

Vocabulary (38 tokens, ids are stable)::

    0-4    move turnLeft turnRight putMarker pickMarker
    5-9    frontIsClear leftIsClear rightIsClear markersPresent noMarkersPresent
    10-14  the same five conditions negated (not_frontIsClear, ...)
    15-19  if ifelse else while repeat
    20-28  R=2 .. R=10 (repeat counts)
    29-36  i( i) e( e) w( w) r( r)   block brackets; both ifelse branches use e( e)
    37     <end>

Grammar (blocks hold at least one statement; bodies nest at most 5 deep, so a
token's nesting level is one of 0..5)::

    prog := stmt+ [<end>]
    stmt := action
          | if COND i( stmt+ i)
          | ifelse COND e( stmt+ e) else e( stmt+ e)
          | while COND w( stmt+ w)
          | repeat COUNT r( stmt+ r)

Grid text format: a header ``grid <width> <height> <markers-under-hero>``
followed by ``height`` rows of ``width`` characters: ``#`` wall, ``.`` empty,
``1``-``9`` marker count, ``A`` ten markers, ``^ > v <`` the hero facing
north, east, south, west. Row 0 is the top (north) row. A spec file is a
``karel-spec 1`` line followed by input/output grid pairs; the last pair is
the held-out one.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import InvalidStep

MAX_SIZE = 18
MAX_MARKERS = 10
MAX_NESTING = 5
STEP_LIMIT = 200

ACTIONS = ("move", "turnLeft", "turnRight", "putMarker", "pickMarker")
BASE_CONDITIONS = ("frontIsClear", "leftIsClear", "rightIsClear", "markersPresent", "noMarkersPresent")
CONDITIONS = BASE_CONDITIONS + tuple(f"not_{c}" for c in BASE_CONDITIONS)
KEYWORDS = ("if", "ifelse", "else", "while", "repeat")
COUNTS = tuple(f"R={n}" for n in range(2, 11))
BRACKETS = ("i(", "i)", "e(", "e)", "w(", "w)", "r(", "r)")
END = "<end>"
VOCAB: tuple[str, ...] = ACTIONS + CONDITIONS + KEYWORDS + COUNTS + BRACKETS + (END,)
TOKEN_ID = {t: i for i, t in enumerate(VOCAB)}
NUM_TOKENS = len(VOCAB)
NUM_NESTING = MAX_NESTING + 1
VERSION = f"karel-v1-tok{NUM_TOKENS}"

ACTION_IDS = frozenset(TOKEN_ID[a] for a in ACTIONS)
COND_IDS = tuple(TOKEN_ID[c] for c in CONDITIONS)
COUNT_IDS = tuple(TOKEN_ID[c] for c in COUNTS)
OPENERS = {"if": "i(", "ifelse": "e(", "while": "w(", "repeat": "r("}
CLOSERS = {"if": "i)", "ifelse": "e)", "while": "w)", "repeat": "r)"}

N, E, S, W = range(4)
DX = (0, 1, 0, -1)
DY = (-1, 0, 1, 0)
HERO_CHARS = "^>v<"


class KarelCrash(InvalidStep):
    pass


class GrammarError(ValueError):
    pass


# -- grids -------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    width: int
    height: int
    walls: bytes
    markers: bytes
    x: int
    y: int
    facing: int

    def __post_init__(self):
        if not (1 <= self.width <= MAX_SIZE and 1 <= self.height <= MAX_SIZE):
            raise ValueError(f"grid size {self.width}x{self.height} outside 1..{MAX_SIZE}")
        n = self.width * self.height
        if len(self.walls) != n or len(self.markers) != n:
            raise ValueError("wall/marker layers do not match the grid size")
        if max(self.markers, default=0) > MAX_MARKERS:
            raise ValueError("marker count above maximum")
        if not (0 <= self.x < self.width and 0 <= self.y < self.height) or self.facing not in range(4):
            raise ValueError("hero outside the grid")
        if self.walls[self.y * self.width + self.x]:
            raise ValueError("hero stands on a wall")

    @classmethod
    def empty(cls, width: int, height: int, x: int = 0, y: int = 0, facing: int = E) -> Grid:
        return cls(width, height, bytes(width * height), bytes(width * height), x, y, facing)

    def with_walls(self, cells: Iterable[tuple[int, int]]) -> Grid:
        w = bytearray(self.walls)
        for cx, cy in cells:
            w[cy * self.width + cx] = 1
        return Grid(self.width, self.height, bytes(w), self.markers, self.x, self.y, self.facing)

    def with_markers(self, cells: dict[tuple[int, int], int]) -> Grid:
        m = bytearray(self.markers)
        for (cx, cy), n in cells.items():
            m[cy * self.width + cx] = n
        return Grid(self.width, self.height, self.walls, bytes(m), self.x, self.y, self.facing)

    def marker_at(self, x: int, y: int) -> int:
        return self.markers[y * self.width + x]

    def to_bytes(self) -> bytes:
        return (
            struct.pack("<BBBBB", self.width, self.height, self.x, self.y, self.facing)
            + self.walls
            + self.markers
        )

    def to_text(self) -> str:
        rows = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                i = y * self.width + x
                if (x, y) == (self.x, self.y):
                    row.append(HERO_CHARS[self.facing])
                elif self.walls[i]:
                    row.append("#")
                else:
                    m = self.markers[i]
                    row.append("." if m == 0 else ("A" if m == 10 else str(m)))
            rows.append("".join(row))
        return f"grid {self.width} {self.height} {self.marker_at(self.x, self.y)}\n" + "\n".join(rows)

    @classmethod
    def from_text(cls, text: str) -> Grid:
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        grid, rest = _parse_grid(lines, 0)
        if rest != len(lines):
            raise ValueError("trailing lines after grid")
        return grid


def _parse_grid(lines: list[str], i: int) -> tuple[Grid, int]:
    head = lines[i].split()
    if len(head) != 4 or head[0] != "grid":
        raise ValueError(f"bad grid header {lines[i]!r}")
    w, h, under = int(head[1]), int(head[2]), int(head[3])
    rows = lines[i + 1 : i + 1 + h]
    if len(rows) != h or any(len(r.strip()) != w for r in rows):
        raise ValueError("grid rows do not match the header size")
    walls = bytearray(w * h)
    markers = bytearray(w * h)
    hero = None
    for y, row in enumerate(rows):
        for x, ch in enumerate(row.strip()):
            k = y * w + x
            if ch == "#":
                walls[k] = 1
            elif ch in HERO_CHARS:
                if hero is not None:
                    raise ValueError("more than one hero")
                hero = (x, y, HERO_CHARS.index(ch))
                markers[k] = under
            elif ch == "A":
                markers[k] = 10
            elif ch.isdigit():
                markers[k] = int(ch)
            elif ch != ".":
                raise ValueError(f"unknown grid character {ch!r}")
    if hero is None:
        raise ValueError("grid has no hero")
    return Grid(w, h, bytes(walls), bytes(markers), *hero), i + 1 + h


# -- programs ----------------------------------------------------------------


@dataclass(frozen=True)
class KarelProgram:
    tokens: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def to_text(self) -> str:
        return " ".join(VOCAB[t] for t in self.tokens)

    @classmethod
    def from_text(cls, text: str) -> KarelProgram:
        try:
            return cls(tuple(TOKEN_ID[t] for t in text.split()))
        except KeyError as e:
            raise GrammarError(f"unknown token {e.args[0]!r}") from None


class Frame(NamedTuple):
    kind: str
    part: str  # head, body, then, between, else_head, else


class ParseState(NamedTuple):
    """Incremental grammar state; ``expect`` is one of
    stmt, cond, count, open, else, else_open, done."""

    frames: tuple[Frame, ...] = ()
    expect: str = "stmt"
    has_stmt: bool = False

    @property
    def open_blocks(self) -> int:
        return sum(1 for f in self.frames if f.part in ("body", "then", "else"))

    @property
    def complete(self) -> bool:
        return not self.frames and (self.expect == "done" or (self.expect == "stmt" and self.has_stmt))


_STMT_STARTS = tuple(sorted([TOKEN_ID[a] for a in ACTIONS]))
_BLOCK_KEYWORDS = tuple(TOKEN_ID[k] for k in ("if", "ifelse", "while", "repeat"))


def valid_next(ps: ParseState) -> list[int]:
    e = ps.expect
    if e == "stmt":
        out = list(_STMT_STARTS)
        if ps.open_blocks < MAX_NESTING:
            out += _BLOCK_KEYWORDS
        if ps.has_stmt:
            if ps.frames:
                out.append(TOKEN_ID[CLOSERS[ps.frames[-1].kind]])
            else:
                out.append(TOKEN_ID[END])
        return sorted(out)
    if e == "cond":
        return list(COND_IDS)
    if e == "count":
        return list(COUNT_IDS)
    if e in ("open", "else_open"):
        return [TOKEN_ID[OPENERS[ps.frames[-1].kind]]]
    if e == "else":
        return [TOKEN_ID["else"]]
    return []


def advance(ps: ParseState, token: int) -> ParseState:
    if token not in valid_next(ps):
        raise GrammarError(f"token {VOCAB[token] if 0 <= token < NUM_TOKENS else token!r} not allowed here")
    t = VOCAB[token]
    frames = ps.frames
    if ps.expect == "stmt":
        if token in ACTION_IDS:
            return ParseState(frames, "stmt", True)
        if t == END:
            return ParseState(frames, "done", True)
        if t in OPENERS:
            return ParseState(frames + (Frame(t, "head"),), "count" if t == "repeat" else "cond", False)
        top = frames[-1]
        if top.kind == "ifelse" and top.part == "then":
            return ParseState(frames[:-1] + (Frame("ifelse", "between"),), "else", False)
        return ParseState(frames[:-1], "stmt", True)
    if ps.expect in ("cond", "count"):
        return ParseState(frames, "open", False)
    if ps.expect == "open":
        kind = frames[-1].kind
        return ParseState(frames[:-1] + (Frame(kind, "then" if kind == "ifelse" else "body"),), "stmt", False)
    if ps.expect == "else":
        return ParseState(frames[:-1] + (Frame("ifelse", "else_head"),), "else_open", False)
    if ps.expect == "else_open":
        return ParseState(frames[:-1] + (Frame("ifelse", "else"),), "stmt", False)
    raise GrammarError("program already ended")


def parse_prefix(tokens: Sequence[int]) -> ParseState:
    ps = ParseState()
    for t in tokens:
        ps = advance(ps, t)
    return ps


def valid_next_tokens(prefix: Sequence[int]) -> list[int]:
    """Token ids the grammar admits after ``prefix`` (raises on an invalid prefix)."""
    return valid_next(parse_prefix(prefix))


def nesting_levels(tokens: Sequence[int]) -> list[int]:
    """Number of open blocks in effect at each token, clipped to 0..5."""
    ps = ParseState()
    out = []
    for t in tokens:
        out.append(min(ps.open_blocks, MAX_NESTING))
        ps = advance(ps, t)
    return out


# Recursive-descent parser producing an AST; kept separate from the
# incremental grammar so the two can be checked against each other.


def parse(tokens: Sequence[int]) -> list[tuple]:
    toks = [VOCAB[t] for t in tokens]
    if toks and toks[-1] == END:
        toks = toks[:-1]
    body, i = _parse_block(toks, 0, None, 0)
    if i != len(toks):
        raise GrammarError(f"unexpected token {toks[i]!r} at {i}")
    return body


def _parse_block(toks: list[str], i: int, closer: str | None, depth: int) -> tuple[list[tuple], int]:
    stmts = []
    while i < len(toks) and toks[i] != closer:
        st, i = _parse_stmt(toks, i, depth)
        stmts.append(st)
    if not stmts:
        raise GrammarError("empty block")
    if closer is not None:
        if i >= len(toks):
            raise GrammarError(f"missing {closer!r}")
        i += 1
    return stmts, i


def _expect(toks: list[str], i: int, want: str) -> int:
    if i >= len(toks) or toks[i] != want:
        raise GrammarError(f"expected {want!r} at {i}")
    return i + 1


def _parse_stmt(toks: list[str], i: int, depth: int) -> tuple[tuple, int]:
    t = toks[i]
    if t in ACTIONS:
        return ("action", t), i + 1
    if t not in OPENERS:
        raise GrammarError(f"unexpected token {t!r} at {i}")
    if depth >= MAX_NESTING:
        raise GrammarError("nesting too deep")
    if i + 1 >= len(toks):
        raise GrammarError("truncated statement")
    arg = toks[i + 1]
    if t == "repeat":
        if arg not in COUNTS:
            raise GrammarError(f"expected repeat count at {i + 1}")
        arg = int(arg[2:])
    elif arg not in CONDITIONS:
        raise GrammarError(f"expected condition at {i + 1}")
    j = _expect(toks, i + 2, OPENERS[t])
    body, j = _parse_block(toks, j, CLOSERS[t], depth + 1)
    if t != "ifelse":
        return (t, arg, body), j
    j = _expect(toks, j, "else")
    j = _expect(toks, j, "e(")
    other, j = _parse_block(toks, j, "e)", depth + 1)
    return ("ifelse", arg, body, other), j


# -- interpreter -------------------------------------------------------------


@dataclass(frozen=True)
class RunOutcome:
    kind: str  # "ok", "crash", "step_limit"
    grid: Grid | None = None
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.kind == "ok"


class _StepLimit(Exception):
    pass


class _Crash(Exception):
    pass


class _World:
    def __init__(self, g: Grid, actions_used: int = 0, iters_used: int = 0, step_limit: int = STEP_LIMIT):
        self.w, self.h = g.width, g.height
        self.walls = g.walls
        self.markers = bytearray(g.markers)
        self.x, self.y, self.d = g.x, g.y, g.facing
        self.actions = actions_used
        self.iters = iters_used
        self.limit = step_limit

    def freeze(self) -> Grid:
        return Grid(self.w, self.h, self.walls, bytes(self.markers), self.x, self.y, self.d)

    def _clear(self, d: int) -> bool:
        nx, ny = self.x + DX[d], self.y + DY[d]
        return 0 <= nx < self.w and 0 <= ny < self.h and not self.walls[ny * self.w + nx]

    def cond(self, c: str) -> bool:
        neg = c.startswith("not_")
        base = c[4:] if neg else c
        if base == "frontIsClear":
            v = self._clear(self.d)
        elif base == "leftIsClear":
            v = self._clear((self.d + 3) % 4)
        elif base == "rightIsClear":
            v = self._clear((self.d + 1) % 4)
        elif base == "markersPresent":
            v = self.markers[self.y * self.w + self.x] > 0
        else:
            v = self.markers[self.y * self.w + self.x] == 0
        return v != neg

    def act(self, a: str) -> None:
        self.actions += 1
        if self.actions > self.limit:
            raise _StepLimit()
        k = self.y * self.w + self.x
        if a == "move":
            if not self._clear(self.d):
                raise _Crash("move into wall or boundary")
            self.x += DX[self.d]
            self.y += DY[self.d]
        elif a == "turnLeft":
            self.d = (self.d + 3) % 4
        elif a == "turnRight":
            self.d = (self.d + 1) % 4
        elif a == "putMarker":
            if self.markers[k] >= MAX_MARKERS:
                raise _Crash("too many markers")
            self.markers[k] += 1
        else:
            if self.markers[k] == 0:
                raise _Crash("no marker to pick")
            self.markers[k] -= 1

    def run(self, stmts: list[tuple]) -> None:
        for st in stmts:
            kind = st[0]
            if kind == "action":
                self.act(st[1])
            elif kind == "if":
                if self.cond(st[1]):
                    self.run(st[2])
            elif kind == "ifelse":
                self.run(st[2] if self.cond(st[1]) else st[3])
            elif kind == "repeat":
                for _ in range(st[1]):
                    self.run(st[2])
            else:
                while self.cond(st[1]):
                    # bounds action-free loops, which the action count cannot see
                    self.iters += 1
                    if self.iters > self.limit:
                        raise _StepLimit()
                    self.run(st[2])


def _execute(ast: list[tuple], world: _World) -> RunOutcome:
    try:
        world.run(ast)
    except _Crash as e:
        return RunOutcome("crash", None, str(e))
    except _StepLimit:
        return RunOutcome("step_limit", None, "step limit reached")
    return RunOutcome("ok", world.freeze())


def run_karel(p: KarelProgram, g: Grid, step_limit: int = STEP_LIMIT) -> RunOutcome:
    """Run a complete program; crashes and the step limit are outcomes, not exceptions."""
    return _execute(parse(p.tokens), _World(g, step_limit=step_limit))


def karel_state_key(grids: Sequence[Grid]) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(b"KGS\x01")
    for g in grids:
        h.update(g.to_bytes())
    return h.digest()


# -- specs and search state --------------------------------------------------


@dataclass(frozen=True)
class KarelSpec:
    pairs: tuple[tuple[Grid, Grid], ...]
    num_visible: int = 5

    @property
    def visible(self) -> tuple[tuple[Grid, Grid], ...]:
        return self.pairs[: self.num_visible]

    @property
    def held_out(self) -> tuple[tuple[Grid, Grid], ...]:
        return self.pairs[self.num_visible :]

    def to_text(self) -> str:
        parts = ["karel-spec 1"]
        for g_in, g_out in self.pairs:
            parts += [g_in.to_text(), g_out.to_text()]
        return "\n".join(parts) + "\n"

    @classmethod
    def from_text(cls, text: str, num_visible: int = 5) -> KarelSpec:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].split() != ["karel-spec", "1"]:
            raise ValueError("not a karel spec file")
        grids = []
        i = 1
        while i < len(lines):
            g, i = _parse_grid(lines, i)
            grids.append(g)
        if len(grids) % 2:
            raise ValueError("spec has an unpaired grid")
        pairs = tuple(zip(grids[::2], grids[1::2]))
        return cls(pairs, min(num_visible, len(pairs)))


def verify(program: KarelProgram, pairs: Sequence[tuple[Grid, Grid]], step_limit: int = STEP_LIMIT) -> bool:
    try:
        ast = parse(program.tokens)
    except GrammarError:
        return False
    for g_in, g_out in pairs:
        r = _execute(ast, _World(g_in, step_limit=step_limit))
        if not r.ok or r.grid != g_out:
            return False
    return True


@dataclass(frozen=True)
class KarelContext:
    pairs: tuple[tuple[Grid, Grid], ...]
    step_limit: int = STEP_LIMIT
    version: str = VERSION

    @property
    def targets(self) -> tuple[Grid, ...]:
        return tuple(o for _, o in self.pairs)


@dataclass(frozen=True, eq=False)
class KarelState:
    """Token prefix plus the grids after every finished top-level statement.

    Statements inside an unfinished top-level construct are not executed
    yet; they run when the construct closes.
    """

    ctx: KarelContext
    path: tuple[int, ...]
    parse_state: ParseState
    grids: tuple[Grid, ...]
    counters: tuple[tuple[int, int], ...]
    pending: int  # index where the unfinished top-level statement starts
    _key: list = field(default_factory=list, repr=False)

    dsl = "karel"

    @property
    def depth(self) -> int:
        return len(self.path)

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.path

    def legal_actions(self) -> np.ndarray:
        return np.array(valid_next(self.parse_state), dtype=np.int64)

    def child(self, token: int) -> KarelState:
        try:
            ps = advance(self.parse_state, token)
        except GrammarError as e:
            raise KarelCrash(str(e)) from None
        path = (*self.path, token)
        if ps.frames or ps.expect != "stmt":
            return KarelState(self.ctx, path, ps, self.grids, self.counters, self.pending)
        ast = parse(path[self.pending :])
        grids, counters = [], []
        for g, (acts, iters) in zip(self.grids, self.counters):
            world = _World(g, acts, iters, self.ctx.step_limit)
            r = _execute(ast, world)
            if not r.ok:
                raise KarelCrash(r.reason)
            grids.append(r.grid)
            counters.append((world.actions, world.iters))
        return KarelState(self.ctx, path, ps, tuple(grids), tuple(counters), len(path))

    def is_solved(self) -> bool:
        return self.parse_state.complete and self.grids == self.ctx.targets

    def state_key(self) -> bytes:
        if not self._key:
            pend = struct.pack(f"<{len(self.path) - self.pending}B", *self.path[self.pending :])
            self._key.append(hashlib.blake2b(karel_state_key(self.grids) + pend, digest_size=16).digest())
        return self._key[0]

    def program(self) -> KarelProgram:
        return KarelProgram(self.path)

    def verify(self, program: KarelProgram) -> bool:
        return verify(program, self.ctx.pairs, self.ctx.step_limit)


def initial_state(pairs: Sequence[tuple[Grid, Grid]], step_limit: int = STEP_LIMIT) -> KarelState:
    pairs = tuple(pairs)
    ctx = KarelContext(pairs, step_limit)
    return KarelState(ctx, (), ParseState(), tuple(g for g, _ in pairs), ((0, 0),) * len(pairs), 0)


def expand_to_pairs(program: KarelProgram, pairs: Sequence[tuple[Grid, Grid]]) -> list[tuple[KarelState, int]]:
    s = initial_state(pairs)
    out = []
    for t in program.tokens:
        if VOCAB[t] == END:
            break
        out.append((s, t))
        s = s.child(t)
    return out


def karel_search_adapter(spec: KarelSpec, policy, strategy: str, budget, **kw):
    """Search on the visible pairs; returns ``(result, held_out_ok)``."""
    from .search import run_strategy

    root = initial_state(spec.visible)
    result = run_strategy(strategy, root, policy, budget, **kw)
    held = bool(result.found and verify(result.program, spec.held_out))
    return result, held


# -- featurizer --------------------------------------------------------------

_EXPECTS = ("stmt", "cond", "count", "open", "else", "else_open", "done")


class KarelFeaturizer:
    """Grid features of the current and target grids (cropped/padded to
    ``grid_size``), their differences, the last token and the nesting level,
    mean-pooled over examples; plus an optional history block (token counts,
    nesting-level histogram, last-k token one-hots)."""

    def __init__(self, cfg):
        self.cfg = cfg
        G = cfg.grid_size
        names, scale = [], []

        def add(prefix, n, s=1.0):
            for i in range(n):
                names.append(f"{prefix}_{i}")
                scale.append(s)

        for which in ("cur", "tgt"):
            add(f"{which}.wall", G * G)
            add(f"{which}.markers", G * G, 1 / MAX_MARKERS)
            add(f"{which}.hero", G * G)
            add(f"{which}.facing", 4)
        add("diff.markers", G * G, 1 / MAX_MARKERS)
        add("diff.hero", 4, 1 / MAX_SIZE)  # dx, dy, same facing, all grids equal
        add("last_token", NUM_TOKENS + 1)
        add("nesting", NUM_NESTING)
        add("expect", len(_EXPECTS))
        self.base_dim = len(names)
        if cfg.history:
            add("tok_count", NUM_TOKENS, 1 / 20)
            add("nest_hist", NUM_NESTING, 1 / 20)
            for j in range(1, cfg.k + 1):
                add(f"last_{j}_tok", NUM_TOKENS)
        self.names = names
        self.scale = np.array(scale)
        self.scale[names.index("diff.hero_2")] = 1
        self.scale[names.index("diff.hero_3")] = 1
        self.dim = len(names)
        self.n_actions = NUM_TOKENS
        self.version = VERSION

    def _grid(self, g: Grid, out: np.ndarray) -> None:
        G = self.cfg.grid_size
        h, w = min(g.height, G), min(g.width, G)
        walls = np.frombuffer(g.walls, np.uint8).reshape(g.height, g.width)
        marks = np.frombuffer(g.markers, np.uint8).reshape(g.height, g.width)
        gg = G * G
        out[:gg].reshape(G, G)[:h, :w] = walls[:h, :w]
        out[gg : 2 * gg].reshape(G, G)[:h, :w] = marks[:h, :w]
        if g.x < G and g.y < G:
            out[2 * gg + g.y * G + g.x] = 1
        out[3 * gg + g.facing] = 1

    def __call__(self, s: KarelState) -> np.ndarray:
        G = self.cfg.grid_size
        gg = G * G
        block = 3 * gg + 4
        x = np.zeros(self.dim)
        tmp = np.zeros(2 * block)
        for cur, tgt in zip(s.grids, s.ctx.targets):
            tmp[:] = 0
            self._grid(cur, tmp[:block])
            self._grid(tgt, tmp[block:])
            x[: 2 * block] += tmp
            x[2 * block : 2 * block + gg] += tmp[gg : 2 * gg] - tmp[block + gg : block + 2 * gg]
            o = 2 * block + gg
            x[o] += tgt.x - cur.x
            x[o + 1] += tgt.y - cur.y
            x[o + 2] += tgt.facing == cur.facing
            x[o + 3] += tgt == cur
        x[: 2 * block + gg + 4] /= len(s.grids)
        o = 2 * block + gg + 4
        last = s.path[-1] if s.path else NUM_TOKENS
        x[o + last] = 1
        o += NUM_TOKENS + 1
        x[o + min(s.parse_state.open_blocks, MAX_NESTING)] = 1
        o += NUM_NESTING
        x[o + _EXPECTS.index(s.parse_state.expect)] = 1
        if self.cfg.history and s.path:
            h = x[self.base_dim :]
            np.add.at(h, np.array(s.path), 1)
            levels = nesting_levels(s.path)
            np.add.at(h, NUM_TOKENS + np.array(levels), 1)
            off = NUM_TOKENS + NUM_NESTING
            for j, t in enumerate(reversed(s.path[-self.cfg.k :])):
                h[off + j * NUM_TOKENS + t] = 1
        return x


# -- generation --------------------------------------------------------------


@dataclass(frozen=True)
class KarelGenConfig:
    num_samples: int = 100
    max_tokens: int = 20
    max_depth: int = 2
    max_top_level: int = 4
    min_size: int = 4
    max_size: int = 8
    num_pairs: int = 6
    wall_prob: float = 0.1
    marker_prob: float = 0.15
    seed: int = 0


def random_grid(rng: np.random.Generator, cfg: KarelGenConfig) -> Grid:
    w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
    h = int(rng.integers(cfg.min_size, cfg.max_size + 1))
    walls = (rng.random(w * h) < cfg.wall_prob).astype(np.uint8)
    free = np.flatnonzero(walls == 0)
    if len(free) == 0:
        walls[0] = 0
        free = np.array([0])
    markers = np.where(rng.random(w * h) < cfg.marker_prob, rng.integers(1, 4, w * h), 0).astype(np.uint8)
    markers[walls == 1] = 0
    k = int(free[rng.integers(len(free))])
    return Grid(w, h, walls.tobytes(), markers.tobytes(), k % w, k // w, int(rng.integers(4)))


def _random_stmt(rng: np.random.Generator, depth: int, cfg: KarelGenConfig) -> list[str]:
    r = rng.random()
    if depth >= cfg.max_depth or r < 0.55:
        return [ACTIONS[int(rng.integers(len(ACTIONS)))]]

    def body():
        toks: list[str] = []
        for _ in range(int(rng.integers(1, 3))):
            toks += _random_stmt(rng, depth + 1, cfg)
        return toks

    cond = CONDITIONS[int(rng.integers(len(CONDITIONS)))]
    if r < 0.72:
        return ["repeat", COUNTS[int(rng.integers(len(COUNTS)))], "r(", *body(), "r)"]
    if r < 0.84:
        return ["if", cond, "i(", *body(), "i)"]
    if r < 0.92:
        return ["while", cond, "w(", *body(), "w)"]
    return ["ifelse", cond, "e(", *body(), "e)", "else", "e(", *body(), "e)"]


def random_program(rng: np.random.Generator, cfg: KarelGenConfig) -> KarelProgram:
    toks: list[str] = []
    for _ in range(int(rng.integers(1, cfg.max_top_level + 1))):
        toks += _random_stmt(rng, 0, cfg)
    return KarelProgram(tuple(TOKEN_ID[t] for t in toks))


def generate_sample(rng: np.random.Generator, cfg: KarelGenConfig, attempts: int = 50):
    """One (program, pairs) sample, or ``None`` if nothing valid turned up."""
    for _ in range(attempts):
        prog = random_program(rng, cfg)
        if len(prog) > cfg.max_tokens:
            continue
        ast = parse(prog.tokens)
        pairs = []
        for _ in range(cfg.num_pairs * 3):
            g = random_grid(rng, cfg)
            r = _execute(ast, _World(g))
            if r.ok:
                pairs.append((g, r.grid))
            if len(pairs) == cfg.num_pairs:
                break
        if len(pairs) < cfg.num_pairs or all(a == b for a, b in pairs):
            continue
        return prog, tuple(pairs)
    return None
