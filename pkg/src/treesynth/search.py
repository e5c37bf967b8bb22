"""Search strategies over any DSL state that follows the node protocol.

A node exposes ``depth``, ``path`` (action ids from the root),
``legal_actions()``, ``child(action)`` (raising :class:`InvalidStep`),
``is_solved()``, ``state_key()``, ``program()`` and ``verify(program)``.

The restart MCTS never backtracks: every rollout starts at the root and
greedily follows ``U(s, a) = P(s, a) / (N(s, a) + 1)`` until it solves the
spec, hits an invalid state, or reaches the length cap. Only the visit table
survives between rollouts. In ``PER_TREE_PATH`` mode ``N`` is keyed by the
action path; in ``SHARED_BY_STATE`` mode by the canonical execution state, so
transpositions share their counts.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .errors import InvalidStep
from .policy import Policy


class Node(Protocol):
    depth: int

    @property
    def path(self) -> tuple[int, ...]: ...
    def legal_actions(self) -> np.ndarray: ...
    def child(self, action: int) -> Node: ...
    def is_solved(self) -> bool: ...
    def state_key(self) -> bytes: ...
    def program(self) -> Any: ...
    def verify(self, program: Any) -> bool: ...


class VisitMode(enum.Enum):
    PER_TREE_PATH = "path"
    SHARED_BY_STATE = "shared"


class Outcome(enum.Enum):
    FOUND = "Found"
    EXHAUSTED = "Exhausted"
    TIMED_OUT = "TimedOut"


class DeadState(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchBudget:
    max_nodes: int | None = 10_000
    max_wall_ms: float | None = None
    max_program_len: int = 14

    def __post_init__(self):
        if self.max_nodes is None and self.max_wall_ms is None:
            raise ValueError("at least one of max_nodes / max_wall_ms must be finite")
        if (self.max_nodes is not None and self.max_nodes < 1) or (self.max_wall_ms is not None and self.max_wall_ms <= 0):
            raise ValueError("search budgets must be positive")
        if self.max_program_len < 1:
            raise ValueError("max_program_len must be >= 1")


@dataclass(frozen=True)
class BeamConfig:
    width: int = 2
    expansion: int = 2

    def __post_init__(self):
        if self.width < 1 or self.expansion < 1:
            raise ValueError("beam width and expansion must be >= 1")


@dataclass(frozen=True)
class CabConfig:
    width: int = 2
    expansion: int = 2

    def schedule(self):
        w, e = self.width, self.expansion
        while True:
            yield BeamConfig(w, e)
            w, e = 2 * w, e + 1


@dataclass
class SearchResult:
    outcome: Outcome
    program: Any = None
    nodes_expanded: int = 0
    rollouts: int = 0
    wall_ms: float = 0.0
    trace: list[dict] = field(default_factory=list)

    @property
    def found(self) -> bool:
        return self.outcome is Outcome.FOUND

    def record(self) -> dict:
        """Structured form used for CSV/JSON reports; wall time is kept separate."""
        text = None
        if self.program is not None:
            text = self.program.to_text()
        return {
            "outcome": self.outcome.value,
            "program": text,
            "program_len": None if self.program is None else len(self.program),
            "nodes": self.nodes_expanded,
            "rollouts": self.rollouts,
            "trace": self.trace,
        }


def score_u(p: float, n: int) -> float:
    return p / (n + 1)


class VisitTable:
    """N(s, a) counts, keyed by action path or by canonical state."""

    def __init__(self, mode: VisitMode = VisitMode.SHARED_BY_STATE):
        self.mode = mode
        self.counts: dict[Any, dict[int, int]] = {}

    def key(self, node) -> Any:
        return node.state_key() if self.mode is VisitMode.SHARED_BY_STATE else node.path

    def get(self, key, action: int) -> int:
        return self.counts.get(key, {}).get(action, 0)

    def total(self, key) -> int:
        return sum(self.counts.get(key, {}).values())

    def vector(self, key, legal: np.ndarray) -> np.ndarray:
        """Counts aligned with ``legal`` (which is sorted ascending)."""
        out = np.zeros(len(legal))
        seen = self.counts.get(key)
        if seen:
            acts = np.fromiter(seen.keys(), dtype=np.int64, count=len(seen))
            pos = np.searchsorted(legal, acts)
            ok = (pos < len(legal)) & (legal[np.minimum(pos, len(legal) - 1)] == acts)
            out[pos[ok]] = np.fromiter(seen.values(), dtype=float, count=len(seen))[ok]
        return out

    def visit(self, key, action: int) -> None:
        d = self.counts.setdefault(key, {})
        d[action] = d.get(action, 0) + 1


class _Clock:
    def __init__(self, budget: SearchBudget):
        self.budget = budget
        self.t0 = time.perf_counter()
        self.nodes = 0

    @property
    def ms(self) -> float:
        return (time.perf_counter() - self.t0) * 1000

    def exhausted(self) -> bool:
        b = self.budget
        if b.max_nodes is not None and self.nodes >= b.max_nodes:
            return True
        return b.max_wall_ms is not None and self.ms >= b.max_wall_ms


class _Expander:
    """Caches children and policy outputs by path for the life of one search."""

    def __init__(self, root, policy: Policy):
        self.policy = policy
        self.children: dict[tuple[int, ...], Any] = {}
        self.priors: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {}
        self.root = root

    def prior(self, node) -> tuple[np.ndarray, np.ndarray]:
        path = node.path
        hit = self.priors.get(path)
        if hit is None:
            legal = node.legal_actions()
            probs = np.asarray(self.policy.action_probs(node, legal), dtype=float)
            hit = self.priors[path] = (legal, probs)
        return hit

    def child(self, node, action: int):
        path = (*node.path, action)
        if path in self.children:
            c = self.children[path]
        else:
            try:
                c = node.child(action)
            except InvalidStep as e:
                c = e
            self.children[path] = c
        if isinstance(c, InvalidStep):
            raise c
        return c


def select_action(
    node, policy: Policy, visits: VisitTable, rng: np.random.Generator | None = None, expander=None
) -> int:
    """Argmax of U over the legal actions (lowest id on ties), charging N."""
    legal, probs = expander.prior(node) if expander else _prior(node, policy)
    if len(legal) == 0:
        raise DeadState("no legal action")
    key = visits.key(node)
    u = probs / (visits.vector(key, legal) + 1)
    if rng is None:
        i = int(np.argmax(u))
    else:
        best = np.flatnonzero(u == u.max())
        i = int(best[rng.integers(len(best))])
    a = int(legal[i])
    visits.visit(key, a)
    return a


def _prior(node, policy):
    legal = node.legal_actions()
    return legal, np.asarray(policy.action_probs(node, legal), dtype=float)


def mcts_search(
    root,
    policy: Policy,
    mode: VisitMode = VisitMode.SHARED_BY_STATE,
    budget: SearchBudget = SearchBudget(),
    *,
    seed: int | None = None,
    trace: bool = False,
    visits: VisitTable | None = None,
) -> SearchResult:
    """Restart MCTS; ``seed`` switches ties from lowest-id to seeded random."""
    if root.is_solved():
        raise ValueError("root state already matches every example; a program needs at least one statement")
    clock = _Clock(budget)
    visits = visits if visits is not None else VisitTable(mode)
    rng = None if seed is None else np.random.default_rng(seed)
    ex = _Expander(root, policy)
    rollouts = 0
    log: list[dict] = []
    while not clock.exhausted():
        rollouts += 1
        node = root
        end = "max_len"
        while node.depth < budget.max_program_len:
            if clock.exhausted():
                end = "budget"
                break
            try:
                a = select_action(node, policy, visits, rng, ex)
            except DeadState:
                end = "dead"
                break
            clock.nodes += 1
            try:
                node = ex.child(node, a)
            except InvalidStep:
                end = "invalid"
                break
            if node.is_solved():
                prog = node.program()
                if node.verify(prog):
                    if trace:
                        log.append({"rollout": rollouts, "path": list(node.path), "end": "solved"})
                    return SearchResult(Outcome.FOUND, prog, clock.nodes, rollouts, clock.ms, log)
                end = "unverified"
                break
        if trace:
            log.append({"rollout": rollouts, "path": [*node.path, a] if end == "invalid" else list(node.path), "end": end})
        if end == "dead" and node is root:
            # nothing below the root can ever be tried
            return SearchResult(Outcome.EXHAUSTED, None, clock.nodes, rollouts, clock.ms, log)
    return SearchResult(Outcome.TIMED_OUT, None, clock.nodes, rollouts, clock.ms, log)


def _top_e(probs: np.ndarray, legal: np.ndarray, e: int) -> list[tuple[int, float]]:
    # stable sort keeps ascending action id among equal probabilities
    order = np.argsort(-probs, kind="stable")[:e]
    return [(int(legal[i]), float(probs[i])) for i in order]


def beam_search(
    root,
    policy: Policy,
    cfg: BeamConfig = BeamConfig(),
    budget: SearchBudget = SearchBudget(),
    *,
    _clock: _Clock | None = None,
    _expander: _Expander | None = None,
) -> SearchResult:
    """Depth-synchronous beam search scored by cumulative log-probability.

    ``trace`` gets one entry with ``complete=True`` when nothing was ever cut
    by width or expansion, i.e. the whole tree up to the length cap was seen.
    """
    if root.is_solved():
        raise ValueError("root state already matches every example; a program needs at least one statement")
    clock = _clock or _Clock(budget)
    ex = _expander or _Expander(root, policy)
    beams = [(0.0, root)]
    complete = True
    for _ in range(budget.max_program_len):
        cands: list[tuple[float, tuple[int, ...], Any]] = []
        for logp, node in beams:
            legal, probs = ex.prior(node)
            if len(legal) > cfg.expansion:
                complete = False
            for a, p in _top_e(probs, legal, cfg.expansion):
                if clock.exhausted():
                    return SearchResult(Outcome.TIMED_OUT, None, clock.nodes, 1, clock.ms)
                clock.nodes += 1
                try:
                    c = ex.child(node, a)
                except InvalidStep:
                    continue
                if c.is_solved():
                    prog = c.program()
                    if c.verify(prog):
                        return SearchResult(Outcome.FOUND, prog, clock.nodes, 1, clock.ms)
                    continue
                cands.append((logp + (math.log(p) if p > 0 else -math.inf), c.path, c))
        if not cands:
            break
        cands.sort(key=lambda t: (-t[0], t[1]))
        if len(cands) > cfg.width:
            complete = False
        beams = [(lp, c) for lp, _, c in cands[: cfg.width]]
    return SearchResult(Outcome.EXHAUSTED, None, clock.nodes, 1, clock.ms, [{"complete": complete}])


def cab_search(
    root, policy: Policy, cfg: CabConfig = CabConfig(), budget: SearchBudget = SearchBudget()
) -> SearchResult:
    """Repeated beam search; each failure doubles the width and adds one to the expansion."""
    clock = _Clock(budget)
    ex = _Expander(root, policy)
    log: list[dict] = []
    for beam in cfg.schedule():
        before = clock.nodes
        r = beam_search(root, policy, beam, budget, _clock=clock, _expander=ex)
        complete = bool(r.trace and r.trace[0].get("complete"))
        log.append(
            {"width": beam.width, "expansion": beam.expansion, "nodes": clock.nodes - before, "outcome": r.outcome.value}
        )
        if r.outcome is not Outcome.EXHAUSTED:
            return SearchResult(r.outcome, r.program, clock.nodes, len(log), clock.ms, log)
        if complete:
            break
        if clock.exhausted():
            return SearchResult(Outcome.TIMED_OUT, None, clock.nodes, len(log), clock.ms, log)
    return SearchResult(Outcome.EXHAUSTED, None, clock.nodes, len(log), clock.ms, log)


def verify(program, io_spec, dsl: str = "deepcoder") -> bool:
    """True iff ``program`` reproduces every output of ``io_spec``."""
    if dsl == "deepcoder":
        from .state import verify as dc_verify

        return dc_verify(program, io_spec)
    if dsl == "karel":
        from .karel import verify as karel_verify

        return karel_verify(program, io_spec)
    raise ValueError(f"unknown dsl {dsl!r}")


STRATEGIES = ("beam", "cab", "mcts", "mcts-shared")


def run_strategy(
    name: str,
    root,
    policy: Policy,
    budget: SearchBudget,
    beam: BeamConfig | None = None,
    cab: CabConfig | None = None,
    seed: int | None = None,
) -> SearchResult:
    if name == "beam":
        return beam_search(root, policy, beam or BeamConfig(), budget)
    if name == "cab":
        return cab_search(root, policy, cab or CabConfig(), budget)
    if name == "mcts":
        return mcts_search(root, policy, VisitMode.PER_TREE_PATH, budget, seed=seed)
    if name == "mcts-shared":
        return mcts_search(root, policy, VisitMode.SHARED_BY_STATE, budget, seed=seed)
    raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")
