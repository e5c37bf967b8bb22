from __future__ import annotations

import random

import numpy as np
import pytest

from treesynth.errors import InvalidStep
from treesynth.karel import (
    MAX_NESTING,
    NUM_TOKENS,
    TOKEN_ID,
    VOCAB,
    GrammarError,
    Grid,
    KarelGenConfig,
    KarelProgram,
    KarelSpec,
    expand_to_pairs,
    generate_sample,
    initial_state,
    karel_search_adapter,
    karel_state_key,
    nesting_levels,
    parse,
    parse_prefix,
    run_karel,
    valid_next_tokens,
    verify,
)
from treesynth.policy import UniformPolicy
from treesynth.search import SearchBudget

E, N, S, W = 1, 0, 2, 3


def prog(text: str) -> KarelProgram:
    return KarelProgram.from_text(text)


def test_vocabulary():
    assert NUM_TOKENS == 38
    assert len(set(VOCAB)) == 38
    assert VOCAB[0] == "move" and VOCAB[37] == "<end>"


def test_move_east():
    r = run_karel(prog("move"), Grid.empty(3, 3, 0, 0, E))
    assert r.ok and (r.grid.x, r.grid.y) == (1, 0)


def test_move_into_wall_crashes():
    g = Grid.empty(3, 1, 0, 0, E).with_walls([(1, 0)])
    assert run_karel(prog("move"), g).kind == "crash"
    assert run_karel(prog("turnLeft move"), Grid.empty(3, 3, 0, 0, E)).kind == "crash"  # north edge


def test_corridor_while_loop():
    g = Grid.empty(6, 1, 0, 0, E)
    r = run_karel(prog("while frontIsClear w( move w)"), g)
    assert r.ok and r.grid.x == 5
    # exactly 5 moves: a limit of 5 actions passes, 4 does not
    assert run_karel(prog("while frontIsClear w( move w)"), g, step_limit=5).ok
    assert run_karel(prog("while frontIsClear w( move w)"), g, step_limit=4).kind == "step_limit"


def test_repeat_markers():
    r = run_karel(prog("repeat R=3 r( putMarker r)"), Grid.empty(2, 2))
    assert r.ok and r.grid.marker_at(0, 0) == 3
    r = run_karel(prog("repeat R=4 r( putMarker move r)"), Grid.empty(5, 1))
    assert r.ok and [r.grid.marker_at(x, 0) for x in range(5)] == [1, 1, 1, 1, 0]


def test_marker_limits():
    assert run_karel(prog("pickMarker"), Grid.empty(2, 2)).kind == "crash"
    full = Grid.empty(2, 2).with_markers({(0, 0): 10})
    assert run_karel(prog("putMarker"), full).kind == "crash"


def test_conditionals():
    g = Grid.empty(3, 3, 1, 1, N).with_markers({(1, 1): 1})
    r = run_karel(prog("ifelse markersPresent e( pickMarker e) else e( putMarker e)"), g)
    assert r.ok and r.grid.marker_at(1, 1) == 0
    r = run_karel(prog("if not_markersPresent i( putMarker i) turnRight"), g)
    assert r.ok and r.grid.marker_at(1, 1) == 1 and r.grid.facing == E
    g2 = Grid.empty(3, 3, 0, 0, E)
    assert run_karel(prog("if leftIsClear i( turnLeft i)"), g2).grid.facing == E
    assert run_karel(prog("if rightIsClear i( turnRight i)"), g2).grid.facing == S


def test_action_free_while_hits_step_limit():
    r = run_karel(prog("while frontIsClear w( if markersPresent i( move i) w)"), Grid.empty(3, 1))
    assert r.kind == "step_limit"


def test_grid_text_round_trip():
    g = Grid.empty(4, 3, 2, 1, W).with_walls([(0, 0), (3, 2)]).with_markers({(1, 1): 2, (2, 1): 10, (3, 0): 1})
    text = g.to_text()
    assert text.splitlines()[0] == "grid 4 3 10"
    assert text.splitlines()[2] == ".2<."
    assert Grid.from_text(text) == g


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid.empty(19, 2)
    with pytest.raises(ValueError):
        Grid.empty(3, 3).with_walls([(0, 0)])
    with pytest.raises(ValueError):
        Grid.from_text("grid 2 1 0\n..")


def test_state_keys():
    a = Grid.empty(3, 3)
    b = a.with_markers({(2, 2): 1})
    assert karel_state_key([a]) == karel_state_key([Grid.empty(3, 3)])
    assert karel_state_key([a]) != karel_state_key([b])
    # the same grids reached by different token histories share a key
    root = initial_state([(a, a)])
    s1 = root.child(TOKEN_ID["turnLeft"]).child(TOKEN_ID["turnRight"])
    s2 = root.child(TOKEN_ID["turnRight"]).child(TOKEN_ID["turnLeft"])
    assert s1.path != s2.path and s1.state_key() == s2.state_key() == root.state_key()


def test_state_key_includes_unfinished_statement():
    a = Grid.empty(3, 3)
    root = initial_state([(a, a)])
    s = root.child(TOKEN_ID["repeat"])
    assert s.grids == root.grids and s.state_key() != root.state_key()


def test_prefix_masks():
    assert valid_next_tokens([]) == sorted(TOKEN_ID[t] for t in ("move", "turnLeft", "turnRight", "putMarker", "pickMarker", "if", "ifelse", "while", "repeat"))
    conds = valid_next_tokens([TOKEN_ID["while"]])
    assert [VOCAB[t] for t in conds] == [VOCAB[i] for i in range(5, 15)]
    assert [VOCAB[t] for t in valid_next_tokens([TOKEN_ID["repeat"]])] == [f"R={n}" for n in range(2, 11)]
    assert valid_next_tokens([TOKEN_ID["move"], TOKEN_ID["<end>"]]) == []


def test_incremental_execution():
    g = Grid.empty(4, 1)
    root = initial_state([(g, g)])
    s = root.child(TOKEN_ID["move"])
    assert s.grids[0].x == 1
    for t in "repeat R=2 r( move".split():
        s = s.child(TOKEN_ID[t])
    assert s.grids[0].x == 1  # the repeat has not closed yet
    s = s.child(TOKEN_ID["r)"])
    assert s.grids[0].x == 3
    with pytest.raises(InvalidStep):
        s.child(TOKEN_ID["move"])
    with pytest.raises(InvalidStep):
        s.child(TOKEN_ID["w)"])


def test_nesting_cap():
    deep = []
    for _ in range(MAX_NESTING):
        deep += ["repeat", "R=2", "r("]
    ps = parse_prefix([TOKEN_ID[t] for t in deep])
    assert ps.open_blocks == MAX_NESTING
    allowed = {VOCAB[t] for t in valid_next_tokens([TOKEN_ID[t] for t in deep])}
    assert allowed == {"move", "turnLeft", "turnRight", "putMarker", "pickMarker"}
    full = deep + ["move"] + ["r)"] * MAX_NESTING
    toks = [TOKEN_ID[t] for t in full]
    assert max(nesting_levels(toks)) == MAX_NESTING
    assert parse(toks)
    too_deep = ["repeat", "R=2", "r("] + full + ["r)"]
    with pytest.raises(GrammarError):
        parse([TOKEN_ID[t] for t in too_deep])


def test_program_text_round_trip():
    p = prog("ifelse frontIsClear e( move e) else e( turnLeft e) <end>")
    assert KarelProgram.from_text(p.to_text()) == p
    with pytest.raises(GrammarError):
        prog("jump")


# -- grammar fuzz against an independent prefix recognizer ----------------------


class _Eof(Exception):
    pass


def recognize(words: list[str]) -> str:
    """Classify a token list as 'complete', 'incomplete' (a viable prefix) or 'error'."""
    pos = 0
    actions = {"move", "turnLeft", "turnRight", "putMarker", "pickMarker"}
    conds = {c for c in VOCAB[5:15]}
    counts = {f"R={n}" for n in range(2, 11)}
    openers = {"if": ("i(", "i)"), "ifelse": ("e(", "e)"), "while": ("w(", "w)"), "repeat": ("r(", "r)")}

    def take():
        nonlocal pos
        if pos >= len(words):
            raise _Eof
        pos += 1
        return words[pos - 1]

    def expect(w):
        if take() != w:
            raise ValueError(w)

    def block(close, depth):
        n = 0
        while True:
            if pos >= len(words):
                raise _Eof
            if words[pos] == close:
                if n == 0:
                    raise ValueError("empty block")
                take()
                return
            stmt(depth)
            n += 1

    def stmt(depth):
        w = take()
        if w in actions:
            return
        if w not in openers or depth >= MAX_NESTING:
            raise ValueError(w)
        arg = take()
        if arg not in (counts if w == "repeat" else conds):
            raise ValueError(arg)
        op, cl = openers[w]
        expect(op)
        block(cl, depth + 1)
        if w == "ifelse":
            expect("else")
            expect("e(")
            block("e)", depth + 1)

    try:
        n = 0
        while pos < len(words):
            if words[pos] == "<end>":
                if n == 0 or pos != len(words) - 1:
                    return "error"
                return "complete"
            stmt(0)
            n += 1
        return "complete" if n else "incomplete"
    except _Eof:
        return "incomplete"
    except ValueError:
        return "error"


def random_prefixes(rng: random.Random, count: int):
    out = []
    while len(out) < count:
        toks: list[int] = []
        bias = rng.random()
        for _ in range(rng.randint(0, 40)):
            out.append(list(toks))
            nxt = valid_next_tokens(toks)
            if not nxt:
                break
            keywords = [t for t in nxt if VOCAB[t] in ("if", "ifelse", "while", "repeat")]
            toks.append(rng.choice(keywords) if keywords and rng.random() < bias else rng.choice(nxt))
        out.append(toks)
    return out[:count]


def test_grammar_mask_matches_recognizer():
    rng = random.Random(2024)
    prefixes = random_prefixes(rng, 10_000)
    assert len(prefixes) == 10_000
    deep = 0
    for pre in prefixes:
        words = [VOCAB[t] for t in pre]
        assert recognize(words) != "error"
        allowed = set(valid_next_tokens(pre))
        for t in range(NUM_TOKENS):
            assert (t in allowed) == (recognize(words + [VOCAB[t]]) != "error"), (words, VOCAB[t])
        ps = parse_prefix(pre)
        assert ps.complete == (recognize(words) == "complete")
        if ps.complete:
            parse(pre)
        deep = max(deep, ps.open_blocks)
    assert deep == MAX_NESTING


# -- specs -----------------------------------------------------------------------


def _pairs(program: KarelProgram, grids):
    return tuple((g, run_karel(program, g).grid) for g in grids)


def test_search_finds_move_and_holds_out():
    grids = [Grid.empty(4, 4, x, y, E) for x, y in [(0, 0), (1, 2), (2, 3), (0, 1), (1, 1), (2, 2)]]
    spec = KarelSpec(_pairs(prog("move"), grids), num_visible=5)
    assert len(spec.visible) == 5 and len(spec.held_out) == 1
    r, held = karel_search_adapter(spec, UniformPolicy(), "mcts", SearchBudget(max_nodes=500, max_program_len=4))
    assert r.found and held
    assert verify(r.program, spec.visible)


def test_held_out_failure_is_reported():
    # visible hero always has markers under it, so "pickMarker" and
    # "if markersPresent i( pickMarker i)" both fit; the sixth grid has none
    vis = [Grid.empty(3, 3, x, 0, E).with_markers({(x, 0): 1}) for x in range(3)]
    vis += [Grid.empty(3, 3, x, 1, S).with_markers({(x, 1): 1}) for x in range(2)]
    target = prog("if markersPresent i( pickMarker i)")
    pairs = _pairs(target, vis) + ((Grid.empty(3, 3, 2, 2, E), Grid.empty(3, 3, 2, 2, E)),)
    spec = KarelSpec(pairs)
    r, held = karel_search_adapter(spec, UniformPolicy(), "mcts", SearchBudget(max_nodes=500, max_program_len=4))
    assert r.found and r.program.to_text() == "pickMarker"
    assert verify(r.program, spec.visible) and not held
    assert verify(target, spec.pairs)


def test_spec_text_round_trip():
    grids = [Grid.empty(3, 2, 0, 0, E), Grid.empty(2, 2, 1, 1, N).with_walls([(0, 0)])]
    spec = KarelSpec(_pairs(prog("turnRight"), grids), num_visible=1)
    text = spec.to_text()
    assert text.startswith("karel-spec 1\n")
    back = KarelSpec.from_text(text, num_visible=1)
    assert back == spec
    with pytest.raises(ValueError):
        KarelSpec.from_text("karel-spec 2\n")


def test_expand_to_pairs_stops_at_end():
    g = Grid.empty(3, 3)
    p = prog("move turnLeft <end>")
    pairs = expand_to_pairs(p, [(g, run_karel(p, g).grid)])
    assert [t for _, t in pairs] == [TOKEN_ID["move"], TOKEN_ID["turnLeft"]]
    assert pairs[0][0].path == ()


def test_generated_samples_run():
    cfg = KarelGenConfig(num_samples=10, seed=3)
    rng = np.random.default_rng(3)
    for _ in range(10):
        p, pairs = generate_sample(rng, cfg)
        parse(p.tokens)
        assert len(pairs) == cfg.num_pairs
        assert verify(p, pairs)
