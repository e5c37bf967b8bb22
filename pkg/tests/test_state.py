from __future__ import annotations

import hashlib
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treesynth.deepcoder import ExecError, Cause, Program, Statement, op_by_label, run_program
from treesynth.state import (
    DropStrategy,
    canonical_bytes,
    canonical_key,
    initial_state,
    step,
    verify,
)

SORT = op_by_label("SORT").id
REVERSE = op_by_label("REVERSE").id
INC = op_by_label("MAP,+1").id
SUM = op_by_label("SUM").id


def test_sort_step_solves():
    s = initial_state([(((2, 1),), (1, 2))])
    t = step(s, Statement(SORT, 0, 0, 1))
    assert t.envs[0].registers == ((2, 1), (1, 2))
    assert t.is_solved() and not s.is_solved()


def test_is_solved_on_inputs():
    assert initial_state([(((1, 2),), (1, 2))]).is_solved()
    assert not initial_state([(((1, 2),), (2, 1))]).is_solved()


def test_is_solved_needs_one_index_across_examples():
    # r0 matches in the first example and r1 in the second: no single program output
    io = [(((1,), (2,)), (1,)), (((3,), (4,)), (4,))]
    assert not initial_state(io).is_solved()


def _fill(drop):
    """1 input plus 7 steps; steps 1..6 read r1 so LRU and oldest-first disagree."""
    s = initial_state([(((0,),), (99,))], drop=drop)
    s = step(s, Statement(INC, 0, 0, 1))
    for i in range(2, 8):
        s = step(s, Statement(INC, 1, 1, i))
    return s


def test_oldest_non_input_victim():
    s = _fill(DropStrategy.OLDEST_NON_INPUT)
    assert s.num_registers == 8
    assert s.next_out() == 1
    t = step(s, Statement(INC, 7, 7, 1))
    assert t.envs[0].registers[0] == (0,)  # input preserved
    assert t.envs[0].registers[1] == (3,)
    assert t.num_registers == 8
    with pytest.raises(ExecError) as e:
        step(s, Statement(INC, 7, 7, 2))
    assert e.value.cause is Cause.NO_FREE_REGISTER


def test_lru_victim():
    s = _fill(DropStrategy.LEAST_RECENTLY_USED)
    assert s.next_out() == 2


def test_step_invalid_is_atomic():
    io = [(((1,),), 0), (((200,),), 0)]
    s = initial_state(io)
    with pytest.raises(ExecError) as e:
        step(s, Statement(op_by_label("MAP,*2").id, 0, 0, 1))
    assert e.value.cause is Cause.VALUE_OUT_OF_BOUNDS
    assert s.num_registers == 1


def test_initial_state_validation():
    with pytest.raises(ValueError):
        initial_state([])
    with pytest.raises(ValueError):
        initial_state([(((1,),), 0), ((1,), 0)])
    with pytest.raises(ValueError):
        initial_state([(((1,), 2), 0), ((2, (1,)), 0)])


def test_key_register_permutation_invariant():
    io = [(((3, 1, 2),), 0), (((5, 4),), 0)]
    s = initial_state(io)
    a = step(step(s, Statement(SORT, 0, 0, 1)), Statement(REVERSE, 0, 0, 2))
    b = step(step(s, Statement(REVERSE, 0, 0, 1)), Statement(SORT, 0, 0, 2))
    assert a.envs[0].registers != b.envs[0].registers
    assert a.state_key() == b.state_key()


def test_key_ignores_history_and_target():
    x = (2, 1)
    s1 = step(initial_state([((x,), (1, 2))]), Statement(SORT, 0, 0, 1))
    s2 = step(initial_state([((x,), 7)]), Statement(SORT, 0, 0, 1))
    assert s1.state_key() == s2.state_key()


def test_key_distinguishes_values():
    a = initial_state([(((1, 2),), 0)])
    b = initial_state([(((1, 3),), 0)])
    assert canonical_key(a) != canonical_key(b)


def test_canonical_bytes_layout():
    s = initial_state([((5, (1, -2)), 0)])
    # columns sort ints before lists
    expected = b"DCS" + struct.pack("<BBB", 1, 1, 2) + struct.pack("<Bh", 0, 5) + struct.pack("<BBhh", 1, 2, 1, -2)
    assert canonical_bytes(s) == expected
    assert canonical_key(s) == hashlib.blake2b(expected, digest_size=16).digest()


def test_verify():
    io = [(((3, 1, 2),), (1, 2, 3))]
    good = Program((Statement(SORT, 0, 0, 1),), 1)
    assert verify(good, io)
    assert not verify(Program((Statement(REVERSE, 0, 0, 1),), 1), io)
    bad = Program((Statement(op_by_label("MAP,**2").id, 0, 0, 1),), 1)
    assert not verify(bad, [(((3,),), (9,)), (((100,),), (0,))])


small_list = st.lists(st.integers(-20, 20), min_size=0, max_size=6).map(tuple)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(small_list, st.integers(-5, 5)), min_size=1, max_size=3),
    st.lists(st.integers(0, 10**6), min_size=1, max_size=10),
    st.sampled_from(list(DropStrategy)),
)
def test_lockstep_matches_run_program(inputs, choices, drop):
    io = [((lst, n), 0) for lst, n in inputs]
    s = initial_state(io, drop=drop)
    for c in choices:
        legal = s.legal_actions()
        if len(legal) == 0:
            break
        try:
            child = s.child(int(legal[c % len(legal)]))
        except ExecError:
            continue
        s = child
        p = s.program()
        last = s.history[-1].out
        for env, (inp, _) in zip(s.envs, io):
            assert run_program(p, inp) == env.registers[last]
    assert s.num_registers <= 8


@settings(max_examples=60, deadline=None)
@given(st.lists(small_list, min_size=1, max_size=3), st.lists(st.integers(0, 10**6), min_size=1, max_size=6))
def test_first_solved_state_verifies(lists, choices):
    """When a step first solves a state, its history is a verified program."""
    prog_state = initial_state([((x,), 0) for x in lists])
    states = [prog_state]
    for c in choices:
        legal = prog_state.legal_actions()
        try:
            prog_state = prog_state.child(int(legal[c % len(legal)]))
        except ExecError:
            continue
        states.append(prog_state)
    final = states[-1]
    if final.depth == 0:
        return
    last = final.history[-1].out
    targets = [env.registers[last] for env in final.envs]
    io = [((x,), t) for x, t in zip(lists, targets)]
    s = initial_state(io)
    for stmt in final.history:
        was = s.is_solved()
        s = step(s, stmt)
        if s.is_solved() and not was:
            assert verify(s.program(), io)
            break
    else:
        assert initial_state(io).is_solved()


@settings(max_examples=40, deadline=None)
@given(st.lists(small_list, min_size=2, max_size=3), st.data())
def test_key_invariant_under_register_permutation(lists, data):
    """Building the same register multiset in different orders gives one key."""
    ops = [SORT, REVERSE, INC]
    order = data.draw(st.permutations(ops))
    io = [((x,), 0) for x in lists]
    a = initial_state(io)
    b = initial_state(io)
    for i, op in enumerate(ops):
        a = step(a, Statement(op, 0, 0, i + 1))
    for i, op in enumerate(order):
        b = step(b, Statement(op, 0, 0, i + 1))
    assert a.state_key() == b.state_key()
