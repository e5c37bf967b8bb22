"""Samples with a known-redundant statement, for pruning checks."""

from __future__ import annotations

from treesynth.dataset import Dataset, GenConfig, Sample, generate
from treesynth.deepcoder import LIST, Program, Statement, kind_of, op_by_label, run_program
from treesynth.state import verify

SORT = op_by_label("SORT").id


def planted_redundant(n: int, seed: int = 0, max_base_len: int = 2):
    """``n`` samples ``q; SORT; SORT`` whose witness ``q; SORT`` is one statement shorter.

    Returns the dataset and the list of witnesses (checked to verify).
    """
    base = generate(GenConfig(num_samples=4 * n, max_len=max_base_len, seed=seed))
    samples, witnesses = [], []
    for s in base.samples:
        q = s.program
        if kind_of(s.io[0][1]) != LIST:
            continue
        k = q.num_inputs + len(q)  # next free register
        last = q.statements[-1].out
        p = Program(q.statements + (Statement(SORT, last, last, k), Statement(SORT, k, k, k + 1)), q.num_inputs)
        w = Program(q.statements + (Statement(SORT, last, last, k),), q.num_inputs)
        io = tuple((inp, run_program(p, inp)) for inp, _ in s.io)
        assert verify(w, io) and verify(p, io)
        samples.append(Sample(p, io))
        witnesses.append(w)
        if len(samples) == n:
            break
    return Dataset("deepcoder", samples, {"planted": n}), witnesses
