"""Corpora of (program, I/O examples) samples: generation, pruning, statistics.

Corpus file (JSON lines, keys sorted, compact separators)::

    {"config": {...}, "dsl": "deepcoder", "format": "treesynth-corpus", "version": 1}
    {"io": [{"inputs": [[3, 1], 2], "output": [1, 3]}, ...], "program": "r2 = SORT r0", "provenance": {"kind": "generated"}}
    ...

For Karel samples ``io`` entries are ``{"input": <grid text>, "output": <grid text>}``
and ``program`` is the space-separated token text. Pruned samples carry
``{"kind": "pruned", "original_len": n, "original": <program text>}``.

Prune report CSV columns: ``length, before, after, originals, shortened,
fraction_shortened`` (``originals``/``shortened`` count samples by their
original length).
"""

from __future__ import annotations

import csv
import io as _io
import json
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import karel
from .deepcoder import (
    INT,
    LIST,
    MAX_REGISTERS,
    ExecError,
    Program,
    decode_action,
)
from .errors import CorruptFile, VersionMismatch
from .search import SearchBudget, run_strategy
from .state import initial_state, verify

CORPUS_FORMAT = "treesynth-corpus"
CORPUS_VERSION = 1


class GenerationStall(RuntimeError):
    pass


@dataclass
class Sample:
    program: Any
    io: tuple
    provenance: dict = field(default_factory=lambda: {"kind": "generated"})

    def __len__(self) -> int:
        return len(self.program)


@dataclass
class Dataset:
    dsl: str
    samples: list[Sample]
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


@dataclass(frozen=True)
class GenConfig:
    num_samples: int = 1000
    min_len: int = 1
    max_len: int = 12
    num_examples: int = 5
    max_inputs: int = 2
    list_len: tuple[int, int] = (1, 10)
    list_values: tuple[int, int] = (-64, 64)
    int_values: tuple[int, int] = (0, 8)
    max_registers: int = MAX_REGISTERS
    dup_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"need 1 <= min_len <= max_len, got {self.min_len}..{self.max_len}")
        if self.num_samples < 0 or self.num_examples < 1:
            raise ValueError("num_samples must be >= 0 and num_examples >= 1")


def unused_statements(program: Program) -> list[int]:
    """Indices of statements whose output is overwritten or never read.

    The final statement counts as used (it is the program's output).
    """
    live: dict[int, int] = {}  # register -> index of the statement that wrote it
    unused = []
    n = len(program.statements)
    for i, st in enumerate(program.statements):
        for r in {st.arg1, st.arg2}:
            live.pop(r, None)
        if st.out in live:
            unused.append(live.pop(st.out))
        live[st.out] = i
    unused += [i for i in live.values() if i != n - 1]
    return sorted(unused)


def _random_inputs(rng: np.random.Generator, cfg: GenConfig, kinds: Sequence[int]) -> tuple:
    vals = []
    for k in kinds:
        if k == INT:
            vals.append(int(rng.integers(cfg.int_values[0], cfg.int_values[1] + 1)))
        else:
            n = int(rng.integers(cfg.list_len[0], cfg.list_len[1] + 1))
            vals.append(tuple(int(v) for v in rng.integers(cfg.list_values[0], cfg.list_values[1] + 1, n)))
    return tuple(vals)


def _try_program(rng: np.random.Generator, cfg: GenConfig, length: int):
    n_in = int(rng.integers(1, cfg.max_inputs + 1))
    kinds = [LIST] + [INT if rng.random() < 0.5 else LIST for _ in range(n_in - 1)]
    inputs = [_random_inputs(rng, cfg, kinds) for _ in range(cfg.num_examples)]
    s = initial_state([(inp, 0) for inp in inputs], cfg.max_registers)
    pending: set[int] = set()
    for t in range(length):
        legal = s.legal_actions()
        left = length - t
        full = s.num_registers == cfg.max_registers
        must = set()
        if full and s.next_out() in pending:
            must.add(s.next_out())
        if left == 1:
            must |= pending
        cand = []
        for a in legal.tolist():
            _, a1, a2 = decode_action(a, cfg.max_registers)
            reads = {a1, a2}
            if not must <= reads:
                continue
            if pending and not (reads & pending) and (len(pending) >= 2 or left <= 2 or rng.random() > 0.2):
                continue
            cand.append((a, reads))
        if not cand:
            return None
        ops = sorted({decode_action(a, cfg.max_registers)[0] for a, _ in cand})
        for _ in range(8):
            op = ops[int(rng.integers(len(ops)))]
            choices = [c for c in cand if decode_action(c[0], cfg.max_registers)[0] == op]
            a, reads = choices[int(rng.integers(len(choices)))]
            try:
                nxt = s.child(a)
            except ExecError:
                continue
            out = nxt.history[-1].out
            new = [env.registers[out] for env in nxt.envs]
            dup = any(
                all(env.registers[i] == v for env, v in zip(nxt.envs, new))
                for i in range(nxt.num_registers)
                if i != out
            )
            if dup and rng.random() > cfg.dup_prob:
                continue
            break
        else:
            return None
        pending = (pending - reads) | {out}
        s = nxt
    prog = s.program()
    outputs = [env.registers[prog.statements[-1].out] for env in s.envs]
    io = tuple((inp, o) for inp, o in zip(inputs, outputs))
    if unused_statements(prog):
        return None
    if len(set(map(repr, outputs))) == 1 and cfg.num_examples > 1:
        return None
    if initial_state(io, cfg.max_registers).is_solved():
        return None
    return prog, io


def generate(cfg: GenConfig, max_attempts_per_sample: int = 200) -> Dataset:
    """Random type-valid programs with random inputs; deterministic given ``cfg.seed``."""
    samples: list[Sample] = []
    seen: set[str] = set()
    for i in range(cfg.num_samples):
        for attempt in range(max_attempts_per_sample):
            rng = np.random.default_rng([cfg.seed, 11, i, attempt])
            length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            got = _try_program(rng, cfg, length)
            if got is None:
                continue
            prog, io = got
            sig = repr(io)
            if sig in seen:
                continue
            seen.add(sig)
            samples.append(Sample(prog, io))
            break
        else:
            raise GenerationStall(
                f"sample {i}: no valid program in {max_attempts_per_sample} attempts "
                f"(lengths {cfg.min_len}..{cfg.max_len}, {cfg.num_examples} examples)"
            )
    return Dataset("deepcoder", samples, {"gen": _jsonable(asdict(cfg))})


def generate_karel(cfg: karel.KarelGenConfig, max_attempts_per_sample: int = 200) -> Dataset:
    samples: list[Sample] = []
    seen: set[bytes] = set()
    for i in range(cfg.num_samples):
        for attempt in range(max_attempts_per_sample):
            rng = np.random.default_rng([cfg.seed, 12, i, attempt])
            got = karel.generate_sample(rng, cfg, attempts=1)
            if got is None:
                continue
            prog, pairs = got
            sig = b"".join(a.to_bytes() + b.to_bytes() for a, b in pairs)
            if sig in seen:
                continue
            seen.add(sig)
            samples.append(Sample(prog, pairs))
            break
        else:
            raise GenerationStall(f"karel sample {i}: no valid program in {max_attempts_per_sample} attempts")
    return Dataset("karel", samples, {"gen": _jsonable(asdict(cfg))})


# -- pruning -----------------------------------------------------------------


def root_state(dsl: str, io, max_registers: int = MAX_REGISTERS):
    if dsl == "deepcoder":
        return initial_state(io, max_registers)
    return karel.initial_state(io)


def sample_verifies(dsl: str, sample: Sample) -> bool:
    if dsl == "deepcoder":
        return verify(sample.program, sample.io)
    return karel.verify(sample.program, sample.io)


@dataclass
class PruneReport:
    before: dict[int, int]
    after: dict[int, int]
    originals: dict[int, int]
    shortened: dict[int, int]
    nodes: int = 0

    def fraction_shortened(self, length: int) -> float:
        n = self.originals.get(length, 0)
        return self.shortened.get(length, 0) / n if n else 0.0

    def rows(self) -> list[dict]:
        lengths = sorted(set(self.before) | set(self.after))
        return [
            {
                "length": n,
                "before": self.before.get(n, 0),
                "after": self.after.get(n, 0),
                "originals": self.originals.get(n, 0),
                "shortened": self.shortened.get(n, 0),
                "fraction_shortened": f"{self.fraction_shortened(n):.6f}",
            }
            for n in lengths
        ]

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.DictWriter(buf, ["length", "before", "after", "originals", "shortened", "fraction_shortened"], lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()


def _prune_one(args) -> tuple[Sample, int]:
    dsl, sample, policy, strategy, max_nodes, seed = args
    n = len(sample.program)
    if n <= 1:
        return sample, 0
    root = root_state(dsl, sample.io)
    if root.is_solved():  # an input already equals the output; nothing to search
        return sample, 0
    budget = SearchBudget(max_nodes=max_nodes, max_program_len=n - 1)
    r = run_strategy(strategy, root, policy, budget, seed=seed)
    if r.found and len(r.program) < n:
        prov = {"kind": "pruned", "original_len": n, "original": sample.program.to_text()}
        return Sample(r.program, sample.io, prov), r.nodes_expanded
    return sample, r.nodes_expanded


def prune(
    ds: Dataset,
    policy,
    strategy: str = "mcts-shared",
    max_nodes: int = 2000,
    workers: int = 1,
    seed: int | None = None,
) -> tuple[Dataset, PruneReport]:
    """Replace each program by a strictly shorter consistent one when the search finds it.

    The search runs with a length cap of (original length - 1) and a node
    budget per sample; the first program it finds wins. ``seed`` turns on
    seeded tie-breaking in MCTS (sample ``i`` uses substream ``(seed, i)``).
    """
    seeds = [None if seed is None else [seed, i] for i in range(len(ds))]
    jobs = [(ds.dsl, s, policy, strategy, max_nodes, sd) for s, sd in zip(ds.samples, seeds)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_prune_one, jobs, chunksize=8))
    else:
        results = [_prune_one(j) for j in jobs]
    out = [s for s, _ in results]
    originals = Counter(len(s) for s in ds.samples)
    shortened = Counter(len(a) for a, b in zip(ds.samples, out) if len(b) < len(a))
    report = PruneReport(stats(ds), stats(Dataset(ds.dsl, out)), dict(originals), dict(shortened), sum(n for _, n in results))
    cfg = dict(ds.config)
    cfg["prune"] = {"strategy": strategy, "max_nodes": max_nodes}
    if seed is not None:
        cfg["prune"]["seed"] = seed
    return Dataset(ds.dsl, out, cfg), report


def stats(ds: Dataset) -> dict[int, int]:
    """Exact histogram of program lengths."""
    return dict(sorted(Counter(len(s) for s in ds.samples).items()))


def histogram_csv(hist: dict[int, int]) -> str:
    return "length,count\n" + "".join(f"{k},{v}\n" for k, v in sorted(hist.items()))


def split(ds: Dataset, ratios: Sequence[float], seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic disjoint (train, validation, test) partition."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(ds)
    order = np.random.default_rng([seed, 13]).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(n - n_train, int(round(ratios[1] * n)))
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple(Dataset(ds.dsl, [ds.samples[i] for i in sorted(p)], ds.config) for p in parts)


# -- corpus files ------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sample_record(dsl: str, s: Sample) -> dict:
    if dsl == "deepcoder":
        io = [{"inputs": _jsonable(inp), "output": _jsonable(out)} for inp, out in s.io]
    else:
        io = [{"input": a.to_text(), "output": b.to_text()} for a, b in s.io]
    return {"program": s.program.to_text(), "io": io, "provenance": s.provenance}


def _value(v):
    return tuple(v) if isinstance(v, list) else v


def sample_from_record(dsl: str, rec: dict) -> Sample:
    if dsl == "deepcoder":
        io = tuple((tuple(_value(x) for x in e["inputs"]), _value(e["output"])) for e in rec["io"])
        prog = Program.from_text(rec["program"], len(io[0][0]))
    else:
        io = tuple((karel.Grid.from_text(e["input"]), karel.Grid.from_text(e["output"])) for e in rec["io"])
        prog = karel.KarelProgram.from_text(rec["program"])
    return Sample(prog, io, rec.get("provenance", {"kind": "generated"}))


def corpus_text(ds: Dataset) -> str:
    header = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION, "dsl": ds.dsl, "config": _jsonable(ds.config)}
    lines = [_dump(header)] + [_dump(sample_record(ds.dsl, s)) for s in ds.samples]
    return "\n".join(lines) + "\n"


def write_corpus(path: str | Path, ds: Dataset) -> None:
    Path(path).write_text(corpus_text(ds))


def read_corpus(path: str | Path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    try:
        header = json.loads(lines[0])
    except (IndexError, json.JSONDecodeError):
        raise CorruptFile(f"{path}: missing or unreadable corpus header") from None
    if header.get("format") != CORPUS_FORMAT:
        raise CorruptFile(f"{path}: not a corpus file")
    if header.get("version") != CORPUS_VERSION:
        raise VersionMismatch(f"{path}: corpus version {header.get('version')}, expected {CORPUS_VERSION}")
    dsl = header["dsl"]
    samples = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            samples.append(sample_from_record(dsl, json.loads(line)))
        except (ValueError, KeyError, TypeError) as e:
            raise CorruptFile(f"{path}:{n}: {e}") from None
    return Dataset(dsl, samples, header.get("config", {}))


def training_pairs(ds: Dataset, max_registers: int = MAX_REGISTERS) -> list:
    """Teacher-forced (state, action) pairs for every sample of the corpus."""
    from .policy import expand_to_pairs

    pairs = []
    for s in ds.samples:
        if ds.dsl == "deepcoder":
            pairs += expand_to_pairs(s.program, s.io, max_registers)
        else:
            pairs += karel.expand_to_pairs(s.program, s.io)
    return pairs


__all__ = [
    "Dataset",
    "GenConfig",
    "GenerationStall",
    "PruneReport",
    "Sample",
    "generate",
    "generate_karel",
    "prune",
    "read_corpus",
    "split",
    "stats",
    "write_corpus",
]
