"""Command-line entry point: ``treesynth {gen,train,prune,synth,bench,stats}``.

Exit codes: 0 success, 2 bad arguments, 3 file I/O error, 4 no program found,
5 corrupt or version-mismatched input. Relative output paths are resolved
against ``$TREESYNTH_OUT`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import dataset as ds_mod
from . import karel, policy as pol
from .errors import CorruptFile, VersionMismatch
from .search import STRATEGIES, BeamConfig, CabConfig, SearchBudget, run_strategy

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NOT_FOUND = 4
EXIT_DATA = 5

BENCH_COLUMNS = [
    "spec_id",
    "policy",
    "strategy",
    "pruned",
    "history",
    "outcome",
    "nodes",
    "rollouts",
    "program_len",
    "held_out",
    "program",
]
AGG_COLUMNS = ["policy", "pruned", "history", "strategy", "specs", "found", "accuracy", "held_out_accuracy"]


class UsageError(Exception):
    pass


def _out_path(p: str) -> Path:
    path = Path(p)
    base = os.environ.get("TREESYNTH_OUT")
    if base and not path.is_absolute():
        path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _onoff(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return v == "on"


def _load_policy(spec: str | None):
    if spec is None or spec == "uniform":
        return pol.UniformPolicy()
    return pol.load(spec)


def _budget(args, max_len: int) -> SearchBudget:
    return SearchBudget(args.max_nodes, args.max_wall_ms, max_len)


def _search_seed(args, *stream: int):
    """MCTS tie-break seed: None (lowest action id) unless ``--tie-break seeded``."""
    return [args.seed, *stream] if args.tie_break == "seeded" else None


# -- commands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.dsl == "deepcoder":
        cfg = ds_mod.GenConfig(
            num_samples=args.n,
            min_len=min(args.min_len, args.max_len),
            max_len=args.max_len,
            num_examples=args.examples,
            seed=args.seed,
        )
        data = ds_mod.generate(cfg)
    else:
        cfg = karel.KarelGenConfig(num_samples=args.n, max_tokens=args.max_len, num_pairs=args.examples, seed=args.seed)
        data = ds_mod.generate_karel(cfg)
    out = _out_path(args.out)
    ds_mod.write_corpus(out, data)
    _out_path(str(out) + ".stats.csv").write_text(ds_mod.histogram_csv(ds_mod.stats(data)))
    print(f"wrote {len(data)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = ds_mod.read_corpus(args.corpus)
    pairs = ds_mod.training_pairs(data)
    fcfg = pol.FeatureConfig(dsl=data.dsl, history=args.history, hidden=args.hidden)
    tcfg = pol.TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, l2=args.l2, seed=args.seed
    )
    model = pol.train(pairs, tcfg, fcfg)
    model.metadata["pruned"] = "prune" in data.config
    model.metadata["corpus_samples"] = len(data)
    out = _out_path(args.out)
    pol.save(model, out)
    loss_csv = _out_path(args.loss_csv or str(out) + ".loss.csv")
    loss_csv.write_text("epoch,loss\n" + "".join(f"{i},{v:.12g}\n" for i, v in enumerate(model.loss_trace)))
    print(f"trained on {len(pairs)} pairs; final loss {model.loss_trace[-1]:.4f}; model {out}")
    return EXIT_OK


def cmd_prune(args) -> int:
    data = ds_mod.read_corpus(args.corpus)
    model = _load_policy(args.model)
    pruned, report = ds_mod.prune(data, model, args.strategy, args.budget, args.workers, _search_seed(args))
    out = _out_path(args.out)
    ds_mod.write_corpus(out, pruned)
    _out_path(args.report or str(out) + ".report.csv").write_text(report.to_csv())
    hist = _out_path(args.hist or str(out) + ".hist.csv")
    rows = report.rows()
    hist.write_text("length,before,after\n" + "".join(f"{r['length']},{r['before']},{r['after']}\n" for r in rows))
    changed = sum(report.shortened.values())
    print(f"shortened {changed}/{len(data)} programs; wrote {out}")
    return EXIT_OK


def _read_spec(path: str, dsl: str):
    text = Path(path).read_text()
    try:
        if dsl == "karel":
            return karel.KarelSpec.from_text(text)
        rec = json.loads(text)
        rec.setdefault("program", "")
        return ds_mod.sample_from_record("deepcoder", rec).io
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptFile(f"{path}: cannot parse spec ({e})") from None


def cmd_synth(args) -> int:
    model = _load_policy(args.model)
    spec = _read_spec(args.spec, args.dsl)
    budget = _budget(args, args.max_len)
    extra = {"beam": BeamConfig(args.width, args.expansion), "cab": CabConfig(args.width, args.expansion)}
    if args.dsl == "karel":
        result, held = karel.karel_search_adapter(spec, model, args.strategy, budget, seed=_search_seed(args), **extra)
    else:
        root = ds_mod.root_state("deepcoder", spec)
        result = run_strategy(args.strategy, root, model, budget, seed=_search_seed(args), **extra)
        held = None
    rec = result.record()
    rec["wall_ms"] = round(result.wall_ms, 3)
    rec["strategy"] = args.strategy
    if held is not None:
        rec["held_out"] = held
    if args.record:
        _out_path(args.record).write_text(json.dumps(rec, sort_keys=True, indent=2) + "\n")
    if result.found:
        print(result.program.to_text())
        return EXIT_OK
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return EXIT_NOT_FOUND


def _bench_cell(job):
    sample, dsl, policy, strategy, budget, beam, cab, seed = job
    if dsl == "karel":
        kspec = karel.KarelSpec(tuple(sample.io), min(5, len(sample.io) - 1) if len(sample.io) > 1 else 1)
        result, held = karel.karel_search_adapter(kspec, policy, strategy, budget, beam=beam, cab=cab, seed=seed)
    else:
        root = ds_mod.root_state(dsl, sample.io)
        result = run_strategy(strategy, root, policy, budget, beam=beam, cab=cab, seed=seed)
        held = ""
    result.trace = []  # keep worker results small
    return result, held


def cmd_bench(args) -> int:
    data = ds_mod.read_corpus(args.specs)
    specs = data.samples[: args.limit] if args.limit else data.samples
    policies = []
    for item in args.policy or ["uniform"]:
        label, _, path = item.partition("=")
        if not path:
            label, path = item, item
        p = _load_policy(path)
        meta = getattr(p, "metadata", {})
        policies.append((label, p, bool(meta.get("pruned", False)), bool(meta.get("history", False))))
    strategies = args.strategies.split(",")
    for s in strategies:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}; expected a subset of {','.join(STRATEGIES)}")
    beam, cab = BeamConfig(args.width, args.expansion), CabConfig(args.width, args.expansion)
    cells, jobs = [], []
    for label, policy, pruned, history in policies:
        for strategy in strategies:
            for i, sample in enumerate(specs):
                cap = args.max_len or (len(sample.program) if data.dsl == "deepcoder" else 2 * len(sample.program))
                cells.append((i, label, strategy, pruned, history))
                jobs.append((sample, data.dsl, policy, strategy, _budget(args, cap), beam, cab, _search_seed(args, i)))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_bench_cell, jobs, chunksize=4))  # map preserves job order
    else:
        results = [_bench_cell(j) for j in jobs]
    rows, timings = [], []
    agg: dict[tuple, list] = defaultdict(lambda: [0, 0, 0])
    for (i, label, strategy, pruned, history), (result, held) in zip(cells, results):
        rec = result.record()
        rows.append(
            {
                "spec_id": i,
                "policy": label,
                "strategy": strategy,
                "pruned": int(pruned),
                "history": int(history),
                "outcome": rec["outcome"],
                "nodes": rec["nodes"],
                "rollouts": rec["rollouts"],
                "program_len": "" if rec["program_len"] is None else rec["program_len"],
                "held_out": "" if held == "" else int(held),
                "program": "" if rec["program"] is None else rec["program"].replace("\n", "; "),
            }
        )
        timings.append({"spec_id": i, "policy": label, "strategy": strategy, "wall_ms": f"{result.wall_ms:.3f}"})
        cell = agg[(label, int(pruned), int(history), strategy)]
        cell[0] += 1
        cell[1] += result.found
        cell[2] += bool(held) if held != "" else 0
    out = _out_path(args.out)
    out.write_text(_csv(BENCH_COLUMNS, rows))
    agg_rows = [
        {
            "policy": k[0],
            "pruned": k[1],
            "history": k[2],
            "strategy": k[3],
            "specs": n,
            "found": f,
            "accuracy": f"{f / n:.6f}",
            "held_out_accuracy": f"{h / n:.6f}" if data.dsl == "karel" else "",
        }
        for k, (n, f, h) in agg.items()
    ]
    agg_text = _csv(AGG_COLUMNS, agg_rows)
    _out_path(args.agg or str(out) + ".agg.csv").write_text(agg_text)
    _out_path(args.timings or str(out) + ".timings.csv").write_text(_csv(["spec_id", "policy", "strategy", "wall_ms"], timings))
    print(agg_text, end="")
    return EXIT_OK


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_stats(args) -> int:
    data = ds_mod.read_corpus(args.corpus)
    text = ds_mod.histogram_csv(ds_mod.stats(data))
    if args.out:
        _out_path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_budget(p, nodes_default):
    p.add_argument("--max-nodes", type=_positive, default=nodes_default, help="step() budget per search")
    p.add_argument("--max-wall-ms", type=float, default=None, help="wall-clock budget per search")
    p.add_argument("--width", type=_positive, default=2, help="beam width (CAB: initial)")
    p.add_argument("--expansion", type=_positive, default=2, help="beam expansion (CAB: initial)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="treesynth", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a corpus")
    g.add_argument("--dsl", choices=("deepcoder", "karel"), default="deepcoder")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--min-len", type=_positive, default=1)
    g.add_argument("--max-len", type=_positive, default=12, help="statements (deepcoder) or tokens (karel)")
    g.add_argument("--examples", type=_positive, default=5, help="I/O examples per sample (karel: pairs incl. held-out)")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a policy on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history", type=_onoff, default=True, help="on|off: program-history features")
    t.add_argument("--hidden", type=int, default=0, help="hidden units (0 = linear softmax)")
    t.add_argument("--epochs", type=_positive, default=30)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--batch-size", type=_positive, default=64)
    t.add_argument("--l2", type=float, default=1e-5)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--loss-csv")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="shorten training programs by search")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True, help="model file, or 'uniform'")
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default="mcts-shared")
    p.add_argument("--budget", type=_positive, default=2000, help="step() budget per sample")
    p.add_argument("--workers", type=_positive, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tie-break", choices=("lowest", "seeded"), default="lowest", help="MCTS tie-breaking")
    p.add_argument("--report")
    p.add_argument("--hist")
    p.set_defaults(func=cmd_prune)

    s = sub.add_parser("synth", help="synthesize a program for one spec")
    s.add_argument("--spec", required=True, help="JSON {'io': [...]} (deepcoder) or karel-spec file")
    s.add_argument("--dsl", choices=("deepcoder", "karel"), default="deepcoder")
    s.add_argument("--model", default="uniform")
    s.add_argument("--strategy", choices=STRATEGIES, default="mcts-shared")
    s.add_argument("--max-len", type=_positive, default=14)
    s.add_argument("--record")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--tie-break", choices=("lowest", "seeded"), default="lowest", help="MCTS tie-breaking")
    _add_budget(s, 10_000)
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("bench", help="run strategies x policies over a spec corpus")
    b.add_argument("--specs", required=True, help="corpus of test specs")
    b.add_argument("--policy", action="append", help="LABEL=PATH or 'uniform'; repeatable")
    b.add_argument("--strategies", default=",".join(STRATEGIES))
    b.add_argument("--max-len", type=int, default=0, help="length cap (0: ground-truth length)")
    b.add_argument("--limit", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--agg")
    b.add_argument("--timings")
    b.add_argument("--seed", type=int, required=True)
    b.add_argument("--tie-break", choices=("lowest", "seeded"), default="lowest", help="MCTS tie-breaking")
    b.add_argument("--workers", type=_positive, default=1, help="processes; rows keep spec order")
    _add_budget(b, 1000)
    b.set_defaults(func=cmd_bench)

    st = sub.add_parser("stats", help="program-length histogram of a corpus")
    st.add_argument("--corpus", required=True)
    st.add_argument("--out")
    st.set_defaults(func=cmd_stats)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CorruptFile, VersionMismatch, pol.TrainingError, ds_mod.GenerationStall) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
