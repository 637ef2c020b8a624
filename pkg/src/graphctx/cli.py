"""``graphctx`` command line."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

from . import harness, report
from .graph import Split, graph_stats, load_graph, make_split, save_graph
from .prompting import LABEL_POLICIES, STRATEGY_KINDS, Strategy
from .retrieval import RETRIEVERS, build_index, write_embeddings
from .synth import SynthSpec, generate

log = logging.getLogger("graphctx")


def _split_scheme(name: str) -> str:
    return name  # per-class-<k> or frac-<a>-<b>-<c>; validated by make_split


def cmd_stats(args) -> int:
    g = load_graph(args.dir)
    print(json.dumps(graph_stats(g).as_dict(), indent=2))
    if g.dropped_self_loops or g.dropped_duplicates:
        print(f"normalized away {g.dropped_self_loops} self-loops, {g.dropped_duplicates} duplicate edges", file=sys.stderr)
    return 0


def cmd_split(args) -> int:
    g = load_graph(args.dir)
    split = make_split(g, args.scheme, args.seed)
    out = Path(args.out) if args.out else Path(args.dir) / "splits.json"
    split.save(out)
    print(f"{out}: train={len(split.train)} val={len(split.val)} test={len(split.test)}")
    return 0


def cmd_index(args) -> int:
    g = load_graph(args.dir)
    index = build_index(g, args.dim, args.external)
    out = Path(args.out) if args.out else Path(args.dir) / "embeddings.gcem"
    write_embeddings(out, index.vectors)
    print(f"{out}: {len(index)} rows x {index.dim} ({index.source}), {int(index.zero_rows.sum())} zero rows")
    return 0


def cmd_render(args) -> int:
    g = load_graph(args.dir)
    strategy = Strategy(
        kind=args.strategy,
        k=args.k,
        retriever=args.retriever,
        label_visibility=args.policy,
        hops=args.hops,
        match_degree=args.match_degree,
    )
    split = Split.load(args.split) if args.split else None
    if split is None and (Path(args.dir) / "splits.json").is_file():
        split = Split.load(Path(args.dir) / "splits.json")
    index = build_index(g, args.dim, args.external) if harness.needs_index(strategy) else None
    responses = harness.load_responses(args.responses) if args.responses else None
    rec = harness.prepare_record(
        g,
        args.node,
        strategy,
        split=split,
        index=index,
        seed=args.seed,
        responses=responses,
        token_budget=args.token_budget,
        fallback_zero_shot=args.fallback_zero_shot,
    )
    sys.stdout.write(rec.rendered + "\n")
    return 0


def cmd_baseline(args) -> int:
    g = load_graph(args.dir)
    split = Split.load(args.split) if args.split else make_split(g, args.scheme, args.seed)
    index = build_index(g, args.dim, args.external) if args.method.startswith("probe") else None
    res = harness.run_baseline(g, split, args.method, alpha=args.alpha, steps=args.steps, index=index)
    out = Path(args.out) / f"{g.name}__baseline-{args.method}__native__seed{split.seed}.jsonl"
    res.write(out)
    print(f"{out}: accuracy {res.accuracy:.4f} on {len(res.records)} test nodes")
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n=args.n,
        c=args.c,
        homophily=args.homophily,
        mean_degree=args.mean_degree,
        tokens_per_node=args.tokens_per_node,
        vocab_per_class=args.vocab_per_class,
        shared_vocab=args.shared_vocab,
        class_token_rate=args.class_token_rate,
        seed=args.seed,
    )
    g = generate(spec)
    save_graph(g, args.out)
    (Path(args.out) / "synth.json").write_text(json.dumps(spec.as_dict(), indent=2) + "\n")
    print(json.dumps(graph_stats(g).as_dict(), indent=2))
    return 0


def _print_results(results) -> None:
    for r in results:
        print(f"{r.path}: accuracy {r.accuracy:.4f} (unanswered or unparseable {r.parse_failure_rate:.3f})")
    if len(results) > 1:
        s = harness.summarize(results)
        print(f"mean {s['mean']:.4f} ± {s['std']:.4f} over {s['runs']} seeds")


def cmd_run(args) -> int:
    cfg = harness.RunConfig.load(args.config)
    try:
        _print_results(harness.run(cfg))
    except harness.RunAborted as exc:
        print(f"{exc}; partial records in {exc.partial}. Rerun to resume from the cache.", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(args) -> int:
    cfg = harness.RunConfig.load(args.config)
    axis, values = harness.parse_axis(args.axis)
    try:
        for val, results in zip(values, harness.sweep(cfg, axis, values)):
            print(f"== {axis}={val}")
            _print_results(results)
    except harness.RunAborted as exc:
        print(f"{exc}; partial records in {exc.partial}", file=sys.stderr)
        return 2
    return 0


def cmd_report(args) -> int:
    paths = [p for pat in args.results for p in (glob.glob(pat) or [pat])]
    for p in report.write_report(paths, args.out):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graphctx", description="Graph-guided retrieval-augmented in-context node classification.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("dir")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="write splits.json")
    p.add_argument("dir")
    p.add_argument("--scheme", default="per-class-20", type=_split_scheme, help="per-class-<k> or frac-<a>-<b>-<c>")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("index", help="build and write node embeddings (GCEM)")
    p.add_argument("dir")
    p.add_argument("--dim", type=int, default=1024)
    p.add_argument("--external", help="precomputed GCEM file to validate and normalize")
    p.add_argument("--out")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("render", help="print the exact prompt for one node")
    p.add_argument("dir")
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--strategy", choices=STRATEGY_KINDS, required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--match-degree", action="store_true")
    p.add_argument("--retriever", choices=RETRIEVERS, default="graph")
    p.add_argument("--hops", type=int, default=1)
    p.add_argument("--policy", choices=LABEL_POLICIES, default="train-only")
    p.add_argument("--split")
    p.add_argument("--responses", help="earlier result file supplying pseudo labels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=1024)
    p.add_argument("--external")
    p.add_argument("--token-budget", type=int)
    p.add_argument("--fallback-zero-shot", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("baseline", help="native message-passing baselines")
    p.add_argument("dir")
    p.add_argument("--method", choices=harness.BASELINE_METHODS, required=True)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--split")
    p.add_argument("--scheme", default="per-class-20")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=1024)
    p.add_argument("--external")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--c", type=int, default=5)
    p.add_argument("--homophily", type=float, default=0.9)
    p.add_argument("--mean-degree", type=float, default=10.0)
    p.add_argument("--tokens-per-node", type=int, default=30)
    p.add_argument("--vocab-per-class", type=int, default=50)
    p.add_argument("--shared-vocab", type=int, default=200)
    p.add_argument("--class-token-rate", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run one config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a config across one axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, help="k=0,1,2 | retriever=graph,text,random | backend=a,b")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="markdown table + SVG charts from result files")
    p.add_argument("results", nargs="+")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        if args.verbose:
            raise
        print(f"graphctx {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
