"""Command-line entry point: ingest, stats, explore, query, eval.

Policies: ``offline`` (built-in rule policy, seeded), ``scripted:PATH``
(replay a script file) or ``live`` (chat-completion endpoint from
``MODEL_ENDPOINT``/``MODEL_NAME``; also needs ``SQLSCOUT_LIVE=1``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .deployment import SynthesisConfig, synthesize
from .evalkit import load_tasks, resolve_locator, run_eval, synthesis_runner
from .explorer import ExplorationConfig, run_exploration
from .gateway import BackendConfig, Gateway, LiveBackend, load_script, live_enabled
from .knowledge_base import HashingEmbedder, KnowledgeBase, LiveEmbedder, atomic_write_bytes, load_kb
from .offline import OfflinePolicy
from .schema_graph import graph_from_catalog, graph_stats, introspect_catalog, read_graph, write_graph
from .sql_exec import Executor
from .tracking import LogicalClock, wall_clock

logger = logging.getLogger("sqlscout")


def make_gateway(spec: str, seed: int = 0, retry_budget: int | None = None) -> Gateway:
    if spec == "offline":
        return Gateway(OfflinePolicy(seed))
    if spec.startswith("scripted:"):
        return Gateway(load_script(spec.split(":", 1)[1]))
    if spec == "live":
        config = BackendConfig.from_env()
        budget = config.retry_budget if retry_budget is None else retry_budget
        return Gateway(LiveBackend(config), retry_budget=budget)
    raise SystemExit(f"unknown policy {spec!r}; use offline, scripted:PATH or live")


def clock_factory(spec: str) -> Callable[[], Callable[[], float]]:
    return (lambda: wall_clock) if spec == "live" else LogicalClock


def make_embedder(spec: str):
    if spec == "live" and live_enabled() and os.environ.get("EMBED_ENDPOINT"):
        return LiveEmbedder()
    return HashingEmbedder()


def _load_kb(path: str | None, graph, policy_spec: str) -> KnowledgeBase:
    embedder = make_embedder(policy_spec)
    kb = load_kb(path, embedder) if path else KnowledgeBase(embedder)
    kb.index_graph(graph)
    return kb


def _write_text(path: str, text: str) -> None:
    atomic_write_bytes(Path(path), text.encode("utf-8"))


# -- subcommands ------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    graph = graph_from_catalog(introspect_catalog(args.source))
    graph.validate()
    write_graph(graph, args.out)
    stats = graph_stats(graph)
    print(f"wrote {args.out}\tnodes={sum(stats.node_counts.values())}\tedges={len(graph.edges)}\tgroups={stats.group_count}")
    return 0


def _stats_table(d: dict) -> str:
    lines = ["metric\tvalue"]
    lines += [f"nodes.{k}\t{v}" for k, v in d["nodes"].items()]
    lines += [f"edges.{k}\t{v}" for k, v in d["edges"].items()]
    for k in ("total_nodes", "total_edges", "group_count", "avg_fanout_exact", "max_fanout"):
        lines.append(f"{k}\t{d[k]}")
    return "\n".join(lines)


def cmd_stats(args: argparse.Namespace) -> int:
    graph = read_graph(args.graph)
    d = graph_stats(graph).to_dict()
    print(json.dumps(d, sort_keys=True, indent=1) if args.format == "json" else _stats_table(d))
    if args.figures:
        from .reporting import plot_group_fanout

        print(f"figure\t{plot_group_fanout(graph, args.figures)}")
    return 0


def cmd_explore(args: argparse.Namespace) -> int:
    graph = read_graph(args.graph)
    config = ExplorationConfig(
        target_triplets=args.target_triplets,
        max_iterations=args.max_iterations,
        candidate_fanout=args.fanout,
        failure_threshold=args.failure_threshold,
        row_limit=args.row_limit,
    )
    kb = _load_kb(None, graph, args.policy)
    gateway = make_gateway(args.policy, args.seed)
    executor = Executor(args.db, row_limit=args.row_limit)
    result = run_exploration(graph, config, gateway, executor, kb, out=args.out, clock=clock_factory(args.policy)())
    if args.graph_out:
        write_graph(graph, args.graph_out)
    stats = result.stats.to_dict()
    print(f"triplets\t{len(result.triplets)}")
    for k in ("iterations", "policy_calls", "executor_calls", "policy_faults", "skipped_steps"):
        print(f"{k}\t{stats[k]}")
    if stats["aborted"]:
        print(f"aborted\t{stats['aborted']}")
        return 2
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    graph = read_graph(args.graph)
    kb = _load_kb(args.kb, graph, args.policy)
    config = SynthesisConfig(max_iterations=args.max_iters, top_k=args.top_k, fidelity_check_enabled=not args.no_fidelity)
    result = synthesize(
        args.question, graph, kb, Executor(args.db), make_gateway(args.policy, args.seed), config, clock_factory(args.policy)()
    )
    if args.transcript:
        _write_text(args.transcript, result.to_json() + "\n")
    print(f"status\t{result.status}")
    print(f"iterations\t{result.iterations_used}")
    print(f"llm_calls\t{result.llm_call_count}")
    print(f"db_calls\t{result.db_call_count}")
    print(f"sql\t{result.final_sql or ''}")
    return 0 if result.ok else 1


def cmd_eval(args: argparse.Namespace) -> int:
    tasks = load_tasks(args.tasks)
    base = Path(args.tasks).resolve().parent
    graph = read_graph(args.graph)
    kb = _load_kb(args.kb, graph, args.policy)
    executors: dict[str, Executor] = {}

    def executor_for(db: str) -> Executor:
        if db not in executors:
            executors[db] = Executor(resolve_locator(db, base))
        return executors[db]

    shared = make_gateway(args.policy, args.seed) if args.policy.startswith("scripted:") else None

    def policy_for(task, index: int) -> Gateway:
        return shared if shared is not None else make_gateway(args.policy, args.seed + index)

    config = SynthesisConfig(max_iterations=args.max_iters, top_k=args.top_k)
    runner = synthesis_runner(graph, kb, policy_for, executor_for, config, clock_factory(args.policy))
    report = run_eval(tasks, runner, executor_for, passes=args.passes)
    if args.out:
        _write_text(args.out, report.to_json() + "\n")
    print(report.to_json() if args.format == "json" else report.render_table())
    if args.figures:
        from .reporting import report_figures

        for path in report_figures(report, args.figures):
            print(f"figure\t{path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sqlscout", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="introspect a database or catalog file into a schema graph")
    s.add_argument(
        "--source", "--db", "--catalog", dest="source", required=True,
        help="catalog .json file, fixture:NAME, a .sql script or a SQLite file",
    )
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("stats", help="node, edge and fan-out statistics of a graph")
    s.add_argument("--graph", required=True)
    s.add_argument("--format", choices=("table", "json"), default="table")
    s.add_argument("--figures", metavar="DIR")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("explore", help="mine validated triplets into a knowledge base")
    s.add_argument("--graph", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--policy", default="offline")
    s.add_argument("--target-triplets", type=int, default=50)
    s.add_argument("--max-iterations", type=int, default=200)
    s.add_argument("--fanout", type=int, default=4)
    s.add_argument("--failure-threshold", type=int, default=3)
    s.add_argument("--row-limit", type=int, default=100)
    s.add_argument("--out", required=True)
    s.add_argument("--graph-out", help="also write the graph with triplet feedback attached")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_explore)

    s = sub.add_parser("query", help="synthesize SQL for one question")
    s.add_argument("--graph", required=True)
    s.add_argument("--kb")
    s.add_argument("--db", required=True)
    s.add_argument("--question", required=True)
    s.add_argument("--max-iters", type=int, default=5)
    s.add_argument("--top-k", type=int, default=3)
    s.add_argument("--policy", default="offline")
    s.add_argument("--no-fidelity", action="store_true")
    s.add_argument("--transcript")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", help="execution accuracy and pass@k over a task file")
    s.add_argument("--tasks", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--kb")
    s.add_argument("--policy", default="offline")
    s.add_argument("--passes", type=int, default=1)
    s.add_argument("--max-iters", type=int, default=5)
    s.add_argument("--top-k", type=int, default=3)
    s.add_argument("--out")
    s.add_argument("--format", choices=("table", "json"), default="table")
    s.add_argument("--figures", metavar="DIR")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
