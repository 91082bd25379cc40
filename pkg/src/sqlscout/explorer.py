"""Policy-guided tree exploration that mines validated (fragment, SQL, question) triplets.

Each iteration asks the policy to pick one (frontier node, action) pair,
realises the extended query state as SQL, validates it in layers (syntax,
execution, result class) and records the outcome along the root path.
There is no scalar reward: a node whose failure count reaches the
threshold is hidden from the policy together with its whole subtree.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .actions import (
    AGGREGATES,
    Action,
    ActionKind,
    PolicyFault,
    QueryState,
    parse_action_response,
    table_of,
)
from .gateway import BackendError, Gateway, RequestKind
from .knowledge_base import KnowledgeBase, SchemaFragment, Triplet, persist_kb
from .schema_graph import (
    SchemaGraph,
    _field_from_node,
    is_key_column,
    representative_tables,
    table_id,
)
from .sql_exec import (
    ExecutionError,
    Executor,
    ResultClass,
    SqlSyntaxError,
    classify,
    extract_sql,
    parse_check,
)
from .tracking import LogicalClock

logger = logging.getLogger(__name__)

SYNTAX_ERROR = "SyntaxError"
EXECUTION_ERROR = "ExecutionError"
EMPTY_RESULT = "EmptyResult"
TRIVIAL_RESULT = "TrivialResult"
SUCCESS = "Success"

_NUMERIC = re.compile(r"INT|REAL|FLOA|DOUB|NUM|DEC", re.IGNORECASE)


@dataclass
class ExplorationConfig:
    target_triplets: int = 50
    max_iterations: int = 200
    candidate_fanout: int = 4
    failure_threshold: int = 3
    row_limit: int = 100

    def __post_init__(self) -> None:
        for name in ("target_triplets", "max_iterations", "candidate_fanout", "failure_threshold", "row_limit"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


# -- schema view ---------------------------------------------------------------


@dataclass(frozen=True)
class ColumnInfo:
    id: str
    table: str
    name: str
    data_type: str
    description: str | None
    samples: tuple[str, ...]
    is_key: bool
    field_node: str

    @property
    def numeric(self) -> bool:
        return bool(_NUMERIC.search(self.data_type))


@dataclass
class TableInfo:
    fqn: str
    name: str
    schema: str
    sql_name: str
    columns: list[ColumnInfo]
    group: str | None = None
    description: str | None = None


class SchemaView:
    """The explorable part of a graph: one table per shared field group.

    Join candidates come from declared foreign keys, key columns with the
    same name in both tables (``id`` alone excluded), and ``x_id`` columns
    pointing at the ``id`` column of a table named ``x`` or ``xs``.
    """

    def __init__(self, graph: SchemaGraph) -> None:
        self.graph = graph
        self.tables: dict[str, TableInfo] = {}
        self.columns: dict[str, ColumnInfo] = {}
        for tnode in representative_tables(graph):
            p = tnode.props
            fqn = p["fullname"]
            cols = []
            for fnode in graph.table_fields(tnode.id):
                fdef = _field_from_node(fnode)
                col = ColumnInfo(
                    f"{fqn}.{fdef.name}",
                    fqn,
                    fdef.name,
                    fdef.data_type,
                    fdef.description,
                    fdef.sample_values,
                    is_key_column(fdef.name, fdef.is_key),
                    fnode.id,
                )
                cols.append(col)
                self.columns[col.id] = col
            sql_name = p["name"] if p["schema"] == "main" else f"{p['schema']}.{p['name']}"
            self.tables[fqn] = TableInfo(fqn, p["name"], p["schema"], sql_name, cols, graph.table_group(tnode.id), p.get("ddl_summary"))
        self._joins: dict[tuple[str, str], list[tuple[str, str]]] = {}
        self._derive_joins()

    def _add_join(self, left: str, right: str) -> None:
        lt, rt = table_of(left), table_of(right)
        if lt == rt:
            return
        if lt > rt:
            left, right, lt, rt = right, left, rt, lt
        pairs = self._joins.setdefault((lt, rt), [])
        if (left, right) not in pairs:
            pairs.append((left, right))

    def _derive_joins(self) -> None:
        for t in self.tables.values():
            tnode = self.graph.nodes[table_id(t.fqn)]
            for column, ref_table, ref_column in tnode.props.get("foreign_keys") or ():
                if ref_table in self.tables and f"{ref_table}.{ref_column}" in self.columns:
                    self._add_join(f"{t.fqn}.{column}", f"{ref_table}.{ref_column}")
        fqns = sorted(self.tables)
        for i, a in enumerate(fqns):
            for b in fqns[i + 1 :]:
                ta, tb = self.tables[a], self.tables[b]
                names_b = {c.name.lower(): c for c in tb.columns}
                for ca in ta.columns:
                    cb = names_b.get(ca.name.lower())
                    if cb is not None and ca.name.lower() != "id" and (ca.is_key or cb.is_key):
                        self._add_join(ca.id, cb.id)
                for x, y in ((ta, tb), (tb, ta)):
                    y_id = next((c for c in y.columns if c.name.lower() == "id"), None)
                    if y_id is None:
                        continue
                    for c in x.columns:
                        stem = c.name.lower()[:-3] if c.name.lower().endswith("_id") else None
                        if stem and y.name.lower() in (stem, stem + "s"):
                            self._add_join(c.id, y_id.id)

    def join_keys(self, a: str, b: str) -> list[tuple[str, str]]:
        """Key pairs joining tables ``a`` and ``b``, oriented (a-column, b-column)."""
        if a <= b:
            return list(self._joins.get((a, b), []))
        return [(r, l) for l, r in self._joins.get((b, a), [])]

    def neighbours(self, table: str) -> list[str]:
        out = []
        for (a, b) in sorted(self._joins):
            if a == table:
                out.append(b)
            elif b == table:
                out.append(a)
        return out

    def join_pairs(self) -> list[tuple[str, str, str, str]]:
        return [(a, b, l, r) for (a, b), pairs in sorted(self._joins.items()) for l, r in pairs]

    def resolve(self, name: str) -> str | None:
        """Map a table or column reference (any dotted suffix) to its full id."""
        name = name.strip().strip("`\"'").rstrip(",;")
        if name in self.columns or name in self.tables:
            return name
        low = name.lower()
        hits = [i for i in list(self.columns) + list(self.tables) if i.lower() == low or i.lower().endswith("." + low)]
        return hits[0] if len(hits) == 1 else None

    def brief(self, tables: Iterable[str]) -> dict[str, list[str]]:
        """Simplified context for action selection: ``name TYPE -- comment``."""
        out = {}
        for fqn in tables:
            t = self.tables[fqn]
            out[fqn] = [
                f"{c.name} {c.data_type}" + (f" -- {c.description}" if c.description else "") for c in t.columns
            ]
        return out

    def detailed(self, tables: Iterable[str]) -> dict[str, Any]:
        """Context for SQL writing: SQL table name plus column types, comments and samples."""
        out = {}
        for fqn in tables:
            t = self.tables[fqn]
            out[fqn] = {
                "sql_name": t.sql_name,
                "columns": {
                    c.name: {"type": c.data_type, "description": c.description or "", "samples": list(c.samples), "key": c.is_key}
                    for c in t.columns
                },
            }
            if t.group:
                out[fqn]["shared_field_group"] = t.group
        return out


def view_of(graph_or_view: SchemaGraph | SchemaView) -> SchemaView:
    return graph_or_view if isinstance(graph_or_view, SchemaView) else SchemaView(graph_or_view)


# -- tree ------------------------------------------------------------------------


@dataclass
class ExplorationNode:
    id: str
    parent: str | None
    state: QueryState
    depth: int = 0
    visit_count: int = 0
    failure_count: int = 0
    success_triplets: list[str] = field(default_factory=list)
    children: list[str] = field(default_factory=list)
    expanded: set[str] = field(default_factory=set)

    def summary(self) -> dict[str, Any]:
        return {
            "node": self.id,
            "depth": self.depth,
            "visits": self.visit_count,
            "failures": self.failure_count,
            "successes": len(self.success_triplets),
            "query_state": self.state.render(),
        }


class ExplorationTree:
    """Single-writer tree of query states; node ids are ``n<k>`` in creation order."""

    def __init__(self) -> None:
        self.root = ExplorationNode("n0", None, QueryState())
        self.nodes: dict[str, ExplorationNode] = {"n0": self.root}

    def __len__(self) -> int:
        return len(self.nodes)

    def add_child(self, parent: ExplorationNode, action: Action) -> ExplorationNode:
        key = action.render()
        if key in parent.expanded:
            raise ValueError(f"{parent.id} already expanded with {key}")
        node = ExplorationNode(f"n{len(self.nodes)}", parent.id, parent.state.extend(action), parent.depth + 1)
        self.nodes[node.id] = node
        parent.children.append(node.id)
        parent.expanded.add(key)
        return node

    def path(self, node: ExplorationNode) -> list[ExplorationNode]:
        """Nodes from the root down to ``node`` inclusive."""
        out = [node]
        while out[-1].parent is not None:
            out.append(self.nodes[out[-1].parent])
        return out[::-1]

    def excluded(self, node: ExplorationNode, threshold: int) -> bool:
        """True if ``node`` or any ancestor has reached the failure threshold."""
        return any(n.failure_count >= threshold for n in self.path(node))

    def to_dict(self) -> dict[str, Any]:
        return {
            nid: {
                "parent": n.parent,
                "actions": n.state.render(),
                "visits": n.visit_count,
                "failures": n.failure_count,
                "triplets": list(n.success_triplets),
            }
            for nid, n in self.nodes.items()
        }


# -- legal actions -----------------------------------------------------------------


def enumerate_legal_actions(node: ExplorationNode | QueryState, graph: SchemaGraph | SchemaView) -> list[Action]:
    view = view_of(graph)
    state = node.state if isinstance(node, ExplorationNode) else node
    out: list[Action] = []
    if not state.actions:
        for t in view.tables.values():
            out.extend(Action(ActionKind.SELECT_UNUSED_COLUMN, (c.id,)) for c in t.columns)
        out.extend(Action(ActionKind.INTRODUCE_JOIN, p) for p in view.join_pairs())
        return out

    scope = [t for t in state.joined_tables if t in view.tables]
    cols = [c for t in scope for c in view.tables[t].columns]
    selected = state.selected_columns
    used = state.used_columns
    for c in cols:
        taken = c.id in selected if c.is_key else c.id in used
        if not taken:
            out.append(Action(ActionKind.SELECT_UNUSED_COLUMN, (c.id,)))
    filtered = {p[0] for p in state.predicates}
    for c in cols:
        if not c.is_key and c.id not in filtered:
            out.append(Action(ActionKind.ADD_PREDICATE, (c.id, ">" if c.numeric else "=")))
    for t in scope:
        for u in view.neighbours(t):
            if u in scope:
                continue
            for l, r in view.join_keys(t, u):
                out.append(Action(ActionKind.INTRODUCE_JOIN, (t, u, l, r)))
    aggregated = {c for _, c in state.aggregations}
    if selected:
        for cid in selected:
            if cid in aggregated or cid in state.group_by:
                continue
            c = view.columns.get(cid)
            funcs = [f for f in AGGREGATES if f in ("COUNT", "MAX", "MIN") or (c is not None and c.numeric and not c.is_key)]
            out.extend(Action(ActionKind.APPLY_AGGREGATION, (f, cid)) for f in funcs)
    if state.has_aggregation:
        for cid in selected:
            if cid not in aggregated and cid not in state.group_by:
                out.append(Action(ActionKind.ADD_GROUP_BY, (cid,)))
    if selected and state.ordering is None:
        for cid in selected:
            out.extend(Action(ActionKind.ADD_ORDERING, (cid, d)) for d in ("ASC", "DESC"))
    if state.has_group_by:
        had = {(f, c) for f, c, _ in state.having}
        out.extend(Action(ActionKind.ADD_HAVING, (f, c, ">")) for f, c in state.aggregations if (f, c) not in had)
    return out


# -- outcomes and counters -------------------------------------------------------------


@dataclass
class SimulationOutcome:
    status: str
    sql: str | None = None
    description: str | None = None
    error_detail: str | None = None
    fragment: SchemaFragment | None = None

    def __post_init__(self) -> None:
        if self.status == SUCCESS and (self.sql is None or self.description is None):
            raise ValueError("a Success outcome needs both SQL and description")

    @property
    def ok(self) -> bool:
        return self.status == SUCCESS


@dataclass
class ExplorationStats:
    iterations: int = 0
    policy_calls: int = 0
    executor_calls: int = 0
    policy_faults: int = 0
    skipped_steps: int = 0
    outcomes: dict[str, int] = field(default_factory=dict)
    aborted: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "iterations": self.iterations,
            "policy_calls": self.policy_calls,
            "executor_calls": self.executor_calls,
            "policy_faults": self.policy_faults,
            "skipped_steps": self.skipped_steps,
            "outcomes": dict(sorted(self.outcomes.items())),
            "aborted": self.aborted,
        }


class NoCandidates(Exception):
    """Every node is either fully expanded or excluded."""


# -- selection and expansion ---------------------------------------------------------------


def frontier(tree: ExplorationTree, view: SchemaView, config: ExplorationConfig) -> list[tuple[ExplorationNode, list[Action]]]:
    """Offerable nodes with their unexpanded legal actions.

    Sorted by ascending failures, ascending visits, descending depth, then
    id, and cut to ``candidate_fanout``.
    """
    found = []
    for node in tree.nodes.values():
        if tree.excluded(node, config.failure_threshold):
            continue
        legal = [a for a in enumerate_legal_actions(node, view) if a.render() not in node.expanded]
        if legal:
            found.append((node, legal))
    found.sort(key=lambda p: (p[0].failure_count, p[0].visit_count, -p[0].depth, int(p[0].id[1:])))
    return found[: config.candidate_fanout]


_NODE_PREFIX = re.compile(r"^\s*`?(n\d+)\s*:\s*(.*)$", re.S)


def select_and_expand(
    tree: ExplorationTree,
    graph: SchemaGraph | SchemaView,
    policy: Gateway,
    config: ExplorationConfig | None = None,
    stats: ExplorationStats | None = None,
    observer: Callable[[list[str]], None] | None = None,
) -> ExplorationNode | None:
    """One policy-chosen expansion; ``None`` when the step was skipped after faults."""
    view = view_of(graph)
    config = config or ExplorationConfig()
    stats = stats if stats is not None else ExplorationStats()
    cands = frontier(tree, view, config)
    if not cands:
        raise NoCandidates("no expandable nodes remain")
    if observer is not None:
        observer([n.id for n, _ in cands])
    by_id = {n.id: (n, legal) for n, legal in cands}
    reach: list[str] = []
    for node, _ in cands:
        scope = node.state.joined_tables or list(view.tables)
        for t in scope:
            for u in [t, *view.neighbours(t)]:
                if u in view.tables and u not in reach:
                    reach.append(u)
    payload = {
        "query_state": cands[0][0].state.render(),
        "schema_context": view.brief(reach),
        "candidates": [
            {**n.summary(), "path": [p.id for p in tree.path(n)], "legal_actions": [a.render() for a in legal]}
            for n, legal in cands
        ],
    }
    offender = cands[0][0]
    for attempt in range(2):
        reply = policy.request(RequestKind.ACTION_SELECTION, **payload)
        text = reply.strip()
        m = _NODE_PREFIX.match(text)
        target = cands[0]
        if m:
            if m.group(1) not in by_id:
                stats.policy_faults += 1
                logger.info("policy fault: node %s is not a candidate", m.group(1))
                continue
            target = by_id[m.group(1)]
            text = m.group(2)
        offender = target[0]
        try:
            action = parse_action_response(text, target[1])
        except PolicyFault as exc:
            stats.policy_faults += 1
            logger.info("policy fault on %s (attempt %d): %s", target[0].id, attempt + 1, exc)
            continue
        return tree.add_child(target[0], action)
    offender.failure_count += 1
    stats.skipped_steps += 1
    return None


# -- simulation --------------------------------------------------------------------------


def fragment_of(state: QueryState, view: SchemaView) -> SchemaFragment:
    tables = [t for t in state.joined_tables]
    columns: list[str] = []
    for a in state.actions:
        for c in a.columns():
            if c not in columns:
                columns.append(c)
    joins = [(j[2], j[3]) for j in state.joins]
    groups = sorted({view.tables[t].group for t in tables if t in view.tables and view.tables[t].group})
    return SchemaFragment(tables, columns, joins, groups)


def simulate(
    node: ExplorationNode,
    graph: SchemaGraph | SchemaView,
    policy: Gateway,
    executor: Executor,
    config: ExplorationConfig | None = None,
) -> SimulationOutcome:
    """Realise ``node.state`` as SQL and validate it layer by layer."""
    view = view_of(graph)
    config = config or ExplorationConfig()
    state = node.state
    fragment = fragment_of(state, view)
    reply = policy.request(
        RequestKind.SQL_COMPLETION,
        stage="exploration",
        query_state=state.render(),
        schema_context=view.detailed(t for t in state.joined_tables if t in view.tables),
    )
    sql = extract_sql(reply)
    try:
        parse_check(sql)
    except SqlSyntaxError as exc:
        return SimulationOutcome(SYNTAX_ERROR, sql=sql, error_detail=str(exc), fragment=fragment)
    try:
        result = executor.execute(sql, row_limit=config.row_limit)
    except ExecutionError as exc:
        return SimulationOutcome(EXECUTION_ERROR, sql=sql, error_detail=exc.detail, fragment=fragment)
    cls = classify(result, sql)
    if cls is ResultClass.EMPTY:
        return SimulationOutcome(EMPTY_RESULT, sql=sql, fragment=fragment)
    if cls is ResultClass.TRIVIAL:
        return SimulationOutcome(TRIVIAL_RESULT, sql=sql, fragment=fragment)
    description = policy.request(
        RequestKind.NL_DESCRIPTION, fragment=fragment.to_dict(), sql=sql, query_state=state.render()
    ).strip()
    return SimulationOutcome(SUCCESS, sql=sql, description=description, fragment=fragment)


# -- backpropagation ---------------------------------------------------------------------


def _entity_nodes(fragment: SchemaFragment, view: SchemaView) -> list[str]:
    out = []
    for t in fragment.tables:
        out.append(table_id(t))
    for c in fragment.columns:
        info = view.columns.get(c)
        if info is not None and info.field_node not in out:
            out.append(info.field_node)
    return out


def backpropagate(
    tree: ExplorationTree,
    graph: SchemaGraph | SchemaView,
    node: ExplorationNode,
    outcome: SimulationOutcome,
    kb: KnowledgeBase | None = None,
    provenance: dict[str, Any] | None = None,
) -> tuple[Triplet | None, bool]:
    """Record ``outcome`` along the root path; returns (triplet, is_new).

    Visits count on every path node including the root. Failures count on
    every path node below the root, so the root itself is never excluded.
    """
    view = view_of(graph)
    path = tree.path(node)
    for n in path:
        n.visit_count += 1
    if not outcome.ok:
        for n in path[1:]:
            n.failure_count += 1
        return None, False
    if kb is None:
        raise ValueError("a successful outcome needs a knowledge base")
    prov = {"path": "/".join(n.id for n in path), "node": node.id, **(provenance or {})}
    trip, new = kb.add_triplet(outcome.fragment or fragment_of(node.state, view), outcome.sql or "", outcome.description or "", prov)
    for n in path[1:]:
        if trip.id not in n.success_triplets:
            n.success_triplets.append(trip.id)
    for nid in _entity_nodes(trip.fragment, view):
        if nid in view.graph.nodes and trip.id not in view.graph.feedback.get(nid, ()):
            view.graph.add_feedback(nid, trip.id)
    return trip, new


# -- driver ------------------------------------------------------------------------------


@dataclass
class ExplorationResult:
    triplets: list[Triplet]
    tree: ExplorationTree
    stats: ExplorationStats
    kb: KnowledgeBase

    def __iter__(self):
        return iter(self.triplets)

    def __len__(self) -> int:
        return len(self.triplets)


def run_exploration(
    graph: SchemaGraph,
    config: ExplorationConfig,
    policy: Gateway,
    executor: Executor,
    kb: KnowledgeBase | None = None,
    out: str | Path | None = None,
    clock: Callable[[], float] | None = None,
    observer: Callable[[list[str]], None] | None = None,
) -> ExplorationResult:
    """Explore until ``target_triplets`` new triplets exist or iterations run out.

    A backend that stays unavailable aborts the run; everything found so far
    is returned and, with ``out``, persisted.
    """
    view = SchemaView(graph)
    kb = kb if kb is not None else KnowledgeBase()
    if not kb.columns:
        kb.index_graph(graph)
    clock = clock or LogicalClock()
    tree = ExplorationTree()
    stats = ExplorationStats()
    found: list[Triplet] = []
    llm0, db0 = policy.llm_call_count, executor.db_call_count
    try:
        while len(found) < config.target_triplets and stats.iterations < config.max_iterations:
            try:
                child = select_and_expand(tree, view, policy, config, stats, observer)
            except NoCandidates:
                logger.info("exploration tree exhausted after %d iterations", stats.iterations)
                break
            stats.iterations += 1
            if child is None:
                tree.root.visit_count += 1
                continue
            outcome = simulate(child, view, policy, executor, config)
            stats.outcomes[outcome.status] = stats.outcomes.get(outcome.status, 0) + 1
            trip, new = backpropagate(
                tree, view, child, outcome, kb, {"iteration": stats.iterations, "created": clock()}
            )
            if new and trip is not None:
                found.append(trip)
            logger.debug("iteration %d: %s %s", stats.iterations, child.id, outcome.status)
    except BackendError as exc:
        stats.aborted = str(exc)
        logger.warning("exploration aborted after %d iterations: %s", stats.iterations, exc)
    finally:
        stats.policy_calls = policy.llm_call_count - llm0
        stats.executor_calls = executor.db_call_count - db0
        if out is not None:
            persist_kb(kb, out)
    return ExplorationResult(found, tree, stats, kb)


def stats_json(result: ExplorationResult) -> str:
    return json.dumps(result.stats.to_dict(), sort_keys=True, indent=1)
