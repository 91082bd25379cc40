"""A deterministic rule-based policy that needs no model endpoint.

It answers every request kind from the structured payload alone, so
exploration and synthesis can run end to end in tests and demos. Output
quality is modest by design: queries are literal renderings of the query
state and descriptions come from a template.
"""

from __future__ import annotations

import json
import random
from typing import Any

from .actions import Action, QueryState, short_name, table_of
from .gateway import PolicyRequest


def _sql_literal(value: str, numeric: bool) -> str:
    if numeric:
        try:
            float(value)
            return value
        except ValueError:
            pass
    return "'" + value.replace("'", "''") + "'"


def _numeric(col: dict[str, Any]) -> bool:
    t = str(col.get("type", "")).upper()
    return any(k in t for k in ("INT", "REAL", "FLOA", "DOUB", "NUM", "DEC"))


class _Ctx:
    def __init__(self, schema_context: dict[str, Any]) -> None:
        self.ctx = schema_context

    def table(self, fqn: str) -> str:
        info = self.ctx.get(fqn)
        return info["sql_name"] if info else short_name(fqn)

    def col(self, cid: str) -> str:
        return f"{self.table(table_of(cid))}.{short_name(cid)}"

    def info(self, cid: str) -> dict[str, Any]:
        return self.ctx.get(table_of(cid), {}).get("columns", {}).get(short_name(cid), {})


def render_state_sql(state: QueryState, schema_context: dict[str, Any]) -> str:
    """Literal SQLite rendering of a query state.

    Predicate values come from column samples: ``>`` compares with the
    smallest sample, ``<`` with the largest and ``=`` with the first; a
    column without samples gets ``IS NOT NULL``.
    """
    c = _Ctx(schema_context)
    aggs: dict[str, list[str]] = {}
    for f, col in state.aggregations:
        aggs.setdefault(col, []).append(f"{f}({c.col(col)})")
    items: list[str] = []
    for col in state.selected_columns:
        if col in aggs:
            items.extend(aggs[col])
        elif not aggs or col in state.group_by:
            items.append(c.col(col))
    select = ", ".join(items) if items else "*"

    tables = state.joined_tables
    sql = f"SELECT {select} FROM {c.table(tables[0])}"
    placed = [tables[0]]
    for t, u, l, r in state.joins:
        new = u if t in placed else t
        sql += f" JOIN {c.table(new)} ON {c.col(l)} = {c.col(r)}"
        placed.append(new)

    conds = []
    for col, op in state.predicates:
        info = c.info(col)
        samples = [str(s) for s in info.get("samples") or []]
        numeric = _numeric(info)
        if op == "NOT_NULL" or not samples:
            conds.append(f"{c.col(col)} IS NOT NULL")
            continue
        if op in (">", "<") and numeric:
            try:
                vals = sorted(samples, key=float)
            except ValueError:
                vals = samples
            conds.append(f"{c.col(col)} {op} {_sql_literal(vals[0] if op == '>' else vals[-1], True)}")
        else:
            conds.append(f"{c.col(col)} {op} {_sql_literal(samples[0], numeric)}")
    if conds:
        sql += " WHERE " + " AND ".join(conds)
    if state.group_by:
        sql += " GROUP BY " + ", ".join(c.col(g) for g in state.group_by)
    if state.having:
        hs = []
        for f, col, op in state.having:
            bound = "0" if f == "COUNT" or _numeric(c.info(col)) else "''"
            hs.append(f"{f}({c.col(col)}) {op} {bound}")
        sql += " HAVING " + " AND ".join(hs)
    if state.ordering:
        col, direction = state.ordering
        expr = aggs[col][0] if col in aggs else c.col(col)
        sql += f" ORDER BY {expr} {direction}"
    return sql


def describe_state(state: QueryState) -> str:
    """Template question for a query state."""
    names = [short_name(x) for x in state.selected_columns]
    agg = {col: f for f, col in state.aggregations}
    parts = [f"{agg[x].lower()} of {short_name(x)}" if x in agg else short_name(x) for x in state.selected_columns]
    tables = ", ".join(short_name(t) for t in state.joined_tables)
    text = f"Show {', '.join(parts) if names else 'all rows'} from {tables}"
    if state.predicates:
        text += " where " + " and ".join(
            f"{short_name(col)} is not null" if op == "NOT_NULL" else f"{short_name(col)} {op} a sample value"
            for col, op in state.predicates
        )
    if state.group_by:
        text += " for each " + ", ".join(short_name(g) for g in state.group_by)
    if state.ordering:
        text += f" ordered by {short_name(state.ordering[0])} {'ascending' if state.ordering[1] == 'ASC' else 'descending'}"
    return text + "."


class OfflinePolicy:
    """Backend answering from the payload; ``seed=None`` always takes the first option."""

    def __init__(self, seed: int | None = 0) -> None:
        self.seed = seed
        self.rng = random.Random(seed)

    def complete(self, request: PolicyRequest) -> str:
        handler = getattr(self, "on_" + request.kind.value)
        return handler(request.payload)

    def on_ActionSelection(self, payload: dict[str, Any]) -> str:
        cands = [c for c in payload["candidates"] if c["legal_actions"]]
        if self.seed is None:
            cand = cands[0]
            return f"{cand['node']}: {cand['legal_actions'][0]}"
        cand = self.rng.choice(cands)
        return f"{cand['node']}: {self.rng.choice(cand['legal_actions'])}"

    def on_SqlCompletion(self, payload: dict[str, Any]) -> str:
        if payload["stage"] == "deployment":
            examples = payload.get("examples") or []
            if examples:
                # prefer the example touching most context columns; ties keep retrieval order
                tables = payload["schema_context"].get("tables", {})
                wanted = {f"{t}.{c}" for t, info in tables.items() for c in info.get("columns", {})}
                best = max(examples, key=lambda ex: len(wanted & set(ex["fragment"].get("columns", []))))
                return best["sql"]
            for info in payload["schema_context"].get("tables", {}).values():
                if info.get("columns"):
                    cols = ", ".join(list(info["columns"])[:3])
                    return f"SELECT {cols} FROM {info['sql_name']}"
            return "SELECT 1"
        state = QueryState(tuple(Action.parse(a) for a in payload.get("query_state") or ()))
        return render_state_sql(state, payload["schema_context"])

    def on_NlDescription(self, payload: dict[str, Any]) -> str:
        if payload.get("query_state"):
            return describe_state(QueryState(tuple(Action.parse(a) for a in payload["query_state"])))
        cols = payload["fragment"].get("columns", [])
        tables = payload["fragment"].get("tables", [])
        if not cols:
            return f"Show all rows from {', '.join(short_name(t) for t in tables)}."
        return f"Show {', '.join(short_name(c) for c in cols)} from {', '.join(short_name(t) for t in tables)}."

    def on_KeywordExtraction(self, payload: dict[str, Any]) -> str:
        from .deployment import fallback_keywords

        return json.dumps(fallback_keywords(payload["question"]))

    def on_ContextExpansion(self, payload: dict[str, Any]) -> str:
        pairs = payload.get("join_candidates") or []
        if not pairs:
            return "NONE"
        lines = []
        for left, right in pairs:
            for col in (left, right):
                if col not in lines:
                    lines.append(col)
        lines += [f"JOIN {l} = {r}" for l, r in pairs]
        return "\n".join(lines)

    def on_FidelityJudgment(self, payload: dict[str, Any]) -> str:
        return "YES"

