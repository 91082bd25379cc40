"""Question-to-SQL synthesis with iterative context refinement.

One session alternates two roles. The information side extracts keywords,
grounds them in the column index, lets the policy add missing join keys and
prunes components a failed attempt did not use. The generation side
retrieves similar validated triplets as examples, writes SQL, runs it and
asks the policy whether the rows answer the question. A failure feeds the
next iteration; the loop stops at the first accepted query or after
``max_iterations``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .actions import short_name
from .explorer import SchemaView, view_of
from .gateway import BackendError, Gateway, RequestKind
from .knowledge_base import DEFAULT_TOP_K, KnowledgeBase, retrieve_columns, retrieve_triplets
from .schema_graph import SchemaGraph
from .sql_exec import (
    ExecutionError,
    ExecutionResult,
    Executor,
    SqlSyntaxError,
    extract_sql,
    identifier_tokens,
    parse_check,
)
from .tracking import Transcript

logger = logging.getLogger(__name__)

RETRIEVED = "retrieved"
EXPANDED = "expanded"
EXECUTION_FAILED = "ExecutionFailed"
SEMANTIC_MISMATCH = "SemanticMismatch"
SUCCESS = "Success"
FAILURE = "Failure"

STOPWORDS = frozenset(
    """a an and are as at be by can do does for from give has have how i in is it list me
    many much of on or per show should that the their there these this to was were what
    when where which who whose will with all any each every find get tell please return""".split()
)


@dataclass
class SynthesisConfig:
    max_iterations: int = 5
    top_k: int = DEFAULT_TOP_K
    fidelity_check_enabled: bool = True
    result_preview_rows: int = 20
    result_preview_chars: int = 2000

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class SchemaContext:
    """Ordered components (column and table ids) tagged by origin, plus join hints."""

    components: dict[str, str] = field(default_factory=dict)
    tables: set[str] = field(default_factory=set)
    join_hints: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        for left, right in self.join_hints:
            if left not in self.components or right not in self.components:
                raise ValueError(f"join hint {left} = {right} has an endpoint outside the context")

    def __len__(self) -> int:
        return len(self.components)

    def __contains__(self, item: str) -> bool:
        return item in self.components

    def add(self, cid: str, origin: str, is_table: bool = False) -> None:
        self.components.setdefault(cid, origin)
        if is_table:
            self.tables.add(cid)

    def column_ids(self) -> list[str]:
        return [c for c in self.components if c not in self.tables]

    def table_ids(self) -> list[str]:
        return [c for c in self.components if c in self.tables]

    def copy(self) -> "SchemaContext":
        return SchemaContext(dict(self.components), set(self.tables), list(self.join_hints))

    def to_dict(self) -> dict[str, Any]:
        return {
            "components": [[c, o, "table" if c in self.tables else "column"] for c, o in self.components.items()],
            "join_hints": [list(h) for h in self.join_hints],
        }


@dataclass
class FeedbackInfo:
    failed_sql: str
    context: SchemaContext
    reason: str
    unused: list[str]

    def to_dict(self) -> dict[str, Any]:
        return {"failed_sql": self.failed_sql, "reason": self.reason, "unused": list(self.unused)}


@dataclass
class IterationRecord:
    index: int
    keywords: list[str]
    grounded: list[str]
    context: list[str]
    examples: list[str]
    sql: str | None
    outcome: str
    detail: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class SynthesisResult:
    status: str
    final_sql: str | None
    iterations_used: int
    llm_call_count: int
    db_call_count: int
    transcript: Transcript
    iterations: list[IterationRecord] = field(default_factory=list)
    feedback: list[FeedbackInfo | None] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == SUCCESS

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "final_sql": self.final_sql,
            "iterations_used": self.iterations_used,
            "llm_call_count": self.llm_call_count,
            "db_call_count": self.db_call_count,
            "iterations": [r.to_dict() for r in self.iterations],
            "transcript": json.loads(self.transcript.to_json()),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, ensure_ascii=False)


# -- information side ---------------------------------------------------------------


def fallback_keywords(question: str) -> list[str]:
    """Lower-cased word tokens minus :data:`STOPWORDS`, first occurrence order."""
    words = re.findall(r"[^\W_]+(?:_[^\W_]+)*", question.lower())
    kept = [w for w in words if w not in STOPWORDS] or words
    return list(dict.fromkeys(kept))


def _parse_keywords(reply: str) -> list[str]:
    text = extract_sql(reply)
    try:
        doc = json.loads(text)
        if isinstance(doc, list):
            return [str(k).strip() for k in doc if str(k).strip()]
    except json.JSONDecodeError:
        pass
    return [k.strip(" -*\"'") for k in re.split(r"[,\n]", text) if k.strip(" -*\"'")]


def extract_keywords(question: str, policy: Gateway, failure_reason: str | None = None) -> list[str]:
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    payload: dict[str, Any] = {"question": question}
    if failure_reason:
        payload["failure_reason"] = failure_reason
    try:
        keywords = _parse_keywords(policy.request(RequestKind.KEYWORD_EXTRACTION, **payload))
    except BackendError as exc:
        logger.warning("keyword extraction failed, using fallback: %s", exc)
        keywords = []
    return keywords or fallback_keywords(question)


def ground_schema(keywords: Iterable[str], question: str, kb: KnowledgeBase, k: int = DEFAULT_TOP_K) -> SchemaContext:
    """Best ``k`` columns over the question and each keyword, with their tables.

    A column found by several queries keeps its highest score; the merged
    list is ordered by descending score, then ascending id.
    """
    best: dict[str, float] = {}
    for query in [question, *keywords]:
        for cid, score in retrieve_columns(query, kb, k):
            if score > best.get(cid, float("-inf")):
                best[cid] = score
    ctx = SchemaContext()
    for cid, _ in sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:k]:
        ctx.add(cid, RETRIEVED)
        ctx.add(kb.columns[cid].table_id, RETRIEVED, is_table=True)
    return ctx


def join_candidates(context: SchemaContext, view: SchemaView) -> list[tuple[str, str]]:
    tables = sorted({t for t in context.table_ids() if t in view.tables})
    out = []
    for i, a in enumerate(tables):
        for b in tables[i + 1 :]:
            out.extend(view.join_keys(a, b))
    return out


def expand_context(
    question: str, context: SchemaContext, graph: SchemaGraph | SchemaView, policy: Gateway
) -> SchemaContext:
    """Admit the policy's proposed components and ``JOIN a = b`` lines that exist in the graph."""
    view = view_of(graph)
    try:
        reply = policy.request(
            RequestKind.CONTEXT_EXPANSION,
            question=question,
            components=list(context.components),
            join_candidates=[list(p) for p in join_candidates(context, view)],
        )
    except BackendError as exc:
        logger.warning("context expansion failed, keeping context: %s", exc)
        return context
    out = context.copy()

    def admit(ref: str) -> str | None:
        cid = view.resolve(ref)
        if cid is None:
            logger.info("dropping unknown component %r", ref)
            return None
        if cid in view.tables:
            out.add(cid, EXPANDED, is_table=True)
        else:
            out.add(view.columns[cid].table, EXPANDED, is_table=True)
            out.add(cid, EXPANDED)
        return cid

    for line in extract_sql(reply).splitlines():
        line = line.strip().lstrip("-* ").strip()
        if not line or line.upper() == "NONE":
            continue
        m = re.match(r"JOIN\s+(\S+)\s*=\s*(\S+)$", line, re.I)
        if m:
            # a join is admitted whole or not at all
            left, right = view.resolve(m.group(1)), view.resolve(m.group(2))
            if left not in view.columns or right not in view.columns:
                logger.info("dropping join with unknown endpoint: %r", line)
                continue
            admit(left)
            admit(right)
            if (left, right) not in out.join_hints:
                out.join_hints.append((left, right))
            continue
        admit(line)
    return out


def referenced_components(sql: str, context: SchemaContext) -> set[str]:
    """Components whose unqualified name appears as an identifier token of ``sql``."""
    words = identifier_tokens(sql)
    return {c for c in context.components if short_name(c).lower() in words or c.lower() in words}


def unused_components(sql: str, context: SchemaContext) -> list[str]:
    used = referenced_components(sql, context)
    return [c for c in context.components if c not in used]


def prune_context(context: SchemaContext, feedback: FeedbackInfo | None) -> SchemaContext:
    """Drop components the last failed attempt left unused.

    Components the failed SQL references always stay; if pruning would leave
    nothing, the context is kept whole.
    """
    if feedback is None:
        return context
    keep = referenced_components(feedback.failed_sql, context)
    drop = set(feedback.unused) - keep
    out = SchemaContext(
        {c: o for c, o in context.components.items() if c not in drop},
        {t for t in context.tables if t not in drop},
    )
    if not out.components:
        return context
    out.join_hints = [h for h in context.join_hints if h[0] in out.components and h[1] in out.components]
    return out


# -- generation side ----------------------------------------------------------------


def context_payload(context: SchemaContext, view: SchemaView) -> dict[str, Any]:
    tables: dict[str, Any] = {}
    for cid in context.components:
        if cid in view.tables:
            tables.setdefault(cid, {"sql_name": view.tables[cid].sql_name, "columns": {}})
    for cid in context.column_ids():
        col = view.columns.get(cid)
        if col is None:
            continue
        entry = tables.setdefault(col.table, {"sql_name": view.tables[col.table].sql_name, "columns": {}})
        entry["columns"][col.name] = {"type": col.data_type, "description": col.description or "", "samples": list(col.samples)}
    for fqn, entry in tables.items():
        if not entry["columns"]:
            entry["columns"] = {
                c.name: {"type": c.data_type, "description": c.description or "", "samples": list(c.samples)}
                for c in view.tables[fqn].columns
            }
    return {"tables": tables, "joins": [list(h) for h in context.join_hints]}


def generate_sql(
    question: str,
    context: SchemaContext,
    examples: list[tuple[Any, float]],
    policy: Gateway,
    graph: SchemaGraph | SchemaView,
) -> str:
    """Candidate SQL from the policy, code fences removed."""
    view = view_of(graph)
    reply = policy.request(
        RequestKind.SQL_COMPLETION,
        stage="deployment",
        question=question,
        schema_context=context_payload(context, view),
        examples=[
            {"id": t.id, "sql": t.sql, "description": t.description, "fragment": t.fragment.to_dict(), "score": s}
            for t, s in examples
        ],
    )
    return extract_sql(reply)


def result_preview(result: ExecutionResult, rows: int = 20, chars: int = 2000) -> str:
    lines = [" | ".join(result.columns)]
    lines += [" | ".join("NULL" if v is None else str(v) for v in row) for row in result.rows[:rows]]
    text = "\n".join(lines)
    return text if len(text) <= chars else text[:chars] + "\n..."


def check_fidelity(
    question: str,
    result_text: str,
    policy: Gateway,
    config: SynthesisConfig | None = None,
    sql: str = "",
) -> bool:
    """Policy verdict on whether the previewed rows answer the question."""
    config = config or SynthesisConfig()
    if not config.fidelity_check_enabled:
        return True
    try:
        reply = policy.request(RequestKind.FIDELITY_JUDGMENT, question=question, sql=sql, result_preview=result_text)
    except BackendError as exc:
        logger.warning("fidelity check failed, treating as mismatch: %s", exc)
        return False
    return reply.strip().upper().startswith("YES")


# -- the loop -------------------------------------------------------------------------


def synthesize(
    question: str,
    graph: SchemaGraph | SchemaView,
    kb: KnowledgeBase,
    executor: Executor,
    policy: Gateway,
    config: SynthesisConfig | None = None,
    clock: Callable[[], float] | None = None,
) -> SynthesisResult:
    """Run one session; a Failure result is a normal return, not an error."""
    config = config or SynthesisConfig()
    view = view_of(graph)
    transcript = Transcript(clock)
    gw = policy.with_transcript(transcript)
    ex = executor.with_transcript(transcript)
    feedback: FeedbackInfo | None = None
    records: list[IterationRecord] = []
    history: list[FeedbackInfo | None] = []

    def finish(status: str, sql: str | None) -> SynthesisResult:
        return SynthesisResult(status, sql, len(records), transcript.llm_calls, transcript.db_calls, transcript, records, history)

    for i in range(1, config.max_iterations + 1):
        transcript.note("iteration", index=i, feedback=feedback.to_dict() if feedback else None)
        history.append(feedback)
        keywords = extract_keywords(question, gw, feedback.reason if feedback else None)
        grounded = ground_schema(keywords, question, kb, config.top_k)
        ctx = expand_context(question, grounded, view, gw) if grounded.components else grounded
        ctx = prune_context(ctx, feedback)
        examples = retrieve_triplets(question, kb, config.top_k)
        rec = IterationRecord(i, keywords, list(grounded.components), list(ctx.components), [t.id for t, _ in examples], None, "")
        records.append(rec)
        if not ctx.components:
            rec.outcome, rec.detail = "NoContext", "no schema components retrieved"
            feedback = None
            continue
        try:
            sql = generate_sql(question, ctx, examples, gw, view)
        except BackendError as exc:
            rec.outcome, rec.detail = "NoCandidate", str(exc)
            feedback = None
            continue
        rec.sql = sql
        try:
            parse_check(sql)
            result = ex.execute(sql)
            if not result.rows:
                raise ExecutionError("empty result")
        except (SqlSyntaxError, ExecutionError) as exc:
            rec.outcome, rec.detail = EXECUTION_FAILED, str(exc)
            feedback = FeedbackInfo(sql, ctx, EXECUTION_FAILED, unused_components(sql, ctx))
            continue
        preview = result_preview(result, config.result_preview_rows, config.result_preview_chars)
        if not check_fidelity(question, preview, gw, config, sql):
            rec.outcome = SEMANTIC_MISMATCH
            feedback = FeedbackInfo(sql, ctx, SEMANTIC_MISMATCH, unused_components(sql, ctx))
            continue
        rec.outcome = SUCCESS
        transcript.note("accepted", index=i)
        return finish(SUCCESS, sql)
    transcript.note("exhausted", iterations=len(records))
    return finish(FAILURE, None)
