"""Prompt templates for every policy request kind.

These wordings are our own; the live backend sends them as a system and a
user message, and the transcript digests the rendered text.
"""

from __future__ import annotations

import json
from typing import Any

SYSTEM = {
    "ActionSelection": (
        "You are exploring an unfamiliar relational database to learn how its tables "
        "and columns can be combined into meaningful SQL queries."
    ),
    "SqlCompletion": "You are an expert SQL data analyst.",
    "NlDescription": "You write one-sentence natural-language questions that a SQL query answers.",
    "KeywordExtraction": "You extract the semantic keywords a database search needs from a question.",
    "ContextExpansion": "You are a database expert.",
    "FidelityJudgment": "You check whether a query result actually answers a user's question.",
}

ACTION_SELECTION = """Current query state (actions so far):
{query_state}

Reachable schema context:
{schema_context}

Candidate nodes you may expand, with their history and legal next actions:
{candidates}

Choose the single most promising next action. Prefer combinations that have not
failed before. Reply with exactly one line:
<node-id>: <ActionKind> <arg> ...
copying the action from the candidate list."""

SQL_EXPLORATION = """Query state to realise:
{query_state}

Schema context:
{schema_context}

Write one complete, executable SQLite query that is consistent with this query
state. Prioritise tables and columns that have documentation or comments.
Reply with the SQL only."""

SQL_DEPLOYMENT = """Schema context:
{schema_context}
{examples_block}
User question:
{question}

Write one SQLite query that answers the question. Reply with the SQL only."""

EXAMPLES_BLOCK = """
Examples of validated queries on this database:
{examples}
"""

NL_DESCRIPTION = """Schema fragment:
{fragment}

SQL query:
{sql}

Write the question this query answers, in one sentence."""

KEYWORDS = """Question:
{question}
{failure}
List the keywords (entities, measures, filters) needed to find the relevant
tables and columns. Reply with a JSON array of strings."""

CONTEXT_EXPANSION = """User question:
{question}

Retrieved schema components:
{components}

Known key relationships between the tables above:
{join_candidates}

Given the user query and the retrieved schema fragments, analyze the
relationships. If two tables are required but no join condition is present,
identify and add the primary/foreign keys necessary to form a valid SQL join.
Reply with one fully-qualified component per line, and one line
JOIN <left_column> = <right_column> per join you need. Reply NONE if nothing
is missing."""

FIDELITY = """User question:
{question}

Query:
{sql}

First rows of the result:
{result_preview}

Does this result answer the question? Reply YES or NO."""


def _j(value: Any) -> str:
    return json.dumps(value, indent=1, ensure_ascii=False, sort_keys=True)


def render_user_prompt(kind: str, payload: dict[str, Any]) -> str:
    if kind == "ActionSelection":
        return ACTION_SELECTION.format(
            query_state="\n".join(payload.get("query_state") or ["(empty)"]),
            schema_context=_j(payload["schema_context"]),
            candidates=_j(payload["candidates"]),
        )
    if kind == "SqlCompletion":
        if payload.get("stage") == "deployment":
            examples = payload.get("examples") or []
            block = ""
            if examples:
                block = EXAMPLES_BLOCK.format(
                    examples="\n".join(
                        f"-- {ex['description']}\n{ex['sql']}\n-- uses: {', '.join(ex['fragment'].get('columns', []))}"
                        for ex in examples
                    )
                )
            return SQL_DEPLOYMENT.format(
                schema_context=_j(payload["schema_context"]),
                examples_block=block,
                question=payload["question"],
            )
        return SQL_EXPLORATION.format(
            query_state="\n".join(payload.get("query_state") or ["(empty)"]),
            schema_context=_j(payload["schema_context"]),
        )
    if kind == "NlDescription":
        return NL_DESCRIPTION.format(fragment=_j(payload["fragment"]), sql=payload["sql"])
    if kind == "KeywordExtraction":
        reason = payload.get("failure_reason")
        failure = f"\nThe previous attempt failed ({reason}); look for keywords that were overlooked.\n" if reason else ""
        return KEYWORDS.format(question=payload["question"], failure=failure)
    if kind == "ContextExpansion":
        return CONTEXT_EXPANSION.format(
            question=payload["question"],
            components="\n".join(payload["components"]),
            join_candidates="\n".join(" = ".join(p) for p in payload.get("join_candidates", [])) or "(none)",
        )
    if kind == "FidelityJudgment":
        return FIDELITY.format(
            question=payload["question"], sql=payload.get("sql", ""), result_preview=payload["result_preview"]
        )
    raise ValueError(f"unknown request kind {kind}")


def render_messages(kind: str, payload: dict[str, Any]) -> list[dict[str, str]]:
    return [
        {"role": "system", "content": SYSTEM[kind]},
        {"role": "user", "content": render_user_prompt(kind, payload)},
    ]
