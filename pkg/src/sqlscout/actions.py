"""Exploration action space and the partial-query state built from it.

Actions render to a strict one-line grammar::

    SelectUnusedColumn <column>
    AddPredicateConstraint <column> <op>            op: > < = NOT_NULL
    IntroduceJoin <left_table> <right_table> <left_column> <right_column>
    ApplyAggregationFunction <FUNC> <column>         FUNC: COUNT SUM AVG MAX MIN
    AddGroupByClause <column>
    AddOrderingClause <column> <ASC|DESC>
    AddHavingClause <FUNC> <column> <op>

Tables and columns are fully-qualified (``db.schema.table[.column]``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property


class ActionKind(str, enum.Enum):
    SELECT_UNUSED_COLUMN = "SelectUnusedColumn"
    ADD_PREDICATE = "AddPredicateConstraint"
    INTRODUCE_JOIN = "IntroduceJoin"
    APPLY_AGGREGATION = "ApplyAggregationFunction"
    ADD_GROUP_BY = "AddGroupByClause"
    ADD_ORDERING = "AddOrderingClause"
    ADD_HAVING = "AddHavingClause"


AGGREGATES = ("COUNT", "SUM", "AVG", "MAX", "MIN")
PREDICATE_OPS = (">", "<", "=", "NOT_NULL")
DIRECTIONS = ("ASC", "DESC")

_ARITY = {
    ActionKind.SELECT_UNUSED_COLUMN: 1,
    ActionKind.ADD_PREDICATE: 2,
    ActionKind.INTRODUCE_JOIN: 4,
    ActionKind.APPLY_AGGREGATION: 2,
    ActionKind.ADD_GROUP_BY: 1,
    ActionKind.ADD_ORDERING: 2,
    ActionKind.ADD_HAVING: 3,
}


class PolicyFault(Exception):
    """The policy answered with something that is not a legal action."""


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    args: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.args) != _ARITY[self.kind]:
            raise ValueError(f"{self.kind.value} takes {_ARITY[self.kind]} arguments")
        if self.kind in (ActionKind.APPLY_AGGREGATION, ActionKind.ADD_HAVING) and self.args[0] not in AGGREGATES:
            raise ValueError(f"unknown aggregate {self.args[0]}")

    def render(self) -> str:
        return " ".join((self.kind.value, *self.args))

    __str__ = render

    @classmethod
    def parse(cls, text: str) -> "Action":
        parts = text.split()
        if not parts:
            raise PolicyFault("empty action")
        try:
            kind = ActionKind(parts[0])
        except ValueError:
            raise PolicyFault(f"unknown action kind {parts[0]!r}") from None
        try:
            return cls(kind, tuple(parts[1:]))
        except ValueError as exc:
            raise PolicyFault(str(exc)) from None

    def columns(self) -> list[str]:
        k, a = self.kind, self.args
        if k in (ActionKind.SELECT_UNUSED_COLUMN, ActionKind.ADD_PREDICATE, ActionKind.ADD_GROUP_BY, ActionKind.ADD_ORDERING):
            return [a[0]]
        if k in (ActionKind.APPLY_AGGREGATION, ActionKind.ADD_HAVING):
            return [a[1]]
        return [a[2], a[3]]

    def tables(self) -> list[str]:
        if self.kind is ActionKind.INTRODUCE_JOIN:
            return [self.args[0], self.args[1]]
        return [table_of(c) for c in self.columns()]


def table_of(column: str) -> str:
    return column.rsplit(".", 1)[0]


def short_name(name: str) -> str:
    return name.rsplit(".", 1)[-1]


@dataclass(frozen=True)
class QueryState:
    """Partial query described by the ordered actions that built it.

    Every flag is derived from ``actions``, so it cannot drift from them.
    """

    actions: tuple[Action, ...] = ()

    def extend(self, action: Action) -> "QueryState":
        return QueryState(self.actions + (action,))

    def _of(self, kind: ActionKind) -> list[Action]:
        return [a for a in self.actions if a.kind is kind]

    @cached_property
    def selected_columns(self) -> list[str]:
        return [a.args[0] for a in self._of(ActionKind.SELECT_UNUSED_COLUMN)]

    @cached_property
    def joined_tables(self) -> list[str]:
        seen: list[str] = []
        for a in self.actions:
            for t in a.tables():
                if t not in seen:
                    seen.append(t)
        return seen

    @cached_property
    def joins(self) -> list[tuple[str, str, str, str]]:
        return [tuple(a.args) for a in self._of(ActionKind.INTRODUCE_JOIN)]  # type: ignore[misc]

    @cached_property
    def predicates(self) -> list[tuple[str, str]]:
        return [(a.args[0], a.args[1]) for a in self._of(ActionKind.ADD_PREDICATE)]

    @cached_property
    def aggregations(self) -> list[tuple[str, str]]:
        return [(a.args[0], a.args[1]) for a in self._of(ActionKind.APPLY_AGGREGATION)]

    @cached_property
    def group_by(self) -> list[str]:
        return [a.args[0] for a in self._of(ActionKind.ADD_GROUP_BY)]

    @cached_property
    def ordering(self) -> tuple[str, str] | None:
        found = self._of(ActionKind.ADD_ORDERING)
        return (found[-1].args[0], found[-1].args[1]) if found else None

    @cached_property
    def having(self) -> list[tuple[str, str, str]]:
        return [tuple(a.args) for a in self._of(ActionKind.ADD_HAVING)]  # type: ignore[misc]

    @property
    def constraint_count(self) -> int:
        return len(self.predicates) + len(self.having)

    @property
    def has_aggregation(self) -> bool:
        return bool(self.aggregations)

    @property
    def has_group_by(self) -> bool:
        return bool(self.group_by)

    @cached_property
    def used_columns(self) -> set[str]:
        return {c for a in self.actions for c in a.columns()}

    def render(self) -> list[str]:
        return [a.render() for a in self.actions]


def _arg_matches(given: str, full: str) -> bool:
    g, f = given.lower(), full.lower()
    return g == f or f.endswith("." + g)


def parse_action_response(text: str, legal: list[Action]) -> Action:
    """Parse a policy reply into one of ``legal``.

    The first non-empty line is read as ``<ActionKind> <arg>...``. Arguments
    may be shortened to any dotted suffix (``users.age`` for
    ``shop.main.users.age``); a join may omit its key columns. The first
    legal action that matches wins.
    """
    if not legal:
        raise ValueError("no legal actions to choose from")
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise PolicyFault("empty policy response")
    parts = lines[0].strip("`").split()
    try:
        kind = ActionKind(parts[0])
    except ValueError:
        raise PolicyFault(f"unparseable action response {lines[0]!r}") from None
    args = parts[1:]
    for action in legal:
        if action.kind is not kind or len(args) > len(action.args):
            continue
        partial_join = kind is ActionKind.INTRODUCE_JOIN and len(args) >= 2
        if len(args) != len(action.args) and not partial_join:
            continue
        if all(_arg_matches(g, f) for g, f in zip(args, action.args)):
            return action
    raise PolicyFault(f"illegal action {lines[0]!r}")
