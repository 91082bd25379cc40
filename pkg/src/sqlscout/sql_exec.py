"""Syntax checking, bounded read-only execution and result comparison.

The target dialect is SQLite. Database locators:

* ``path/to/file.sqlite`` - an existing database file, opened read-only
* ``path/to/script.sql`` - a SQL script, built into an in-memory database
* ``fixture:<name>`` - one of the scripts shipped in ``sqlscout/fixtures``
* ``:memory:`` - an empty in-memory database
"""

from __future__ import annotations

import enum
import logging
import math
import re
import sqlite3
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from sqlglot.dialects.sqlite import SQLite
from sqlglot.errors import TokenError
from sqlglot.tokens import Token, TokenType

from .tracking import Transcript

logger = logging.getLogger(__name__)

FLOAT_REL_TOL = 1e-6

_dialect = SQLite()
_SYNTAX_MARKERS = ("syntax error", "incomplete input", "unrecognized token")
_NEAR = re.compile(r'near "(.*)": syntax error', re.S)
_UNRECOGNIZED = re.compile(r"unrecognized token: \"(.*)\"", re.S)


class SqlSyntaxError(Exception):
    def __init__(self, message: str, position: int = 0, offset: int | None = None) -> None:
        super().__init__(f"{message} (token {position})")
        self.message = message
        self.position = position  # 1-based token index; len(tokens)+1 means end of input
        self.offset = offset


class MultiStatementError(SqlSyntaxError):
    pass


class ExecutionError(Exception):
    def __init__(self, detail: str, timeout: bool = False) -> None:
        super().__init__(detail)
        self.detail = detail
        self.timeout = timeout


# -- locators --------------------------------------------------------------


def fixture_script(name: str) -> str:
    return resources.files("sqlscout.fixtures").joinpath(f"{name}.sql").read_text(encoding="utf-8")


def locator_name(locator: str) -> str:
    if locator.startswith("fixture:"):
        return locator.split(":", 1)[1]
    if locator == ":memory:":
        return "memory"
    return Path(locator).stem


def open_database(locator: str, readonly: bool = True) -> sqlite3.Connection:
    """Open a fresh connection for ``locator`` (see module docstring)."""
    if locator.startswith("fixture:") or locator.endswith(".sql"):
        if locator.startswith("fixture:"):
            script = fixture_script(locator.split(":", 1)[1])
        else:
            script = Path(locator).read_text(encoding="utf-8")
        conn = sqlite3.connect(":memory:", check_same_thread=False)
        conn.executescript(script)
    elif locator == ":memory:":
        conn = sqlite3.connect(":memory:", check_same_thread=False)
    else:
        path = Path(locator)
        if not path.is_file():
            raise FileNotFoundError(f"no database at {locator}")
        conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True, check_same_thread=False)
    if readonly:
        conn.execute("PRAGMA query_only = ON")
    return conn


# -- syntax ----------------------------------------------------------------


def tokenize(sql: str) -> list[Token]:
    try:
        return _dialect.tokenize(sql)
    except TokenError as exc:
        raise SqlSyntaxError(f"unterminated or invalid token: {exc}", 0) from exc


_FENCE = re.compile(r"```(?:sql|sqlite)?\s*\n?(.*?)```", re.S | re.I)


def extract_sql(text: str) -> str:
    """The SQL inside the first code fence of a reply, else the whole reply, stripped."""
    m = _FENCE.search(text)
    return (m.group(1) if m else text).strip()


def split_statements(tokens: Sequence[Token]) -> list[list[Token]]:
    statements: list[list[Token]] = [[]]
    for tok in tokens:
        if tok.token_type == TokenType.SEMICOLON:
            statements.append([])
        else:
            statements[-1].append(tok)
    return [s for s in statements if s]


_syntax_local = threading.local()


def _syntax_conn() -> sqlite3.Connection:
    conn = getattr(_syntax_local, "conn", None)
    if conn is None:
        conn = sqlite3.connect(":memory:")
        conn.execute("PRAGMA query_only = ON")
        _syntax_local.conn = conn
    return conn


def parse_check(sql: str) -> list[Token]:
    """Accept exactly one syntactically valid SQLite statement.

    Returns the statement's tokens. Raises :class:`SqlSyntaxError` with a
    1-based token position, or :class:`MultiStatementError`.
    """
    if not sql or not sql.strip():
        raise SqlSyntaxError("empty statement", 0)
    tokens = tokenize(sql)
    statements = split_statements(tokens)
    if not statements:
        raise SqlSyntaxError("empty statement", 0)
    if len(statements) > 1:
        second = statements[1][0]
        raise MultiStatementError(
            "multiple statements are not allowed", tokens.index(second) + 1, second.start
        )
    body = statements[0]
    text = sql[body[0].start : body[-1].end + 1]
    try:
        # compiles against an empty schema: name resolution errors are not syntax errors
        _syntax_conn().execute("EXPLAIN " + text)
    except sqlite3.Warning as exc:
        raise MultiStatementError(str(exc), len(body) + 1) from exc
    except sqlite3.Error as exc:
        msg = str(exc)
        if any(m in msg for m in _SYNTAX_MARKERS):
            pos, off = _locate(msg, sql, body)
            raise SqlSyntaxError(msg, pos, off) from exc
    return body


def _locate(msg: str, sql: str, body: Sequence[Token]) -> tuple[int, int | None]:
    m = _NEAR.search(msg) or _UNRECOGNIZED.search(msg)
    if m:
        near = m.group(1)
        for i, tok in enumerate(body, 1):
            if sql[tok.start : tok.end + 1].startswith(near) or near.startswith(sql[tok.start : tok.end + 1]):
                return i, tok.start
        off = sql.find(near)
        if off >= 0:
            before = sum(1 for t in body if t.start < off)
            return before + 1, off
    return len(body) + 1, None


def identifier_tokens(sql: str) -> set[str]:
    """Lower-cased identifier-like tokens (dotted names split), strings and numbers excluded."""
    try:
        tokens = _dialect.tokenize(sql)
    except TokenError:
        return {w.lower() for w in re.findall(r"[A-Za-z_][A-Za-z0-9_]*", sql)}
    out = set()
    for tok in tokens:
        if tok.token_type in (TokenType.STRING, TokenType.NUMBER):
            continue
        for word in re.findall(r"[^\W\d][\w$]*", tok.text):
            out.add(word.lower())
    return out


def has_top_level_order_by(sql: str) -> bool:
    depth = 0
    try:
        tokens = _dialect.tokenize(sql)
    except TokenError:
        return False
    for tok in tokens:
        if tok.token_type == TokenType.L_PAREN:
            depth += 1
        elif tok.token_type == TokenType.R_PAREN:
            depth -= 1
        elif tok.token_type == TokenType.ORDER_BY and depth == 0:
            return True
    return False


# -- execution -------------------------------------------------------------


@dataclass
class ExecutionResult:
    columns: tuple[str, ...]
    rows: list[tuple[Any, ...]]
    truncated: bool = False
    row_limit: int | None = None

    def __post_init__(self) -> None:
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError("row width differs from column count")


class Executor:
    """Hands out read-only connections (one per thread) to one database.

    Script and fixture locators are built once; every connection receives a
    copy of that database through the SQLite backup API.
    """

    def __init__(
        self,
        locator: str,
        row_limit: int | None = 100,
        timeout: float = 10.0,
        transcript: Transcript | None = None,
    ) -> None:
        self.locator = locator
        self.row_limit = row_limit
        self.timeout = timeout
        self.transcript = transcript or Transcript()
        self._master: sqlite3.Connection | None = None
        self._master_lock = threading.Lock()
        self._local = threading.local()
        if locator.startswith("fixture:") or locator.endswith(".sql"):
            self._master = open_database(locator, readonly=False)
        elif locator != ":memory:" and not Path(locator).is_file():
            raise FileNotFoundError(f"no database at {locator}")

    def with_transcript(self, transcript: Transcript) -> "Executor":
        clone = object.__new__(Executor)
        clone.__dict__.update(self.__dict__)
        clone.transcript = transcript
        clone._local = self._local
        return clone

    @property
    def db_call_count(self) -> int:
        return self.transcript.db_calls

    def connection(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            if self._master is not None:
                conn = sqlite3.connect(":memory:", check_same_thread=False)
                with self._master_lock:
                    self._master.backup(conn)
                conn.execute("PRAGMA query_only = ON")
            else:
                conn = open_database(self.locator)
            self._local.conn = conn
        return conn

    def execute(self, sql: str, row_limit: int | None = -1, timeout: float | None = None) -> ExecutionResult:
        """Run one read-only statement. ``row_limit=-1`` uses the executor default."""
        limit = self.row_limit if row_limit == -1 else row_limit
        timeout = self.timeout if timeout is None else timeout
        conn = self.connection()
        deadline = time.monotonic() + timeout
        timed_out = False

        def check() -> int:
            nonlocal timed_out
            if time.monotonic() > deadline:
                timed_out = True
                return 1
            return 0

        started = self.transcript.clock()
        conn.set_progress_handler(check, 10_000)
        try:
            cur = conn.execute(sql)
            columns = tuple(d[0] for d in cur.description or ())
            if limit is None:
                rows = cur.fetchall()
                truncated = False
            else:
                rows = cur.fetchmany(limit + 1)
                truncated = len(rows) > limit
                rows = rows[:limit]
            cur.close()
        except (sqlite3.Error, sqlite3.Warning) as exc:
            status = "timeout" if timed_out else "error"
            self.transcript.db(sql, started, status)
            if timed_out:
                raise ExecutionError("timeout", timeout=True) from exc
            raise ExecutionError(str(exc)) from exc
        finally:
            conn.set_progress_handler(None, 0)
        self.transcript.db(sql, started, "ok", len(rows))
        return ExecutionResult(columns, [tuple(r) for r in rows], truncated, limit)

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None


def execute(sql: str, executor: Executor, row_limit: int | None = -1, timeout: float | None = None) -> ExecutionResult:
    return executor.execute(sql, row_limit, timeout)


# -- classification --------------------------------------------------------


class ResultClass(enum.Enum):
    ERROR = "Error"
    EMPTY = "Empty"
    TRIVIAL = "Trivial"
    NONTRIVIAL = "NonTrivial"


def _is_bare_count(sql: str) -> bool:
    """``SELECT COUNT(..) FROM t [alias]`` with no filter, join or grouping."""
    try:
        tokens = [t for t in _dialect.tokenize(sql) if t.token_type != TokenType.SEMICOLON]
    except TokenError:
        return False
    words = [t.text.upper() for t in tokens]
    if len(words) < 6 or words[0] != "SELECT" or words[1] != "COUNT" or words[2] != "(":
        return False
    try:
        close = words.index(")")
        frm = words.index("FROM")
    except ValueError:
        return False
    tail = words[frm + 1 :]
    if frm < close or not 1 <= len(tail) <= 3:
        return False
    banned = {"WHERE", "JOIN", "GROUP BY", "HAVING", ",", "(", "UNION", "LIMIT", "OFFSET"}
    return not banned & set(tail) and not banned & set(words[close + 1 : frm])


def classify(result: ExecutionResult | Exception | None, sql: str | None = None) -> ResultClass:
    """Map an execution outcome to exactly one :class:`ResultClass`.

    Trivial means: at least one row but every cell NULL, or a single 0 cell
    produced by a bare ``COUNT`` over an unfiltered table (needs ``sql``).
    """
    if result is None or isinstance(result, Exception):
        return ResultClass.ERROR
    if not result.rows:
        return ResultClass.EMPTY
    if all(v is None for row in result.rows for v in row):
        return ResultClass.TRIVIAL
    if (
        sql is not None
        and len(result.rows) == 1
        and len(result.columns) == 1
        and result.rows[0][0] == 0
        and _is_bare_count(sql)
    ):
        return ResultClass.TRIVIAL
    return ResultClass.NONTRIVIAL


# -- comparison ------------------------------------------------------------


def _norm(v: Any) -> Any:
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, Decimal):
        return int(v) if v == v.to_integral_value() else float(v)
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


def values_equal(a: Any, b: Any) -> bool:
    a, b = _norm(a), _norm(b)
    if a is None or b is None:
        return a is None and b is None
    a_num = isinstance(a, (int, float))
    b_num = isinstance(b, (int, float))
    if a_num and b_num:
        if isinstance(a, int) and isinstance(b, int):
            return a == b
        if math.isnan(a) or math.isnan(b):
            return math.isnan(a) and math.isnan(b)
        return math.isclose(a, b, rel_tol=FLOAT_REL_TOL, abs_tol=0.0)
    if a_num or b_num:
        return False
    return type(a) is type(b) and a == b


def _rows_equal(r1: Sequence[Any], r2: Sequence[Any]) -> bool:
    return all(values_equal(x, y) for x, y in zip(r1, r2))


def _sort_key(row: Sequence[Any]) -> tuple:
    key = []
    for v in row:
        v = _norm(v)
        if v is None:
            key.append((0, 0.0, ""))
        elif isinstance(v, (int, float)):
            key.append((1, float(f"{float(v):.6g}"), ""))
        elif isinstance(v, str):
            key.append((2, 0.0, v))
        else:
            key.append((3, 0.0, repr(v)))
    return tuple(key)


def results_equal(a: ExecutionResult, b: ExecutionResult, order_sensitive: bool) -> bool:
    """Compare result values only; column names are ignored.

    Integer-valued floats equal integers, other floats match within a 1e-6
    relative tolerance, strings match exactly and NULL equals NULL. Without
    ``order_sensitive`` rows are compared as multisets.
    """
    if len(a.columns) != len(b.columns) or len(a.rows) != len(b.rows):
        return False
    if order_sensitive:
        return all(_rows_equal(x, y) for x, y in zip(a.rows, b.rows))
    ra = sorted(a.rows, key=_sort_key)
    rb = sorted(b.rows, key=_sort_key)
    if all(_rows_equal(x, y) for x, y in zip(ra, rb)):
        return True
    # values near a rounding boundary can sort apart; fall back to matching
    remaining = list(rb)
    for row in ra:
        for i, cand in enumerate(remaining):
            if _rows_equal(row, cand):
                del remaining[i]
                break
        else:
            return False
    return True
