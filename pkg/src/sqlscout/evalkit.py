"""Execution-accuracy evaluation over a task file of (question, gold SQL) pairs.

Task file: a JSON list of ``{"id", "question", "gold_sql", "db"}`` records;
a relative ``db`` path is resolved against the task file's directory.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from .deployment import SynthesisConfig, SynthesisResult, synthesize
from .sql_exec import ExecutionError, Executor, has_top_level_order_by, results_equal

logger = logging.getLogger(__name__)

EASY, MEDIUM, HARD = "Easy", "Medium", "Hard"
BUCKETS = (EASY, MEDIUM, HARD)
MEDIUM_FROM = 80
HARD_FROM = 160

_TOKEN = re.compile(r"\w+|[^\w\s]")


class InvalidTaskError(Exception):
    """The gold SQL does not execute on its database."""


class Outcome(str, enum.Enum):
    CORRECT = "Correct"
    INCORRECT = "Incorrect"
    FAILED = "Failed"


def tokenize_sql(sql: str) -> list[str]:
    """Split on whitespace; every punctuation character is its own token."""
    return _TOKEN.findall(sql)


def bucket_difficulty(gold_sql: str, tokenizer: Callable[[str], Sequence[str]] = tokenize_sql) -> str:
    if not gold_sql.strip():
        raise ValueError("gold SQL must be non-empty")
    n = len(tokenizer(gold_sql))
    if n < MEDIUM_FROM:
        return EASY
    return MEDIUM if n < HARD_FROM else HARD


@dataclass(frozen=True)
class EvalTask:
    id: str
    question: str
    gold_sql: str
    db: str

    @property
    def difficulty(self) -> str:
        return bucket_difficulty(self.gold_sql)


def resolve_locator(db: str, base: Path) -> str:
    if db.startswith("fixture:") or db == ":memory:" or Path(db).is_absolute():
        return db
    return str(base / db)


def load_tasks(path: str | Path) -> list[EvalTask]:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, list) or not doc:
        raise ValueError(f"{path}: empty task file")
    tasks = []
    for i, rec in enumerate(doc):
        try:
            tasks.append(EvalTask(str(rec["id"]), rec["question"], rec["gold_sql"], rec["db"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: task {i} lacks {exc}") from None
    return tasks


def score_task(task: EvalTask, result: SynthesisResult, executor: Executor) -> Outcome:
    """Compare predicted and gold results; row order counts only if gold has a top-level ORDER BY."""
    try:
        gold = executor.execute(task.gold_sql, row_limit=None)
    except ExecutionError as exc:
        raise InvalidTaskError(f"task {task.id}: gold SQL fails: {exc}") from exc
    if not result.ok or result.final_sql is None:
        return Outcome.FAILED
    try:
        pred = executor.execute(result.final_sql, row_limit=None)
    except ExecutionError:
        return Outcome.INCORRECT
    ordered = has_top_level_order_by(task.gold_sql)
    return Outcome.CORRECT if results_equal(pred, gold, ordered) else Outcome.INCORRECT


Runner = Callable[[EvalTask, int], SynthesisResult]


def pass_at_k(task: EvalTask, k: int, runner: Runner, executor: Executor) -> bool:
    """True iff any of ``k`` independent runs is Correct."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return any(score_task(task, runner(task, i), executor) is Outcome.CORRECT for i in range(k))


@dataclass
class TaskOutcome:
    id: str
    question: str
    difficulty: str
    outcomes: list[Outcome]
    llm_calls: int
    db_calls: int

    @property
    def correct(self) -> bool:
        return self.outcomes[0] is Outcome.CORRECT

    def passed(self, k: int) -> bool:
        return any(o is Outcome.CORRECT for o in self.outcomes[:k])

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "question": self.question,
            "difficulty": self.difficulty,
            "outcomes": [o.value for o in self.outcomes],
            "llm_calls": self.llm_calls,
            "db_calls": self.db_calls,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TaskOutcome":
        return cls(d["id"], d["question"], d["difficulty"], [Outcome(o) for o in d["outcomes"]], d["llm_calls"], d["db_calls"])


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass
class EvalReport:
    """Outcomes of every attempted task; all metrics derive from them.

    EX and the call means use each task's first run; pass@k uses runs 1..k.
    """

    tasks: list[TaskOutcome]
    passes: int = 1
    invalid: list[str] = field(default_factory=list)

    @property
    def ex(self) -> float | None:
        return _ratio(sum(t.correct for t in self.tasks), len(self.tasks))

    def ex_by_bucket(self) -> dict[str, dict[str, Any]]:
        out = {}
        for b in BUCKETS:
            members = [t for t in self.tasks if t.difficulty == b]
            out[b] = {"tasks": len(members), "correct": sum(t.correct for t in members), "ex": _ratio(sum(t.correct for t in members), len(members))}
        return out

    def pass_at(self, k: int) -> float | None:
        return _ratio(sum(t.passed(k) for t in self.tasks), len(self.tasks))

    @property
    def mean_llm_calls(self) -> float | None:
        return _ratio(sum(t.llm_calls for t in self.tasks), len(self.tasks))

    @property
    def mean_db_calls(self) -> float | None:
        return _ratio(sum(t.db_calls for t in self.tasks), len(self.tasks))

    def to_dict(self) -> dict[str, Any]:
        return {
            "tasks": [t.to_dict() for t in self.tasks],
            "passes": self.passes,
            "invalid": list(self.invalid),
            "summary": {
                "attempted": len(self.tasks),
                "ex": self.ex,
                "by_bucket": self.ex_by_bucket(),
                "pass_at_k": {str(k): self.pass_at(k) for k in range(1, self.passes + 1)},
                "mean_llm_calls": self.mean_llm_calls,
                "mean_db_calls": self.mean_db_calls,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvalReport":
        return cls([TaskOutcome.from_dict(t) for t in d["tasks"]], d["passes"], list(d.get("invalid", [])))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def render_table(self) -> str:
        """Tab-delimited summary: one row per bucket, then overall."""

        def pct(x: float | None) -> str:
            return "-" if x is None else f"{100 * x:.2f}"

        lines = ["bucket\ttasks\tcorrect\tEX%"]
        for b, row in self.ex_by_bucket().items():
            lines.append(f"{b}\t{row['tasks']}\t{row['correct']}\t{pct(row['ex'])}")
        lines.append(f"Overall\t{len(self.tasks)}\t{sum(t.correct for t in self.tasks)}\t{pct(self.ex)}")
        lines.append("")
        lines.append("k\tpass@k%")
        lines += [f"{k}\t{pct(self.pass_at(k))}" for k in range(1, self.passes + 1)]
        lines.append("")
        lines.append(f"mean_llm_calls\t{self.mean_llm_calls if self.mean_llm_calls is not None else '-'}")
        lines.append(f"mean_db_calls\t{self.mean_db_calls if self.mean_db_calls is not None else '-'}")
        if self.invalid:
            lines.append(f"invalid_tasks\t{','.join(self.invalid)}")
        return "\n".join(lines)


def _evaluate(task: EvalTask, runner: Runner, executor: Executor, passes: int) -> TaskOutcome:
    outcomes: list[Outcome] = []
    first: SynthesisResult | None = None
    for i in range(passes):
        result = runner(task, i)
        if first is None:
            first = result
        outcomes.append(score_task(task, result, executor))
    assert first is not None
    return TaskOutcome(task.id, task.question, task.difficulty, outcomes, first.llm_call_count, first.db_call_count)


def run_eval(
    tasks: Sequence[EvalTask],
    runner: Runner,
    executor_for: Callable[[str], Executor],
    passes: int = 1,
    workers: int = 1,
) -> EvalReport:
    """Evaluate every task ``passes`` times; tasks with broken gold SQL are skipped with a warning."""
    if not tasks:
        raise ValueError("no tasks to evaluate")
    if passes < 1:
        raise ValueError("passes must be >= 1")

    def one(task: EvalTask) -> TaskOutcome | str:
        executor = executor_for(task.db)
        try:
            executor.execute(task.gold_sql, row_limit=None)
        except ExecutionError as exc:
            logger.warning("excluding task %s: gold SQL fails: %s", task.id, exc)
            return task.id
        return _evaluate(task, runner, executor, passes)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, tasks))
    else:
        results = [one(t) for t in tasks]
    report = EvalReport([r for r in results if isinstance(r, TaskOutcome)], passes, [r for r in results if isinstance(r, str)])
    return report


def synthesis_runner(
    graph: Any,
    kb: Any,
    policy_for: Callable[[EvalTask, int], Any],
    executor_for: Callable[[str], Executor],
    config: SynthesisConfig | None = None,
    clock_factory: Callable[[], Callable[[], float]] | None = None,
) -> Runner:
    """A runner that opens a fresh synthesis session per (task, run)."""

    def run(task: EvalTask, index: int) -> SynthesisResult:
        clock = clock_factory() if clock_factory else None
        return synthesize(task.question, graph, kb, executor_for(task.db), policy_for(task, index), config, clock)

    return run
