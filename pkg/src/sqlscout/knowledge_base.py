"""Triplet knowledge base, column documents and exact cosine retrieval.

KB file format: one JSON object per line with keys ``id``, ``fragment``,
``sql``, ``description``, ``embedding`` (list of decimals) and
``provenance``. Files are written to a temporary sibling and renamed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from .schema_graph import FieldDef, SchemaGraph, representative_tables

logger = logging.getLogger(__name__)

EMBED_DIM = 256
DEFAULT_TOP_K = 3
SCORE_DECIMALS = 9  # scores equal after rounding are ties, broken by ascending id


class KnowledgeBaseError(Exception):
    pass


class EmbeddingError(Exception):
    """Retriable failure of a live embedding endpoint."""


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- column documents --------------------------------------------------------


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace(";", "\\;")


def _unescape(text: str) -> str:
    return re.sub(r"\\(.)", r"\1", text)


def render_column_document(field: FieldDef, table: Any = None) -> str:
    """``[Name]: <name>; [Type]: <type>; [Desc]: <comment>``.

    ``;`` inside a value is written ``\\;`` and ``\\`` as ``\\\\``.
    """
    return (
        f"[Name]: {_escape(field.name)}; [Type]: {_escape(field.data_type)}; "
        f"[Desc]: {_escape(field.description or '')}"
    )


_DOC = re.compile(r"\[Name\]: ((?:[^;\\]|\\.)*); \[Type\]: ((?:[^;\\]|\\.)*); \[Desc\]: ((?:[^;\\]|\\.)*)", re.S)


def parse_column_document(text: str) -> tuple[str, str, str]:
    m = _DOC.fullmatch(text)
    if not m:
        raise ValueError(f"not a column document: {text!r}")
    return tuple(_unescape(g) for g in m.groups())  # type: ignore[return-value]


# -- embedders -----------------------------------------------------------------


class Embedder(Protocol):
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


_WORD = re.compile(r"[^\W_]+(?:_[^\W_]+)*", re.UNICODE)


class HashingEmbedder:
    """Deterministic token-hashing projection.

    Text is lower-cased and split into word tokens; a token containing
    underscores also contributes each of its parts. Every token adds +1 or
    -1 (sign from the top hash bit) to bucket ``blake2b(token) % dimension``.
    The sum is scaled to unit length; text without tokens maps to the zero
    vector, left unnormalized.
    """

    def __init__(self, dimension: int = EMBED_DIM) -> None:
        self.dimension = dimension

    def tokens(self, text: str) -> list[str]:
        out = []
        for word in _WORD.findall(text.lower()):
            out.append(word)
            if "_" in word:
                out.extend(p for p in word.split("_") if p)
        return out

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension)
        for tok in self.tokens(text):
            h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "big")
            vec[h % self.dimension] += 1.0 if h >> 63 else -1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


class LiveEmbedder:
    """OpenAI-compatible ``/embeddings`` client (needs ``SQLSCOUT_LIVE=1``)."""

    def __init__(self, endpoint: str | None = None, model: str | None = None, dimension: int | None = None) -> None:
        from .gateway import live_enabled

        if not live_enabled():
            raise EmbeddingError("live embedder disabled; set SQLSCOUT_LIVE=1")
        import httpx

        self.endpoint = endpoint or os.environ["EMBED_ENDPOINT"]
        self.model = model or os.environ.get("EMBED_MODEL", "text-embedding-3-small")
        self._client = httpx.Client(timeout=60.0)
        self.dimension = dimension or len(self.embed("dimension probe"))

    def embed(self, text: str) -> np.ndarray:
        import httpx

        url = self.endpoint.rstrip("/")
        if not url.endswith("/embeddings"):
            url += "/embeddings"
        try:
            resp = self._client.post(
                url,
                json={"model": self.model, "input": text},
                headers={"Authorization": f"Bearer {os.environ.get('MODEL_API_KEY', '')}"},
            )
            resp.raise_for_status()
            return np.asarray(resp.json()["data"][0]["embedding"], dtype=float)
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise EmbeddingError(str(exc)) from exc


def embed(text: str, embedder: Embedder) -> np.ndarray:
    return embedder.embed(text)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# -- vector index ----------------------------------------------------------------


class VectorIndex:
    """Exact cosine top-k over an in-memory matrix.

    Reads may run concurrently; ``add`` takes a lock.
    """

    def __init__(self, dimension: int) -> None:
        self.dimension = dimension
        self.ids: list[str] = []
        self._idset: set[str] = set()
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._idset

    def add(self, item_id: str, vector: Sequence[float]) -> None:
        vec = np.asarray(vector, dtype=float)
        if vec.shape != (self.dimension,):
            raise ValueError(f"vector dimension {vec.shape} != index dimension {self.dimension}")
        with self._lock:
            if item_id in self._idset:
                raise ValueError(f"duplicate id {item_id}")
            self.ids.append(item_id)
            self._idset.add(item_id)
            self._rows.append(vec)
            self._matrix = None

    def matrix(self) -> np.ndarray:
        m = self._matrix
        if m is None:
            with self._lock:
                m = np.vstack(self._rows) if self._rows else np.zeros((0, self.dimension))
                self._matrix = m
        return m

    def search(self, query: Sequence[float], k: int) -> list[tuple[str, float]]:
        if k < 1 or not self.ids:
            return []
        q = np.asarray(query, dtype=float)
        m = self.matrix()
        qn = np.linalg.norm(q)
        norms = np.linalg.norm(m, axis=1)
        denom = norms * qn
        with np.errstate(divide="ignore", invalid="ignore"):
            scores = np.where(denom > 0, (m @ q) / np.where(denom > 0, denom, 1.0), 0.0)
        scores = np.round(scores, SCORE_DECIMALS)
        order = sorted(range(len(self.ids)), key=lambda i: (-scores[i], self.ids[i]))
        return [(self.ids[i], float(scores[i])) for i in order[:k]]


# -- triplets ----------------------------------------------------------------------


@dataclass
class SchemaFragment:
    tables: list[str]
    columns: list[str] = field(default_factory=list)
    joins: list[tuple[str, str]] = field(default_factory=list)
    groups: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.joins = [tuple(j) for j in self.joins]  # type: ignore[misc]
        for col in self.columns:
            if col.rsplit(".", 1)[0] not in self.tables:
                raise ValueError(f"fragment column {col} has no listed table")
        for left, right in self.joins:
            if left not in self.columns or right not in self.columns:
                raise ValueError(f"join {left} = {right} endpoints must be fragment columns")

    def to_dict(self) -> dict[str, Any]:
        return {
            "tables": list(self.tables),
            "columns": list(self.columns),
            "joins": [list(j) for j in self.joins],
            "groups": list(self.groups),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SchemaFragment":
        return cls(list(d["tables"]), list(d.get("columns", [])), [tuple(j) for j in d.get("joins", [])], list(d.get("groups", [])))


@dataclass
class Triplet:
    id: str
    fragment: SchemaFragment
    sql: str
    description: str
    embedding: list[float]
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.sql.strip():
            raise ValueError("triplet SQL must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "fragment": self.fragment.to_dict(),
            "sql": self.sql,
            "description": self.description,
            "embedding": [float(x) for x in self.embedding],
            "provenance": self.provenance,
        }

    def to_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def triplet_id(sql: str) -> str:
    return "t_" + hashlib.md5(" ".join(sql.split()).encode("utf-8")).hexdigest()[:12]


@dataclass
class ColumnDocument:
    column_id: str
    table_id: str
    text: str
    embedding: np.ndarray


class KnowledgeBase:
    """Triplets plus the column-document index of one database."""

    def __init__(self, embedder: Embedder | None = None) -> None:
        self.embedder = embedder or HashingEmbedder()
        self.triplets: dict[str, Triplet] = {}
        self.triplet_index = VectorIndex(self.embedder.dimension)
        self.columns: dict[str, ColumnDocument] = {}
        self.column_index = VectorIndex(self.embedder.dimension)

    def __len__(self) -> int:
        return len(self.triplets)

    def add_triplet(
        self,
        fragment: SchemaFragment,
        sql: str,
        description: str,
        provenance: dict[str, Any] | None = None,
    ) -> tuple[Triplet, bool]:
        """Store a triplet keyed by its normalized SQL; returns (triplet, is_new)."""
        tid = triplet_id(sql)
        if tid in self.triplets:
            return self.triplets[tid], False
        vec = self.embedder.embed(sql)
        trip = Triplet(tid, fragment, sql, description, [float(x) for x in vec], dict(provenance or {}))
        self.insert(trip)
        return trip, True

    def insert(self, trip: Triplet) -> None:
        if len(trip.embedding) != self.triplet_index.dimension:
            raise KnowledgeBaseError(
                f"triplet {trip.id}: embedding dimension {len(trip.embedding)} != {self.triplet_index.dimension}"
            )
        self.triplet_index.add(trip.id, trip.embedding)
        self.triplets[trip.id] = trip

    def add_column(self, column_id: str, table_id: str, field_def: FieldDef) -> ColumnDocument:
        text = render_column_document(field_def)
        doc = ColumnDocument(column_id, table_id, text, self.embedder.embed(text))
        self.column_index.add(column_id, doc.embedding)
        self.columns[column_id] = doc
        return doc

    def index_graph(self, graph: SchemaGraph) -> int:
        """Add one document per column of every representative table."""
        from .schema_graph import _field_from_node

        added = 0
        for tnode in representative_tables(graph):
            fqn = tnode.props["fullname"]
            for fnode in graph.table_fields(tnode.id):
                cid = f"{fqn}.{fnode.props['name']}"
                if cid not in self.columns:
                    self.add_column(cid, fqn, _field_from_node(fnode))
                    added += 1
        return added


def retrieve_columns(question: str, kb: KnowledgeBase, k: int = DEFAULT_TOP_K) -> list[tuple[str, float]]:
    """Top-k column ids by cosine similarity, ties by ascending id."""
    return kb.column_index.search(kb.embedder.embed(question), k)


def retrieve_triplets(question: str, kb: KnowledgeBase, k: int = DEFAULT_TOP_K) -> list[tuple[Triplet, float]]:
    hits = kb.triplet_index.search(kb.embedder.embed(question), k)
    return [(kb.triplets[i], s) for i, s in hits]


def persist_kb(kb: KnowledgeBase, path: str | Path) -> None:
    lines = [t.to_line() + "\n" for t in kb.triplets.values()]
    atomic_write_bytes(Path(path), "".join(lines).encode("utf-8"))


def load_kb(path: str | Path, embedder: Embedder | None = None) -> KnowledgeBase:
    path = Path(path)
    records: list[tuple[int, Triplet]] = []
    dim: int | None = embedder.dimension if embedder is not None else None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                emb = d["embedding"]
                if not isinstance(emb, list) or not all(isinstance(x, (int, float)) for x in emb):
                    raise ValueError("embedding is not a list of numbers")
                if dim is None:
                    dim = len(emb)
                if len(emb) != dim:
                    raise ValueError(f"embedding has {len(emb)} values, expected {dim}")
                trip = Triplet(
                    d["id"],
                    SchemaFragment.from_dict(d["fragment"]),
                    d["sql"],
                    d["description"],
                    [float(x) for x in emb],
                    d.get("provenance") or {},
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise KnowledgeBaseError(f"{path}: bad record at line {lineno}: {exc}") from exc
            records.append((lineno, trip))
    if embedder is None:
        embedder = HashingEmbedder(dim or EMBED_DIM)
    kb = KnowledgeBase(embedder)
    for lineno, trip in records:
        if trip.id in kb.triplets:
            raise KnowledgeBaseError(f"{path}: duplicate id {trip.id} at line {lineno}")
        kb.insert(trip)
    return kb


def triplets_by_ids(kb: KnowledgeBase, ids: Iterable[str]) -> list[Triplet]:
    return [kb.triplets[i] for i in ids if i in kb.triplets]
