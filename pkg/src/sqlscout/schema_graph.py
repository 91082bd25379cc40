"""Catalog introspection, shared field groups and the schema graph.

A catalog is read either from a JSON catalog file or from an embedded
SQLite database. Tables whose ``name:type`` field sets are identical are
folded into a single shared field group, so a table links to its grouped
fields through one ``USES_FIELD_GROUP`` edge instead of one edge per field.

Catalog file format (stable contract)::

    {
      "database": "shop",
      "schemas": [
        {"name": "main", "description": "...",
         "tables": [
           {"name": "users", "ddl_summary": "...",
            "foreign_keys": [{"column": "org_id", "ref_table": "orgs", "ref_column": "id"}],
            "fields": [
              {"name": "user_id", "type": "INTEGER", "description": "...",
               "samples": ["1", "2"], "key": true}
            ]}
         ]}
      ]
    }

``name`` and ``type`` are required on every field (``"type": null`` maps to
``UNKNOWN``); ``description``, ``samples``, ``key``, ``ddl_summary`` and
``foreign_keys`` are optional. ``ref_table`` may be a bare table name in the
same schema or a ``schema.table`` name.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import sqlite3
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator

logger = logging.getLogger(__name__)

UNKNOWN_TYPE = "UNKNOWN"
GRAPH_FORMAT_VERSION = 1

# node kinds, as stored in each node's ``type`` property
DATABASE = "database"
SCHEMA = "schema"
TABLE = "table"
GROUP = "shared_field_group"
FIELD = "field"

HAS_SCHEMA = "HAS_SCHEMA"
HAS_TABLE = "HAS_TABLE"
USES_FIELD_GROUP = "USES_FIELD_GROUP"
HAS_UNIQUE_FIELD = "HAS_UNIQUE_FIELD"
HAS_FIELD = "HAS_FIELD"

EDGE_KINDS = (HAS_SCHEMA, HAS_TABLE, USES_FIELD_GROUP, HAS_UNIQUE_FIELD, HAS_FIELD)
NODE_KINDS = (DATABASE, SCHEMA, TABLE, GROUP, FIELD)

# (start kind, edge kind) -> end kind
ALLOWED_EDGES: dict[tuple[str, str], str] = {
    (DATABASE, HAS_SCHEMA): SCHEMA,
    (SCHEMA, HAS_TABLE): TABLE,
    (TABLE, USES_FIELD_GROUP): GROUP,
    (TABLE, HAS_UNIQUE_FIELD): FIELD,
    (GROUP, HAS_FIELD): FIELD,
}

_KEY_NAME = re.compile(r"(^id$|_id$|id$)", re.IGNORECASE)


class CatalogError(Exception):
    """Raised when a catalog source cannot be read or is invalid."""


class MalformedCatalogError(CatalogError):
    pass


class SignatureCollisionError(CatalogError):
    """Two distinct canonical field strings produced the same signature."""


class GraphError(Exception):
    pass


class GraphFormatError(GraphError):
    """A serialized graph is truncated, corrupt or of an unknown version."""


class GraphVersionError(GraphFormatError):
    pass


@dataclass(frozen=True)
class FieldDef:
    name: str
    data_type: str = UNKNOWN_TYPE
    description: str | None = None
    sample_values: tuple[str, ...] = ()
    is_key: bool = False

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("field name must be non-empty")
        if not self.data_type:
            object.__setattr__(self, "data_type", UNKNOWN_TYPE)
        if not isinstance(self.sample_values, tuple):
            object.__setattr__(self, "sample_values", tuple(self.sample_values))

    @property
    def rendered(self) -> str:
        return f"{self.name}:{self.data_type}"


@dataclass(frozen=True)
class ForeignKey:
    column: str
    ref_table: str  # fully-qualified
    ref_column: str


@dataclass
class TableDef:
    name: str
    schema_name: str
    database_name: str
    fields: list[FieldDef]
    ddl_summary: str | None = None
    foreign_keys: list[ForeignKey] = field(default_factory=list)

    def __post_init__(self) -> None:
        dupes = [n for n, c in Counter(f.name for f in self.fields).items() if c > 1]
        if dupes:
            raise MalformedCatalogError(f"table {self.fqn}: duplicate field names {dupes}")

    @property
    def fqn(self) -> str:
        return f"{self.database_name}.{self.schema_name}.{self.name}"


@dataclass
class SchemaDef:
    name: str
    tables: list[TableDef]
    description: str | None = None


@dataclass
class CatalogDef:
    database_name: str
    schemas: list[SchemaDef]

    def __post_init__(self) -> None:
        names = [s.name for s in self.schemas]
        if len(names) != len(set(names)):
            raise MalformedCatalogError(f"duplicate schema names in {self.database_name}")
        fqns = [t.fqn for t in self.tables()]
        if len(fqns) != len(set(fqns)):
            raise MalformedCatalogError(f"duplicate table names in {self.database_name}")

    def tables(self) -> Iterator[TableDef]:
        for schema in self.schemas:
            yield from schema.tables

    def table(self, fqn: str) -> TableDef:
        for t in self.tables():
            if t.fqn == fqn:
                return t
        raise KeyError(fqn)


def is_key_column(name: str, declared: bool = False) -> bool:
    """Key-column heuristic: ``id``, ``*_id``, ``*id`` or a declared key."""
    return declared or bool(_KEY_NAME.search(name))


# -- introspection ---------------------------------------------------------


def _primary_key(conn: sqlite3.Connection, schema_name: str, table: str) -> str | None:
    """Single-column primary key of ``table``; a bare ``REFERENCES t`` points at it."""
    pk = [r[1] for r in conn.execute(f'PRAGMA "{schema_name}".table_info("{table}")').fetchall() if r[5]]
    return pk[0] if len(pk) == 1 else None


def introspect_catalog(source: str | Path | sqlite3.Connection) -> CatalogDef:
    """Read a catalog from a JSON catalog file or an embedded database.

    ``source`` may be a ``.json`` catalog file, an open SQLite connection,
    or any locator accepted by :func:`sqlscout.sql_exec.open_database`.
    """
    if isinstance(source, sqlite3.Connection):
        return _introspect_sqlite(source, "main")
    locator = str(source)
    if locator.endswith(".json"):
        return load_catalog_file(locator)
    from .sql_exec import open_database, locator_name

    try:
        conn = open_database(locator)
    except (OSError, sqlite3.Error) as exc:
        raise CatalogError(f"cannot open {locator}: {exc}") from exc
    try:
        return _introspect_sqlite(conn, locator_name(locator))
    finally:
        conn.close()


def load_catalog_file(path: str | Path) -> CatalogDef:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CatalogError(f"cannot read catalog file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedCatalogError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    return catalog_from_dict(doc, origin=str(path))


def catalog_from_dict(doc: Any, origin: str = "<catalog>") -> CatalogDef:
    def need(obj: Any, key: str, where: str) -> Any:
        if not isinstance(obj, dict) or key not in obj:
            raise MalformedCatalogError(f"{origin}: {where}: missing '{key}'")
        return obj[key]

    db = need(doc, "database", "top level")
    schemas: list[SchemaDef] = []
    for si, sdoc in enumerate(need(doc, "schemas", "top level")):
        swhere = f"schemas[{si}]"
        sname = need(sdoc, "name", swhere)
        tables: list[TableDef] = []
        for ti, tdoc in enumerate(sdoc.get("tables", [])):
            twhere = f"{swhere}.tables[{ti}]"
            tname = need(tdoc, "name", twhere)
            fdocs = tdoc.get("fields") or []
            if not fdocs:
                raise MalformedCatalogError(f"{origin}: {twhere} ({tname}): table has zero columns")
            fields = []
            for fi, fdoc in enumerate(fdocs):
                fwhere = f"{twhere}.fields[{fi}]"
                fname = need(fdoc, "name", fwhere)
                if "type" not in fdoc:
                    raise MalformedCatalogError(
                        f"{origin}: {fwhere} ({tname}.{fname}): missing 'type' (data_type)"
                    )
                if not fname:
                    raise MalformedCatalogError(f"{origin}: {fwhere}: empty field name")
                fields.append(
                    FieldDef(
                        name=fname,
                        data_type=fdoc["type"] or UNKNOWN_TYPE,
                        description=fdoc.get("description") or None,
                        sample_values=tuple(str(v) for v in fdoc.get("samples") or ()),
                        is_key=bool(fdoc.get("key", False)),
                    )
                )
            fks = []
            for fk in tdoc.get("foreign_keys") or []:
                ref = fk["ref_table"]
                parts = ref.split(".")
                if len(parts) == 1:
                    ref = f"{db}.{sname}.{ref}"
                elif len(parts) == 2:
                    ref = f"{db}.{ref}"
                fks.append(ForeignKey(fk["column"], ref, fk["ref_column"]))
            tables.append(
                TableDef(
                    name=tname,
                    schema_name=sname,
                    database_name=db,
                    fields=fields,
                    ddl_summary=tdoc.get("ddl_summary") or f"Table with {len(fields)} columns",
                    foreign_keys=fks,
                )
            )
        schemas.append(SchemaDef(sname, tables, sdoc.get("description") or None))
    return CatalogDef(db, schemas)


def catalog_to_dict(catalog: CatalogDef) -> dict[str, Any]:
    return {
        "database": catalog.database_name,
        "schemas": [
            {
                "name": s.name,
                "description": s.description,
                "tables": [
                    {
                        "name": t.name,
                        "ddl_summary": t.ddl_summary,
                        "foreign_keys": [
                            {"column": fk.column, "ref_table": fk.ref_table, "ref_column": fk.ref_column}
                            for fk in t.foreign_keys
                        ],
                        "fields": [
                            {
                                "name": f.name,
                                "type": f.data_type,
                                "description": f.description,
                                "samples": list(f.sample_values),
                                "key": f.is_key,
                            }
                            for f in t.fields
                        ],
                    }
                    for t in s.tables
                ],
            }
            for s in catalog.schemas
        ],
    }


_COMMENT_LINE = re.compile(r'^\s*["`\[]?(\w+)["`\]]?\s+[^-]*?--\s*(.*?)\s*$')


def _column_comments(create_sql: str) -> dict[str, str]:
    """Pull ``-- comment`` text trailing a column definition line."""
    comments = {}
    for line in (create_sql or "").splitlines():
        m = _COMMENT_LINE.match(line)
        if m and m.group(1).upper() not in ("CREATE", "PRIMARY", "FOREIGN", "UNIQUE", "CHECK"):
            comments[m.group(1)] = m.group(2)
    return comments


def _introspect_sqlite(conn: sqlite3.Connection, database_name: str, samples: int = 3) -> CatalogDef:
    schemas = []
    for _, schema_name, _ in conn.execute("PRAGMA database_list").fetchall():
        if schema_name == "temp":
            continue
        q = f'SELECT name, sql FROM "{schema_name}".sqlite_master WHERE type = \'table\' AND name NOT LIKE \'sqlite_%\' ORDER BY name'
        tables = []
        for tname, create_sql in conn.execute(q).fetchall():
            comments = _column_comments(create_sql)
            info = conn.execute(f'PRAGMA "{schema_name}".table_info("{tname}")').fetchall()
            if not info:
                raise MalformedCatalogError(f"{schema_name}.{tname}: table has zero columns")
            fk_rows = conn.execute(f'PRAGMA "{schema_name}".foreign_key_list("{tname}")').fetchall()
            fk_cols = {r[3] for r in fk_rows}
            fields = []
            for _, cname, ctype, _, _, pk in info:
                sample_rows = conn.execute(
                    f'SELECT DISTINCT "{cname}" FROM "{schema_name}"."{tname}" '
                    f'WHERE "{cname}" IS NOT NULL ORDER BY 1 LIMIT {samples}'
                ).fetchall()
                fields.append(
                    FieldDef(
                        name=cname,
                        data_type=(ctype or "").strip() or UNKNOWN_TYPE,
                        description=comments.get(cname),
                        sample_values=tuple(str(r[0]) for r in sample_rows),
                        is_key=bool(pk) or cname in fk_cols,
                    )
                )
            fks = [
                ForeignKey(r[3], f"{database_name}.{schema_name}.{r[2]}", r[4] or _primary_key(conn, schema_name, r[2]) or r[3])
                for r in fk_rows
            ]
            tables.append(
                TableDef(
                    name=tname,
                    schema_name=schema_name,
                    database_name=database_name,
                    fields=fields,
                    ddl_summary=f"Table with {len(fields)} columns",
                    foreign_keys=fks,
                )
            )
        if tables:
            schemas.append(SchemaDef(schema_name, tables))
    return CatalogDef(database_name, schemas)


# -- signatures and groups -------------------------------------------------


def canonical_field_string(fields: Iterable[FieldDef]) -> str:
    return "|".join(sorted(f.rendered for f in fields))


def generate_signature(fields: Iterable[FieldDef]) -> str:
    """MD5 over the sorted ``name:type`` renderings joined with ``|``.

    >>> generate_signature([])
    'd41d8cd98f00b204e9800998ecf8427e'
    """
    return hashlib.md5(canonical_field_string(fields).encode("utf-8")).hexdigest()


@dataclass
class CandidateGroup:
    signature: str
    fields: list[FieldDef]
    member_tables: list[str]

    @property
    def field_count(self) -> int:
        return len(self.fields)


@dataclass
class SharedFieldGroup:
    signature: str
    fields: list[FieldDef]
    member_tables: list[str]

    @property
    def name(self) -> str:
        return f"FieldGroup_{self.signature[:8]}"

    @property
    def field_count(self) -> int:
        return len(self.fields)


def find_candidate_groups(catalog: CatalogDef) -> list[CandidateGroup]:
    """Partition tables by the signature of their full field set."""
    by_sig: dict[str, CandidateGroup] = {}
    canon: dict[str, str] = {}
    for table in sorted(catalog.tables(), key=lambda t: t.fqn):
        text = canonical_field_string(table.fields)
        sig = hashlib.md5(text.encode("utf-8")).hexdigest()
        if sig in canon and canon[sig] != text:
            raise SignatureCollisionError(f"signature {sig} maps to two field sets")
        canon[sig] = text
        if sig not in by_sig:
            by_sig[sig] = CandidateGroup(sig, list(table.fields), [])
        by_sig[sig].member_tables.append(table.fqn)
    return list(by_sig.values())


def select_groups(candidates: Iterable[CandidateGroup]) -> list[SharedFieldGroup]:
    """Greedy selection of non-overlapping groups with at least two members."""
    eligible = [c for c in candidates if len(c.member_tables) >= 2]
    eligible.sort(key=lambda c: (-len(c.member_tables), -c.field_count, c.signature))
    assigned: set[str] = set()
    chosen = []
    for cand in eligible:
        members = set(cand.member_tables)
        if members & assigned:
            continue
        assigned |= members
        chosen.append(SharedFieldGroup(cand.signature, list(cand.fields), sorted(members)))
    return chosen


# -- graph -----------------------------------------------------------------


@dataclass
class Node:
    id: str
    kind: str
    props: dict[str, Any]


@dataclass(frozen=True)
class Edge:
    src: str
    kind: str
    dst: str


def database_id(db: str) -> str:
    return f"database:{db}"


def schema_id(db: str, schema: str) -> str:
    return f"schema:{db}.{schema}"


def table_id(fqn: str) -> str:
    return f"table:{fqn}"


def group_id(signature: str) -> str:
    return f"group:{signature}"


def unique_field_id(table_fqn: str, name: str) -> str:
    return f"field:{table_fqn}.{name}"


def group_field_id(signature: str, name: str) -> str:
    return f"field:{signature}.{name}"


class SchemaGraph:
    """Typed node/edge store with per-node feedback lists.

    Reads are safe from several threads; feedback appends take a lock.
    """

    def __init__(self) -> None:
        self.nodes: dict[str, Node] = {}
        self.edges: list[Edge] = []
        self.feedback: dict[str, list[str]] = {}
        self._out: dict[str, list[Edge]] = defaultdict(list)
        self._in: dict[str, list[Edge]] = defaultdict(list)
        self._lock = threading.Lock()

    def add_node(self, node_id: str, kind: str, **props: Any) -> Node:
        if kind not in NODE_KINDS:
            raise GraphError(f"unknown node kind {kind!r}")
        if node_id in self.nodes:
            raise GraphError(f"duplicate node id {node_id}")
        props.setdefault("type", kind)
        node = Node(node_id, kind, props)
        self.nodes[node_id] = node
        return node

    def add_edge(self, src: str, kind: str, dst: str) -> Edge:
        if src not in self.nodes or dst not in self.nodes:
            raise GraphError(f"edge endpoint missing: {src} -{kind}-> {dst}")
        expected = ALLOWED_EDGES.get((self.nodes[src].kind, kind))
        if expected != self.nodes[dst].kind:
            raise GraphError(
                f"edge {self.nodes[src].kind} -{kind}-> {self.nodes[dst].kind} not allowed"
            )
        edge = Edge(src, kind, dst)
        self.edges.append(edge)
        self._out[src].append(edge)
        self._in[dst].append(edge)
        return edge

    def out_edges(self, node_id: str, kind: str | None = None) -> list[Edge]:
        return [e for e in self._out.get(node_id, ()) if kind is None or e.kind == kind]

    def in_edges(self, node_id: str, kind: str | None = None) -> list[Edge]:
        return [e for e in self._in.get(node_id, ()) if kind is None or e.kind == kind]

    def nodes_of(self, kind: str) -> list[Node]:
        return [n for n in self.nodes.values() if n.kind == kind]

    @property
    def database_name(self) -> str:
        dbs = self.nodes_of(DATABASE)
        return dbs[0].props["name"] if dbs else ""

    def table_fields(self, tid: str) -> list[Node]:
        """Field nodes of a table, whether unique or reached through its group."""
        out = [self.nodes[e.dst] for e in self.out_edges(tid, HAS_UNIQUE_FIELD)]
        for e in self.out_edges(tid, USES_FIELD_GROUP):
            out.extend(self.nodes[g.dst] for g in self.out_edges(e.dst, HAS_FIELD))
        return out

    def table_group(self, tid: str) -> str | None:
        edges = self.out_edges(tid, USES_FIELD_GROUP)
        return edges[0].dst if edges else None

    def groups(self) -> list[SharedFieldGroup]:
        result = []
        for node in self.nodes_of(GROUP):
            fields = [_field_from_node(self.nodes[e.dst]) for e in self.out_edges(node.id, HAS_FIELD)]
            members = sorted(self.nodes[e.src].props["fullname"] for e in self.in_edges(node.id, USES_FIELD_GROUP))
            result.append(SharedFieldGroup(node.props["field_hash"], fields, members))
        return result

    def add_feedback(self, node_id: str, record_id: str) -> None:
        if node_id not in self.nodes:
            raise GraphError(f"unknown node {node_id}")
        with self._lock:
            self.feedback.setdefault(node_id, []).append(record_id)

    def structurally_equal(self, other: "SchemaGraph") -> bool:
        return (
            {k: (v.kind, v.props) for k, v in self.nodes.items()}
            == {k: (v.kind, v.props) for k, v in other.nodes.items()}
            and sorted(self.edges, key=_edge_key) == sorted(other.edges, key=_edge_key)
            and {k: v for k, v in self.feedback.items() if v} == {k: v for k, v in other.feedback.items() if v}
        )

    def validate(self) -> None:
        """Check the structural invariants; raise :class:`GraphError` on violation."""
        for e in self.edges:
            if ALLOWED_EDGES.get((self.nodes[e.src].kind, e.kind)) != self.nodes[e.dst].kind:
                raise GraphError(f"bad edge {e}")
        for node in self.nodes_of(FIELD):
            owners = self.in_edges(node.id, HAS_UNIQUE_FIELD) + self.in_edges(node.id, HAS_FIELD)
            if len(owners) != 1:
                raise GraphError(f"field {node.id} has {len(owners)} owners")
        for node in self.nodes_of(TABLE):
            if len(self.out_edges(node.id, USES_FIELD_GROUP)) > 1:
                raise GraphError(f"table {node.id} uses more than one group")


def _edge_key(e: Edge) -> tuple[str, str, str]:
    return (e.src, e.kind, e.dst)


def _field_from_node(node: Node) -> FieldDef:
    p = node.props
    return FieldDef(
        name=p["name"],
        data_type=p["type"],
        description=p.get("description"),
        sample_values=tuple(p.get("sample_data") or ()),
        is_key=bool(p.get("is_key")),
    )


def _field_props(f: FieldDef, db: str, schema: str, table: str | None, node_type: str) -> dict[str, Any]:
    return {
        "database": db,
        "description": f.description,
        "name": f.name,
        "node_type": node_type,
        "sample_data": list(f.sample_values),
        "schema": schema,
        "table": table,
        "type": f.data_type,
        "is_key": f.is_key,
    }


def build_graph(catalog: CatalogDef, groups: Iterable[SharedFieldGroup]) -> SchemaGraph:
    groups = list(groups)
    db = catalog.database_name
    tables = {t.fqn: t for t in catalog.tables()}
    membership: dict[str, SharedFieldGroup] = {}
    for g in groups:
        for fqn in g.member_tables:
            if fqn not in tables:
                raise GraphError(f"group {g.signature} references unknown table {fqn}")
            if fqn in membership:
                raise GraphError(f"table {fqn} assigned to two groups")
            membership[fqn] = g

    graph = SchemaGraph()
    dbid = database_id(db)
    graph.add_node(dbid, DATABASE, name=db)
    for g in groups:
        first = tables[g.member_tables[0]]
        gid = group_id(g.signature)
        graph.add_node(
            gid,
            GROUP,
            database=db,
            description=f"FieldGroup_{g.signature}",
            field_count=g.field_count,
            field_hash=g.signature,
            name=g.name,
            schema=first.schema_name,
        )
        # documentation comes from the first member that carries it
        docs = {}
        for fqn in g.member_tables:
            for f in tables[fqn].fields:
                if f.name not in docs or (docs[f.name].description is None and f.description):
                    docs[f.name] = f
        for f in g.fields:
            src = docs.get(f.name, f)
            fid = group_field_id(g.signature, f.name)
            graph.add_node(fid, FIELD, **_field_props(src, db, first.schema_name, None, "group_field"))
            graph.add_edge(gid, HAS_FIELD, fid)

    for schema in catalog.schemas:
        sid = schema_id(db, schema.name)
        graph.add_node(sid, SCHEMA, database=db, description=schema.description, name=schema.name)
        graph.add_edge(dbid, HAS_SCHEMA, sid)
        for t in schema.tables:
            tid = table_id(t.fqn)
            graph.add_node(
                tid,
                TABLE,
                database=db,
                ddl_summary=t.ddl_summary,
                fullname=t.fqn,
                name=t.name,
                schema=schema.name,
                foreign_keys=[[fk.column, fk.ref_table, fk.ref_column] for fk in t.foreign_keys],
            )
            graph.add_edge(sid, HAS_TABLE, tid)
            group = membership.get(t.fqn)
            if group is not None:
                graph.add_edge(tid, USES_FIELD_GROUP, group_id(group.signature))
                continue
            for f in t.fields:
                fid = unique_field_id(t.fqn, f.name)
                graph.add_node(fid, FIELD, **_field_props(f, db, schema.name, t.name, "unique_field"))
                graph.add_edge(tid, HAS_UNIQUE_FIELD, fid)
    return graph


def graph_from_catalog(catalog: CatalogDef) -> SchemaGraph:
    return build_graph(catalog, select_groups(find_candidate_groups(catalog)))


@dataclass
class GraphStats:
    node_counts: dict[str, int]
    edge_counts: dict[str, int]
    group_count: int
    avg_fanout: Fraction
    max_fanout: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "nodes": self.node_counts,
            "edges": self.edge_counts,
            "total_nodes": sum(self.node_counts.values()),
            "total_edges": sum(self.edge_counts.values()),
            "group_count": self.group_count,
            "avg_fanout": float(self.avg_fanout),
            "avg_fanout_exact": str(self.avg_fanout),
            "max_fanout": self.max_fanout,
        }


def graph_stats(graph: SchemaGraph) -> GraphStats:
    nodes = Counter(n.kind for n in graph.nodes.values())
    edges = Counter(e.kind for e in graph.edges)
    fanouts = [len(graph.in_edges(n.id, USES_FIELD_GROUP)) for n in graph.nodes_of(GROUP)]
    return GraphStats(
        node_counts={k: nodes.get(k, 0) for k in NODE_KINDS},
        edge_counts={k: edges.get(k, 0) for k in EDGE_KINDS},
        group_count=len(fanouts),
        avg_fanout=Fraction(sum(fanouts), len(fanouts)) if fanouts else Fraction(0),
        max_fanout=max(fanouts, default=0),
    )


# -- serialization ---------------------------------------------------------


def serialize_graph(graph: SchemaGraph) -> bytes:
    doc = {
        "version": GRAPH_FORMAT_VERSION,
        "nodes": [{"id": n.id, "kind": n.kind, **n.props} for n in graph.nodes.values()],
        "edges": [[e.src, e.kind, e.dst] for e in graph.edges],
        "feedback": [{"node": k, "records": v} for k, v in sorted(graph.feedback.items()) if v],
    }
    return json.dumps(doc, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def load_graph(data: bytes | str) -> SchemaGraph:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise GraphFormatError(f"corrupted graph payload: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise GraphFormatError("corrupted graph payload: no version")
    if doc["version"] != GRAPH_FORMAT_VERSION:
        raise GraphVersionError(
            f"graph format version {doc['version']!r} unsupported (expected {GRAPH_FORMAT_VERSION})"
        )
    graph = SchemaGraph()
    try:
        for nd in doc["nodes"]:
            nd = dict(nd)
            nid, kind = nd.pop("id"), nd.pop("kind")
            graph.add_node(nid, kind, **nd)
        for src, kind, dst in doc["edges"]:
            graph.add_edge(src, kind, dst)
        for fb in doc.get("feedback", []):
            for rec in fb["records"]:
                graph.add_feedback(fb["node"], rec)
    except (KeyError, TypeError, ValueError, GraphError) as exc:
        raise GraphFormatError(f"corrupted graph payload: {exc}") from exc
    return graph


def write_graph(graph: SchemaGraph, path: str | Path) -> None:
    from .knowledge_base import atomic_write_bytes

    atomic_write_bytes(Path(path), serialize_graph(graph))


def read_graph(path: str | Path) -> SchemaGraph:
    return load_graph(Path(path).read_bytes())


def representative_tables(graph: SchemaGraph) -> list[Node]:
    """Ungrouped tables plus the first member (by name) of every group.

    Exploration and column retrieval treat a shared field group as one
    table, so hundreds of shards cost the same as one.
    """
    reps = []
    first_member: dict[str, str] = {}
    for gnode in graph.nodes_of(GROUP):
        members = sorted(graph.nodes[e.src].props["fullname"] for e in graph.in_edges(gnode.id, USES_FIELD_GROUP))
        if members:
            first_member[gnode.id] = members[0]
    for node in sorted(graph.nodes_of(TABLE), key=lambda n: n.props["fullname"]):
        gid = graph.table_group(node.id)
        if gid is None or first_member.get(gid) == node.props["fullname"]:
            reps.append(node)
    return reps
