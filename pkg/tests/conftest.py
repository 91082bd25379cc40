"""Shared fixtures and independent reference implementations (oracles)."""

from __future__ import annotations

import hashlib
import math

import pytest

from sqlscout.schema_graph import graph_from_catalog, introspect_catalog
from sqlscout.sql_exec import Executor


@pytest.fixture(autouse=True)
def _no_live(request, monkeypatch):
    # nothing in the suite may reach a model endpoint unless the test is marked live
    if request.node.get_closest_marker("live") is None:
        monkeypatch.delenv("SQLSCOUT_LIVE", raising=False)


@pytest.fixture(scope="session")
def shop_graph():
    return graph_from_catalog(introspect_catalog("fixture:shop"))


@pytest.fixture(scope="session")
def ga4_graph():
    return graph_from_catalog(introspect_catalog("fixture:ga4"))


@pytest.fixture
def shop_exec():
    ex = Executor("fixture:shop")
    yield ex
    ex.close()


# -- oracles ----------------------------------------------------------------


def md5_signature(pairs):
    """Reference signature straight from the definition: md5 of sorted name:type joined by |."""
    return hashlib.md5("|".join(sorted(f"{n}:{t}" for n, t in pairs)).encode("utf-8")).hexdigest()


def brute_force_groups(tables):
    """Reference grouping: ``tables`` maps fqn -> list of (name, type).

    Returns [(signature, sorted members)] in selection order.
    """
    classes = {}
    for fqn, pairs in tables.items():
        key = tuple(sorted(f"{n}:{t}" for n, t in pairs))
        classes.setdefault(key, []).append(fqn)
    cands = []
    for key, members in classes.items():
        if len(members) < 2:
            continue
        sig = hashlib.md5("|".join(key).encode("utf-8")).hexdigest()
        cands.append((len(members), len(key), sig, sorted(members)))
    cands.sort(key=lambda c: (-c[0], -c[1], c[2]))
    used, out = set(), []
    for _, _, sig, members in cands:
        if used.isdisjoint(members):
            used.update(members)
            out.append((sig, members))
    return out


def cosine_scan(query, corpus, k):
    """Exhaustive cosine top-k in pure Python; ties broken by ascending id."""
    qn = math.sqrt(sum(x * x for x in query))
    scored = []
    for cid, vec in corpus:
        vn = math.sqrt(sum(x * x for x in vec))
        s = 0.0 if qn == 0 or vn == 0 else sum(a * b for a, b in zip(query, vec)) / (qn * vn)
        scored.append((cid, round(s, 9)))
    scored.sort(key=lambda p: (-p[1], p[0]))
    return scored[:k]


def catalog_of(tables, db="db", schema="s"):
    """CatalogDef from {table name: [(field, type), ...]} in one schema."""
    from sqlscout.schema_graph import CatalogDef, FieldDef, SchemaDef, TableDef

    defs = [TableDef(name, schema, db, [FieldDef(n, t) for n, t in pairs]) for name, pairs in tables.items()]
    return CatalogDef(db, [SchemaDef(schema, defs)])
