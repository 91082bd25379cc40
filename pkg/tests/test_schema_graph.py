import json
import sqlite3
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_force_groups, catalog_of, md5_signature
from sqlscout.schema_graph import (
    ALLOWED_EDGES,
    GROUP,
    HAS_FIELD,
    HAS_UNIQUE_FIELD,
    TABLE,
    UNKNOWN_TYPE,
    USES_FIELD_GROUP,
    CandidateGroup,
    FieldDef,
    GraphError,
    GraphFormatError,
    GraphVersionError,
    MalformedCatalogError,
    SchemaGraph,
    build_graph,
    find_candidate_groups,
    generate_signature,
    graph_from_catalog,
    graph_stats,
    introspect_catalog,
    load_graph,
    read_graph,
    select_groups,
    serialize_graph,
    write_graph,
)


def fields(*pairs):
    return [FieldDef(n, t) for n, t in pairs]


# -- signatures ----------------------------------------------------------------


def test_signature_matches_md5_of_canonical_string():
    sig = generate_signature(fields(("user_id", "INTEGER"), ("name", "TEXT")))
    assert sig == md5_signature([("user_id", "INTEGER"), ("name", "TEXT")])
    assert len(sig) == 32 and sig == sig.lower()


def test_signature_is_order_invariant_example():
    a = generate_signature(fields(("user_id", "INTEGER"), ("name", "TEXT")))
    b = generate_signature(fields(("name", "TEXT"), ("user_id", "INTEGER")))
    assert a == b


def test_empty_signature_is_md5_of_empty_string():
    assert generate_signature([]) == "d41d8cd98f00b204e9800998ecf8427e"


def test_signature_is_case_sensitive():
    assert generate_signature(fields(("a", "TEXT"))) != generate_signature(fields(("A", "TEXT")))


names = st.text(alphabet="abcdefgXYZ_é", min_size=1, max_size=6)
types = st.sampled_from(["INTEGER", "TEXT", "REAL", "BLOB", UNKNOWN_TYPE])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(names, types), max_size=10, unique_by=lambda p: p[0]), st.randoms())
def test_signature_permutation_invariance(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert generate_signature(fields(*pairs)) == generate_signature(fields(*shuffled))
    assert generate_signature(fields(*pairs)) == md5_signature(pairs)


# -- candidates and selection -------------------------------------------------------


def test_thirty_shards_form_one_candidate():
    cat = catalog_of({f"events_{i:02d}": [("id", "INTEGER"), ("name", "TEXT")] for i in range(30)})
    cands = find_candidate_groups(cat)
    assert len(cands) == 1
    assert cands[0].member_tables == sorted(f"db.s.events_{i:02d}" for i in range(30))


def test_type_difference_splits_candidates():
    cat = catalog_of({"a": [("x", "INTEGER")], "b": [("x", "TEXT")]})
    assert len(find_candidate_groups(cat)) == 2


def test_single_table_is_one_candidate_then_filtered():
    cands = find_candidate_groups(catalog_of({"a": [("x", "INTEGER")]}))
    assert [len(c.member_tables) for c in cands] == [1]
    assert select_groups(cands) == []


def _cand(sig, members, nfields):
    return CandidateGroup(sig, fields(*[(f"f{i}", "TEXT") for i in range(nfields)]), list(members))


def test_overlap_guard_keeps_larger_group():
    ga = _cand("a" * 32, ["t1", "t2", "t3"], 5)
    gb = _cand("b" * 32, ["t3", "t4"], 5)
    assert [g.signature for g in select_groups([gb, ga])] == ["a" * 32]


def test_disjoint_groups_sorted_by_member_count():
    g4 = _cand("f" * 32, ["a", "b", "c", "d"], 2)
    g2 = _cand("0" * 32, ["e", "f"], 9)
    out = select_groups([g2, g4])
    assert [len(g.member_tables) for g in out] == [4, 2]


def test_ties_break_on_field_count_then_signature():
    c1 = _cand("b" * 32, ["a", "b"], 3)
    c2 = _cand("a" * 32, ["c", "d"], 3)
    c3 = _cand("c" * 32, ["e", "f"], 4)
    assert [g.signature for g in select_groups([c1, c2, c3])] == ["c" * 32, "a" * 32, "b" * 32]


def test_select_groups_is_deterministic_and_non_overlapping():
    cands = [_cand(f"{i:032x}", [f"t{j}" for j in range(i, i + 3)], i % 4) for i in range(10)]
    out1 = select_groups(cands)
    out2 = select_groups(list(reversed(cands)))
    assert [g.signature for g in out1] == [g.signature for g in out2]
    seen = set()
    for g in out1:
        assert seen.isdisjoint(g.member_tables)
        seen |= set(g.member_tables)


def test_selection_matches_brute_force_on_fixed_catalog():
    tables = {
        "a": [("x", "INTEGER"), ("y", "TEXT")],
        "b": [("y", "TEXT"), ("x", "INTEGER")],
        "c": [("x", "INTEGER")],
        "d": [("x", "INTEGER")],
        "e": [("x", "INTEGER")],
        "f": [("z", "REAL")],
    }
    got = [(g.signature, g.member_tables) for g in select_groups(find_candidate_groups(catalog_of(tables)))]
    assert got == brute_force_groups({f"db.s.{k}": v for k, v in tables.items()})


# -- graph construction -------------------------------------------------------------


def test_edge_count_law_ten_by_twentyfour():
    cols = [(f"c{i}", "TEXT") for i in range(24)]
    g = graph_from_catalog(catalog_of({f"shard_{i}": cols for i in range(10)}))
    uses = [e for e in g.edges if e.kind == USES_FIELD_GROUP]
    has = [e for e in g.edges if e.kind == HAS_FIELD]
    assert len(uses) == 10 and len(has) == 24
    assert len(uses) + len(has) == 34 != 10 * 24
    assert not [e for e in g.edges if e.kind == HAS_UNIQUE_FIELD]


def test_standalone_table_has_unique_fields_only():
    g = graph_from_catalog(catalog_of({"t": [("a", "TEXT"), ("b", "TEXT"), ("c", "TEXT")]}))
    assert sum(e.kind == HAS_UNIQUE_FIELD for e in g.edges) == 3
    assert not g.nodes_of(GROUP)


def test_mixed_catalog_invariants():
    tables = {f"p{i}": [("a", "TEXT"), ("b", "INTEGER")] for i in range(5)}
    tables["solo"] = [("q", "TEXT")]
    g = graph_from_catalog(catalog_of(tables))
    g.validate()
    for e in g.edges:
        assert ALLOWED_EDGES[(g.nodes[e.src].kind, e.kind)] == g.nodes[e.dst].kind
    grp = g.nodes_of(GROUP)[0]
    members = [e.src for e in g.in_edges(grp.id, USES_FIELD_GROUP)]
    assert len(members) == 5
    gfields = {e.dst for e in g.out_edges(grp.id, HAS_FIELD)}
    for m in members:
        assert not g.out_edges(m, HAS_UNIQUE_FIELD)
        assert not {e.dst for e in g.out_edges(m)} & gfields
    assert grp.props["field_count"] == 2
    assert len(g.out_edges("table:db.s.solo", HAS_UNIQUE_FIELD)) == 1


def test_group_referencing_unknown_table_fails():
    cat = catalog_of({"a": [("x", "TEXT")]})
    bogus = select_groups([_cand("a" * 32, ["db.s.a", "db.s.ghost"], 1)])
    with pytest.raises(GraphError):
        build_graph(cat, bogus)


def test_node_ids_are_content_derived():
    cat = catalog_of({"a": [("x", "TEXT")], "b": [("x", "TEXT")], "c": [("y", "INTEGER")]})
    g1, g2 = graph_from_catalog(cat), graph_from_catalog(cat)
    assert list(g1.nodes) == list(g2.nodes)
    sig = md5_signature([("x", "TEXT")])
    assert f"group:{sig}" in g1.nodes and f"field:{sig}.x" in g1.nodes
    assert "field:db.s.c.y" in g1.nodes


# -- stats ----------------------------------------------------------------------------


def test_stats_334_member_group():
    g = graph_from_catalog(catalog_of({f"t{i:03d}": [("v", "TEXT")] for i in range(334)}))
    s = graph_stats(g)
    assert s.max_fanout == 334 and s.group_count == 1


def test_stats_zero_groups_avg_is_zero():
    s = graph_stats(graph_from_catalog(catalog_of({"t": [("v", "TEXT")]})))
    assert s.avg_fanout == 0 and s.max_fanout == 0


def test_stats_avg_fanout_exact():
    tables = {f"a{i}": [("x", "TEXT")] for i in range(2)}
    tables.update({f"b{i}": [("y", "TEXT")] for i in range(4)})
    s = graph_stats(graph_from_catalog(catalog_of(tables)))
    assert s.avg_fanout == Fraction(3) and isinstance(s.avg_fanout, Fraction)


def test_ga4_fixture_has_one_31_member_group(ga4_graph):
    s = graph_stats(ga4_graph)
    assert s.group_count == 1 and s.max_fanout == 31


# -- introspection ----------------------------------------------------------------------


def test_catalog_file_two_tables(tmp_path):
    doc = {
        "database": "d",
        "schemas": [
            {"name": "s", "tables": [
                {"name": "a", "fields": [{"name": "x", "type": "INTEGER"}]},
                {"name": "b", "fields": [{"name": "y", "type": "TEXT", "description": "why"}]},
            ]}
        ],
    }
    p = tmp_path / "cat.json"
    p.write_text(json.dumps(doc))
    cat = introspect_catalog(p)
    assert [t.fqn for t in cat.tables()] == ["d.s.a", "d.s.b"]
    assert cat.table("d.s.b").fields[0].description == "why"


def test_catalog_missing_type_names_the_field(tmp_path):
    doc = {"database": "d", "schemas": [{"name": "s", "tables": [{"name": "a", "fields": [{"name": "oops"}]}]}]}
    p = tmp_path / "cat.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(MalformedCatalogError, match="oops"):
        introspect_catalog(p)


def test_catalog_null_type_is_unknown(tmp_path):
    doc = {"database": "d", "schemas": [{"name": "s", "tables": [{"name": "a", "fields": [{"name": "x", "type": None}]}]}]}
    p = tmp_path / "cat.json"
    p.write_text(json.dumps(doc))
    assert introspect_catalog(p).table("d.s.a").fields[0].data_type == UNKNOWN_TYPE


def test_catalog_zero_columns_rejected(tmp_path):
    doc = {"database": "d", "schemas": [{"name": "s", "tables": [{"name": "a", "fields": []}]}]}
    p = tmp_path / "cat.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(MalformedCatalogError, match="zero columns"):
        introspect_catalog(p)


def test_catalog_bad_json_reports_line(tmp_path):
    p = tmp_path / "cat.json"
    p.write_text('{"database": "d",\n "schemas": [}')
    with pytest.raises(MalformedCatalogError, match="line 2"):
        introspect_catalog(p)


def test_embedded_db_introspection_matches_create_statement():
    conn = sqlite3.connect(":memory:")
    conn.execute("CREATE TABLE users(user_id INTEGER, name TEXT)")
    cat = introspect_catalog(conn)
    (t,) = list(cat.tables())
    assert [(f.name, f.data_type) for f in t.fields] == [("user_id", "INTEGER"), ("name", "TEXT")]


def test_shop_fixture_comments_samples_and_keys():
    cat = introspect_catalog("fixture:shop")
    users = cat.table("shop.main.users")
    age = next(f for f in users.fields if f.name == "age")
    assert age.description and age.sample_values
    orders = cat.table("shop.main.orders")
    assert any(fk.column == "customer_id" and fk.ref_table == "shop.main.users" for fk in orders.foreign_keys)
    assert next(f for f in orders.fields if f.name == "customer_id").is_key


def test_unreachable_source():
    from sqlscout.schema_graph import CatalogError

    with pytest.raises(CatalogError):
        introspect_catalog("/nonexistent/db.sqlite")


# -- serialization ------------------------------------------------------------------------


def test_roundtrip_with_feedback(shop_graph, tmp_path):
    g = load_graph(serialize_graph(shop_graph))
    g.add_feedback("table:shop.main.users", "t_1")
    p = tmp_path / "g.json"
    write_graph(g, p)
    back = read_graph(p)
    assert back.structurally_equal(g)
    assert back.feedback["table:shop.main.users"] == ["t_1"]


def test_database_only_graph_roundtrips():
    g = SchemaGraph()
    g.add_node("database:x", "database", name="x")
    assert load_graph(serialize_graph(g)).structurally_equal(g)


def test_truncated_payload_is_rejected(shop_graph):
    data = serialize_graph(shop_graph)
    with pytest.raises(GraphFormatError):
        load_graph(data[: len(data) // 2])


def test_version_mismatch():
    with pytest.raises(GraphVersionError):
        load_graph(json.dumps({"version": 99, "nodes": [], "edges": []}))


def test_large_graph_roundtrip():
    # 2000 tables x 45 columns gives ~92k nodes
    cols = [(f"c{i}", "TEXT") for i in range(45)]
    tables = {f"t{i:04d}": [(f"{n}_{i}", t) for n, t in cols] for i in range(2000)}
    g = graph_from_catalog(catalog_of(tables))
    assert len(g.nodes) > 90_000
    back = load_graph(serialize_graph(g))
    assert len(back.nodes) == len(g.nodes) and len(back.edges) == len(g.edges)
    assert back.structurally_equal(g)


def test_table_nodes_carry_properties(shop_graph):
    t = shop_graph.nodes["table:shop.main.users"]
    assert t.kind == TABLE
    for key in ("database", "ddl_summary", "fullname", "name", "schema"):
        assert key in t.props


def test_bare_references_point_at_parent_primary_key(tmp_path):
    path = tmp_path / "fk.sql"
    path.write_text(
        "CREATE TABLE teams (team_key INTEGER PRIMARY KEY, title TEXT);\n"
        "CREATE TABLE players (player_id INTEGER PRIMARY KEY, team INTEGER REFERENCES teams);\n"
    )
    (players,) = [t for t in introspect_catalog(str(path)).tables() if t.name == "players"]
    (fk,) = players.foreign_keys
    assert (fk.column, fk.ref_table, fk.ref_column) == ("team", "fk.main.teams", "team_key")
